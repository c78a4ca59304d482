//! Experiment runner: reads a flat TOML config, runs one named experiment and
//! writes `samples.csv`, `report.json` and `manifest.json`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod experiments;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use exitlim_core::conditioning::ConditionedBatch;
use serde_json::{json, Value};

pub use config::{ConfigError, Experiment, ExperimentConfig};
use experiments::{htransform_seed, run_experiment, Outcome};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] exitlim_core::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Usage(String),
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    /// Worker threads; `None` uses the available parallelism.
    pub workers: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub pass: bool,
    pub report: Value,
    /// Set when the experiment stopped on an error; artifacts are still written.
    pub error: Option<String>,
}

/// Reads a config file. A `manifest.json` from an earlier run is accepted
/// and replays the configuration it echoes.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, RunError> {
    let text = fs::read_to_string(path).map_err(|e| RunError::Usage(format!("cannot read {}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        let manifest: Value = serde_json::from_str(&text)?;
        let source = manifest["config_text"]
            .as_str()
            .ok_or_else(|| RunError::Usage(format!("{} has no config_text", path.display())))?;
        return Ok(ExperimentConfig::parse(source)?);
    }
    Ok(ExperimentConfig::parse(&text)?)
}

pub fn run_path(path: &Path, opts: &RunOptions) -> Result<RunSummary, RunError> {
    run_config(&load_config(path)?, opts)
}

pub fn run_config(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary, RunError> {
    let out_dir = opts
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(cfg.experiment.name()));
    fs::create_dir_all(&out_dir)?;
    let workers = opts.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        return Err(RunError::Usage("--workers must be ≥ 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| RunError::Usage(format!("thread pool: {e}")))?;

    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let clock = Instant::now();
    let result = pool.install(|| run_experiment(cfg));
    let (outcome, error) = match result {
        Ok(o) => (o, None),
        Err(RunError::Core(e)) => (failed_outcome(cfg, &e), Some(e.to_string())),
        Err(e) => return Err(e),
    };

    let mut written = Vec::new();
    write_samples(&out_dir.join("samples.csv"), outcome.batches.first().map(|(_, b)| b), cfg.domain.dim())?;
    written.push("samples.csv".to_string());
    for (label, batch) in outcome.batches.iter().skip(1) {
        let name = format!("samples_{label}.csv");
        write_samples(&out_dir.join(&name), Some(batch), cfg.domain.dim())?;
        written.push(name);
    }
    for (name, bytes) in &outcome.files {
        fs::write(out_dir.join(name), bytes)?;
        written.push(name.clone());
    }
    fs::write(out_dir.join("report.json"), serde_json::to_string_pretty(&outcome.report)? + "\n")?;
    written.push("report.json".into());

    let manifest = json!({
        "tool": "exitlim",
        "version": env!("CARGO_PKG_VERSION"),
        "experiment": cfg.experiment,
        "seeds": seeds(cfg),
        "config_text": cfg.source,
        "outputs": written,
        "started_unix": started,
        "elapsed_seconds": clock.elapsed().as_secs_f64(),
    });
    fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;

    Ok(RunSummary { out_dir, pass: outcome.pass && error.is_none(), report: outcome.report, error })
}

fn seeds(cfg: &ExperimentConfig) -> Value {
    let s = cfg.sim.seed;
    match cfg.experiment {
        Experiment::CrossValidate => json!({ "rejection": s, "htransform": htransform_seed(s) }),
        _ => json!({ "sim": s }),
    }
}

/// Report for a run that stopped on an error, keeping any partial samples.
fn failed_outcome(cfg: &ExperimentConfig, e: &exitlim_core::Error) -> Outcome {
    let batches = match e {
        exitlim_core::Error::AcceptanceTooLow { batch, .. } => vec![("partial".to_string(), (**batch).clone())],
        _ => vec![],
    };
    Outcome {
        pass: false,
        report: json!({ "experiment": cfg.experiment, "error": e.to_string(), "pass": false }),
        batches,
        files: vec![],
    }
}

/// CSV with header `trial,accepted,truncated,tau,exit_1..exit_n,face`;
/// missing values are empty fields.
pub fn write_samples(path: &Path, batch: Option<&ConditionedBatch>, dim: usize) -> Result<(), RunError> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    let mut head = vec!["trial".to_string(), "accepted".into(), "truncated".into(), "tau".into()];
    head.extend((1..=dim).map(|i| format!("exit_{i}")));
    head.push("face".into());
    writeln!(w, "{}", head.join(","))?;
    for r in batch.map_or(&[][..], |b| &b.records) {
        let s = &r.sample;
        let mut row = vec![r.trial.to_string(), (r.accepted as u8).to_string(), (s.truncated as u8).to_string()];
        row.push(s.tau.map_or(String::new(), |t| t.to_string()));
        match &s.exit_point {
            Some(x) => row.extend(x.iter().map(|v| v.to_string())),
            None => row.extend(std::iter::repeat_n(String::new(), dim)),
        }
        row.push(s.face.map_or(String::new(), |f| f.to_string()));
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Inputs, outputs and the claims each experiment exercises.
pub fn describe(name: &str) -> Result<&'static str, String> {
    let e: Experiment = name.parse()?;
    Ok(match e {
        Experiment::HalfplaneClt => HALFPLANE_CLT,
        Experiment::EllipticOracle => ELLIPTIC_ORACLE,
        Experiment::Expansion => EXPANSION,
        Experiment::FullClt => FULL_CLT,
        Experiment::CrossValidate => CROSS_VALIDATE,
    })
}

const HALFPLANE_CLT: &str = "\
halfplane_clt: conditioned exit CLT on the half-plane.

Exercises the closed-form half-plane example, where h = exp(-2 b_in d / (eps^2 s^2))
and the conditioned drift is the constant reflection (-b_1, b_2), and the conditioned
exit central limit theorem: eps^-1 (tau - T, X(tau) - z) converges to N(0, Sigma_limit)
with Sigma_limit = P Sigma_phi P^T.

Inputs:  domain (halfspace), drift (constant), sim.eps, sim.dt, sim.t_max, sim.x0,
         sim.seed, cond.mode, cond.n_target, stats thresholds.
Outputs: samples.csv (conditioned paths), report.json with the limit law
         (T, z, Sigma_phi, P, Sigma_limit), covariance z-scores, marginal and
         Mahalanobis KS tests; pass when all three gates hold.
";

const ELLIPTIC_ORACLE: &str = "\
elliptic_oracle: finite-difference solver for the exit probability h^eps.

Exercises the linear equation <b, Dh> + (eps^2/2) Delta h = 0 with h = 1 on Gamma and
h = 0 elsewhere on the boundary, against the closed-form one-dimensional solution for
constant drift, and checks convergence under grid refinement.

Inputs:  domain (one-dimensional box), drift (constant), pde.nx (odd), pde.eps_list,
         pde.tol, pde.max_iter, stats.elliptic_err_max, stats.elliptic_ratio_min.
Outputs: field_h_eps*.csv, report.json with max relative error (nodes with h >= 1e-12),
         coarse/fine error ratio and solver residual.
";

const EXPANSION: &str = "\
expansion: small-noise expansions of v^eps = -eps^2 log h^eps.

Exercises the inviscid HJB solution v0 built by characteristics (eikonal identity,
p = Dv0, minimality of the action along reversed characteristics), the transport
equation for the correction v1, and the expansions
  v^eps = v0 + eps^2 v1 + o(eps^2),   Dv^eps = Dv0 + eps^2 Dv1 + o(eps^2)
uniformly on a compact subset of the region of strong regularity. A constant-drift
control, where v1 = 0 and the expansion is exact, calibrates the discretisation floor.

Inputs:  domain (2-D box), drift, char.*, pde.nx, pde.ny, pde.eps_list, pde.region_lo,
         pde.region_hi, control.*, sim.seed (perturbation draws).
Outputs: fan.csv, field_v_eps*.csv, report.json with characteristic checks, r0(eps),
         r1(eps) and the control rows.
";

const FULL_CLT: &str = "\
full_clt: conditioned exit CLT for a nonconstant drift.

Builds the limiting conditioned drift b0bar = b - Dv0 from the characteristic fan,
flows x0 to Gamma to get (T, z), Phi(T) and Sigma_limit, then samples the
h-transformed diffusion with h^eps from the grid solver and compares the rescaled
exit pair with the Gaussian limit at each eps.

Inputs:  domain (2-D box), drift, char.*, pde.nx, pde.ny, pde.eps_list, sim.dt, sim.x0,
         sim.seed, cond.n_target, law.dt, law.t_max, stats thresholds.
Outputs: samples.csv (smallest eps), samples_eps*.csv, report.json with the limit law,
         per-eps comparisons and the trend of the dominant covariance z-score.
";

const CROSS_VALIDATE: &str = "\
cross_validate: h-transform sampling against rejection sampling.

Exercises the h-transform theorem: the diffusion with drift b + eps^2 a Dh/h has the
law of the original diffusion conditioned to exit through Gamma. Both samplers run
on the half-plane; exit times and exit locations are compared by two-sample KS tests
and the rejection acceptance rate is compared with h(x0).

Inputs:  domain (halfspace), drift (constant), sim.eps, sim.dt, sim.t_max, sim.x0,
         sim.seed, cond.n_target, cond.max_trials, stats thresholds.
Outputs: samples.csv (h-transform), samples_rejection.csv, report.json.
";
