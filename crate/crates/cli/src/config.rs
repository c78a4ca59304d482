//! Flat experiment configuration. Every setting is addressed by a dotted key
//! such as `sim.seed`; errors name the key that caused them.

use std::fmt;
use std::path::PathBuf;

use exitlim_core::characteristics::FanConfig;
use exitlim_core::dynamics::{DriftFieldModel, Monomial};
use exitlim_core::elliptic::{SolveMethod, SolveOptions};
use exitlim_core::geometry::{Domain, Face, Side};
use exitlim_core::sim::SimConfig;
use exitlim_core::stats::Thresholds;
use serde::Serialize;
use toml::{Table, Value};

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("config key `{key}`: {message}")]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(key: &str, message: impl Into<String>) -> Self {
        Self { key: key.to_string(), message: message.into() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    HalfplaneClt,
    EllipticOracle,
    Expansion,
    FullClt,
    CrossValidate,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::HalfplaneClt,
        Experiment::EllipticOracle,
        Experiment::Expansion,
        Experiment::FullClt,
        Experiment::CrossValidate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::HalfplaneClt => "halfplane_clt",
            Experiment::EllipticOracle => "elliptic_oracle",
            Experiment::Expansion => "expansion",
            Experiment::FullClt => "full_clt",
            Experiment::CrossValidate => "cross_validate",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.map(Self::name).join(", ")
    }
}

impl std::str::FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| format!("unknown experiment `{s}`; valid names: {}", Self::valid_names()))
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Dotted-key view of a parsed TOML table.
pub struct Keys<'a>(&'a Table);

impl<'a> Keys<'a> {
    pub fn new(t: &'a Table) -> Self {
        Self(t)
    }

    pub fn get(&self, key: &str) -> Option<&'a Value> {
        let mut parts = key.split('.');
        let mut v = self.0.get(parts.next()?)?;
        for p in parts {
            v = v.as_table()?.get(p)?;
        }
        Some(v)
    }

    pub fn has(&self, key: &str) -> bool {
        self.get(key).is_some()
    }

    fn req(&self, key: &str) -> Result<&'a Value, ConfigError> {
        self.get(key).ok_or_else(|| ConfigError::new(key, "missing"))
    }

    pub fn f64(&self, key: &str) -> Result<f64, ConfigError> {
        as_f64(self.req(key)?).ok_or_else(|| ConfigError::new(key, "expected a number"))
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        if self.has(key) {
            self.f64(key)
        } else {
            Ok(default)
        }
    }

    pub fn u64(&self, key: &str) -> Result<u64, ConfigError> {
        match self.req(key)? {
            Value::Integer(i) if *i >= 0 => Ok(*i as u64),
            _ => Err(ConfigError::new(key, "expected a non-negative integer")),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        if self.has(key) {
            self.u64(key)
        } else {
            Ok(default)
        }
    }

    pub fn usize(&self, key: &str) -> Result<usize, ConfigError> {
        self.u64(key).map(|v| v as usize)
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        self.u64_or(key, default as u64).map(|v| v as usize)
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(Value::Boolean(b)) => Ok(*b),
            Some(_) => Err(ConfigError::new(key, "expected true or false")),
        }
    }

    pub fn str(&self, key: &str) -> Result<&'a str, ConfigError> {
        self.req(key)?.as_str().ok_or_else(|| ConfigError::new(key, "expected a string"))
    }

    pub fn str_or(&self, key: &str, default: &'a str) -> Result<&'a str, ConfigError> {
        if self.has(key) {
            self.str(key)
        } else {
            Ok(default)
        }
    }

    pub fn vec_f64(&self, key: &str) -> Result<Vec<f64>, ConfigError> {
        let arr = self.req(key)?.as_array().ok_or_else(|| ConfigError::new(key, "expected an array of numbers"))?;
        arr.iter()
            .map(|v| as_f64(v).ok_or_else(|| ConfigError::new(key, "expected an array of numbers")))
            .collect()
    }

    pub fn matrix(&self, key: &str) -> Result<Vec<Vec<f64>>, ConfigError> {
        let bad = || ConfigError::new(key, "expected an array of numeric rows");
        let rows = self.req(key)?.as_array().ok_or_else(bad)?;
        rows.iter()
            .map(|r| r.as_array().ok_or_else(bad)?.iter().map(|v| as_f64(v).ok_or_else(bad)).collect())
            .collect()
    }
}

fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Float(f) => Some(*f),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

#[derive(Clone, Debug)]
pub struct SimSection {
    pub seed: u64,
    /// `eps` is filled in per run when the experiment sweeps `pde.eps_list`.
    pub cfg: SimConfig,
    pub x0: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CondMode {
    Rejection,
    Htransform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HSource {
    AnalyticHalfplane,
    Grid,
}

#[derive(Clone, Debug)]
pub struct CondSection {
    pub mode: CondMode,
    pub n_target: u64,
    pub max_trials: u64,
    pub h_source: HSource,
}

#[derive(Clone, Debug)]
pub struct PdeSection {
    pub shape: Vec<usize>,
    pub opts: SolveOptions,
    pub eps_list: Vec<f64>,
    /// Second solve on the grid with halved spacing, combined by Richardson extrapolation.
    pub richardson: bool,
    pub region_lo: Vec<f64>,
    pub region_hi: Vec<f64>,
}

impl PdeSection {
    pub fn in_region(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.region_lo.iter().zip(&self.region_hi))
            .all(|(v, (lo, hi))| *v >= lo - 1e-9 && *v <= hi + 1e-9)
    }
}

/// One-dimensional constant-drift problem run alongside `expansion`.
#[derive(Clone, Debug, Serialize)]
pub struct ControlSection {
    pub length: f64,
    pub b_normal: f64,
    pub nodes: usize,
}

#[derive(Clone, Debug)]
pub struct LawSection {
    pub dt: f64,
    pub t_max: f64,
}

#[derive(Clone, Debug)]
pub struct StatsSection {
    pub thresholds: Thresholds,
    pub max_anomaly_rate: f64,
    pub elliptic_err_max: f64,
    pub elliptic_ratio_min: f64,
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub output: Option<PathBuf>,
    pub domain: Domain,
    pub drift: DriftFieldModel,
    pub sim: SimSection,
    pub cond: Option<CondSection>,
    pub fan: Option<FanConfig>,
    pub pde: Option<PdeSection>,
    pub control: Option<ControlSection>,
    pub law: LawSection,
    pub stats: StatsSection,
    /// The configuration text as read.
    pub source: String,
}

impl ExperimentConfig {
    pub fn parse(source: &str) -> Result<Self, ConfigError> {
        let table: Table = toml::from_str(source).map_err(|e: toml::de::Error| ConfigError::new("<file>", e.message()))?;
        let k = Keys::new(&table);
        let experiment: Experiment = k.str("experiment")?.parse().map_err(|m: String| ConfigError::new("experiment", m))?;
        let output = if k.has("output") { Some(PathBuf::from(k.str("output")?)) } else { None };
        let domain = parse_domain(&k)?;
        let drift = parse_drift(&k, domain.dim())?;

        use Experiment::*;
        let needs_x0 = matches!(experiment, HalfplaneClt | FullClt | CrossValidate);
        let needs_eps = matches!(experiment, HalfplaneClt | CrossValidate);
        let sim = parse_sim(&k, domain.dim(), needs_x0, needs_eps)?;
        let cond = match experiment {
            HalfplaneClt | FullClt | CrossValidate => Some(parse_cond(&k)?),
            _ => None,
        };
        let fan = match experiment {
            Expansion | FullClt => Some(parse_fan(&k)?),
            _ => None,
        };
        let pde = match experiment {
            EllipticOracle | Expansion | FullClt => Some(parse_pde(&k, domain.dim(), experiment == Expansion)?),
            _ => None,
        };
        let control = match experiment {
            Expansion => Some(ControlSection {
                length: positive(&k, "control.length", 3.0)?,
                b_normal: positive(&k, "control.b_normal", 1.0)?,
                nodes: k.usize_or("control.nodes", 1201)?,
            }),
            _ => None,
        };
        let law = LawSection { dt: positive(&k, "law.dt", 1e-3)?, t_max: positive(&k, "law.t_max", 10.0)? };
        let stats = StatsSection {
            thresholds: Thresholds {
                z_max: positive(&k, "stats.z_max", 4.0)?,
                ks_p_min: k.f64_or("stats.ks_p_min", 1e-3)?,
                mahalanobis_p_min: k.f64_or("stats.mahalanobis_p_min", 1e-3)?,
            },
            max_anomaly_rate: k.f64_or("stats.max_anomaly_rate", 0.01)?,
            elliptic_err_max: positive(&k, "stats.elliptic_err_max", 1e-3)?,
            elliptic_ratio_min: positive(&k, "stats.elliptic_ratio_min", 1.4)?,
        };

        let cfg = Self { experiment, output, domain, drift, sim, cond, fan, pde, control, law, stats, source: source.to_string() };
        cfg.check_experiment()?;
        Ok(cfg)
    }

    fn check_experiment(&self) -> Result<(), ConfigError> {
        use Experiment::*;
        let halfspace = matches!(self.domain.kind(), exitlim_core::geometry::DomainKind::HalfSpace { .. });
        match self.experiment {
            HalfplaneClt | CrossValidate => {
                if !halfspace {
                    return Err(ConfigError::new("domain.kind", "this experiment needs a half-space domain"));
                }
                if !matches!(self.drift, DriftFieldModel::Constant { .. }) {
                    return Err(ConfigError::new("drift.kind", "this experiment needs a constant drift"));
                }
                if self.cond.as_ref().is_some_and(|c| c.h_source == HSource::Grid) {
                    return Err(ConfigError::new("cond.h_source", "this experiment uses the analytic half-plane h"));
                }
            }
            EllipticOracle => {
                if self.domain.dim() != 1 || halfspace {
                    return Err(ConfigError::new("domain.kind", "elliptic_oracle needs a one-dimensional box"));
                }
                if !matches!(self.drift, DriftFieldModel::Constant { .. }) {
                    return Err(ConfigError::new("drift.kind", "elliptic_oracle needs a constant drift"));
                }
            }
            Expansion | FullClt => {
                if self.domain.dim() != 2 || halfspace {
                    return Err(ConfigError::new("domain.kind", "this experiment needs a two-dimensional box"));
                }
                if self.sim.cfg.sigma_scale != 1.0 {
                    return Err(ConfigError::new("sim.sigma_scale", "the characteristic fan assumes a = I"));
                }
                if self.experiment == FullClt && self.cond.as_ref().is_some_and(|c| c.mode != CondMode::Htransform || c.h_source != HSource::Grid) {
                    return Err(ConfigError::new("cond.h_source", "full_clt samples with the grid h-transform"));
                }
            }
        }
        Ok(())
    }
}

fn err(key: &'static str) -> impl Fn(exitlim_core::Error) -> ConfigError {
    move |e| ConfigError::new(key, e.to_string())
}

fn positive(k: &Keys, key: &str, default: f64) -> Result<f64, ConfigError> {
    let v = k.f64_or(key, default)?;
    if !(v > 0.0) || !v.is_finite() {
        return Err(ConfigError::new(key, "must be a positive number"));
    }
    Ok(v)
}

fn parse_domain(k: &Keys) -> Result<Domain, ConfigError> {
    let axis = k.usize("domain.gamma.axis")?;
    let side = match k.str("domain.gamma.side")? {
        "lo" | "lower" => Side::Lower,
        "hi" | "upper" => Side::Upper,
        other => return Err(ConfigError::new("domain.gamma.side", format!("expected \"lo\" or \"hi\", got \"{other}\""))),
    };
    match k.str("domain.kind")? {
        "halfspace" => {
            let dim = k.usize_or("domain.dim", 2)?;
            Domain::half_space(dim, axis, k.f64_or("domain.level", 0.0)?, side).map_err(err("domain.gamma.axis"))
        }
        "box" => {
            let lo = k.vec_f64("domain.box.lo")?;
            let hi = k.vec_f64("domain.box.hi")?;
            if lo.len() != hi.len() {
                return Err(ConfigError::new("domain.box.hi", "length differs from domain.box.lo"));
            }
            if axis >= lo.len() {
                return Err(ConfigError::new("domain.gamma.axis", "axis out of range"));
            }
            Domain::boxed(lo, hi, Face::new(axis, side)).map_err(err("domain.box.hi"))
        }
        other => Err(ConfigError::new("domain.kind", format!("expected \"halfspace\" or \"box\", got \"{other}\""))),
    }
}

fn parse_drift(k: &Keys, dim: usize) -> Result<DriftFieldModel, ConfigError> {
    let model = match k.str("drift.kind")? {
        "constant" => DriftFieldModel::constant(k.vec_f64("drift.c")?).map_err(err("drift.c"))?,
        "affine" => DriftFieldModel::affine(k.matrix("drift.matrix")?, k.vec_f64("drift.offset")?).map_err(err("drift.matrix"))?,
        "poly3" => {
            let key = "drift.components";
            let bad = || ConfigError::new(key, "expected one array of [coeff, power_1, …, power_n] terms per component");
            let comps = k.get(key).ok_or_else(|| ConfigError::new(key, "missing"))?.as_array().ok_or_else(bad)?;
            let mut components = Vec::with_capacity(comps.len());
            for c in comps {
                let mut terms = Vec::new();
                for t in c.as_array().ok_or_else(bad)? {
                    let t = t.as_array().ok_or_else(bad)?;
                    let coeff = t.first().and_then(as_f64).ok_or_else(bad)?;
                    let powers = t[1..]
                        .iter()
                        .map(|p| p.as_integer().filter(|&p| (0..=3).contains(&p)).map(|p| p as u32).ok_or_else(bad))
                        .collect::<Result<Vec<u32>, _>>()?;
                    terms.push(Monomial { coeff, powers });
                }
                components.push(terms);
            }
            DriftFieldModel::polynomial(components).map_err(err(key))?
        }
        other => return Err(ConfigError::new("drift.kind", format!("expected \"constant\", \"affine\" or \"poly3\", got \"{other}\""))),
    };
    if model.dimension() != dim {
        return Err(ConfigError::new("drift.kind", format!("drift has dimension {}, domain has {dim}", model.dimension())));
    }
    Ok(model)
}

fn parse_sim(k: &Keys, dim: usize, needs_x0: bool, needs_eps: bool) -> Result<SimSection, ConfigError> {
    let seed = k.u64("sim.seed")?;
    let eps = if needs_eps { k.f64("sim.eps")? } else { k.f64_or("sim.eps", 0.0)? };
    if !(eps >= 0.0) {
        return Err(ConfigError::new("sim.eps", "must be ≥ 0"));
    }
    let cfg = SimConfig {
        eps,
        dt: positive(k, "sim.dt", 1e-4)?,
        t_max: positive(k, "sim.t_max", 10.0)?,
        sigma_scale: positive(k, "sim.sigma_scale", 1.0)?,
        bridge: k.bool_or("sim.bridge", true)?,
    };
    if cfg.t_max < cfg.dt {
        return Err(ConfigError::new("sim.t_max", "must be at least sim.dt"));
    }
    let x0 = if needs_x0 || k.has("sim.x0") { k.vec_f64("sim.x0")? } else { vec![] };
    if needs_x0 && x0.len() != dim {
        return Err(ConfigError::new("sim.x0", format!("expected {dim} coordinates")));
    }
    Ok(SimSection { seed, cfg, x0 })
}

fn parse_cond(k: &Keys) -> Result<CondSection, ConfigError> {
    let mode = match k.str("cond.mode")? {
        "rejection" => CondMode::Rejection,
        "htransform" => CondMode::Htransform,
        other => return Err(ConfigError::new("cond.mode", format!("expected \"rejection\" or \"htransform\", got \"{other}\""))),
    };
    let h_source = match k.str_or("cond.h_source", "analytic_halfplane")? {
        "analytic_halfplane" => HSource::AnalyticHalfplane,
        "grid" => HSource::Grid,
        other => return Err(ConfigError::new("cond.h_source", format!("expected \"analytic_halfplane\" or \"grid\", got \"{other}\""))),
    };
    let n_target = k.u64("cond.n_target")?;
    if n_target == 0 {
        return Err(ConfigError::new("cond.n_target", "must be ≥ 1"));
    }
    let max_trials = k.u64_or("cond.max_trials", 1000 * n_target)?;
    Ok(CondSection { mode, n_target, max_trials, h_source })
}

fn parse_fan(k: &Keys) -> Result<FanConfig, ConfigError> {
    let mut cfg = FanConfig::new(
        k.f64("char.patch_lo")?,
        k.f64("char.patch_hi")?,
        k.usize("char.n_rays")?,
        positive(k, "char.dt", 1e-3)?,
        positive(k, "char.t_max", 1.0)?,
    );
    if cfg.patch_hi <= cfg.patch_lo {
        return Err(ConfigError::new("char.patch_hi", "must exceed char.patch_lo"));
    }
    if cfg.n_rays < 4 {
        return Err(ConfigError::new("char.n_rays", "need at least 4 rays"));
    }
    cfg.jac_floor = positive(k, "char.jac_floor", cfg.jac_floor)?;
    Ok(cfg)
}

fn parse_pde(k: &Keys, dim: usize, needs_region: bool) -> Result<PdeSection, ConfigError> {
    let mut shape = vec![k.usize("pde.nx")?];
    if dim >= 2 {
        shape.push(k.usize("pde.ny")?);
    }
    if let Some(a) = shape.iter().position(|&n| n < 3) {
        return Err(ConfigError::new(["pde.nx", "pde.ny"][a], "need at least 3 nodes"));
    }
    let defaults = SolveOptions::default();
    let method = match k.str_or("pde.method", "direct")? {
        "direct" => SolveMethod::Direct,
        "sweep" => SolveMethod::Sweep,
        other => return Err(ConfigError::new("pde.method", format!("expected \"direct\" or \"sweep\", got \"{other}\""))),
    };
    let opts = SolveOptions {
        tol: positive(k, "pde.tol", defaults.tol)?,
        max_iter: k.usize_or("pde.max_iter", defaults.max_iter)?,
        method,
    };
    let eps_list = k.vec_f64("pde.eps_list")?;
    if eps_list.is_empty() || eps_list.iter().any(|e| !(*e > 0.0)) {
        return Err(ConfigError::new("pde.eps_list", "expected a non-empty list of positive values"));
    }
    let (region_lo, region_hi) = if needs_region {
        let lo = k.vec_f64("pde.region_lo")?;
        let hi = k.vec_f64("pde.region_hi")?;
        if lo.len() != dim || hi.len() != dim {
            return Err(ConfigError::new("pde.region_lo", format!("expected {dim} coordinates")));
        }
        (lo, hi)
    } else {
        (vec![], vec![])
    };
    Ok(PdeSection { shape, opts, eps_list, richardson: k.bool_or("pde.richardson", true)?, region_lo, region_hi })
}
