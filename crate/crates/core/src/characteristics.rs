//! Method of characteristics for `−⟨b, Dv⟩ + ½|Dv|² = 0`, `v = 0` on Γ.
//!
//! Rays start on a patch of Γ with `p(0) = 2⟨b, ν⟩ν` and solve
//! `ẋ = −b + p`, `ṗ = (Db)ᵀp`, `ż = ⟨−b + p, p⟩`. The fan stores the rays on a
//! common time grid together with derived fields (Hessian of `v⁰`, the
//! correction `v₁`) and inverts `(t, y) ↦ x` by Newton iteration.
//!
//! Only two-dimensional domains are supported: Γ is a line and rays are
//! labelled by one tangential coordinate `y`.

use std::io::Write;

use nalgebra::{DMatrix, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::dynamics::{flow_to_exit, fundamental_matrix_y, DriftFieldModel, JacobianField, VectorField};
use crate::error::{check_dim, Error, Result};
use crate::geometry::Domain;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FanConfig {
    pub patch_lo: f64,
    pub patch_hi: f64,
    pub n_rays: usize,
    pub dt: f64,
    pub t_max: f64,
    #[serde(default = "default_jac_floor")]
    pub jac_floor: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_jac_floor() -> f64 {
    1e-6
}

fn default_lambda() -> f64 {
    1e-3
}

impl FanConfig {
    pub fn new(patch_lo: f64, patch_hi: f64, n_rays: usize, dt: f64, t_max: f64) -> Self {
        Self { patch_lo, patch_hi, n_rays, dt, t_max, jac_floor: default_jac_floor(), lambda: default_lambda() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.patch_hi > self.patch_lo) {
            return Err(Error::InvalidInput("char.patch_hi must exceed char.patch_lo".into()));
        }
        if self.n_rays < 5 {
            return Err(Error::InvalidInput("char.n_rays must be ≥ 5".into()));
        }
        if !(self.dt > 0.0) || !(self.t_max >= 3.0 * self.dt) {
            return Err(Error::InvalidInput("char.dt must be > 0 and char.t_max ≥ 3 char.dt".into()));
        }
        Ok(())
    }
}

/// `p(0) = 2⟨b, ν⟩ν`; requires `⟨b, ν⟩ < −1e-8`.
pub fn initial_p(b: &[f64], nu: &[f64]) -> Result<Vec<f64>> {
    check_dim(b.len(), nu.len())?;
    let bn: f64 = b.iter().zip(nu).map(|(x, y)| x * y).sum();
    if !(bn < -1e-8) {
        return Err(Error::NonTransversal { normal_component: bn });
    }
    Ok(nu.iter().map(|v| 2.0 * bn * v).collect())
}

#[derive(Clone, Debug, Default)]
struct Node {
    alive: bool,
    valid: bool,
    x: [f64; 2],
    p: [f64; 2],
    z: f64,
    xdot: [f64; 2],
    pdot: [f64; 2],
    zdot: f64,
    jac: f64,
    /// ∂p_k/∂x_l.
    dp: [[f64; 2]; 2],
    lap: f64,
    z1: f64,
    dlap: [f64; 2],
    dz1: [f64; 2],
}

/// Uniform bucket grid over valid node positions, for Newton seeding.
#[derive(Clone, Debug, Default)]
struct Buckets {
    lo: [f64; 2],
    cell: f64,
    n: [usize; 2],
    cells: Vec<Vec<u32>>,
}

#[derive(Clone, Debug)]
pub struct CharacteristicFan {
    cfg: FanConfig,
    b: DriftFieldModel,
    domain: Domain,
    nt: usize,
    ny: usize,
    hy: f64,
    nodes: Vec<Node>,
    valid_len: Vec<usize>,
    buckets: Buckets,
    has_v1: bool,
}

/// Fields of the fan at a physical point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FanPoint {
    pub t: f64,
    pub y: f64,
    pub v0: f64,
    pub dv0: Vec<f64>,
    /// Hessian of `v⁰`.
    pub hess: [[f64; 2]; 2],
    pub lap: f64,
    pub v1: Option<f64>,
    pub dv1: Option<Vec<f64>>,
    pub dlap: Option<Vec<f64>>,
    /// `b̄₀ = b − Dv⁰`.
    pub b0bar: Vec<f64>,
}

/// Finite difference at the centre of `f[-2..=2]` using whatever neighbours exist.
fn fd5(f: [Option<f64>; 5], h: f64) -> Option<f64> {
    let c = f[2]?;
    match f {
        [Some(a), Some(b), _, Some(d), Some(e)] => Some((a - 8.0 * b + 8.0 * d - e) / (12.0 * h)),
        [_, Some(b), _, Some(d), _] => Some((d - b) / (2.0 * h)),
        [_, _, _, Some(d), Some(e)] => Some((-3.0 * c + 4.0 * d - e) / (2.0 * h)),
        [Some(a), Some(b), _, _, _] => Some((3.0 * c - 4.0 * b + a) / (2.0 * h)),
        _ => None,
    }
}

fn lagrange4(u: f64) -> ([f64; 4], [f64; 4]) {
    let (a, b, c, d) = (u, u - 1.0, u - 2.0, u - 3.0);
    let w = [-b * c * d / 6.0, a * c * d / 2.0, -a * b * d / 2.0, a * b * c / 6.0];
    let dw = [
        -(c * d + b * d + b * c) / 6.0,
        (c * d + a * d + a * c) / 2.0,
        -(b * d + a * d + a * b) / 2.0,
        (b * c + a * c + a * b) / 6.0,
    ];
    (w, dw)
}

struct Loc {
    i0: usize,
    s: f64,
    js: [usize; 4],
    wy: [f64; 4],
    dwy: [f64; 4],
}

fn ray_rhs(b: &DriftFieldModel, s: &[f64; 5]) -> Result<[f64; 5]> {
    let x = [s[0], s[1]];
    let mut bx = [0.0; 2];
    b.eval(&x, &mut bx)?;
    let jb = b.eval_jacobian(&x)?;
    let (p1, p2) = (s[2], s[3]);
    let v = [-bx[0] + p1, -bx[1] + p2];
    Ok([
        v[0],
        v[1],
        jb[(0, 0)] * p1 + jb[(1, 0)] * p2,
        jb[(0, 1)] * p1 + jb[(1, 1)] * p2,
        v[0] * p1 + v[1] * p2,
    ])
}

/// Integrates the characteristic system from every patch node.
pub fn shoot_fan(b: &DriftFieldModel, domain: &Domain, cfg: &FanConfig) -> Result<CharacteristicFan> {
    cfg.validate()?;
    if domain.dim() != 2 || b.dimension() != 2 {
        return Err(Error::Unsupported("characteristic fans are implemented for 2-D domains only".into()));
    }
    let gamma = domain.gamma();
    let tan_axis = 1 - gamma.axis;
    let nu = domain.gamma_normal();
    let ny = cfg.n_rays;
    let nt = (cfg.t_max / cfg.dt).floor() as usize + 1;
    let hy = (cfg.patch_hi - cfg.patch_lo) / (ny - 1) as f64;
    let mut nodes = vec![Node::default(); nt * ny];

    for j in 0..ny {
        let mut x0 = [0.0; 2];
        x0[gamma.axis] = domain.gamma_level();
        x0[tan_axis] = cfg.patch_lo + j as f64 * hy;
        if !domain.on_gamma(&x0)? {
            return Err(Error::InvalidInput(format!("patch point {x0:?} is not on the exit face")));
        }
        let bx = b.eval_drift(&x0)?;
        let bn: f64 = bx.iter().zip(&nu).map(|(a, c)| a * c).sum();
        if !(bn.abs() >= cfg.lambda) {
            return Err(Error::NonTransversal { normal_component: bn });
        }
        let p0 = initial_p(&bx, &nu)?;
        let mut s = [x0[0], x0[1], p0[0], p0[1], 0.0];
        for i in 0..nt {
            let k1 = ray_rhs(b, &s)?;
            let node = &mut nodes[i * ny + j];
            node.alive = true;
            node.x = [s[0], s[1]];
            node.p = [s[2], s[3]];
            node.z = s[4];
            node.xdot = [k1[0], k1[1]];
            node.pdot = [k1[2], k1[3]];
            node.zdot = k1[4];
            if i + 1 == nt {
                break;
            }
            let h = cfg.dt;
            let add = |a: &[f64; 5], k: &[f64; 5], c: f64| std::array::from_fn::<f64, 5, _>(|m| a[m] + c * k[m]);
            let k2 = ray_rhs(b, &add(&s, &k1, 0.5 * h))?;
            let k3 = ray_rhs(b, &add(&s, &k2, 0.5 * h))?;
            let k4 = ray_rhs(b, &add(&s, &k3, h))?;
            let next: [f64; 5] = std::array::from_fn(|m| s[m] + h / 6.0 * (k1[m] + 2.0 * k2[m] + 2.0 * k3[m] + k4[m]));
            if next.iter().any(|v| !v.is_finite()) || !domain.contains_unchecked(&next[..2]) {
                break;
            }
            s = next;
        }
    }

    let mut fan = CharacteristicFan {
        cfg: cfg.clone(),
        b: b.clone(),
        domain: domain.clone(),
        nt,
        ny,
        hy,
        nodes,
        valid_len: vec![0; ny],
        buckets: Buckets::default(),
        has_v1: false,
    };
    fan.build_mask();
    fan.build_hessian();
    fan.build_buckets();
    Ok(fan)
}

impl CharacteristicFan {
    #[inline]
    fn node(&self, i: usize, j: usize) -> &Node {
        &self.nodes[i * self.ny + j]
    }

    pub fn config(&self) -> &FanConfig {
        &self.cfg
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn drift(&self) -> &DriftFieldModel {
        &self.b
    }

    pub fn n_rays(&self) -> usize {
        self.ny
    }

    pub fn n_times(&self) -> usize {
        self.nt
    }

    pub fn t(&self, i: usize) -> f64 {
        i as f64 * self.cfg.dt
    }

    pub fn y(&self, j: usize) -> f64 {
        self.cfg.patch_lo + j as f64 * self.hy
    }

    pub fn x(&self, i: usize, j: usize) -> [f64; 2] {
        self.node(i, j).x
    }

    pub fn p(&self, i: usize, j: usize) -> [f64; 2] {
        self.node(i, j).p
    }

    pub fn z(&self, i: usize, j: usize) -> f64 {
        self.node(i, j).z
    }

    pub fn z1(&self, i: usize, j: usize) -> f64 {
        self.node(i, j).z1
    }

    pub fn jac_det(&self, i: usize, j: usize) -> f64 {
        self.node(i, j).jac
    }

    pub fn is_alive(&self, i: usize, j: usize) -> bool {
        self.node(i, j).alive
    }

    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.node(i, j).valid
    }

    /// Number of leading valid nodes on ray `j`.
    pub fn valid_len(&self, j: usize) -> usize {
        self.valid_len[j]
    }

    pub fn valid_count(&self) -> usize {
        self.valid_len.iter().sum()
    }

    pub fn has_v1(&self) -> bool {
        self.has_v1
    }

    /// `−⟨b(x), p⟩ + ½|p|²` at node `(i, j)`.
    pub fn eikonal_residual(&self, i: usize, j: usize) -> Result<f64> {
        let n = self.node(i, j);
        let bx = self.b.eval_drift(&n.x)?;
        Ok(-(bx[0] * n.p[0] + bx[1] * n.p[1]) + 0.5 * (n.p[0] * n.p[0] + n.p[1] * n.p[1]))
    }

    pub fn max_eikonal_residual(&self) -> Result<f64> {
        let mut m: f64 = 0.0;
        for j in 0..self.ny {
            for i in 0..self.valid_len[j] {
                m = m.max(self.eikonal_residual(i, j)?.abs());
            }
        }
        Ok(m)
    }

    fn fd_y(&self, i: usize, j: usize, f: impl Fn(&Node) -> Option<f64>) -> Option<f64> {
        let vals = std::array::from_fn(|m| {
            let jj = j as isize + m as isize - 2;
            if jj < 0 || jj >= self.ny as isize {
                return None;
            }
            f(self.node(i, jj as usize))
        });
        fd5(vals, self.hy)
    }

    fn fd_t(&self, i: usize, j: usize, f: impl Fn(&Node) -> Option<f64>) -> Option<f64> {
        let vals = std::array::from_fn(|m| {
            let ii = i as isize + m as isize - 2;
            if ii < 0 || ii >= self.nt as isize {
                return None;
            }
            f(self.node(ii as usize, j))
        });
        fd5(vals, self.cfg.dt)
    }

    /// `[∂x/∂t | ∂x/∂y]` at an alive node, if the y-difference exists.
    fn jacobian_at(&self, i: usize, j: usize) -> Option<Matrix2<f64>> {
        let alive = |k: usize| move |n: &Node| n.alive.then_some(n.x[k]);
        let x1y = self.fd_y(i, j, alive(0))?;
        let x2y = self.fd_y(i, j, alive(1))?;
        let n = self.node(i, j);
        Some(Matrix2::new(n.xdot[0], x1y, n.xdot[1], x2y))
    }

    fn build_mask(&mut self) {
        let mid = self.ny / 2;
        let sign0 = self.jacobian_at(0, mid).map(|m| m.determinant().signum()).unwrap_or(0.0);
        let mut jacs = vec![f64::NAN; self.nodes.len()];
        let mut valid_len = vec![0; self.ny];
        for j in 0..self.ny {
            let mut len = 0;
            for i in 0..self.nt {
                if !self.node(i, j).alive {
                    break;
                }
                let Some(m) = self.jacobian_at(i, j) else { break };
                let det = m.determinant();
                jacs[i * self.ny + j] = det;
                if !(det.abs() >= self.cfg.jac_floor) || det.signum() != sign0 {
                    break;
                }
                len = i + 1;
            }
            valid_len[j] = len;
        }
        for (k, n) in self.nodes.iter_mut().enumerate() {
            n.jac = jacs[k];
            n.valid = (k % self.ny, k / self.ny).1 < valid_len[k % self.ny];
        }
        self.valid_len = valid_len;
    }

    fn build_hessian(&mut self) {
        let mut upd = Vec::new();
        for j in 0..self.ny {
            for i in 0..self.valid_len[j] {
                let alive = |k: usize| move |n: &Node| n.alive.then_some(n.p[k]);
                let (Some(p1y), Some(p2y), Some(jm)) =
                    (self.fd_y(i, j, alive(0)), self.fd_y(i, j, alive(1)), self.jacobian_at(i, j))
                else {
                    continue;
                };
                let n = self.node(i, j);
                let m = Matrix2::new(n.pdot[0], p1y, n.pdot[1], p2y);
                let Some(inv) = jm.try_inverse() else { continue };
                let dp = m * inv;
                upd.push((i * self.ny + j, [[dp[(0, 0)], dp[(0, 1)]], [dp[(1, 0)], dp[(1, 1)]]], dp.trace()));
            }
        }
        for n in self.nodes.iter_mut() {
            n.lap = f64::NAN;
            n.dp = [[f64::NAN; 2]; 2];
        }
        for (k, dp, lap) in upd {
            self.nodes[k].dp = dp;
            self.nodes[k].lap = lap;
        }
    }

    fn build_buckets(&mut self) {
        let pts: Vec<(u32, [f64; 2])> = (0..self.nodes.len())
            .filter(|&k| self.nodes[k].valid)
            .map(|k| (k as u32, self.nodes[k].x))
            .collect();
        if pts.is_empty() {
            self.buckets = Buckets::default();
            return;
        }
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for (_, x) in &pts {
            for a in 0..2 {
                lo[a] = lo[a].min(x[a]);
                hi[a] = hi[a].max(x[a]);
            }
        }
        let area = ((hi[0] - lo[0]) * (hi[1] - lo[1])).max(1e-300);
        let cell = (area / pts.len() as f64).sqrt().max((hi[0] - lo[0]).max(hi[1] - lo[1]) / 4096.0).max(1e-12);
        let n = [((hi[0] - lo[0]) / cell) as usize + 1, ((hi[1] - lo[1]) / cell) as usize + 1];
        let mut cells = vec![Vec::new(); n[0] * n[1]];
        for (k, x) in pts {
            let c = [((x[0] - lo[0]) / cell) as usize, ((x[1] - lo[1]) / cell) as usize];
            cells[c[1] * n[0] + c[0]].push(k);
        }
        self.buckets = Buckets { lo, cell, n, cells };
    }

    /// Nearest valid node to `x`; ties go to the lowest `(i, j)`.
    fn nearest_node(&self, x: &[f64]) -> Option<(usize, usize)> {
        let bk = &self.buckets;
        if bk.cells.is_empty() {
            return None;
        }
        let c = [0, 1].map(|a| ((x[a] - bk.lo[a]) / bk.cell).floor().clamp(0.0, (bk.n[a] - 1) as f64) as isize);
        let mut best: Option<(f64, u32)> = None;
        let max_ring = bk.n[0].max(bk.n[1]) as isize;
        for r in 0..=max_ring {
            for cy in (c[1] - r)..=(c[1] + r) {
                for cx in (c[0] - r)..=(c[0] + r) {
                    if (cy - c[1]).abs() != r && (cx - c[0]).abs() != r {
                        continue;
                    }
                    if cx < 0 || cy < 0 || cx >= bk.n[0] as isize || cy >= bk.n[1] as isize {
                        continue;
                    }
                    for &k in &bk.cells[cy as usize * bk.n[0] + cx as usize] {
                        let nx = self.nodes[k as usize].x;
                        let d = (nx[0] - x[0]).powi(2) + (nx[1] - x[1]).powi(2);
                        if best.is_none_or(|(bd, bk)| d < bd || (d == bd && k < bk)) {
                            best = Some((d, k));
                        }
                    }
                }
            }
            if let Some((d, _)) = best {
                // Everything beyond ring r is at least r·cell away from x.
                if d.sqrt() <= r as f64 * bk.cell {
                    break;
                }
            }
        }
        best.map(|(_, k)| (k as usize / self.ny, k as usize % self.ny))
    }

    fn locate(&self, t: f64, y: f64) -> Result<Loc> {
        let dt = self.cfg.dt;
        let t_last = (self.nt - 1) as f64 * dt;
        let outside = || Error::OutsideRegion { x: vec![t, y] };
        if !(t >= -2.0 * dt) || !(t <= t_last) {
            return Err(outside());
        }
        let u = (y - self.cfg.patch_lo) / self.hy;
        if !(u >= -1e-9) || !(u <= (self.ny - 1) as f64 + 1e-9) {
            return Err(outside());
        }
        let i0 = ((t / dt).floor().max(0.0) as usize).min(self.nt - 2);
        let s = t / dt - i0 as f64;
        let j0 = (u.floor().max(0.0) as usize).min(self.ny - 2);
        let js0 = j0.saturating_sub(1).min(self.ny - 4);
        let (wy, dwy) = lagrange4(u - js0 as f64);
        let js = [js0, js0 + 1, js0 + 2, js0 + 3];
        for &j in &js {
            if !(self.node(i0, j).valid && self.node(i0 + 1, j).valid) {
                return Err(outside());
            }
        }
        Ok(Loc { i0, s, js, wy, dwy: dwy.map(|w| w / self.hy) })
    }

    /// Hermite in t (using exact time derivatives), cubic Lagrange in y.
    /// Returns value, ∂/∂t and ∂/∂y.
    fn herm(&self, l: &Loc, f: impl Fn(&Node) -> f64, df: impl Fn(&Node) -> f64) -> (f64, f64, f64) {
        let dt = self.cfg.dt;
        let s = l.s;
        let (s2, s3) = (s * s, s * s * s);
        let h = [2.0 * s3 - 3.0 * s2 + 1.0, s3 - 2.0 * s2 + s, -2.0 * s3 + 3.0 * s2, s3 - s2];
        let dh = [6.0 * s2 - 6.0 * s, 3.0 * s2 - 4.0 * s + 1.0, -6.0 * s2 + 6.0 * s, 3.0 * s2 - 2.0 * s];
        let (mut v, mut vt, mut vy) = (0.0, 0.0, 0.0);
        for k in 0..4 {
            let (a, b) = (self.node(l.i0, l.js[k]), self.node(l.i0 + 1, l.js[k]));
            let c = h[0] * f(a) + h[1] * dt * df(a) + h[2] * f(b) + h[3] * dt * df(b);
            let ct = (dh[0] * f(a) + dh[1] * dt * df(a) + dh[2] * f(b) + dh[3] * dt * df(b)) / dt;
            v += l.wy[k] * c;
            vt += l.wy[k] * ct;
            vy += l.dwy[k] * c;
        }
        (v, vt, vy)
    }

    /// Linear in t, cubic Lagrange in y, for fields without time derivatives.
    fn lin(&self, l: &Loc, f: impl Fn(&Node) -> f64) -> f64 {
        let mut v = 0.0;
        for k in 0..4 {
            let (a, b) = (self.node(l.i0, l.js[k]), self.node(l.i0 + 1, l.js[k]));
            v += l.wy[k] * ((1.0 - l.s) * f(a) + l.s * f(b));
        }
        v
    }

    /// `x(t, y)` and its Jacobian `[∂x/∂t | ∂x/∂y]`.
    pub fn position(&self, t: f64, y: f64) -> Result<([f64; 2], Matrix2<f64>)> {
        let l = self.locate(t, y)?;
        let (x1, x1t, x1y) = self.herm(&l, |n| n.x[0], |n| n.xdot[0]);
        let (x2, x2t, x2y) = self.herm(&l, |n| n.x[1], |n| n.xdot[1]);
        Ok(([x1, x2], Matrix2::new(x1t, x1y, x2t, x2y)))
    }

    /// Solves `x(t, y) = x` by Newton iteration seeded at the nearest valid node.
    pub fn invert(&self, x: &[f64]) -> Result<(f64, f64)> {
        check_dim(2, x.len())?;
        let outside = || Error::OutsideRegion { x: x.to_vec() };
        let (i, j) = self.nearest_node(x).ok_or_else(outside)?;
        let (mut t, mut y) = (self.t(i), self.y(j));
        let target = Vector2::new(x[0], x[1]);
        let scale = 1.0 + x[0].abs().max(x[1].abs());
        let (mut pos, mut jm) = self.position(t, y)?;
        for _ in 0..50 {
            let r = target - Vector2::new(pos[0], pos[1]);
            if r.amax() <= 1e-13 * scale {
                return Ok((t, y));
            }
            let step = jm.try_inverse().ok_or_else(outside)? * r;
            let mut lam = 1.0;
            loop {
                let (tn, yn) = (t + lam * step[0], y + lam * step[1]);
                match self.position(tn, yn) {
                    Ok((p, m)) => {
                        let rn = target - Vector2::new(p[0], p[1]);
                        if rn.amax() < r.amax() || lam < 1e-3 {
                            t = tn;
                            y = yn;
                            pos = p;
                            jm = m;
                            break;
                        }
                    }
                    Err(_) if lam < 1e-3 => return Err(outside()),
                    Err(_) => {}
                }
                lam *= 0.5;
            }
            if (lam * step[0]).abs() <= 1e-15 && (lam * step[1]).abs() <= 1e-15 {
                let r = target - Vector2::new(pos[0], pos[1]);
                if r.amax() <= 1e-10 * scale {
                    return Ok((t, y));
                }
            }
        }
        Err(outside())
    }

    /// All fan fields at `x`.
    pub fn invert_fan(&self, x: &[f64]) -> Result<FanPoint> {
        let (t, y) = self.invert(x)?;
        let l = self.locate(t, y)?;
        let (v0, _, _) = self.herm(&l, |n| n.z, |n| n.zdot);
        let (p1, _, _) = self.herm(&l, |n| n.p[0], |n| n.pdot[0]);
        let (p2, _, _) = self.herm(&l, |n| n.p[1], |n| n.pdot[1]);
        let hess = [[0, 0], [0, 1], [1, 0], [1, 1]].map(|[a, c]| self.lin(&l, |n| n.dp[a][c]));
        let hess = [[hess[0], hess[1]], [hess[2], hess[3]]];
        let lap = self.lin(&l, |n| n.lap);
        let (v1, dv1, dlap) = if self.has_v1 {
            let (v1, _, _) = self.herm(&l, |n| n.z1, |n| 0.5 * n.lap);
            let dv1 = vec![self.lin(&l, |n| n.dz1[0]), self.lin(&l, |n| n.dz1[1])];
            let dlap = vec![self.lin(&l, |n| n.dlap[0]), self.lin(&l, |n| n.dlap[1])];
            (Some(v1), Some(dv1), Some(dlap))
        } else {
            (None, None, None)
        };
        let bx = self.b.eval_drift(x)?;
        let pt = FanPoint {
            t,
            y,
            v0,
            dv0: vec![p1, p2],
            hess,
            lap,
            v1,
            dv1,
            dlap,
            b0bar: vec![bx[0] - p1, bx[1] - p2],
        };
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !(pt.v0.is_finite() && finite(&pt.dv0) && finite(&hess.concat()) && pt.lap.is_finite()) {
            return Err(outside_err(x));
        }
        Ok(pt)
    }

    /// Points `x(T − s, y_j)` for `s = 0, T/n, …, T`, and the spacing `T/n`.
    pub fn reversed_characteristic(&self, j: usize, t_end: f64, n: usize) -> Result<(Vec<Vec<f64>>, f64)> {
        if j >= self.ny || n < 2 {
            return Err(Error::InvalidInput("ray index or sample count out of range".into()));
        }
        let h = t_end / n as f64;
        let pts = (0..=n)
            .map(|k| {
                let t = if k == n { 0.0 } else { t_end - k as f64 * h };
                self.position(t, self.y(j)).map(|(x, _)| x.to_vec())
            })
            .collect::<Result<_>>()?;
        Ok((pts, h))
    }

    /// Fills `z₁` by quadrature of `ż₁ = ½Δv⁰` along each ray, and the
    /// gradient fields of `Δv⁰` and `v₁`.
    pub fn augment_v1(mut self) -> Result<Self> {
        if self.valid_count() == 0 {
            return Err(Error::RegionInvalid);
        }
        let dt = self.cfg.dt;
        for j in 0..self.ny {
            let len = self.valid_len[j];
            let f: Vec<f64> = (0..len).map(|i| 0.5 * self.node(i, j).lap).collect();
            let mut z1 = vec![0.0; len];
            for i in 0..len.saturating_sub(1) {
                let inc = if len < 4 {
                    0.5 * (f[i] + f[i + 1])
                } else if i == 0 {
                    (9.0 * f[0] + 19.0 * f[1] - 5.0 * f[2] + f[3]) / 24.0
                } else if i + 2 == len {
                    (f[i - 2] - 5.0 * f[i - 1] + 19.0 * f[i] + 9.0 * f[i + 1]) / 24.0
                } else {
                    (-f[i - 1] + 13.0 * f[i] + 13.0 * f[i + 1] - f[i + 2]) / 24.0
                };
                z1[i + 1] = z1[i] + dt * inc;
            }
            for (i, v) in z1.into_iter().enumerate() {
                self.nodes[i * self.ny + j].z1 = v;
            }
        }
        let mut upd = Vec::new();
        for j in 0..self.ny {
            for i in 0..self.valid_len[j] {
                let valid = |g: fn(&Node) -> f64| move |n: &Node| (n.valid && g(n).is_finite()).then(|| g(n));
                let jm = self.jacobian_at(i, j).and_then(|m| m.try_inverse());
                let z1y = self.fd_y(i, j, valid(|n| n.z1));
                let lapy = self.fd_y(i, j, valid(|n| n.lap));
                let lapt = self.fd_t(i, j, valid(|n| n.lap));
                let n = self.node(i, j);
                let (mut dz1, mut dlap) = ([f64::NAN; 2], [f64::NAN; 2]);
                if let Some(inv) = jm {
                    if let Some(z1y) = z1y {
                        let g = nalgebra::RowVector2::new(0.5 * n.lap, z1y) * inv;
                        dz1 = [g[0], g[1]];
                    }
                    if let (Some(lt), Some(ly)) = (lapt, lapy) {
                        let g = nalgebra::RowVector2::new(lt, ly) * inv;
                        dlap = [g[0], g[1]];
                    }
                }
                upd.push((i * self.ny + j, dz1, dlap));
            }
        }
        for n in self.nodes.iter_mut() {
            n.dz1 = [f64::NAN; 2];
            n.dlap = [f64::NAN; 2];
        }
        for (k, dz1, dlap) in upd {
            self.nodes[k].dz1 = dz1;
            self.nodes[k].dlap = dlap;
        }
        self.has_v1 = true;
        Ok(self)
    }

    /// Writes `t,y,x1,x2,p1,p2,z,z1,jac_det,valid` for every alive node.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "t,y,x1,x2,p1,p2,z,z1,jac_det,valid")?;
        for j in 0..self.ny {
            for i in 0..self.nt {
                let n = self.node(i, j);
                if !n.alive {
                    break;
                }
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{},{}",
                    self.t(i),
                    self.y(j),
                    n.x[0],
                    n.x[1],
                    n.p[0],
                    n.p[1],
                    n.z,
                    if n.valid && self.has_v1 { n.z1 } else { f64::NAN },
                    n.jac,
                    n.valid as u8
                )?;
            }
        }
        Ok(())
    }

    /// Central-difference gradient of the interpolated `v⁰` with step `h`.
    pub fn fd_grad_v0(&self, x: &[f64], h: f64) -> Result<[f64; 2]> {
        self.fd_grad(x, h, |pt| Ok(pt.v0))
    }

    /// Central-difference gradient of the interpolated `v₁` with step `h`.
    pub fn fd_grad_v1(&self, x: &[f64], h: f64) -> Result<[f64; 2]> {
        self.fd_grad(x, h, |pt| pt.v1.ok_or_else(|| Error::InvalidInput("fan has no v1; call augment_v1".into())))
    }

    fn fd_grad(&self, x: &[f64], h: f64, f: impl Fn(&FanPoint) -> Result<f64>) -> Result<[f64; 2]> {
        check_dim(2, x.len())?;
        let mut g = [0.0; 2];
        for a in 0..2 {
            let mut xp = [x[0], x[1]];
            let mut xm = xp;
            xp[a] += h;
            xm[a] -= h;
            g[a] = (f(&self.invert_fan(&xp)?)? - f(&self.invert_fan(&xm)?)?) / (2.0 * h);
        }
        Ok(g)
    }
}

fn outside_err(x: &[f64]) -> Error {
    Error::OutsideRegion { x: x.to_vec() }
}

/// `b̄₀ = b − Dv⁰` (sign +1) or `b₀ = −b̄₀` (sign −1) from a fan.
pub struct FanDrift<'a> {
    fan: &'a CharacteristicFan,
    sign: f64,
}

impl<'a> FanDrift<'a> {
    pub fn b0bar(fan: &'a CharacteristicFan) -> Self {
        Self { fan, sign: 1.0 }
    }

    pub fn b0(fan: &'a CharacteristicFan) -> Self {
        Self { fan, sign: -1.0 }
    }
}

impl VectorField for FanDrift<'_> {
    fn dim(&self) -> usize {
        2
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let pt = self.fan.invert_fan(x)?;
        out[0] = self.sign * pt.b0bar[0];
        out[1] = self.sign * pt.b0bar[1];
        Ok(())
    }
}

impl JacobianField for FanDrift<'_> {
    fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let pt = self.fan.invert_fan(x)?;
        let db = self.fan.b.eval_jacobian(x)?;
        Ok(DMatrix::from_fn(2, 2, |r, c| self.sign * (db[(r, c)] - pt.hess[r][c])))
    }
}

/// `½∫|γ̇ − b(γ)|² dt` with centred differences for `γ̇` (second-order
/// one-sided at the ends) and the trapezoidal rule.
pub fn action_of_curve(gamma: &[Vec<f64>], dt: f64, b: &dyn VectorField) -> Result<f64> {
    let m = gamma.len();
    if m < 3 || !(dt > 0.0) {
        return Err(Error::InvalidInput("curve needs at least 3 points and dt > 0".into()));
    }
    let n = b.dim();
    let mut bx = vec![0.0; n];
    let mut total = 0.0;
    for k in 0..m {
        check_dim(n, gamma[k].len())?;
        b.eval(&gamma[k], &mut bx)?;
        let mut cost = 0.0;
        for a in 0..n {
            let v = if k == 0 {
                (-3.0 * gamma[0][a] + 4.0 * gamma[1][a] - gamma[2][a]) / (2.0 * dt)
            } else if k == m - 1 {
                (3.0 * gamma[k][a] - 4.0 * gamma[k - 1][a] + gamma[k - 2][a]) / (2.0 * dt)
            } else {
                (gamma[k + 1][a] - gamma[k - 1][a]) / (2.0 * dt)
            };
            cost += (v - bx[a]).powi(2);
        }
        let w = if k == 0 || k == m - 1 { 0.5 } else { 1.0 };
        total += w * 0.5 * cost;
    }
    Ok(total * dt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dv1Check {
    /// Exit time of the `b̄₀` flow from `x`.
    pub tau: f64,
    /// `½∫₀^τ Y D(Δv⁰)(X₀) dt + Y(τ) Dv₁(X₀(τ))`.
    pub v: Vec<f64>,
    /// Central-difference gradient of the interpolated `v₁` at `x`.
    pub fd: Vec<f64>,
    pub discrepancy: f64,
}

/// Evaluates the integral representation of `Dv₁` along the `b̄₀` flow and
/// compares it with a finite-difference gradient of `v₁`.
pub fn dv1_representation_check(fan: &CharacteristicFan, x: &[f64], dt: f64, fd_step: f64) -> Result<Dv1Check> {
    if !fan.has_v1 {
        return Err(Error::InvalidInput("fan has no v1; call augment_v1".into()));
    }
    check_dim(2, x.len())?;
    let need = |v: Option<Vec<f64>>, x: &[f64]| -> Result<Vector2<f64>> {
        let v = v.ok_or_else(|| outside_err(x))?;
        if v.iter().all(|c| c.is_finite()) {
            Ok(Vector2::new(v[0], v[1]))
        } else {
            Err(outside_err(x))
        }
    };
    let fd = fan.fd_grad_v1(x, fd_step)?;
    let dom = &fan.domain;
    let on_gamma = dom.face_distance(x, dom.gamma()).abs() <= 1e-12;
    let (tau, v) = if on_gamma {
        (0.0, need(fan.invert_fan(x)?.dv1, x)?)
    } else {
        let bbar = FanDrift::b0bar(fan);
        let b0 = FanDrift::b0(fan);
        let traj = flow_to_exit(&bbar, x, dom, dt, 10.0 * fan.cfg.t_max)?;
        let y = fundamental_matrix_y(&b0, &traj)?;
        let g = |m: &DMatrix<f64>, p: &[f64]| -> Result<Vector2<f64>> {
            let d = need(fan.invert_fan(p)?.dlap, p)?;
            Ok(Vector2::new(m[(0, 0)] * d[0] + m[(0, 1)] * d[1], m[(1, 0)] * d[0] + m[(1, 1)] * d[1]))
        };
        let mut acc = Vector2::zeros();
        let mut prev = g(&y.mats[0], &traj.states[0])?;
        for i in 0..traj.mid_states.len() {
            let h = traj.times[i + 1] - traj.times[i];
            let mid = g(&y.mids[i], &traj.mid_states[i])?;
            let next = g(&y.mats[i + 1], &traj.states[i + 1])?;
            acc += (prev + mid * 4.0 + next) * (h / 6.0);
            prev = next;
        }
        let yt = y.last();
        let dz = need(fan.invert_fan(&traj.exit_point)?.dv1, &traj.exit_point)?;
        let boundary = Vector2::new(yt[(0, 0)] * dz[0] + yt[(0, 1)] * dz[1], yt[(1, 0)] * dz[0] + yt[(1, 1)] * dz[1]);
        (traj.exit_time, acc * 0.5 + boundary)
    };
    let discrepancy = (v[0] - fd[0]).abs().max((v[1] - fd[1]).abs());
    Ok(Dv1Check { tau, v: vec![v[0], v[1]], fd: fd.to_vec(), discrepancy })
}

impl crate::elliptic::ExpansionReference for CharacteristicFan {
    fn v0(&self, x: &[f64]) -> Result<f64> {
        Ok(self.invert_fan(x)?.v0)
    }

    fn dv0(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.invert_fan(x)?.dv0)
    }

    fn v1(&self, x: &[f64]) -> Result<f64> {
        self.invert_fan(x)?.v1.ok_or_else(|| Error::InvalidInput("fan has no v1; call augment_v1".into()))
    }

    /// Central differences of the interpolated `v₁`.
    fn dv1(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.fd_grad_v1(x, 1e-3)?.to_vec())
    }
}
