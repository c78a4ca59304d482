//! Finite-difference solver for the exit-probability equation
//! `⟨b, Dh⟩ + (ε²/2) Δh = 0`, `h = 1` on Γ and `0` on the rest of the box,
//! together with the logarithmic transform `v = −ε² log h` and grid calculus.

use serde::{Deserialize, Serialize};

use crate::dynamics::VectorField;
use crate::error::{check_dim, Error, Result};
use crate::geometry::{Domain, DomainKind, Face, Side};

/// Values of `h` below this are treated as underflow.
pub const H_FLOOR: f64 = 1e-290;

/// Node values on a uniform tensor grid. Axis 0 varies fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridField {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl GridField {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let d = shape.len();
        if d == 0 || lo.len() != d || hi.len() != d {
            return Err(Error::InvalidInput("grid extents and shape disagree".into()));
        }
        if shape.iter().any(|&n| n < 3) {
            return Err(Error::InvalidInput("grid needs at least 3 nodes per axis".into()));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(b > a)) {
            return Err(Error::InvalidInput("grid box must have hi > lo".into()));
        }
        check_dim(shape.iter().product(), values.len())?;
        let valid = values.iter().map(|v| v.is_finite()).collect();
        Ok(Self { lo, hi, shape, values, valid })
    }

    /// Samples `f` at every node.
    pub fn from_fn(lo: Vec<f64>, hi: Vec<f64>, shape: Vec<usize>, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let mut g = Self::new(lo, hi, shape.clone(), vec![0.0; shape.iter().product()])?;
        for k in 0..g.len() {
            g.values[k] = f(&g.coords(k));
        }
        g.valid = g.values.iter().map(|v| v.is_finite()).collect();
        Ok(g)
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / (self.shape[axis] - 1) as f64
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.shape[..axis].iter().product()
    }

    pub fn index(&self, multi: &[usize]) -> usize {
        multi.iter().enumerate().map(|(a, &i)| i * self.stride(a)).sum()
    }

    pub fn multi_index(&self, mut k: usize) -> Vec<usize> {
        self.shape
            .iter()
            .map(|&n| {
                let i = k % n;
                k /= n;
                i
            })
            .collect()
    }

    pub fn coords(&self, k: usize) -> Vec<f64> {
        self.multi_index(k)
            .iter()
            .enumerate()
            .map(|(a, &i)| self.lo[a] + i as f64 * self.spacing(a))
            .collect()
    }

    pub fn is_boundary_node(&self, k: usize) -> bool {
        self.multi_index(k).iter().zip(&self.shape).any(|(&i, &n)| i == 0 || i + 1 == n)
    }

    /// Same grid, new values; validity is the conjunction of `self.valid` and finiteness.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        let valid = self.valid.iter().zip(&values).map(|(&v, x)| v && x.is_finite()).collect();
        Self { lo: self.lo.clone(), hi: self.hi.clone(), shape: self.shape.clone(), values, valid }
    }

    pub fn same_grid(&self, other: &GridField) -> bool {
        self.shape == other.shape && self.lo == other.lo && self.hi == other.hi
    }

    /// CSV rows `i,j,…,x1,x2,…,value,valid`, one per node.
    pub fn write_csv(&self, w: &mut impl std::io::Write) -> std::io::Result<()> {
        const IDX: [&str; 3] = ["i", "j", "k"];
        let n = self.dim();
        let mut head: Vec<String> = (0..n).map(|a| IDX.get(a).map_or(format!("i{a}"), |s| s.to_string())).collect();
        head.extend((1..=n).map(|a| format!("x{a}")));
        head.extend(["value".to_string(), "valid".to_string()]);
        writeln!(w, "{}", head.join(","))?;
        for k in 0..self.len() {
            let mut row: Vec<String> = self.multi_index(k).iter().map(|i| i.to_string()).collect();
            row.extend(self.coords(k).iter().map(|x| x.to_string()));
            row.push(self.values[k].to_string());
            row.push((self.valid[k] as u8).to_string());
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Lower cell corner and local coordinates in `[0, 1]` of `x`.
    fn locate(&self, x: &[f64]) -> Result<(Vec<usize>, Vec<f64>)> {
        check_dim(self.dim(), x.len())?;
        let mut cell = Vec::with_capacity(self.dim());
        let mut frac = Vec::with_capacity(self.dim());
        for a in 0..self.dim() {
            let h = self.spacing(a);
            let s = (x[a] - self.lo[a]) / h;
            let n = self.shape[a];
            if !(s >= -1e-9) || !(s <= (n - 1) as f64 + 1e-9) {
                return Err(Error::OutsideRegion { x: x.to_vec() });
            }
            let i = (s.floor().max(0.0) as usize).min(n - 2);
            cell.push(i);
            frac.push((s - i as f64).clamp(0.0, 1.0));
        }
        Ok((cell, frac))
    }

    /// Multilinear interpolation. Errors if `x` is outside the box or any
    /// corner of its cell is invalid.
    pub fn sample(&self, x: &[f64]) -> Result<f64> {
        let (cell, frac) = self.locate(x)?;
        let d = self.dim();
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut k = 0;
            for a in 0..d {
                let up = (corner >> a) & 1;
                w *= if up == 1 { frac[a] } else { 1.0 - frac[a] };
                k += (cell[a] + up) * self.stride(a);
            }
            if !self.valid[k] {
                return Err(Error::OutsideRegion { x: x.to_vec() });
            }
            if w != 0.0 {
                acc += w * self.values[k];
            }
        }
        Ok(acc)
    }

    /// Indices of the cell corners around `x` (for validity checks).
    pub(crate) fn cell_corners(&self, x: &[f64]) -> Result<(Vec<usize>, Vec<f64>)> {
        let (cell, frac) = self.locate(x)?;
        let d = self.dim();
        let ks = (0..(1usize << d))
            .map(|corner| (0..d).map(|a| (cell[a] + ((corner >> a) & 1)) * self.stride(a)).sum())
            .collect();
        Ok((ks, frac))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SolveMethod {
    /// Banded LU factorisation with iterative refinement.
    #[default]
    Direct,
    /// Damped alternating Gauss–Seidel sweeps.
    Sweep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub method: SolveMethod,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 200_000, method: SolveMethod::Direct }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// Max over interior nodes of `|(A h)_i| / |A_ii|`.
    pub residual: f64,
    pub h_min: f64,
    pub h_max: f64,
    /// Interior node-axis pairs discretised with upwinding.
    pub upwind_count: usize,
}

/// Discrete operator: interior rows `diag·h_i + Σ off·h_nb = 0`, boundary rows fixed.
#[derive(Clone, Debug)]
pub(crate) struct Stencil {
    pub diag: Vec<f64>,
    pub off: Vec<Vec<(usize, f64)>>,
    pub fixed: Vec<Option<f64>>,
    pub upwind: Vec<bool>,
    pub upwind_count: usize,
}

fn box_bounds(domain: &Domain) -> Result<(Vec<f64>, Vec<f64>)> {
    match domain.kind() {
        DomainKind::Box { lo, hi } => Ok((lo.clone(), hi.clone())),
        DomainKind::HalfSpace { .. } => Err(Error::Unsupported("elliptic solves need a box domain".into())),
    }
}

fn boundary_value(grid: &GridField, gamma: Face, k: usize) -> Option<f64> {
    let m = grid.multi_index(k);
    let mut on_gamma = false;
    let mut on_other = false;
    for (a, (&i, &n)) in m.iter().zip(&grid.shape).enumerate() {
        let face = match (i, i + 1 == n) {
            (0, _) => Face::new(a, Side::Lower),
            (_, true) => Face::new(a, Side::Upper),
            _ => continue,
        };
        if face == gamma {
            on_gamma = true;
        } else {
            on_other = true;
        }
    }
    match (on_gamma, on_other) {
        (_, true) => Some(0.0),
        (true, false) => Some(1.0),
        _ => None,
    }
}

pub(crate) fn assemble(b: &dyn VectorField, eps: f64, grid: &GridField, gamma: Face) -> Result<Stencil> {
    let d = grid.dim();
    let n = grid.len();
    let mut st = Stencil {
        diag: vec![1.0; n],
        off: vec![Vec::new(); n],
        fixed: vec![None; n],
        upwind: vec![false; n],
        upwind_count: 0,
    };
    let e2 = eps * eps;
    let mut bx = vec![0.0; d];
    for k in 0..n {
        if let Some(v) = boundary_value(grid, gamma, k) {
            st.fixed[k] = Some(v);
            continue;
        }
        let x = grid.coords(k);
        b.eval(&x, &mut bx)?;
        let mut diag = 0.0;
        let mut off = Vec::with_capacity(2 * d);
        for a in 0..d {
            let h = grid.spacing(a);
            let s = grid.stride(a);
            let diff = 0.5 * e2 / (h * h);
            let (west, east) = if bx[a].abs() * h <= e2 {
                (diff - bx[a] / (2.0 * h), diff + bx[a] / (2.0 * h))
            } else {
                st.upwind[k] = true;
                st.upwind_count += 1;
                if bx[a] > 0.0 {
                    (diff, diff + bx[a] / h)
                } else {
                    (diff - bx[a] / h, diff)
                }
            };
            off.push((k - s, west));
            off.push((k + s, east));
            diag -= west + east;
        }
        st.diag[k] = diag;
        st.off[k] = off;
    }
    Ok(st)
}

impl Stencil {
    /// Diagonal-scaled max-norm residual over interior rows.
    pub fn residual(&self, h: &[f64]) -> f64 {
        let mut r: f64 = 0.0;
        for k in 0..h.len() {
            if self.fixed[k].is_some() {
                continue;
            }
            let mut acc = self.diag[k] * h[k];
            for &(j, c) in &self.off[k] {
                acc += c * h[j];
            }
            r = r.max((acc / self.diag[k]).abs());
        }
        r
    }
}

/// Band matrix in row-major storage with equal lower and upper bandwidth.
struct Band {
    n: usize,
    bw: usize,
    a: Vec<f64>,
}

impl Band {
    fn new(n: usize, bw: usize) -> Self {
        Self { n, bw, a: vec![0.0; n * (2 * bw + 1)] }
    }

    #[inline]
    fn at(&mut self, i: usize, j: usize) -> &mut f64 {
        let w = 2 * self.bw + 1;
        &mut self.a[i * w + j + self.bw - i]
    }

    /// In-place LU without pivoting; fine for the M-matrices assembled here.
    fn factor(&mut self) -> Result<()> {
        let (n, bw, w) = (self.n, self.bw, 2 * self.bw + 1);
        for k in 0..n {
            let piv = self.a[k * w + bw];
            if piv == 0.0 || !piv.is_finite() {
                return Err(Error::NoConvergence { iterations: 0, residual: f64::NAN });
            }
            let end = (k + bw + 1).min(n);
            let (head, tail) = self.a.split_at_mut((k + 1) * w);
            let row_k = &head[k * w..];
            for i in k + 1..end {
                let ri = &mut tail[(i - k - 1) * w..(i - k) * w];
                let ik = k + bw - i;
                let l = ri[ik] / piv;
                if l == 0.0 {
                    continue;
                }
                ri[ik] = l;
                // a(i, j) -= l·a(k, j) for j in k+1..end
                for j in k + 1..end {
                    ri[j + bw - i] -= l * row_k[j + bw - k];
                }
            }
        }
        Ok(())
    }

    fn solve(&self, rhs: &mut [f64]) {
        let (n, bw, w) = (self.n, self.bw, 2 * self.bw + 1);
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut acc = rhs[i];
            for j in lo..i {
                acc -= self.a[i * w + j + bw - i] * rhs[j];
            }
            rhs[i] = acc;
        }
        for i in (0..n).rev() {
            let hi = (i + bw + 1).min(n);
            let mut acc = rhs[i];
            for j in i + 1..hi {
                acc -= self.a[i * w + j + bw - i] * rhs[j];
            }
            rhs[i] = acc / self.a[i * w + bw];
        }
    }
}

/// Grid index → solver index, putting the shortest axis innermost.
fn solver_order(grid: &GridField) -> (Vec<usize>, usize) {
    let d = grid.dim();
    let mut axes: Vec<usize> = (0..d).collect();
    axes.sort_by_key(|&a| grid.shape[a]);
    let mut perm = vec![0; grid.len()];
    for (k, p) in perm.iter_mut().enumerate() {
        let m = grid.multi_index(k);
        let mut idx = 0;
        let mut stride = 1;
        for &a in &axes {
            idx += m[a] * stride;
            stride *= grid.shape[a];
        }
        *p = idx;
    }
    let bw = axes[..d - 1].iter().map(|&a| grid.shape[a]).product::<usize>().max(1);
    (perm, bw)
}

fn solve_direct(st: &Stencil, h: &mut [f64], opts: &SolveOptions, grid: &GridField) -> Result<usize> {
    let n = h.len();
    let (perm, bw) = solver_order(grid);
    let mut band = Band::new(n, bw);
    for k in 0..n {
        let i = perm[k];
        if st.fixed[k].is_some() {
            *band.at(i, i) = 1.0;
            continue;
        }
        *band.at(i, i) = st.diag[k];
        for &(j, c) in &st.off[k] {
            *band.at(i, perm[j]) += c;
        }
    }
    band.factor()?;
    let apply = |h: &[f64], out: &mut [f64]| {
        for k in 0..n {
            out[perm[k]] = match st.fixed[k] {
                Some(v) => v - h[k],
                None => -(st.diag[k] * h[k] + st.off[k].iter().map(|&(j, c)| c * h[j]).sum::<f64>()),
            };
        }
    };
    let mut r = vec![0.0; n];
    let mut iters = 0;
    // h starts at zero, so the first pass is the plain solve.
    for _ in 0..4 {
        apply(h, &mut r);
        band.solve(&mut r);
        for k in 0..n {
            h[k] += r[perm[k]];
        }
        iters += 1;
        if st.residual(h) <= opts.tol {
            break;
        }
    }
    Ok(iters)
}

fn solve_sweep(st: &Stencil, h: &mut [f64], opts: &SolveOptions) -> Result<usize> {
    let n = h.len();
    let relax = |k: usize, h: &mut [f64]| {
        if st.fixed[k].is_some() {
            return;
        }
        let s: f64 = st.off[k].iter().map(|&(j, c)| c * h[j]).sum();
        let gs = -s / st.diag[k];
        let w = if st.upwind[k] { 0.8 } else { 1.0 };
        h[k] += w * (gs - h[k]);
    };
    for it in 1..=opts.max_iter {
        if it % 2 == 1 {
            (0..n).for_each(|k| relax(k, h));
        } else {
            (0..n).rev().for_each(|k| relax(k, h));
        }
        if st.residual(h) <= opts.tol {
            return Ok(it);
        }
    }
    Err(Error::NoConvergence { iterations: opts.max_iter, residual: st.residual(h) })
}

/// Solves for `h^ε` on a 1-D or 2-D box. Diffusion uses the standard
/// second-order stencil; advection is centred when `|b_k| Δ_k / ε² ≤ 1`
/// (the monotonicity bound of the centred scheme) and upwinded otherwise.
pub fn solve_h_eps(
    b: &dyn VectorField,
    eps: f64,
    domain: &Domain,
    shape: &[usize],
    opts: &SolveOptions,
) -> Result<(GridField, SolveReport)> {
    if !(eps > 0.0) {
        return Err(Error::InvalidInput("pde eps must be > 0".into()));
    }
    let (lo, hi) = box_bounds(domain)?;
    let d = domain.dim();
    if d > 2 {
        return Err(Error::Unsupported(format!("elliptic solver supports 1-D and 2-D boxes, got {d}-D")));
    }
    check_dim(d, shape.len())?;
    check_dim(d, b.dim())?;
    let mut grid = GridField::new(lo, hi, shape.to_vec(), vec![0.0; shape.iter().product()])?;
    let st = assemble(b, eps, &grid, domain.gamma())?;
    let mut h = vec![0.0; grid.len()];
    for k in 0..h.len() {
        if let Some(v) = st.fixed[k] {
            h[k] = v;
        }
    }
    let iterations = match opts.method {
        SolveMethod::Direct => solve_direct(&st, &mut h, opts, &grid)?,
        SolveMethod::Sweep => solve_sweep(&st, &mut h, opts)?,
    };
    let residual = st.residual(&h);
    if !(residual <= opts.tol) {
        return Err(Error::NoConvergence { iterations, residual });
    }
    let (mut h_min, mut h_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for k in 0..h.len() {
        if st.fixed[k].is_none() {
            h_min = h_min.min(h[k]);
            h_max = h_max.max(h[k]);
        }
    }
    if h_min < H_FLOOR {
        return Err(Error::Underflow { min: h_min });
    }
    grid.values = h;
    grid.valid = vec![true; grid.len()];
    Ok((grid, SolveReport { iterations, residual, h_min, h_max, upwind_count: st.upwind_count }))
}

/// Nodewise `v = −ε² log h`; nodes with `h < 1e-290` become invalid.
pub fn hopf_cole(h: &GridField, eps: f64) -> GridField {
    let e2 = eps * eps;
    let mut out = h.clone();
    for k in 0..h.len() {
        if h.valid[k] && h.values[k] >= H_FLOOR {
            out.values[k] = -e2 * h.values[k].ln();
        } else {
            out.values[k] = f64::NAN;
            out.valid[k] = false;
        }
    }
    out
}

/// Per-axis derivative fields: central differences inside, one-sided
/// second order on the faces. The invalid mask is dilated by one node.
pub fn gradient_field(f: &GridField) -> Vec<GridField> {
    let d = f.dim();
    let n = f.len();
    let mut dilated = f.valid.clone();
    for k in 0..n {
        if f.valid[k] {
            continue;
        }
        let m = f.multi_index(k);
        for a in 0..d {
            let s = f.stride(a);
            if m[a] > 0 {
                dilated[k - s] = false;
            }
            if m[a] + 1 < f.shape[a] {
                dilated[k + s] = false;
            }
        }
    }
    (0..d)
        .map(|a| {
            let h = f.spacing(a);
            let s = f.stride(a);
            let na = f.shape[a];
            let v = &f.values;
            let values = (0..n)
                .map(|k| {
                    if !dilated[k] {
                        return f64::NAN;
                    }
                    let i = (k / s) % na;
                    if i == 0 {
                        (-3.0 * v[k] + 4.0 * v[k + s] - v[k + 2 * s]) / (2.0 * h)
                    } else if i + 1 == na {
                        (3.0 * v[k] - 4.0 * v[k - s] + v[k - 2 * s]) / (2.0 * h)
                    } else {
                        (v[k + s] - v[k - s]) / (2.0 * h)
                    }
                })
                .collect::<Vec<_>>();
            let mut g = f.clone();
            g.valid = dilated.iter().zip(&values).map(|(&ok, x)| ok && x.is_finite()).collect();
            g.values = values;
            g
        })
        .collect()
}

/// Richardson combination `fine + (fine − coarse)/(2^order − 1)` on the
/// coarse grid. The fine grid must refine the coarse one by exactly 2.
pub fn richardson(coarse: &GridField, fine: &GridField, order: u32) -> Result<GridField> {
    if coarse.lo != fine.lo || coarse.hi != fine.hi || coarse.dim() != fine.dim() {
        return Err(Error::InvalidInput("Richardson grids cover different boxes".into()));
    }
    for a in 0..coarse.dim() {
        if fine.shape[a] != 2 * (coarse.shape[a] - 1) + 1 {
            return Err(Error::InvalidInput("fine grid must halve the coarse spacing".into()));
        }
    }
    let c = 1.0 / ((1u64 << order) as f64 - 1.0);
    let mut out = coarse.clone();
    for k in 0..coarse.len() {
        let m: Vec<usize> = coarse.multi_index(k).iter().map(|i| 2 * i).collect();
        let kf = fine.index(&m);
        let ok = coarse.valid[k] && fine.valid[kf];
        out.valid[k] = ok;
        out.values[k] = if ok { fine.values[kf] + (fine.values[kf] - coarse.values[k]) * c } else { f64::NAN };
    }
    Ok(out)
}

/// Small-noise reference fields for [`expansion_check`].
pub trait ExpansionReference {
    fn v0(&self, x: &[f64]) -> Result<f64>;
    fn dv0(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn v1(&self, x: &[f64]) -> Result<f64>;
    fn dv1(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// Constant drift: `v⁰ = 2 b_in d(x)` with `b_in = −⟨b, ν⟩`, and `v₁ = 0`.
#[derive(Clone, Debug)]
pub struct ConstantDriftReference {
    domain: Domain,
    b_in: f64,
}

impl ConstantDriftReference {
    pub fn new(b: &[f64], domain: &Domain) -> Result<Self> {
        check_dim(domain.dim(), b.len())?;
        let nu = domain.gamma_normal();
        let b_in = -b.iter().zip(&nu).map(|(x, y)| x * y).sum::<f64>();
        if !(b_in > 0.0) {
            return Err(Error::NonTransversal { normal_component: -b_in });
        }
        Ok(Self { domain: domain.clone(), b_in })
    }
}

impl ExpansionReference for ConstantDriftReference {
    fn v0(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.domain.dim(), x.len())?;
        Ok(2.0 * self.b_in * self.domain.face_distance(x, self.domain.gamma()))
    }

    fn dv0(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.domain.dim(), x.len())?;
        Ok(self.domain.gamma_normal().iter().map(|n| -2.0 * self.b_in * n).collect())
    }

    fn v1(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.domain.dim(), x.len())?;
        Ok(0.0)
    }

    fn dv1(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.domain.dim(), x.len())?;
        Ok(vec![0.0; x.len()])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionRow {
    pub eps: f64,
    /// max |(v^ε − v⁰)/ε² − v₁| over the region.
    pub r0: f64,
    /// max over components of |(Dv^ε − Dv⁰)/ε² − Dv₁| over the region.
    pub r1: f64,
    pub nodes: usize,
}

pub fn expansion_check(
    v_eps: &[(f64, GridField)],
    reference: &dyn ExpansionReference,
    region: &dyn Fn(&[f64]) -> bool,
) -> Result<Vec<ExpansionRow>> {
    let mut rows = Vec::with_capacity(v_eps.len());
    for (eps, v) in v_eps {
        let e2 = eps * eps;
        let grad = gradient_field(v);
        let (mut r0, mut r1, mut nodes) = (0.0f64, 0.0f64, 0);
        for k in 0..v.len() {
            let x = v.coords(k);
            if !region(&x) {
                continue;
            }
            if !v.valid[k] || grad.iter().any(|g| !g.valid[k]) {
                return Err(Error::RegionInvalid);
            }
            let invalid = |_| Error::RegionInvalid;
            let v0 = reference.v0(&x).map_err(invalid)?;
            let v1 = reference.v1(&x).map_err(invalid)?;
            let dv0 = reference.dv0(&x).map_err(invalid)?;
            let dv1 = reference.dv1(&x).map_err(invalid)?;
            r0 = r0.max(((v.values[k] - v0) / e2 - v1).abs());
            for a in 0..v.dim() {
                r1 = r1.max(((grad[a].values[k] - dv0[a]) / e2 - dv1[a]).abs());
            }
            nodes += 1;
        }
        if nodes == 0 {
            return Err(Error::RegionInvalid);
        }
        rows.push(ExpansionRow { eps: *eps, r0, r1, nodes });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DriftFieldModel;

    fn interval() -> Domain {
        Domain::boxed(vec![0.0], vec![1.0], Face::new(0, Side::Lower)).unwrap()
    }

    fn exact_1d(x: f64, eps: f64) -> f64 {
        let k = 2.0 / (eps * eps);
        ((-k * x).exp() - (-k).exp()) / (1.0 - (-k).exp())
    }

    #[test]
    fn pure_diffusion_is_linear() {
        let b = DriftFieldModel::constant(vec![0.0]).unwrap();
        let (h, rep) = solve_h_eps(&b, 0.5, &interval(), &[101], &SolveOptions::default()).unwrap();
        for k in 0..h.len() {
            assert!((h.values[k] - (1.0 - h.coords(k)[0])).abs() <= 1e-10);
        }
        assert!(rep.residual <= 1e-10);
    }

    #[test]
    fn one_dimensional_oracle() {
        let b = DriftFieldModel::constant(vec![1.0]).unwrap();
        let (h, _) = solve_h_eps(&b, 0.3, &interval(), &[2049], &SolveOptions::default()).unwrap();
        let mut err: f64 = 0.0;
        for k in 0..h.len() {
            let e = exact_1d(h.coords(k)[0], 0.3);
            if e >= 1e-12 {
                err = err.max((h.values[k] - e).abs() / e);
            }
        }
        assert!(err <= 1e-3, "max rel err {err}");
    }

    #[test]
    fn sweep_matches_direct_on_small_grid() {
        let b = DriftFieldModel::constant(vec![1.0, 0.2]).unwrap();
        let dom = Domain::boxed(vec![0.0, 0.0], vec![1.0, 1.0], Face::new(0, Side::Lower)).unwrap();
        let (d, _) = solve_h_eps(&b, 0.5, &dom, &[21, 17], &SolveOptions::default()).unwrap();
        let opts = SolveOptions { method: SolveMethod::Sweep, tol: 1e-12, ..Default::default() };
        let (s, _) = solve_h_eps(&b, 0.5, &dom, &[21, 17], &opts).unwrap();
        for k in 0..d.len() {
            assert!((d.values[k] - s.values[k]).abs() <= 1e-9);
        }
    }

    #[test]
    fn half_space_is_rejected() {
        let b = DriftFieldModel::constant(vec![1.0]).unwrap();
        let dom = Domain::half_space(1, 0, 0.0, Side::Lower).unwrap();
        assert!(matches!(solve_h_eps(&b, 0.3, &dom, &[11], &SolveOptions::default()), Err(Error::Unsupported(_))));
    }

    #[test]
    fn hopf_cole_examples() {
        let eps = 0.3;
        let h = GridField::from_fn(vec![0.0, 0.0], vec![1.0, 1.0], vec![11, 5], |x| {
            (-2.0 * x[0] / (eps * eps)).exp()
        })
        .unwrap();
        let v = hopf_cole(&h, eps);
        for k in 0..v.len() {
            assert!((v.values[k] - 2.0 * v.coords(k)[0]).abs() <= 1e-14);
        }
        let mut one = h.with_values(vec![1.0; h.len()]);
        assert!(hopf_cole(&one, eps).values.iter().all(|&x| x == 0.0));
        one.values[7] = 1e-300;
        let v = hopf_cole(&one, eps);
        assert!(!v.valid[7]);
        assert!(v.valid[6] && v.valid[8]);
    }

    #[test]
    fn gradient_examples() {
        let g = GridField::from_fn(vec![0.0, 0.0], vec![1.0, 1.0], vec![11, 7], |x| 2.0 * x[0]).unwrap();
        let d = gradient_field(&g);
        assert!(d[0].values.iter().all(|&v| (v - 2.0).abs() <= 1e-12));
        assert!(d[1].values.iter().all(|&v| v.abs() <= 1e-12));

        let q = GridField::from_fn(vec![0.0], vec![1.0], vec![21], |x| x[0] * x[0]).unwrap();
        let d = gradient_field(&q);
        for k in 0..q.len() {
            assert!((d[0].values[k] - 2.0 * q.coords(k)[0]).abs() <= 1e-12);
        }

        let err = |n: usize| {
            let s = GridField::from_fn(vec![0.0], vec![2.0], vec![n], |x| x[0].sin()).unwrap();
            let d = gradient_field(&s);
            (0..s.len()).map(|k| (d[0].values[k] - s.coords(k)[0].cos()).abs()).fold(0.0, f64::max)
        };
        let ratio = err(41) / err(81);
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn gradient_mask_dilates() {
        let mut f = GridField::from_fn(vec![0.0, 0.0], vec![1.0, 1.0], vec![5, 5], |x| x[0]).unwrap();
        let c = f.index(&[2, 2]);
        f.valid[c] = false;
        let g = gradient_field(&f);
        for (m, ok) in [([2, 2], false), ([1, 2], false), ([2, 3], false), ([1, 1], true), ([0, 2], true)] {
            assert_eq!(g[0].valid[f.index(&m)], ok, "{m:?}");
        }
    }

    #[test]
    fn sampling_is_exact_for_bilinear() {
        let f = GridField::from_fn(vec![0.0, -1.0], vec![2.0, 1.0], vec![5, 9], |x| 1.0 + x[0] - 3.0 * x[1] + x[0] * x[1])
            .unwrap();
        for x in [[0.3, 0.2], [2.0, 1.0], [0.0, -1.0], [1.7, -0.33]] {
            let e = 1.0 + x[0] - 3.0 * x[1] + x[0] * x[1];
            assert!((f.sample(&x).unwrap() - e).abs() <= 1e-12);
        }
        assert!(matches!(f.sample(&[2.5, 0.0]), Err(Error::OutsideRegion { .. })));
    }

    #[test]
    fn richardson_removes_quadratic_error() {
        let f = |n: usize| {
            GridField::from_fn(vec![0.0], vec![1.0], vec![n], |x| x[0] + 0.1 * (n as f64 - 1.0).powi(-2)).unwrap()
        };
        let r = richardson(&f(11), &f(21), 2).unwrap();
        for k in 0..r.len() {
            assert!((r.values[k] - r.coords(k)[0]).abs() <= 1e-14);
        }
    }

    struct Linear;
    impl ExpansionReference for Linear {
        fn v0(&self, x: &[f64]) -> Result<f64> {
            Ok(2.0 * x[0])
        }
        fn dv0(&self, _: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![2.0])
        }
        fn v1(&self, _: &[f64]) -> Result<f64> {
            Ok(0.0)
        }
        fn dv1(&self, _: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![0.0])
        }
    }

    #[test]
    fn expansion_table_shapes() {
        assert!(expansion_check(&[], &Linear, &|_| true).unwrap().is_empty());
        let v = GridField::from_fn(vec![0.0], vec![1.0], vec![11], |x| 2.0 * x[0]).unwrap();
        let rows = expansion_check(&[(0.3, v.clone())], &Linear, &|x| x[0] < 0.5).unwrap();
        assert!(rows[0].r0 <= 1e-12 && rows[0].r1 <= 1e-10);
        assert!(matches!(expansion_check(&[(0.3, v)], &Linear, &|_| false), Err(Error::RegionInvalid)));
    }
}
