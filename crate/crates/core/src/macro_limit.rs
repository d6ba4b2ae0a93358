//! Small-mass limit: the configuration-space equation for `η`, the
//! incidence/Rouse change of variables `r ↔ (q, x)`, the classical Hookean
//! chain operator in `(x, q)` and the momentum-equilibration diagnostics.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::chain_dynamics::{ChainParams, ChainState};
use crate::error::{Error, Result};
use crate::flow::VelocitySampler;
use crate::fokker_planck::{maxwellian_cells, spring_potential, DensityField};
use crate::geometry::{ConvexDomain, DomainKind};
use crate::grid::TensorGrid;

/// Scalar incidence matrix `B` (`(J+1) × J`) and Rouse matrix `R = BᵀB`.
/// The block versions are `B ⊗ 𝕀_d` and `R ⊗ 𝕀_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct RouseStructure {
    pub springs: usize,
    pub incidence: DMatrix<i64>,
    pub rouse: DMatrix<i64>,
}

pub fn build_rouse(springs: usize) -> Result<RouseStructure> {
    if springs == 0 {
        return Err(Error::InvalidParameter { name: "springs", reason: "need J >= 1".into() });
    }
    let mut b = DMatrix::<i64>::zeros(springs + 1, springs);
    for k in 0..springs {
        b[(k, k)] = -1;
        b[(k + 1, k)] = 1;
    }
    let rouse = b.transpose() * &b;
    Ok(RouseStructure { springs, incidence: b, rouse })
}

impl RouseStructure {
    /// `R` from its tridiagonal closed form (2 on the diagonal, −1 off it).
    pub fn closed_form(springs: usize) -> DMatrix<i64> {
        DMatrix::from_fn(springs, springs, |i, j| match i.abs_diff(j) {
            0 => 2,
            1 => -1,
            _ => 0,
        })
    }

    pub fn incidence_block(&self, d: usize) -> DMatrix<f64> {
        kron_identity(&self.incidence, d)
    }

    pub fn rouse_block(&self, d: usize) -> DMatrix<f64> {
        kron_identity(&self.rouse, d)
    }

    /// Eigenvalues of the scalar Rouse matrix, ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let r = self.rouse.map(|x| x as f64);
        let mut ev: Vec<f64> = SymmetricEigen::new(r).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// `4 sin²(kπ / (2(J+1)))`, `k = 1..J`.
    pub fn closed_form_eigenvalues(springs: usize) -> Vec<f64> {
        (1..=springs)
            .map(|k| {
                let s = (k as f64 * std::f64::consts::PI / (2.0 * (springs + 1) as f64)).sin();
                4.0 * s * s
            })
            .collect()
    }

    /// Column sums of `B` (all zero).
    pub fn column_sums(&self) -> Vec<i64> {
        self.incidence.row_sum().iter().copied().collect()
    }
}

fn kron_identity(m: &DMatrix<i64>, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows() * d, m.ncols() * d, |i, j| if i % d == j % d { m[(i / d, j / d)] as f64 } else { 0.0 })
}

/// `r ↦ (q, x)` with `q_j = r_{j+1} − r_j` and `x` the bead mean.
pub fn change_of_variables(r: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let beads = r.len() / d;
    let mut q = vec![0.0; (beads - 1) * d];
    let mut x = vec![0.0; d];
    for j in 0..beads {
        for k in 0..d {
            x[k] += r[j * d + k];
            if j + 1 < beads {
                q[j * d + k] = r[(j + 1) * d + k] - r[j * d + k];
            }
        }
    }
    x.iter_mut().for_each(|s| *s /= beads as f64);
    (q, x)
}

/// Inverse map `(q, x) ↦ r`.
pub fn inverse_change_of_variables(q: &[f64], x: &[f64], d: usize) -> Vec<f64> {
    let springs = q.len() / d;
    let beads = springs + 1;
    let mut r = vec![0.0; beads * d];
    for k in 0..d {
        let mut r0 = x[k];
        for j in 0..springs {
            r0 -= (springs - j) as f64 / beads as f64 * q[j * d + k];
        }
        r[k] = r0;
        for j in 0..springs {
            r[(j + 1) * d + k] = r[j * d + k] + q[j * d + k];
        }
    }
    r
}

/// Unnormalised configuration Maxwellian `exp(−|q|²/2β)`; used only in
/// ratio form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfigMaxwellian {
    pub beta: f64,
}

impl ConfigMaxwellian {
    pub fn eval(&self, q: &[f64]) -> f64 {
        (-q.iter().map(|s| s * s).sum::<f64>() / (2.0 * self.beta)).exp()
    }
}

/// Configuration density `η` on the `r` grid over `Ω^{J+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroDensity {
    pub grid: TensorGrid,
    pub eta: Vec<f64>,
    pub time: f64,
}

impl MacroDensity {
    pub fn from_fn(grid: &TensorGrid, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let mut idx = vec![0; grid.ndim()];
        let mut p = vec![0.0; grid.ndim()];
        let eta: Vec<f64> = (0..grid.len())
            .map(|c| {
                grid.unflat(c, &mut idx);
                for a in 0..grid.ndim() {
                    p[a] = grid.center(a, idx[a]);
                }
                f(&p)
            })
            .collect();
        if let Some(x) = eta.iter().find(|x| !(**x >= 0.0)) {
            return Err(Error::InvalidParameter { name: "eta", reason: format!("negative or NaN value {x}") });
        }
        let mut m = Self { grid: grid.clone(), eta, time: 0.0 };
        let mass = m.mass();
        if !(mass > 0.0) {
            return Err(Error::InvalidParameter { name: "eta", reason: "zero mass".into() });
        }
        m.eta.iter_mut().for_each(|x| *x /= mass);
        Ok(m)
    }

    pub fn uniform(grid: &TensorGrid) -> Result<Self> {
        Self::from_fn(grid, |_| 1.0)
    }

    /// Discrete Gibbs density `∝ e^{−V(r)/β}` at cell centres.
    pub fn gibbs(grid: &TensorGrid, params: &ChainParams) -> Result<Self> {
        let (d, h, beta) = (params.dim, params.spring_constant, params.beta);
        Self::from_fn(grid, |r| (-spring_potential(r, d, h) / beta).exp())
    }

    pub fn mass(&self) -> f64 {
        self.eta.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn min(&self) -> f64 {
        self.eta.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.eta.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn l1_distance(&self, other: &MacroDensity) -> Result<f64> {
        if !self.grid.same_layout(&other.grid) {
            return Err(Error::GridMismatch("eta grids differ".into()));
        }
        Ok(self.eta.iter().zip(&other.eta).map(|(a, b)| (a - b).abs()).sum::<f64>() * self.grid.cell_volume())
    }
}

/// The `r` grid over `Ω^{J+1}` for a box domain.
pub fn configuration_grid(domain: &ConvexDomain, beads: usize, n_r: usize) -> Result<TensorGrid> {
    let DomainKind::Box { lo, hi } = domain.kind() else {
        return Err(Error::InvalidDomain("the configuration solver needs a box domain".into()));
    };
    let d = domain.dim();
    let axes = beads * d;
    let rlo: Vec<f64> = (0..axes).map(|a| lo[a % d]).collect();
    let rhi: Vec<f64> = (0..axes).map(|a| hi[a % d]).collect();
    TensorGrid::new(&rlo, &rhi, &vec![n_r; axes])
}

/// Explicit finite-volume solver for
/// `∂t η = Σ_j ∂_{r_j}·(β ∂_{r_j} η − η((𝓛r)_j + u(r_j)))` with zero total
/// flux on every wall.
///
/// The spring part of the flux is written as `−β E ∂(η/E)` with
/// `E = e^{−V/β}`, so the discrete Gibbs density is an exact fixed point;
/// the flow part is upwinded.
#[derive(Debug, Clone)]
pub struct EtaSolver {
    pub grid: TensorGrid,
    pub params: ChainParams,
    e_cell: Vec<f64>,
    e_up: Vec<f64>,
    r_points: Vec<f64>,
}

impl EtaSolver {
    /// `springs = false` drops the `𝓛r` drift (pure diffusion plus flow).
    pub fn new(grid: &TensorGrid, params: &ChainParams, springs: bool) -> Result<Self> {
        params.validate()?;
        let dd = grid.ndim();
        if dd != params.state_len() {
            return Err(Error::GridMismatch(format!("grid has {dd} axes, chain has {}", params.state_len())));
        }
        let (d, h, beta) = (params.dim, params.spring_constant, params.beta);
        let pot = |r: &[f64]| if springs { (-spring_potential(r, d, h) / beta).exp() } else { 1.0 };
        let mut idx = vec![0; dd];
        let mut r = vec![0.0; dd];
        let mut e_cell = vec![0.0; grid.len()];
        let mut e_up = vec![0.0; grid.len() * dd];
        let mut r_points = vec![0.0; grid.len() * dd];
        for c in 0..grid.len() {
            grid.unflat(c, &mut idx);
            for a in 0..dd {
                r[a] = grid.center(a, idx[a]);
            }
            r_points[c * dd..(c + 1) * dd].copy_from_slice(&r);
            e_cell[c] = pot(&r);
            for a in 0..dd {
                let keep = r[a];
                r[a] = grid.face(a, idx[a] + 1);
                e_up[c * dd + a] = pot(&r);
                r[a] = keep;
            }
        }
        Ok(Self { grid: grid.clone(), params: *params, e_cell, e_up, r_points })
    }

    /// Flow component on the upper face of every cell along every axis.
    fn face_flow(&self, u: &dyn VelocitySampler) -> Vec<f64> {
        let dd = self.grid.ndim();
        let d = self.params.dim;
        let mut out = vec![0.0; self.grid.len() * dd];
        let mut buf = vec![0.0; d];
        let mut p = vec![0.0; d];
        let mut idx = vec![0; dd];
        for c in 0..self.grid.len() {
            self.grid.unflat(c, &mut idx);
            for a in 0..dd {
                if idx[a] + 1 == self.grid.shape()[a] {
                    continue;
                }
                let j = a / d;
                p.copy_from_slice(&self.r_points[c * dd + j * d..c * dd + (j + 1) * d]);
                p[a % d] = self.grid.face(a, idx[a] + 1);
                u.sample_into(&p, &mut buf);
                out[c * dd + a] = buf[a % d];
            }
        }
        out
    }

    fn rate(&self, uf: &[f64]) -> f64 {
        let dd = self.grid.ndim();
        let beta = self.params.beta;
        let h = self.grid.spacing();
        let mut worst = 0.0f64;
        for c in 0..self.grid.len() {
            let mut s = 0.0;
            for a in 0..dd {
                let st = self.grid.stride(a);
                let i = (c / st) % self.grid.shape()[a];
                if i + 1 < self.grid.shape()[a] {
                    s += beta * self.e_up[c * dd + a] / (h[a] * h[a] * self.e_cell[c]);
                    s += uf[c * dd + a].max(0.0) / h[a];
                }
                if i > 0 {
                    s += beta * self.e_up[(c - st) * dd + a] / (h[a] * h[a] * self.e_cell[c]);
                    s += (-uf[(c - st) * dd + a]).max(0.0) / h[a];
                }
            }
            worst = worst.max(s);
        }
        worst
    }

    pub fn stability_bound(&self, u: &dyn VelocitySampler) -> f64 {
        self.rate(&self.face_flow(u)).recip()
    }

    fn rhs(&self, eta: &[f64], uf: &[f64]) -> Vec<f64> {
        let dd = self.grid.ndim();
        let beta = self.params.beta;
        let h = self.grid.spacing().to_vec();
        let shape = self.grid.shape().to_vec();
        // flux through the upper face of each cell, zero on the walls
        let mut flux = vec![0.0; eta.len() * dd];
        flux.par_chunks_mut(dd).enumerate().for_each(|(c, f)| {
            for a in 0..dd {
                let st = self.grid.stride(a);
                if (c / st) % shape[a] + 1 == shape[a] {
                    continue;
                }
                let n = c + st;
                let (wl, wr) = (eta[c] / self.e_cell[c], eta[n] / self.e_cell[n]);
                let uf = uf[c * dd + a];
                f[a] = -beta * self.e_up[c * dd + a] * (wr - wl) / h[a] + uf * if uf > 0.0 { eta[c] } else { eta[n] };
            }
        });
        (0..eta.len())
            .into_par_iter()
            .map(|c| {
                let mut div = 0.0;
                for a in 0..dd {
                    let st = self.grid.stride(a);
                    let lo = if !(c / st).is_multiple_of(shape[a]) { flux[(c - st) * dd + a] } else { 0.0 };
                    div += (flux[c * dd + a] - lo) / h[a];
                }
                -div
            })
            .collect()
    }

    /// Time derivative of `η` under the flow `u`.
    pub fn apply(&self, eta: &MacroDensity, u: &dyn VelocitySampler) -> Vec<f64> {
        self.rhs(&eta.eta, &self.face_flow(u))
    }

    pub fn step(&self, eta: &mut MacroDensity, dt: f64, u: &dyn VelocitySampler) -> Result<()> {
        let uf = self.face_flow(u);
        self.step_with(eta, dt, &uf)
    }

    fn step_with(&self, eta: &mut MacroDensity, dt: f64, uf: &[f64]) -> Result<()> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter { name: "dt", reason: "must be positive".into() });
        }
        if !eta.grid.same_layout(&self.grid) {
            return Err(Error::GridMismatch("eta and solver grids differ".into()));
        }
        let bound = self.rate(uf).recip();
        if dt > bound {
            return Err(Error::StabilityViolation { dt, bound });
        }
        let r = self.rhs(&eta.eta, uf);
        eta.eta.iter_mut().zip(&r).for_each(|(x, y)| *x += dt * y);
        eta.time += dt;
        Ok(())
    }

    /// Advance by `duration` in equal substeps no larger than
    /// `safety × bound`; returns the number of substeps.
    pub fn advance(&self, eta: &mut MacroDensity, duration: f64, u: &dyn VelocitySampler, safety: f64) -> Result<usize> {
        if duration == 0.0 {
            return Ok(0);
        }
        let uf = self.face_flow(u);
        let bound = self.rate(&uf).recip();
        let n = (duration / (safety * bound)).ceil().max(1.0) as usize;
        let dt = duration / n as f64;
        let t0 = eta.time;
        for k in 0..n {
            self.step_with(eta, dt, &uf)?;
            eta.time = t0 + (k + 1) as f64 * dt;
        }
        Ok(n)
    }
}

pub fn step_eta(solver: &EtaSolver, eta: &mut MacroDensity, dt: f64, u: &dyn VelocitySampler) -> Result<()> {
    solver.step(eta, dt, u)
}

/// Grid over `Ω × D^J` with the `d` centre-of-mass axes first, then the
/// connector axes spring by spring.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassicalGrid {
    pub grid: TensorGrid,
    pub springs: usize,
    pub dim: usize,
}

impl ClassicalGrid {
    pub fn new(domain: &ConvexDomain, springs: usize, n_x: usize, n_q: usize) -> Result<Self> {
        let DomainKind::Box { lo, hi } = domain.kind() else {
            return Err(Error::InvalidDomain("the classical operator needs a box domain".into()));
        };
        let d = domain.dim();
        let mut glo = lo.clone();
        let mut ghi = hi.clone();
        let mut n = vec![n_x; d];
        for _ in 0..springs {
            for k in 0..d {
                glo.push(lo[k] - hi[k]);
                ghi.push(hi[k] - lo[k]);
                n.push(n_q);
            }
        }
        Ok(Self { grid: TensorGrid::new(&glo, &ghi, &n)?, springs, dim: d })
    }

    pub fn x_grid(&self) -> TensorGrid {
        let d = self.dim;
        let lo = &self.grid.lower()[..d];
        let hi: Vec<f64> = (0..d).map(|a| self.grid.upper(a)).collect();
        TensorGrid::new(lo, &hi, &self.grid.shape()[..d]).expect("sub-grid of a valid grid")
    }

    fn q_len(&self) -> usize {
        self.grid.len() / self.x_grid().len()
    }

    pub fn from_fn(&self, f: impl Fn(&[f64], &[f64]) -> f64) -> Vec<f64> {
        let d = self.dim;
        let mut idx = vec![0; self.grid.ndim()];
        let mut p = vec![0.0; self.grid.ndim()];
        (0..self.grid.len())
            .map(|c| {
                self.grid.unflat(c, &mut idx);
                for a in 0..p.len() {
                    p[a] = self.grid.center(a, idx[a]);
                }
                f(&p[..d], &p[d..])
            })
            .collect()
    }

    /// `∫ ψ dq` per `x` cell.
    pub fn q_integrate(&self, psi: &[f64]) -> Vec<f64> {
        let nq = self.q_len();
        let vol: f64 = (self.dim..self.grid.ndim()).map(|a| self.grid.spacing()[a]).product();
        psi.chunks(nq).map(|row| row.iter().sum::<f64>() * vol).collect()
    }
}

/// `x`-part of the classical operator, `(β/(J+1)) Δ_x φ − ∇_x·(u φ)`, with
/// zero flux on `∂Ω`. Acts on arrays whose leading index is the `x` cell
/// and trailing block (length `inner`) is untouched.
fn x_operator(x: &TensorGrid, phi: &[f64], inner: usize, u: &dyn VelocitySampler, diff: f64, out: &mut [f64]) {
    let d = x.ndim();
    let h = x.spacing();
    let mut idx = vec![0; d];
    let mut p = vec![0.0; d];
    let mut buf = vec![0.0; d];
    for c in 0..x.len() {
        x.unflat(c, &mut idx);
        for a in 0..d {
            if idx[a] + 1 == x.shape()[a] {
                continue;
            }
            for b in 0..d {
                p[b] = x.center(b, idx[b]);
            }
            p[a] = x.face(a, idx[a] + 1);
            u.sample_into(&p, &mut buf);
            let ua = buf[a];
            let n = c + x.stride(a);
            for k in 0..inner {
                let (l, r) = (phi[c * inner + k], phi[n * inner + k]);
                let f = -diff * (r - l) / h[a] + ua * if ua > 0.0 { l } else { r };
                out[c * inner + k] -= f / h[a];
                out[n * inner + k] += f / h[a];
            }
        }
    }
}

/// Centre-of-mass operator `(β/(J+1)) Δ_x φ − ∇·(u φ)` on the `x` grid.
pub fn com_operator(x: &TensorGrid, phi: &[f64], u: &dyn VelocitySampler, beta: f64, springs: usize) -> Vec<f64> {
    let mut out = vec![0.0; phi.len()];
    x_operator(x, phi, 1, u, beta / (springs + 1) as f64, &mut out);
    out
}

/// Spatial operator of the classical Hookean chain equation,
///
/// ```text
/// −u·∇_x ψ − Σ_j ∂_{q_j}·((∇u) q_j ψ) + β Σ_{i,j} ∂_{q_j}·(R_ij 𝔐 ∂_{q_i}(ψ/𝔐)) + (β/(J+1)) Δ_x ψ
/// ```
///
/// in conservative form with zero flux on `∂Ω` and on `∂D^J`. The advection
/// is written as `∇·(uψ)`, which equals `u·∇ψ` for solenoidal `u`.
pub fn classical_fp_rhs(cg: &ClassicalGrid, psi: &[f64], u: &dyn VelocitySampler, beta: f64) -> Result<Vec<f64>> {
    if psi.len() != cg.grid.len() {
        return Err(Error::GridMismatch(format!("{} values for {} cells", psi.len(), cg.grid.len())));
    }
    let d = cg.dim;
    let jj = cg.springs;
    let g = &cg.grid;
    let xg = cg.x_grid();
    let nq = cg.q_len();
    let rouse = build_rouse(jj)?.rouse;
    let cm = ConfigMaxwellian { beta };
    let mut out = vec![0.0; psi.len()];
    x_operator(&xg, psi, nq, u, beta / (jj + 1) as f64, &mut out);

    let na = g.ndim();
    let h = g.spacing().to_vec();
    let shape = g.shape().to_vec();
    let mut mf = vec![0.0; g.len()];
    let mut pts = vec![0.0; g.len() * na];
    let mut idx = vec![0; na];
    for c in 0..g.len() {
        g.unflat(c, &mut idx);
        for a in 0..na {
            pts[c * na + a] = g.center(a, idx[a]);
        }
        mf[c] = cm.eval(&pts[c * na + d..(c + 1) * na]);
    }
    let phi: Vec<f64> = psi.iter().zip(&mf).map(|(p, m)| p / m).collect();
    let grads: Vec<Vec<f64>> = (0..xg.len())
        .map(|cx| {
            let mut i = vec![0; d];
            xg.unflat(cx, &mut i);
            let p: Vec<f64> = (0..d).map(|a| xg.center(a, i[a])).collect();
            u.gradient(&p)
        })
        .collect();
    // centred derivative of φ along axis b at cell c (one-sided at the ends)
    let dphi = |c: usize, b: usize| -> f64 {
        let st = g.stride(b);
        let i = (c / st) % shape[b];
        let (lo, hi) = (if i > 0 { c - st } else { c }, if i + 1 < shape[b] { c + st } else { c });
        (phi[hi] - phi[lo]) / (h[b] * ((hi - lo) / st) as f64)
    };
    let mut q = vec![0.0; jj * d];
    for c in 0..g.len() {
        g.unflat(c, &mut idx);
        let cx = c / nq;
        for j in 0..jj {
            for k in 0..d {
                let a = d + j * d + k;
                if idx[a] + 1 == shape[a] {
                    continue;
                }
                let n = c + g.stride(a);
                q.copy_from_slice(&pts[c * na + d..(c + 1) * na]);
                q[j * d + k] = g.face(a, idx[a] + 1);
                let m_face = cm.eval(&q);
                // drift (∇u) q_j, component k
                let grad = &grads[cx];
                let w: f64 = (0..d).map(|l| grad[k * d + l] * q[j * d + l]).sum();
                let mut f = w * if w > 0.0 { psi[c] } else { psi[n] };
                // configuration diffusion
                let mut s = 0.0;
                for i in 0..jj {
                    let rij = rouse[(i, j)];
                    if rij == 0 {
                        continue;
                    }
                    let b = d + i * d + k;
                    let deriv = if i == j { (phi[n] - phi[c]) / h[a] } else { 0.5 * (dphi(c, b) + dphi(n, b)) };
                    s += rij as f64 * deriv;
                }
                f -= beta * m_face * s;
                out[c] -= f / h[a];
                out[n] += f / h[a];
            }
        }
    }
    Ok(out)
}

/// `max |Σ_j ∂²_{r_j} f − (∂_qᵀ R ∂_q + (1/(J+1)) ∂_x²) f|` over `points`
/// random configurations in `(−1, 1)^{(J+1)d}`, both sides by central
/// differences with step `h`.
pub fn operator_identity_check(
    springs: usize,
    d: usize,
    f: &dyn Fn(&[f64]) -> f64,
    points: usize,
    h: f64,
    seed: u64,
) -> Result<f64> {
    let rouse = build_rouse(springs)?.rouse;
    let n = (springs + 1) * d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..points {
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-0.9..0.9)).collect();
        let f0 = f(&r);
        let mut lhs = 0.0;
        let mut rp = r.clone();
        for a in 0..n {
            rp[a] = r[a] + h;
            let fp = f(&rp);
            rp[a] = r[a] - h;
            let fm = f(&rp);
            rp[a] = r[a];
            lhs += (fp - 2.0 * f0 + fm) / (h * h);
        }
        let (q, x) = change_of_variables(&r, d);
        let g = |q: &[f64], x: &[f64]| f(&inverse_change_of_variables(q, x, d));
        let mut rhs = 0.0;
        let mut qp = q.clone();
        for i in 0..springs {
            for j in 0..springs {
                let rij = rouse[(i, j)];
                if rij == 0 {
                    continue;
                }
                for k in 0..d {
                    let (a, b) = (i * d + k, j * d + k);
                    let mut mixed = 0.0;
                    for (sa, sb, w) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
                        qp.copy_from_slice(&q);
                        qp[a] += sa * h;
                        qp[b] += sb * h;
                        mixed += w * g(&qp, &x);
                    }
                    rhs += rij as f64 * mixed / (4.0 * h * h);
                }
            }
        }
        let mut xp = x.clone();
        let g0 = g(&q, &x);
        for k in 0..d {
            xp[k] = x[k] + h;
            let gp = g(&q, &xp);
            xp[k] = x[k] - h;
            let gm = g(&q, &xp);
            xp[k] = x[k];
            rhs += (gp - 2.0 * g0 + gm) / (h * h * (springs + 1) as f64);
        }
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(worst)
}

/// Momentum-equilibration metrics at one `ε`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquilibrationMetrics {
    pub eps: f64,
    /// `Σ |ϱ − M ϱ̄|`: distance of the position-conditioned velocity law to
    /// the Maxwellian.
    pub velocity_l1: f64,
    /// `Σ |ℙ − β ϱ̄ 𝕀|_F` over the position bins.
    pub second_moment: f64,
    /// `Σ |ϱ̄ − η|` over the position bins.
    pub spatial_l1: f64,
}

/// Mass of `eta` in every cell of the coarser `bins` grid; the fine grid
/// must refine `bins` exactly.
pub fn bin_masses(eta: &MacroDensity, bins: &TensorGrid) -> Result<Vec<f64>> {
    let g = &eta.grid;
    if g.ndim() != bins.ndim() {
        return Err(Error::GridMismatch("eta and bins differ in dimension".into()));
    }
    let mut ratio = vec![0; g.ndim()];
    for a in 0..g.ndim() {
        let same = (g.lower()[a] - bins.lower()[a]).abs() < 1e-12 && (g.upper(a) - bins.upper(a)).abs() < 1e-12;
        if !same || !g.shape()[a].is_multiple_of(bins.shape()[a]) {
            return Err(Error::GridMismatch(format!("axis {a}: eta grid does not refine the bins")));
        }
        ratio[a] = g.shape()[a] / bins.shape()[a];
    }
    let mut out = vec![0.0; bins.len()];
    let mut idx = vec![0; g.ndim()];
    let vol = g.cell_volume();
    for c in 0..g.len() {
        g.unflat(c, &mut idx);
        for a in 0..idx.len() {
            idx[a] /= ratio[a];
        }
        out[bins.flat(&idx)] += eta.eta[c] * vol;
    }
    Ok(out)
}

/// Metrics from a chain ensemble. Velocities are compared component by
/// component on `n_vbins` bins of `[−4√β, 4√β]` plus two tail bins, and
/// averaged over components.
pub fn equilibration_metrics(
    chains: &[ChainState],
    bins: &TensorGrid,
    n_vbins: usize,
    eta: &MacroDensity,
    params: &ChainParams,
) -> Result<EquilibrationMetrics> {
    let n = params.state_len();
    if bins.ndim() != n || chains.iter().any(|c| c.r.len() != n) {
        return Err(Error::GridMismatch("bins must have one axis per configuration component".into()));
    }
    let beta = params.beta;
    let vmax = 4.0 * beta.sqrt();
    let hv = 2.0 * vmax / n_vbins as f64;
    let nvb = n_vbins + 2;
    let vbin = |s: f64| -> usize {
        if s < -vmax {
            0
        } else if s >= vmax {
            nvb - 1
        } else {
            1 + (((s + vmax) / hv) as usize).min(n_vbins - 1)
        }
    };
    let cdf = |s: f64| 0.5 * (1.0 + libm::erf(s / (2.0 * beta).sqrt()));
    let probs: Vec<f64> = (0..nvb)
        .map(|b| {
            let lo = if b == 0 { f64::NEG_INFINITY } else { -vmax + (b - 1) as f64 * hv };
            let hi = if b == nvb - 1 { f64::INFINITY } else { -vmax + b as f64 * hv };
            let c = |s: f64| {
                if s.is_infinite() {
                    if s > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    cdf(s)
                }
            };
            c(hi) - c(lo)
        })
        .collect();
    let total = chains.len() as f64;
    let mut counts = vec![0.0; bins.len()];
    let mut hist = vec![0.0; bins.len() * n * nvb];
    let mut vv = vec![0.0; bins.len() * n * n];
    let mut idx = vec![0; n];
    for c in chains {
        for a in 0..n {
            idx[a] = bins.locate(a, c.r[a]);
        }
        let b = bins.flat(&idx);
        counts[b] += 1.0;
        for a in 0..n {
            hist[(b * n + a) * nvb + vbin(c.v[a])] += 1.0;
            for e in 0..n {
                vv[(b * n + a) * n + e] += c.v[a] * c.v[e];
            }
        }
    }
    let mut velocity_l1 = 0.0;
    let mut second_moment = 0.0;
    for b in 0..bins.len() {
        let mut frob = 0.0;
        for a in 0..n {
            for k in 0..nvb {
                velocity_l1 += (hist[(b * n + a) * nvb + k] - counts[b] * probs[k]).abs() / total;
            }
            for e in 0..n {
                let target = if a == e { beta * counts[b] } else { 0.0 };
                let dev = (vv[(b * n + a) * n + e] - target) / total;
                frob += dev * dev;
            }
        }
        second_moment += frob.sqrt();
    }
    velocity_l1 /= n as f64;
    let masses = bin_masses(eta, bins)?;
    let spatial_l1 = counts.iter().zip(&masses).map(|(c, m)| (c / total - m).abs()).sum();
    Ok(EquilibrationMetrics { eps: params.eps, velocity_l1, second_moment, spatial_l1 })
}

/// Metrics from a kinetic density on a matching grid (exact velocity
/// integrals).
pub fn equilibration_metrics_fp(rho: &DensityField, eta: &MacroDensity, params: &ChainParams) -> Result<EquilibrationMetrics> {
    let g = &rho.grid;
    if !g.r.same_layout(&eta.grid) {
        return Err(Error::GridMismatch("kinetic and macro grids differ".into()));
    }
    let beta = params.beta;
    let dd = g.axes();
    let nv = g.v.len();
    let m = maxwellian_cells(&g.v, beta);
    let (hr, hv) = (g.r.cell_volume(), g.v.cell_volume());
    // velocity law compared with the discretely normalised Maxwellian
    let z: f64 = m.iter().sum::<f64>() * hv;
    let mut idx = vec![0; dd];
    let vpts: Vec<f64> = (0..nv)
        .flat_map(|iv| {
            g.v.unflat(iv, &mut idx);
            (0..dd).map(|a| g.v.center(a, idx[a])).collect::<Vec<_>>()
        })
        .collect();
    let (mut vl1, mut sm, mut sl1) = (0.0, 0.0, 0.0);
    let mut p = vec![0.0; dd * dd];
    for ir in 0..g.r.len() {
        let row = &rho.rho_hat[ir * nv..(ir + 1) * nv];
        let rbar: f64 = row.iter().zip(&m).map(|(x, w)| x * w).sum::<f64>() * hv;
        p.fill(0.0);
        for iv in 0..nv {
            let w = m[iv] * row[iv] * hv;
            vl1 += (m[iv] * row[iv] - m[iv] * rbar / z).abs() * hv * hr;
            let v = &vpts[iv * dd..(iv + 1) * dd];
            for a in 0..dd {
                for b in 0..dd {
                    p[a * dd + b] += w * v[a] * v[b];
                }
            }
        }
        let mut s = 0.0;
        for a in 0..dd {
            for b in 0..dd {
                let dev = p[a * dd + b] - if a == b { beta * rbar } else { 0.0 };
                s += dev * dev;
            }
        }
        sm += s.sqrt() * hr;
        sl1 += (rbar - eta.eta[ir]).abs() * hr;
    }
    Ok(EquilibrationMetrics { eps: params.eps, velocity_l1: vl1, second_moment: sm, spatial_l1: sl1 })
}
