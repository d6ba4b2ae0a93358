//! Finite-volume solver for the kinetic Fokker–Planck equation of the chain
//! in the Maxwellian-weighted unknown `ρ̂ = ϱ/M`:
//!
//! ```text
//! ∂t ϱ − (β²/ε²) Σ ∂_{v_j}·(M ∂_{v_j} ρ̂) + (1/ε) Σ (v_j·∂_{r_j} ϱ + ((𝓛r)_j + u(r_j))·∂_{v_j} ϱ) = 0
//! ```
//!
//! with specular walls in `r` and zero flux at the velocity cut-off.
//!
//! Transport and drift fluxes are upwinded in `w = ϱ/G` with
//! `G = M(v) e^{−V(r)/β}`, and the discrete transport speed and spring force
//! are chosen so that `w ≡ const` is an exact fixed point. Each substep is
//! then a Markov kernel with invariant weight `G` when `u ≡ 0`, which makes
//! the scheme positive, conservative and entropy-dissipating.

use std::io::Write;

use rayon::prelude::*;

use crate::chain_dynamics::ChainParams;
use crate::error::{Error, Result};
use crate::flow::VelocitySampler;
use crate::geometry::{ConvexDomain, DomainKind};
use crate::grid::TensorGrid;

pub const MIN_N_V: usize = 8;
pub const FISHER_FLOOR: f64 = 1e-30;
/// Absolute round-off allowance of the Gibbs-entropy monotonicity check,
/// which matters only near the Gibbs state where the entropy itself is ~0.
pub const GIBBS_ROUNDOFF_FLOOR: f64 = 1e-14;

/// Per-component Gaussian of variance `β`, normalised on ℝ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Maxwellian {
    pub beta: f64,
}

impl Maxwellian {
    pub fn g(&self, s: f64) -> f64 {
        (-s * s / (2.0 * self.beta)).exp() / (2.0 * std::f64::consts::PI * self.beta).sqrt()
    }

    /// `M(v) = Π g(v_a)`; normalised per component so that `∫ M dv = 1` in
    /// any dimension.
    pub fn eval(&self, v: &[f64]) -> f64 {
        v.iter().map(|&s| self.g(s)).product()
    }
}

/// Tensor grid over `Ω^{J+1} × [−V_max, V_max]^{(J+1)d}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseGrid {
    pub r: TensorGrid,
    pub v: TensorGrid,
    pub beads: usize,
    pub dim: usize,
}

impl PhaseGrid {
    pub fn new(domain: &ConvexDomain, beads: usize, n_r: usize, n_v: usize, v_max: f64, beta: f64) -> Result<Self> {
        let DomainKind::Box { lo, hi } = domain.kind() else {
            return Err(Error::InvalidDomain("the phase-space solver needs a box domain".into()));
        };
        if n_v < MIN_N_V {
            return Err(Error::GridTooCoarse { n_v });
        }
        if v_max < 6.0 * beta.sqrt() * (1.0 - 1e-12) {
            return Err(Error::InvalidParameter {
                name: "v_max",
                reason: format!("{v_max} is below 6 sqrt(beta) = {}", 6.0 * beta.sqrt()),
            });
        }
        if n_r < 2 {
            return Err(Error::InvalidParameter { name: "n_r", reason: "need at least 2 cells".into() });
        }
        let d = domain.dim();
        let axes = beads * d;
        let rlo: Vec<f64> = (0..axes).map(|a| lo[a % d]).collect();
        let rhi: Vec<f64> = (0..axes).map(|a| hi[a % d]).collect();
        let r = TensorGrid::new(&rlo, &rhi, &vec![n_r; axes])?;
        let v = TensorGrid::uniform(-v_max, v_max, n_v, axes)?;
        Ok(Self { r, v, beads, dim: d })
    }

    /// Number of `(r, v)` axis pairs, `(J+1)d`.
    pub fn axes(&self) -> usize {
        self.r.ndim()
    }

    pub fn len(&self) -> usize {
        self.r.len() * self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.r.cell_volume() * self.v.cell_volume()
    }

    /// Combined grid with the `r` axes first.
    pub fn full(&self) -> TensorGrid {
        self.r.product(&self.v)
    }

    fn r_point(&self, ir: usize, out: &mut [f64]) {
        let mut idx = vec![0; self.axes()];
        self.r.unflat(ir, &mut idx);
        for a in 0..self.axes() {
            out[a] = self.r.center(a, idx[a]);
        }
    }
}

/// `ρ̂` per phase cell, `r`-major (`ρ̂[ir · N_v + iv]`).
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub grid: PhaseGrid,
    pub rho_hat: Vec<f64>,
    pub time: f64,
}

/// Potential `V(r) = (H/2) Σ_j |r_{j+1} − r_j|²` of the Hookean chain.
pub fn spring_potential(r: &[f64], d: usize, h: f64) -> f64 {
    let beads = r.len() / d;
    let mut s = 0.0;
    for j in 0..beads - 1 {
        for k in 0..d {
            let q = r[(j + 1) * d + k] - r[j * d + k];
            s += q * q;
        }
    }
    0.5 * h * s
}

impl DensityField {
    /// Accept any nonnegative values and rescale to unit `M`-weighted mass.
    pub fn from_rho_hat(grid: &PhaseGrid, beta: f64, rho_hat: Vec<f64>) -> Result<Self> {
        if rho_hat.len() != grid.len() {
            return Err(Error::GridMismatch(format!("{} values for {} cells", rho_hat.len(), grid.len())));
        }
        if let Some(x) = rho_hat.iter().find(|x| !(**x >= 0.0)) {
            return Err(Error::InvalidParameter { name: "rho_hat", reason: format!("negative or NaN value {x}") });
        }
        let mut f = Self { grid: grid.clone(), rho_hat, time: 0.0 };
        let m = f.mass(beta);
        if !(m > 0.0) {
            return Err(Error::InvalidParameter { name: "rho_hat", reason: "zero mass".into() });
        }
        f.rho_hat.iter_mut().for_each(|x| *x /= m);
        Ok(f)
    }

    /// `ρ̂(r, v) = η(r)` from a function of `r`.
    pub fn from_r_fn(grid: &PhaseGrid, beta: f64, eta: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let nv = grid.v.len();
        let mut r = vec![0.0; grid.axes()];
        let mut values = vec![0.0; grid.len()];
        for ir in 0..grid.r.len() {
            grid.r_point(ir, &mut r);
            let e = eta(&r);
            values[ir * nv..(ir + 1) * nv].fill(e);
        }
        Self::from_rho_hat(grid, beta, values)
    }

    /// `ϱ = M · uniform` on `Ω^{J+1}`.
    pub fn uniform(grid: &PhaseGrid, beta: f64) -> Result<Self> {
        Self::from_rho_hat(grid, beta, vec![1.0; grid.len()])
    }

    /// Discrete Gibbs state `ϱ ∝ M(v) e^{−V(r)/β}`.
    pub fn gibbs(grid: &PhaseGrid, params: &ChainParams) -> Result<Self> {
        let (d, h, beta) = (grid.dim, params.spring_constant, params.beta);
        Self::from_r_fn(grid, beta, |r| (-spring_potential(r, d, h) / beta).exp())
    }

    pub fn maxwellian_weights(&self, beta: f64) -> Vec<f64> {
        maxwellian_cells(&self.grid.v, beta)
    }

    /// `Σ M ρ̂ · cellvol`.
    pub fn mass(&self, beta: f64) -> f64 {
        let m = maxwellian_cells(&self.grid.v, beta);
        let nv = m.len();
        let vol = self.grid.cell_volume();
        self.rho_hat.chunks(nv).map(|row| row.iter().zip(&m).map(|(x, w)| x * w).sum::<f64>()).sum::<f64>() * vol
    }

    pub fn min(&self) -> f64 {
        self.rho_hat.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `Σ_cells |ρ̂ − other| · M · cellvol`, the `L¹` distance of the densities.
    pub fn l1_distance(&self, other: &DensityField, beta: f64) -> f64 {
        let m = maxwellian_cells(&self.grid.v, beta);
        let nv = m.len();
        let vol = self.grid.cell_volume();
        self.rho_hat.iter().zip(&other.rho_hat).enumerate().map(|(c, (a, b))| (a - b).abs() * m[c % nv]).sum::<f64>() * vol
    }
}

/// Point values of `M` at the velocity cell centres.
pub fn maxwellian_cells(v: &TensorGrid, beta: f64) -> Vec<f64> {
    let mw = Maxwellian { beta };
    let mut idx = vec![0; v.ndim()];
    (0..v.len())
        .map(|c| {
            v.unflat(c, &mut idx);
            (0..v.ndim()).map(|a| mw.g(v.center(a, idx[a]))).product()
        })
        .collect()
}

/// Precomputed coefficients of the discrete operator.
#[derive(Debug, Clone)]
pub struct FpOperator {
    pub grid: PhaseGrid,
    pub params: ChainParams,
    pub alpha: f64,
    m: Vec<f64>,
    /// Per axis, 1-D Gaussian at cell centres and at faces (`n_v + 1`, zero
    /// at the cut-off).
    g_cell: Vec<f64>,
    g_face: Vec<f64>,
    /// Discrete transport speed `s_a(iv)`, `v`-major with `D` entries.
    speed: Vec<f64>,
    /// `M` on the upper/lower `v_a` face of each velocity cell.
    m_up: Vec<f64>,
    m_lo: Vec<f64>,
    /// `E = e^{−V/β}` at `r` cell centres and on the upper/lower `r_a` faces.
    e_cell: Vec<f64>,
    e_up: Vec<f64>,
    e_lo: Vec<f64>,
    /// Discrete spring force per `r` cell and axis.
    force: Vec<f64>,
    r_points: Vec<f64>,
}

/// Build the discrete operator; `alpha ≥ 0` adds `α ∂_r·(M ∂_r ρ̂)`.
pub fn assemble_fp_operator(grid: &PhaseGrid, params: &ChainParams, alpha: f64) -> Result<FpOperator> {
    params.validate()?;
    let nv1 = grid.v.shape()[0];
    if nv1 < MIN_N_V {
        return Err(Error::GridTooCoarse { n_v: nv1 });
    }
    if params.beads() != grid.beads || params.dim != grid.dim {
        return Err(Error::GridMismatch("chain parameters do not match the phase grid".into()));
    }
    if !(alpha >= 0.0) {
        return Err(Error::InvalidParameter { name: "alpha", reason: "must be nonnegative".into() });
    }
    let beta = params.beta;
    let dd = grid.axes();
    let mw = Maxwellian { beta };
    let hv = grid.v.spacing()[0];
    let g_cell: Vec<f64> = (0..nv1).map(|k| mw.g(grid.v.center(0, k))).collect();
    let mut g_face: Vec<f64> = (0..=nv1).map(|k| mw.g(grid.v.face(0, k))).collect();
    g_face[0] = 0.0;
    g_face[nv1] = 0.0;

    let m = maxwellian_cells(&grid.v, beta);
    let nv = grid.v.len();
    let mut speed = vec![0.0; nv * dd];
    let mut m_up = vec![0.0; nv * dd];
    let mut m_lo = vec![0.0; nv * dd];
    let mut idx = vec![0; dd];
    for iv in 0..nv {
        grid.v.unflat(iv, &mut idx);
        for a in 0..dd {
            let k = idx[a];
            let others = m[iv] / g_cell[k];
            m_up[iv * dd + a] = others * g_face[k + 1];
            m_lo[iv * dd + a] = others * g_face[k];
            speed[iv * dd + a] = -beta * (g_face[k + 1] - g_face[k]) / (hv * g_cell[k]);
        }
    }

    let nr = grid.r.len();
    let d = grid.dim;
    let mut e_cell = vec![0.0; nr];
    let mut e_up = vec![0.0; nr * dd];
    let mut e_lo = vec![0.0; nr * dd];
    let mut force = vec![0.0; nr * dd];
    let mut r_points = vec![0.0; nr * dd];
    let mut r = vec![0.0; dd];
    for ir in 0..nr {
        grid.r.unflat(ir, &mut idx);
        for a in 0..dd {
            r[a] = grid.r.center(a, idx[a]);
        }
        r_points[ir * dd..(ir + 1) * dd].copy_from_slice(&r);
        let e = (-spring_potential(&r, d, params.spring_constant) / beta).exp();
        e_cell[ir] = e;
        for a in 0..dd {
            let c = r[a];
            r[a] = grid.r.face(a, idx[a] + 1);
            let up = (-spring_potential(&r, d, params.spring_constant) / beta).exp();
            r[a] = grid.r.face(a, idx[a]);
            let lo = (-spring_potential(&r, d, params.spring_constant) / beta).exp();
            r[a] = c;
            e_up[ir * dd + a] = up;
            e_lo[ir * dd + a] = lo;
            force[ir * dd + a] = beta * (up - lo) / (grid.r.spacing()[a] * e);
        }
    }
    Ok(FpOperator {
        grid: grid.clone(),
        params: *params,
        alpha,
        m,
        g_cell,
        g_face,
        speed,
        m_up,
        m_lo,
        e_cell,
        e_up,
        e_lo,
        force,
        r_points,
    })
}

/// What a time step observed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub min_before_clip: f64,
    pub clipped: bool,
}

impl FpOperator {
    fn axes(&self) -> usize {
        self.grid.axes()
    }

    /// `u_a` at every `r` cell (component `a % d` of `u` at bead `a / d`).
    fn sample_flow(&self, u: &dyn VelocitySampler) -> Vec<f64> {
        let dd = self.axes();
        let d = self.grid.dim;
        let nr = self.grid.r.len();
        let mut out = vec![0.0; nr * dd];
        let mut buf = vec![0.0; d];
        for ir in 0..nr {
            for j in 0..self.grid.beads {
                let p = &self.r_points[ir * dd + j * d..ir * dd + (j + 1) * d];
                u.sample_into(p, &mut buf);
                out[ir * dd + j * d..ir * dd + (j + 1) * d].copy_from_slice(&buf);
            }
        }
        out
    }

    /// Largest stable step of the explicit transport/drift substep for the
    /// flow `u`.
    pub fn stability_bound(&self, u: &dyn VelocitySampler) -> f64 {
        let uf = self.sample_flow(u);
        self.rate(&uf).recip()
    }

    fn rate(&self, uf: &[f64]) -> f64 {
        // every axis term depends only on the velocity index along that
        // axis, so the maximum over velocity cells splits into per-axis
        // maxima over the 1-D profiles
        let dd = self.axes();
        let nv1 = self.grid.v.shape()[0];
        let inv_eps = 1.0 / self.params.eps;
        let hr = self.grid.r.spacing();
        let hv = self.grid.v.spacing()[0];
        let beta = self.params.beta;
        let alpha_rate: f64 = (0..dd).map(|a| 2.0 * self.alpha / (hr[a] * hr[a])).sum();
        let sp: Vec<f64> = (0..nv1).map(|k| -beta * (self.g_face[k + 1] - self.g_face[k]) / (hv * self.g_cell[k])).collect();
        let up: Vec<f64> = (0..nv1).map(|k| self.g_face[k + 1] / self.g_cell[k]).collect();
        let lo: Vec<f64> = (0..nv1).map(|k| self.g_face[k] / self.g_cell[k]).collect();
        (0..self.grid.r.len())
            .into_par_iter()
            .map(|ir| {
                let mut s = alpha_rate;
                for a in 0..dd {
                    let f = self.force[ir * dd + a] + uf[ir * dd + a];
                    let worst = (0..nv1)
                        .map(|k| {
                            let ef = if sp[k] > 0.0 { self.e_up[ir * dd + a] } else { self.e_lo[ir * dd + a] };
                            let mf = if f > 0.0 { up[k] } else { lo[k] };
                            inv_eps * (sp[k].abs() * ef / (hr[a] * self.e_cell[ir]) + f.abs() * mf / hv)
                        })
                        .fold(0.0f64, f64::max);
                    s += worst;
                }
                s
            })
            .reduce(|| 0.0, f64::max)
    }

    /// Time derivative of `ρ̂` from transport, drift and (if `alpha > 0`)
    /// `r`-diffusion, in conservative flux form.
    fn transport_rhs(&self, rho: &[f64], uf: &[f64]) -> Vec<f64> {
        let dd = self.axes();
        let nv = self.grid.v.len();
        let nv1 = self.grid.v.shape()[0];
        let inv_eps = 1.0 / self.params.eps;
        let hr = self.grid.r.spacing().to_vec();
        let hv = self.grid.v.spacing()[0];
        let rshape = self.grid.r.shape().to_vec();
        let mut w_all = vec![0.0; rho.len()];
        w_all.par_chunks_mut(nv).zip(rho.par_chunks(nv)).enumerate().for_each(|(ir, (w, r))| {
            let inv = 1.0 / self.e_cell[ir];
            w.iter_mut().zip(r).for_each(|(w, r)| *w = r * inv);
        });
        let wa = &w_all;
        let vstride: Vec<usize> = (0..dd).map(|a| self.grid.v.stride(a)).collect();
        let rstride: Vec<usize> = (0..dd).map(|a| self.grid.r.stride(a) * nv).collect();
        let mut out = vec![0.0; rho.len()];
        out.par_chunks_mut(nv).enumerate().for_each(|(ir, row)| {
            let mut ridx = vec![0; dd];
            self.grid.r.unflat(ir, &mut ridx);
            let mut vidx = vec![0; dd];
            for iv in 0..nv {
                if iv > 0 {
                    // row-major increment of the velocity index
                    let mut a = dd - 1;
                    vidx[a] += 1;
                    while vidx[a] == nv1 {
                        vidx[a] = 0;
                        a -= 1;
                        vidx[a] += 1;
                    }
                }
                let c = ir * nv + iv;
                let w = wa[c];
                let mut div = 0.0;
                for a in 0..dd {
                    let rs = rstride[a];
                    let n = rshape[a];
                    let i = ridx[a];
                    let sp = self.speed[iv * dd + a];
                    let mc = self.m[iv];
                    // r_a faces; wall outflow re-enters at the mirrored velocity
                    let mirror = |k: usize| iv + (nv1 - 1 - k) * vstride[a] - k * vstride[a];
                    let up = if i + 1 < n {
                        let wn = wa[c + rs];
                        inv_eps * sp * self.e_up[ir * dd + a] * mc * if sp > 0.0 { w } else { wn }
                    } else if sp > 0.0 {
                        inv_eps * sp * self.e_up[ir * dd + a] * mc * w
                    } else {
                        let ivm = mirror(vidx[a]);
                        -inv_eps * self.speed[ivm * dd + a] * self.e_up[ir * dd + a] * self.m[ivm] * wa[ir * nv + ivm]
                    };
                    let lo = if i > 0 {
                        let wn = wa[c - rs];
                        inv_eps * sp * self.e_lo[ir * dd + a] * mc * if sp > 0.0 { wn } else { w }
                    } else if sp < 0.0 {
                        inv_eps * sp * self.e_lo[ir * dd + a] * mc * w
                    } else {
                        let ivm = mirror(vidx[a]);
                        -inv_eps * self.speed[ivm * dd + a] * self.e_lo[ir * dd + a] * self.m[ivm] * wa[ir * nv + ivm]
                    };
                    div += (up - lo) / hr[a];
                    if self.alpha > 0.0 {
                        let mut s = 0.0;
                        if i + 1 < n {
                            s += rho[c + rs] - rho[c];
                        }
                        if i > 0 {
                            s -= rho[c] - rho[c - rs];
                        }
                        div -= self.alpha * mc * s / (hr[a] * hr[a]);
                    }
                    // v_a faces, zero flux at the cut-off
                    let vs = vstride[a];
                    let k = vidx[a];
                    let f = self.force[ir * dd + a] + uf[ir * dd + a];
                    let vup = if k + 1 < nv1 {
                        inv_eps * f * self.m_up[iv * dd + a] * if f > 0.0 { rho[c] } else { rho[c + vs] }
                    } else {
                        0.0
                    };
                    let vlo = if k > 0 {
                        inv_eps * f * self.m_lo[iv * dd + a] * if f > 0.0 { rho[c - vs] } else { rho[c] }
                    } else {
                        0.0
                    };
                    div += (vup - vlo) / hv;
                }
                // flux divergence is for ϱ = M ρ̂
                row[iv] = -div / self.m[iv];
            }
        });
        out
    }

    /// Velocity-diffusion term `(β²/ε²) Σ ∂_{v_a}(M ∂_{v_a} ρ̂) / M`.
    fn diffusion_rhs(&self, rho: &[f64]) -> Vec<f64> {
        let dd = self.axes();
        let nv = self.grid.v.len();
        let nv1 = self.grid.v.shape()[0];
        let hv = self.grid.v.spacing()[0];
        let beta = self.params.beta;
        let kappa = beta * beta / (self.params.eps * self.params.eps * hv * hv);
        let mut out = vec![0.0; rho.len()];
        out.par_chunks_mut(nv).enumerate().for_each(|(ir, row)| {
            let mut vidx = vec![0; dd];
            for iv in 0..nv {
                self.grid.v.unflat(iv, &mut vidx);
                let c = ir * nv + iv;
                // each axis contributes g_face-weighted differences over g_cell
                let mut t = 0.0;
                for a in 0..dd {
                    let k = vidx[a];
                    let st = self.grid.v.stride(a);
                    let mut fa = 0.0;
                    if k + 1 < nv1 {
                        fa += self.g_face[k + 1] * (rho[c + st] - rho[c]);
                    }
                    if k > 0 {
                        fa -= self.g_face[k] * (rho[c] - rho[c - st]);
                    }
                    t += fa / self.g_cell[k];
                }
                row[iv] = kappa * t;
            }
        });
        out
    }

    /// Full spatial operator `∂t ρ̂` (explicit evaluation).
    pub fn apply(&self, rho: &DensityField, u: &dyn VelocitySampler) -> Vec<f64> {
        let uf = self.sample_flow(u);
        let mut t = self.transport_rhs(&rho.rho_hat, &uf);
        let dv = self.diffusion_rhs(&rho.rho_hat);
        t.iter_mut().zip(&dv).for_each(|(a, b)| *a += b);
        t
    }

    /// Implicit velocity diffusion over `tau` along every `v` axis
    /// (tridiagonal solve per line).
    fn diffuse(&self, rho: &mut [f64], tau: f64) {
        let dd = self.axes();
        let nv = self.grid.v.len();
        let nv1 = self.grid.v.shape()[0];
        let hv = self.grid.v.spacing()[0];
        let beta = self.params.beta;
        let lambda = tau * beta * beta / (self.params.eps * self.params.eps * hv * hv);
        let (g, gf) = (&self.g_cell, &self.g_face);
        let lower: Vec<f64> = (0..nv1).map(|k| -lambda * gf[k]).collect();
        let upper: Vec<f64> = (0..nv1).map(|k| -lambda * gf[k + 1]).collect();
        let diag: Vec<f64> = (0..nv1).map(|k| g[k] + lambda * (gf[k] + gf[k + 1])).collect();
        // the matrix is the same on every line: factor once
        let mut cp = vec![0.0; nv1];
        let mut inv = vec![0.0; nv1];
        for k in 0..nv1 {
            let m = if k == 0 { diag[0] } else { diag[k] - lower[k] * cp[k - 1] };
            inv[k] = 1.0 / m;
            cp[k] = upper[k] * inv[k];
        }
        rho.par_chunks_mut(nv).for_each(|row| {
            let mut dp = vec![0.0; nv1];
            for a in 0..dd {
                let st = self.grid.v.stride(a);
                for base in 0..nv {
                    // visit each line once, from its first cell
                    if !(base / st).is_multiple_of(nv1) {
                        continue;
                    }
                    dp[0] = g[0] * row[base] * inv[0];
                    for k in 1..nv1 {
                        dp[k] = (g[k] * row[base + k * st] - lower[k] * dp[k - 1]) * inv[k];
                    }
                    row[base + (nv1 - 1) * st] = dp[nv1 - 1];
                    for k in (0..nv1 - 1).rev() {
                        row[base + k * st] = dp[k] - cp[k] * row[base + (k + 1) * st];
                    }
                }
            }
        });
    }

    /// One Strang step `D(dt/2) T(dt) D(dt/2)` with the flow frozen over the
    /// step. Negative values below round-off are clipped and the mass is
    /// restored.
    pub fn step(&self, rho: &mut DensityField, dt: f64, u: &dyn VelocitySampler) -> Result<StepReport> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter { name: "dt", reason: "must be positive".into() });
        }
        if rho.grid != self.grid {
            return Err(Error::GridMismatch("density and operator grids differ".into()));
        }
        let uf = self.sample_flow(u);
        let bound = self.rate(&uf).recip();
        if dt > bound {
            return Err(Error::StabilityViolation { dt, bound });
        }
        self.diffuse(&mut rho.rho_hat, 0.5 * dt);
        let t = self.transport_rhs(&rho.rho_hat, &uf);
        rho.rho_hat.iter_mut().zip(&t).for_each(|(x, y)| *x += dt * y);
        self.diffuse(&mut rho.rho_hat, 0.5 * dt);
        rho.time += dt;
        let min = rho.min();
        let mut clipped = false;
        if min < 0.0 {
            let before = rho.mass(self.params.beta);
            rho.rho_hat.iter_mut().for_each(|x| *x = x.max(0.0));
            let after = rho.mass(self.params.beta);
            rho.rho_hat.iter_mut().for_each(|x| *x *= before / after);
            clipped = true;
            log::debug!("clipped negative density (min {min:e}) at t = {}", rho.time);
        }
        Ok(StepReport { min_before_clip: min, clipped })
    }

    /// Entropy of `ϱ` relative to the normalised Gibbs measure
    /// `G / ∫G`, i.e. `∫ ϱ log(ϱ / g)`.
    pub fn gibbs_entropy(&self, rho: &DensityField) -> f64 {
        let nv = self.grid.v.len();
        let vol = self.grid.cell_volume();
        let z: f64 = self.e_cell.iter().sum::<f64>() * self.m.iter().sum::<f64>() * vol;
        let mut s = 0.0;
        for ir in 0..self.grid.r.len() {
            let e = self.e_cell[ir] / z;
            for iv in 0..nv {
                let g = e * self.m[iv];
                s += g * entropy_density(rho.rho_hat[ir * nv + iv] * self.m[iv] / g);
            }
        }
        s * vol
    }
}

/// `ℱ(s) = s (log s − 1) + 1`, with `ℱ(0) = 1`.
pub fn entropy_density(s: f64) -> f64 {
    if s <= 0.0 {
        1.0
    } else {
        s * (s.ln() - 1.0) + 1.0
    }
}

/// One step of the kinetic solver (see [`FpOperator::step`]).
pub fn step_fp(op: &FpOperator, rho: &mut DensityField, dt: f64, u: &dyn VelocitySampler) -> Result<StepReport> {
    op.step(rho, dt, u)
}

/// `Σ M ℱ(ρ̂) · cellvol`.
pub fn relative_entropy(rho: &DensityField, beta: f64) -> f64 {
    let m = maxwellian_cells(&rho.grid.v, beta);
    let nv = m.len();
    rho.rho_hat.iter().enumerate().map(|(c, &x)| m[c % nv] * entropy_density(x)).sum::<f64>() * rho.grid.cell_volume()
}

/// `Σ_a Σ M |∂_{v_a} ρ̂|² / max(ρ̂, floor) · cellvol`, differences taken on
/// the interior velocity faces.
pub fn fisher_dissipation(rho: &DensityField, beta: f64) -> f64 {
    let g = &rho.grid;
    let dd = g.axes();
    let nv = g.v.len();
    let nv1 = g.v.shape()[0];
    let hv = g.v.spacing()[0];
    let mw = Maxwellian { beta };
    let m = maxwellian_cells(&g.v, beta);
    let mut idx = vec![0; dd];
    let mut s = 0.0;
    for iv in 0..nv {
        g.v.unflat(iv, &mut idx);
        for a in 0..dd {
            let k = idx[a];
            if k + 1 >= nv1 {
                continue;
            }
            let st = g.v.stride(a);
            let mf = m[iv] / mw.g(g.v.center(a, k)) * mw.g(g.v.face(a, k + 1));
            for ir in 0..g.r.len() {
                let (x0, x1) = (rho.rho_hat[ir * nv + iv], rho.rho_hat[ir * nv + iv + st]);
                let grad = (x1 - x0) / hv;
                s += mf * grad * grad / (0.5 * (x0 + x1)).max(FISHER_FLOOR);
            }
        }
    }
    s * g.cell_volume()
}

/// One-dimensional Fisher information `∫ g |f'|²/f dv` of nodal values on
/// a uniform velocity grid, with the same face discretisation.
pub fn fisher_1d(v: &TensorGrid, values: &[f64], beta: f64) -> f64 {
    let mw = Maxwellian { beta };
    let h = v.spacing()[0];
    (0..values.len() - 1)
        .map(|k| {
            let grad = (values[k + 1] - values[k]) / h;
            mw.g(v.face(0, k + 1)) * grad * grad / (0.5 * (values[k] + values[k + 1])).max(FISHER_FLOOR) * h
        })
        .sum()
}

/// `(β²/ε²) ∂_v(g ∂_v f)/g` of nodal values in one velocity dimension, with
/// zero flux at the ends.
pub fn velocity_diffusion_1d(v: &TensorGrid, values: &[f64], beta: f64, eps: f64) -> Vec<f64> {
    let mw = Maxwellian { beta };
    let h = v.spacing()[0];
    let n = values.len();
    let k2 = beta * beta / (eps * eps * h * h);
    (0..n)
        .map(|k| {
            let mut s = 0.0;
            if k + 1 < n {
                s += mw.g(v.face(0, k + 1)) * (values[k + 1] - values[k]);
            }
            if k > 0 {
                s -= mw.g(v.face(0, k)) * (values[k] - values[k - 1]);
            }
            k2 * s / mw.g(v.center(0, k))
        })
        .collect()
}

/// Velocity moments on the `r` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FpMoments {
    pub rho_bar: Vec<f64>,
    /// `(1/ε) ∫ M v_a ρ̂ dv`, `D` entries per `r` cell.
    pub current: Vec<f64>,
    /// `∫ M v_a v_b ρ̂ dv`, `D × D` entries per `r` cell.
    pub second: Vec<f64>,
}

pub fn moments(rho: &DensityField, beta: f64, eps: f64) -> FpMoments {
    let g = &rho.grid;
    let dd = g.axes();
    let nv = g.v.len();
    let nr = g.r.len();
    let m = maxwellian_cells(&g.v, beta);
    let hvol = g.v.cell_volume();
    let mut idx = vec![0; dd];
    let vpts: Vec<f64> = (0..nv)
        .flat_map(|iv| {
            g.v.unflat(iv, &mut idx);
            (0..dd).map(|a| g.v.center(a, idx[a])).collect::<Vec<_>>()
        })
        .collect();
    let mut rho_bar = vec![0.0; nr];
    let mut current = vec![0.0; nr * dd];
    let mut second = vec![0.0; nr * dd * dd];
    for ir in 0..nr {
        for iv in 0..nv {
            let w = m[iv] * rho.rho_hat[ir * nv + iv] * hvol;
            if w == 0.0 {
                continue;
            }
            rho_bar[ir] += w;
            let v = &vpts[iv * dd..(iv + 1) * dd];
            for a in 0..dd {
                current[ir * dd + a] += w * v[a] / eps;
                for b in 0..dd {
                    second[(ir * dd + a) * dd + b] += w * v[a] * v[b];
                }
            }
        }
    }
    FpMoments { rho_bar, current, second }
}

/// Diagnostics of a kinetic run, one row per recorded time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpDiagnostics {
    pub time: f64,
    pub mass: f64,
    pub entropy: f64,
    pub gibbs_entropy: f64,
    pub dissipation: f64,
    pub min_rho: f64,
    /// `max ‖u‖_∞` over the step that ended here.
    pub u_sup: f64,
}

impl FpDiagnostics {
    pub fn record(op: &FpOperator, rho: &DensityField, u_sup: f64) -> Self {
        let beta = op.params.beta;
        Self {
            time: rho.time,
            mass: rho.mass(beta),
            entropy: relative_entropy(rho, beta),
            gibbs_entropy: op.gibbs_entropy(rho),
            dissipation: fisher_dissipation(rho, beta),
            min_rho: rho.min(),
            u_sup,
        }
    }

    pub fn write_csv<W: Write>(rows: &[FpDiagnostics], mut w: W) -> std::io::Result<()> {
        writeln!(w, "time,mass,entropy,gibbs_entropy,dissipation,min_rho")?;
        for r in rows {
            writeln!(
                w,
                "{:e},{:.17e},{:.17e},{:.17e},{:.17e},{:e}",
                r.time, r.mass, r.entropy, r.gibbs_entropy, r.dissipation, r.min_rho
            )?;
        }
        Ok(())
    }
}

/// Energy-inequality audit of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub times: Vec<f64>,
    /// `∫ M ℱ(ρ̂(t)) + (β²/2ε²) ∫₀ᵗ D`.
    pub lhs: Vec<f64>,
    /// Initial entropy plus `(16/β)(J+1)d L² t + (J+1)/β ∫₀ᵗ ‖u‖²_∞`.
    pub rhs: Vec<f64>,
    pub dissipation_integral: Vec<f64>,
    pub violations: Vec<usize>,
    /// Steps at which the Gibbs-relative entropy rose by more than
    /// `1e-12 ·` its value (at least [`GIBBS_ROUNDOFF_FLOOR`]).
    pub gibbs_increases: Vec<usize>,
}

/// Check the entropy inequality along recorded diagnostics; `half_width` is
/// the `L` of the configuration domain.
pub fn check_energy_inequality(rows: &[FpDiagnostics], params: &ChainParams, half_width: f64) -> EnergyReport {
    let beta = params.beta;
    let c_diss = beta * beta / (2.0 * params.eps * params.eps);
    let c_lin = 16.0 / beta * (params.beads() * params.dim) as f64 * half_width * half_width;
    let c_u = params.beads() as f64 / beta;
    let mut rep = EnergyReport {
        times: Vec::new(),
        lhs: Vec::new(),
        rhs: Vec::new(),
        dissipation_integral: Vec::new(),
        violations: Vec::new(),
        gibbs_increases: Vec::new(),
    };
    let Some(first) = rows.first() else { return rep };
    let (mut diss, mut uint) = (0.0, 0.0);
    for (n, r) in rows.iter().enumerate() {
        if n > 0 {
            let p = &rows[n - 1];
            let dt = r.time - p.time;
            diss += 0.5 * dt * (r.dissipation + p.dissipation);
            uint += dt * r.u_sup * r.u_sup;
            if r.gibbs_entropy > p.gibbs_entropy + (1e-12 * p.gibbs_entropy.abs()).max(GIBBS_ROUNDOFF_FLOOR) {
                rep.gibbs_increases.push(n);
            }
        }
        let lhs = r.entropy + c_diss * diss;
        let rhs = first.entropy + c_lin * (r.time - first.time) + c_u * uint;
        if lhs > rhs * (1.0 + 1e-12) {
            rep.violations.push(n);
        }
        rep.times.push(r.time);
        rep.lhs.push(lhs);
        rep.rhs.push(rhs);
        rep.dissipation_integral.push(diss);
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{FnFlow, ZeroFlow};
    use crate::quadrature::gauss_legendre_on;

    fn desk(n_r: usize, n_v: usize, eps: f64) -> (PhaseGrid, ChainParams) {
        let dom = ConvexDomain::cube(1.0, 1).unwrap();
        let g = PhaseGrid::new(&dom, 2, n_r, n_v, 6.0, 1.0).unwrap();
        (g, ChainParams::new(1, 1, eps, 1.0, 1.0).unwrap())
    }

    #[test]
    fn maxwellian_is_normalised_and_even() {
        let v = TensorGrid::uniform(-6.0, 6.0, 32, 2).unwrap();
        let m = maxwellian_cells(&v, 1.0);
        let total: f64 = m.iter().sum::<f64>() * v.cell_volume();
        assert!((total - 1.0).abs() < 1e-8);
        let mw = Maxwellian { beta: 1.3 };
        assert_eq!(mw.eval(&[0.4, -1.2]), mw.eval(&[-0.4, 1.2]));
    }

    #[test]
    fn grid_validation() {
        let dom = ConvexDomain::cube(1.0, 1).unwrap();
        assert!(matches!(PhaseGrid::new(&dom, 2, 8, 6, 6.0, 1.0), Err(Error::GridTooCoarse { n_v: 6 })));
        assert!(PhaseGrid::new(&dom, 2, 8, 8, 5.0, 1.0).is_err());
        let disk = ConvexDomain::disk(1.0, 2).unwrap();
        assert!(PhaseGrid::new(&disk, 2, 8, 8, 6.0, 1.0).is_err());
    }

    #[test]
    fn constant_density_has_zero_mass_derivative() {
        let (g, p) = desk(6, 8, 0.5);
        let op = assemble_fp_operator(&g, &p, 0.0).unwrap();
        let rho = DensityField::uniform(&g, 1.0).unwrap();
        let rhs = op.apply(&rho, &ZeroFlow { dim: 1 });
        let m = maxwellian_cells(&g.v, 1.0);
        let nv = m.len();
        let dm: f64 = rhs.iter().enumerate().map(|(c, x)| x * m[c % nv]).sum::<f64>() * g.cell_volume();
        assert!(dm.abs() < 1e-13, "{dm}");
    }

    #[test]
    fn gibbs_state_is_a_discrete_fixed_point() {
        let (g, p) = desk(8, 12, 0.7);
        let op = assemble_fp_operator(&g, &p, 0.0).unwrap();
        let rho = DensityField::gibbs(&g, &p).unwrap();
        let rhs = op.apply(&rho, &ZeroFlow { dim: 1 });
        let max = rhs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(max < 1e-11, "{max}");
    }

    #[test]
    fn pure_velocity_diffusion_of_linear_data() {
        let v = TensorGrid::uniform(-6.0, 6.0, 400, 1).unwrap();
        let (beta, eps) = (1.5, 0.8);
        let vals: Vec<f64> = v.centers(0);
        let out = velocity_diffusion_1d(&v, &vals, beta, eps);
        let h = v.spacing()[0];
        for k in 100..300 {
            let exact = -(beta / (eps * eps)) * v.center(0, k);
            assert!((out[k] - exact).abs() < 2.0 * h * h * (1.0 + exact.abs()), "{k}");
        }
    }

    #[test]
    fn alpha_zero_has_no_r_diffusion() {
        let (g, p) = desk(6, 8, 1.0);
        let op0 = assemble_fp_operator(&g, &p, 0.0).unwrap();
        let op1 = assemble_fp_operator(&g, &p, 1e-2).unwrap();
        // r-dependent, v-independent data: only r fluxes differ
        let rho = DensityField::from_r_fn(&g, 1.0, |r| 1.0 + r[0] * r[0]).unwrap();
        let a = op0.apply(&rho, &ZeroFlow { dim: 1 });
        let b = op1.apply(&rho, &ZeroFlow { dim: 1 });
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
        let op0b = assemble_fp_operator(&g, &p, 0.0).unwrap();
        assert_eq!(op0b.apply(&rho, &ZeroFlow { dim: 1 }), a);
    }

    #[test]
    fn step_conserves_mass_and_positivity_with_flow() {
        let (g, p) = desk(8, 10, 0.5);
        let op = assemble_fp_operator(&g, &p, 1e-2).unwrap();
        let mut rho = DensityField::from_rho_hat(&g, 1.0, (0..g.len()).map(|c| 1.0 + ((c * 37) % 11) as f64).collect()).unwrap();
        let u = FnFlow::new(1, |x: &[f64], out: &mut [f64]| out[0] = 0.5 * (1.0 - x[0] * x[0]));
        let dt = 0.5 * op.stability_bound(&u);
        for _ in 0..50 {
            let rep = op.step(&mut rho, dt, &u).unwrap();
            assert!(rep.min_before_clip >= -1e-12);
        }
        assert!((rho.mass(1.0) - 1.0).abs() < 1e-12);
        assert!(matches!(op.step(&mut rho, 10.0 * dt / 0.5, &u), Err(Error::StabilityViolation { .. })));
    }

    #[test]
    fn gibbs_entropy_decreases() {
        let (g, p) = desk(8, 10, 0.5);
        let op = assemble_fp_operator(&g, &p, 0.0).unwrap();
        let mut rho = DensityField::from_r_fn(&g, 1.0, |r| (1.0 + r[0]).powi(2) + 0.1).unwrap();
        let u = ZeroFlow { dim: 1 };
        let dt = 0.5 * op.stability_bound(&u);
        let mut prev = op.gibbs_entropy(&rho);
        for _ in 0..40 {
            op.step(&mut rho, dt, &u).unwrap();
            let h = op.gibbs_entropy(&rho);
            assert!(h <= prev * (1.0 + 1e-12), "{h} > {prev}");
            prev = h;
        }
    }

    #[test]
    fn zero_coefficients_leave_density_unchanged() {
        // u ≡ 0, Gibbs data: every flux vanishes up to round-off
        let (g, p) = desk(6, 8, 1.0);
        let op = assemble_fp_operator(&g, &p, 0.0).unwrap();
        let rho0 = DensityField::gibbs(&g, &p).unwrap();
        let mut rho = rho0.clone();
        op.step(&mut rho, 1e-3, &ZeroFlow { dim: 1 }).unwrap();
        assert!(rho.l1_distance(&rho0, 1.0) < 1e-13);
    }

    #[test]
    fn entropy_examples() {
        let (g, _) = desk(4, 16, 1.0);
        let one = DensityField { grid: g.clone(), rho_hat: vec![1.0; g.len()], time: 0.0 };
        assert_eq!(relative_entropy(&one, 1.0), 0.0);
        let e = DensityField { grid: g.clone(), rho_hat: vec![std::f64::consts::E; g.len()], time: 0.0 };
        // ℱ(e) = 1 times the quadrature of M over Ω² (area 4)
        let m: f64 = maxwellian_cells(&g.v, 1.0).iter().sum::<f64>() * g.v.cell_volume();
        assert!((relative_entropy(&e, 1.0) - 4.0 * m).abs() < 1e-12);
        assert_eq!(entropy_density(0.0), 1.0);
        assert_eq!(fisher_dissipation(&one, 1.0), 0.0);
    }

    #[test]
    fn fisher_1d_matches_quadrature() {
        let v = TensorGrid::uniform(-6.0, 6.0, 2000, 1).unwrap();
        let vals: Vec<f64> = v.centers(0).iter().map(|s| 1.0 + 0.1 * s.sin()).collect();
        let d = fisher_1d(&v, &vals, 1.0);
        let mw = Maxwellian { beta: 1.0 };
        let (x, w) = gauss_legendre_on(200, -6.0, 6.0);
        let exact: f64 = x.iter().zip(&w).map(|(&s, &w)| w * mw.g(s) * (0.1 * s.cos()).powi(2) / (1.0 + 0.1 * s.sin())).sum();
        assert!((d - exact).abs() < 1e-4, "{d} vs {exact}");
    }

    #[test]
    fn moments_of_factorised_data() {
        let (g, _) = desk(4, 32, 0.5);
        let rho = DensityField::from_r_fn(&g, 1.0, |r| 1.0 + 0.5 * r[0]).unwrap();
        let mo = moments(&rho, 1.0, 0.5);
        let total: f64 = mo.rho_bar.iter().sum::<f64>() * g.r.cell_volume();
        assert!((total - 1.0).abs() < 1e-10);
        assert!(mo.current.iter().all(|x| x.abs() < 1e-13));
        for ir in 0..g.r.len() {
            let rb = mo.rho_bar[ir];
            let p = &mo.second[ir * 4..ir * 4 + 4];
            assert!((p[0] / rb - 1.0).abs() < 1e-6);
            assert!((p[3] / rb - 1.0).abs() < 1e-6);
            assert!(p[1].abs() < 1e-13 * rb && p[2].abs() < 1e-13 * rb, "{p:?} {rb}");
        }
    }

    #[test]
    fn energy_report_flags_nothing_on_a_relaxing_run() {
        let (g, p) = desk(6, 8, 0.5);
        let op = assemble_fp_operator(&g, &p, 0.0).unwrap();
        let mut rho = DensityField::from_r_fn(&g, 1.0, |r| 1.0 + r[1]).unwrap();
        let u = ZeroFlow { dim: 1 };
        let dt = 0.5 * op.stability_bound(&u);
        let mut rows = vec![FpDiagnostics::record(&op, &rho, 0.0)];
        for _ in 0..20 {
            op.step(&mut rho, dt, &u).unwrap();
            rows.push(FpDiagnostics::record(&op, &rho, 0.0));
        }
        let rep = check_energy_inequality(&rows, &p, 2.0);
        assert!(rep.violations.is_empty());
        assert!(rep.gibbs_increases.is_empty());
        assert!(rep.dissipation_integral.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(rep.lhs[0], rows[0].entropy);
    }
}
