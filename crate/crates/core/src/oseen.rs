//! Unsteady Oseen flow on a 2-D box with no-slip walls:
//!
//! ```text
//! ∂t u + (b·∇)u − μΔu + ∇π = f,   ∇·u = 0,   u|∂Ω = 0
//! ```
//!
//! on a MAC grid. Velocity components live on cell faces, pressure at cell
//! centres. Tangential no-slip uses mirrored ghost values, so the wall value
//! of every interpolant is exactly zero.

use std::io::Write;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::flow::{CellularFlow, VelocitySampler};
use crate::grid::TensorGrid;
use crate::stress::StressField;

pub const TOL_DIV: f64 = 1e-10;
const TOL_SOLVE: f64 = 1e-10;

/// Stream function `ψ(x, y)` of the advecting field `b = (∂_y ψ, −∂_x ψ)`.
pub type StreamFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

#[derive(Clone, Default)]
pub enum Advection {
    #[default]
    None,
    Cellular(CellularFlow),
    Stream(StreamFn),
}

impl Advection {
    fn stream(&self, x: f64, y: f64) -> f64 {
        match self {
            Advection::None => 0.0,
            Advection::Cellular(c) => c.stream_function(x, y),
            Advection::Stream(f) => f(x, y),
        }
    }
}

impl std::fmt::Debug for Advection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Advection::None => write!(f, "None"),
            Advection::Cellular(c) => write!(f, "Cellular({c:?})"),
            Advection::Stream(_) => write!(f, "Stream(..)"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Projection {
    /// Pressure-correction form: the old pressure gradient enters the
    /// momentum predictor and only the increment is projected.
    #[default]
    Incremental,
    /// Chorin's original form: no pressure in the predictor.
    NonIncremental,
}

#[derive(Debug, Clone)]
pub struct FlowParams {
    pub mu: f64,
    pub b: Advection,
    pub projection: Projection,
}

impl FlowParams {
    pub fn new(mu: f64) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::InvalidParameter { name: "mu", reason: format!("must be positive, got {mu}") });
        }
        Ok(Self { mu, b: Advection::None, projection: Projection::Incremental })
    }

    pub fn with_advection(mut self, b: Advection) -> Self {
        self.b = b;
        self
    }
}

/// Face-centred velocity on a 2-D cell grid.
///
/// `u[i * ny + j]` sits at `x = lo_x + i h_x`, `i ∈ 0..=nx`, `y` at the
/// centre of row `j`; `v[i * (ny + 1) + j]` sits at the centre of column `i`,
/// `y = lo_y + j h_y`, `j ∈ 0..=ny`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    pub grid: TensorGrid,
    pub time: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PressureField {
    pub grid: TensorGrid,
    pub time: f64,
    pub p: Vec<f64>,
}

fn dims(grid: &TensorGrid) -> (usize, usize, f64, f64) {
    let s = grid.shape();
    let h = grid.spacing();
    (s[0], s[1], h[0], h[1])
}

fn check_grid(grid: &TensorGrid) -> Result<()> {
    if grid.ndim() != 2 {
        return Err(Error::GridMismatch(format!("flow grid must be 2-D, got {} axes", grid.ndim())));
    }
    if grid.shape().iter().any(|&n| n < 2) {
        return Err(Error::GridMismatch("flow grid needs at least 2 cells per axis".into()));
    }
    Ok(())
}

impl PressureField {
    pub fn zeros(grid: &TensorGrid, time: f64) -> Self {
        Self { grid: grid.clone(), time, p: vec![0.0; grid.len()] }
    }
}

impl VelocityField {
    pub fn zeros(grid: &TensorGrid, time: f64) -> Result<Self> {
        check_grid(grid)?;
        let (nx, ny, _, _) = dims(grid);
        Ok(Self { grid: grid.clone(), time, u: vec![0.0; (nx + 1) * ny], v: vec![0.0; nx * (ny + 1)] })
    }

    /// Discrete curl of a stream function sampled at cell corners; the
    /// result is exactly divergence-free and has zero normal flux through
    /// the walls when `phi` is constant on the boundary.
    pub fn from_stream_function(grid: &TensorGrid, time: f64, phi: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let mut f = Self::zeros(grid, time)?;
        let (nx, ny, hx, hy) = dims(grid);
        let fx = |i: usize| grid.face(0, i);
        let fy = |j: usize| grid.face(1, j);
        for i in 1..nx {
            for j in 0..ny {
                f.u[i * ny + j] = (phi(fx(i), fy(j + 1)) - phi(fx(i), fy(j))) / hy;
            }
        }
        for i in 0..nx {
            for j in 1..ny {
                f.v[i * (ny + 1) + j] = -(phi(fx(i + 1), fy(j)) - phi(fx(i), fy(j))) / hx;
            }
        }
        Ok(f)
    }

    /// Set interior face values by point evaluation of `g`.
    pub fn from_fn(grid: &TensorGrid, time: f64, g: impl Fn(f64, f64) -> [f64; 2]) -> Result<Self> {
        let mut f = Self::zeros(grid, time)?;
        let (nx, ny, _, _) = dims(grid);
        for i in 1..nx {
            for j in 0..ny {
                f.u[i * ny + j] = g(grid.face(0, i), grid.center(1, j))[0];
            }
        }
        for i in 0..nx {
            for j in 1..ny {
                f.v[i * (ny + 1) + j] = g(grid.center(0, i), grid.face(1, j))[1];
            }
        }
        Ok(f)
    }

    pub fn divergence(&self) -> Vec<f64> {
        let (nx, ny, hx, hy) = dims(&self.grid);
        let mut out = vec![0.0; nx * ny];
        for i in 0..nx {
            for j in 0..ny {
                out[i * ny + j] = (self.u[(i + 1) * ny + j] - self.u[i * ny + j]) / hx
                    + (self.v[i * (ny + 1) + j + 1] - self.v[i * (ny + 1) + j]) / hy;
            }
        }
        out
    }

    pub fn max_divergence(&self) -> f64 {
        self.divergence().iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// `½ ‖u‖²` with face-volume weights.
    pub fn kinetic_energy(&self) -> f64 {
        let vol = self.grid.cell_volume();
        0.5 * vol * (self.u.iter().map(|x| x * x).sum::<f64>() + self.v.iter().map(|x| x * x).sum::<f64>())
    }

    pub fn max_abs(&self) -> f64 {
        self.u.iter().chain(&self.v).fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Discrete L² distance between two fields on the same grid.
    pub fn l2_distance(&self, other: &VelocityField) -> f64 {
        let vol = self.grid.cell_volume();
        let s: f64 = self.u.iter().zip(&other.u).chain(self.v.iter().zip(&other.v)).map(|(a, b)| (a - b).powi(2)).sum();
        (vol * s).sqrt()
    }

    /// Value at cell centre `(i, j)` by averaging the two adjacent faces of
    /// each component.
    pub fn cell_center(&self, i: usize, j: usize) -> [f64; 2] {
        let ny = self.grid.shape()[1];
        [0.5 * (self.u[i * ny + j] + self.u[(i + 1) * ny + j]), 0.5 * (self.v[i * (ny + 1) + j] + self.v[i * (ny + 1) + j + 1])]
    }

    /// Bilinear interpolation at `x ∈ Ω̄`; exactly zero on `∂Ω`.
    pub fn sample_velocity(&self, x: &[f64]) -> Result<[f64; 2]> {
        let g = &self.grid;
        let (lo, hi) = ([g.lower()[0], g.lower()[1]], [g.upper(0), g.upper(1)]);
        let tol = 1e-12 * (hi[0] - lo[0]).max(hi[1] - lo[1]);
        if x.len() != 2 || (0..2).any(|k| x[k] < lo[k] - tol || x[k] > hi[k] + tol) {
            return Err(Error::OutsideDomain);
        }
        if (0..2).any(|k| (x[k] - lo[k]).abs() <= tol || (x[k] - hi[k]).abs() <= tol) {
            return Ok([0.0, 0.0]);
        }
        Ok([self.interp(0, x), self.interp(1, x)])
    }

    fn interp(&self, comp: usize, x: &[f64]) -> f64 {
        let (nx, ny, hx, hy) = dims(&self.grid);
        let lo = self.grid.lower();
        // staggered axis sits on faces, the other on centres extended by one
        // mirrored ghost layer on each side
        let (data, n_face, n_cent, h_face, h_cent, xf, xc, lo_f, lo_c, stride_face) = if comp == 0 {
            (&self.u, nx + 1, ny, hx, hy, x[0], x[1], lo[0], lo[1], ny)
        } else {
            (&self.v, ny + 1, nx, hy, hx, x[1], x[0], lo[1], lo[0], 1)
        };
        let at = |f: usize, c: isize| -> f64 {
            let (cc, sign) = if c < 0 {
                (0usize, -1.0)
            } else if c as usize >= n_cent {
                (n_cent - 1, -1.0)
            } else {
                (c as usize, 1.0)
            };
            let idx = if comp == 0 { f * stride_face + cc } else { cc * (ny + 1) + f };
            sign * data[idx]
        };
        let sf = ((xf - lo_f) / h_face).clamp(0.0, (n_face - 1) as f64);
        let f0 = (sf.floor() as usize).min(n_face - 2);
        let tf = sf - f0 as f64;
        let sc = (xc - lo_c) / h_cent - 0.5;
        let c0 = sc.floor().clamp(-1.0, (n_cent - 1) as f64) as isize;
        let tc = sc - c0 as f64;
        (1.0 - tf) * ((1.0 - tc) * at(f0, c0) + tc * at(f0, c0 + 1))
            + tf * ((1.0 - tc) * at(f0 + 1, c0) + tc * at(f0 + 1, c0 + 1))
    }

    /// Rows `time, i, j, u, v, p` at cell centres.
    pub fn write_csv<W: Write>(&self, pressure: Option<&PressureField>, mut w: W, header: bool) -> std::io::Result<()> {
        let (nx, ny, _, _) = dims(&self.grid);
        if header {
            writeln!(w, "time,i,j,u,v,p")?;
        }
        for i in 0..nx {
            for j in 0..ny {
                let c = self.cell_center(i, j);
                let p = pressure.map_or(0.0, |p| p.p[i * ny + j]);
                writeln!(w, "{:e},{i},{j},{:e},{:e},{:e}", self.time, c[0], c[1], p)?;
            }
        }
        Ok(())
    }
}

impl VelocitySampler for VelocityField {
    fn dim(&self) -> usize {
        2
    }

    fn sample_into(&self, x: &[f64], out: &mut [f64]) {
        // beads are kept in Ω̄, so clamping only absorbs round-off
        let g = &self.grid;
        let xc = [x[0].clamp(g.lower()[0], g.upper(0)), x[1].clamp(g.lower()[1], g.upper(1))];
        let s = self.sample_velocity(&xc).unwrap_or([0.0, 0.0]);
        out[0] = s[0];
        out[1] = s[1];
    }
}

/// Face-centred forcing.
#[derive(Debug, Clone, PartialEq)]
pub struct Forcing {
    pub fu: Vec<f64>,
    pub fv: Vec<f64>,
}

impl Forcing {
    pub fn zeros(grid: &TensorGrid) -> Result<Self> {
        let z = VelocityField::zeros(grid, 0.0)?;
        Ok(Self { fu: z.u, fv: z.v })
    }

    pub fn from_fn(grid: &TensorGrid, g: impl Fn(f64, f64) -> [f64; 2]) -> Result<Self> {
        let f = VelocityField::from_fn(grid, 0.0, g)?;
        Ok(Self { fu: f.u, fv: f.v })
    }

    /// Average a cell-centred vector field (`2` entries per cell) to the
    /// interior faces.
    pub fn from_cells(grid: &TensorGrid, cells: &[f64]) -> Result<Self> {
        let mut f = Self::zeros(grid)?;
        let (nx, ny, _, _) = dims(grid);
        for i in 1..nx {
            for j in 0..ny {
                f.fu[i * ny + j] = 0.5 * (cells[2 * ((i - 1) * ny + j)] + cells[2 * (i * ny + j)]);
            }
        }
        for i in 0..nx {
            for j in 1..ny {
                f.fv[i * (ny + 1) + j] = 0.5 * (cells[2 * (i * ny + j - 1) + 1] + cells[2 * (i * ny + j) + 1]);
            }
        }
        Ok(f)
    }

    pub fn from_stress(k: &StressField) -> Result<Self> {
        Self::from_cells(&k.grid, &stress_divergence(k))
    }
}

/// Row-wise divergence `(∇·𝕂)_a = Σ_b ∂_b K_ab` of a cell-wise tensor field,
/// central in the interior and one-sided in boundary cells. Returns `d`
/// entries per cell.
pub fn stress_divergence(k: &StressField) -> Vec<f64> {
    let g = &k.grid;
    let d = g.ndim();
    let n = g.shape();
    let mut out = vec![0.0; g.len() * d];
    let mut idx = vec![0usize; d];
    for c in 0..g.len() {
        g.unflat(c, &mut idx);
        for b in 0..d {
            let i = idx[b];
            let s = g.stride(b);
            let (lo, hi, width) = if n[b] == 1 {
                continue;
            } else if i == 0 {
                (c, c + s, 1.0)
            } else if i == n[b] - 1 {
                (c - s, c, 1.0)
            } else {
                (c - s, c + s, 2.0)
            };
            let h = g.spacing()[b] * width;
            for a in 0..d {
                out[c * d + a] += (k.values[hi * d * d + a * d + b] - k.values[lo * d * d + a * d + b]) / h;
            }
        }
    }
    out
}

/// Jacobi-preconditioned conjugate gradients for a symmetric positive
/// (semi)definite operator. Stops when the true residual satisfies
/// `‖r‖_∞ ≤ abs_tol` or `‖r‖₂ ≤ rel_tol ‖b‖₂`.
fn pcg(
    apply: &dyn Fn(&[f64], &mut [f64]),
    diag: &[f64],
    b: &[f64],
    x: &mut [f64],
    rel_tol: f64,
    abs_tol: f64,
    max_iter: usize,
) -> Result<usize> {
    let n = b.len();
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
    let bnorm = dot(b, b).sqrt();
    let mut r = vec![0.0; n];
    let mut ap = vec![0.0; n];
    let residual = |x: &[f64], r: &mut [f64], ap: &mut [f64]| {
        apply(x, ap);
        for i in 0..n {
            r[i] = b[i] - ap[i];
        }
    };
    let done = |r: &[f64]| {
        let inf = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        inf <= abs_tol || dot(r, r).sqrt() <= rel_tol * bnorm
    };
    residual(x, &mut r, &mut ap);
    if done(&r) {
        return Ok(0);
    }
    let mut z: Vec<f64> = r.iter().zip(diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for it in 1..=max_iter {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if done(&r) {
            residual(x, &mut r, &mut ap);
            if done(&r) {
                return Ok(it);
            }
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    residual(x, &mut r, &mut ap);
    if done(&r) {
        return Ok(max_iter);
    }
    Err(Error::LinearSolveFailure { residual: dot(&r, &r).sqrt(), iterations: max_iter })
}

/// Outgoing advective flux through the four faces (east, west, north,
/// south) of every velocity control volume, with the neighbour each face
/// leads to.
#[derive(Debug, Clone)]
struct AdvectionStencil {
    flux: Vec<[f64; 4]>,
    nbr: Vec<[Option<usize>; 4]>,
    active: Vec<bool>,
}

impl AdvectionStencil {
    fn empty(n: usize) -> Self {
        Self { flux: vec![[0.0; 4]; n], nbr: vec![[None; 4]; n], active: vec![false; n] }
    }

    /// Largest `Σ outflow / volume`, the explicit CFL rate.
    fn rate(&self, vol: f64) -> f64 {
        self.flux.iter().map(|f| f.iter().filter(|x| **x > 0.0).sum::<f64>() / vol).fold(0.0, f64::max)
    }

    fn apply(&self, x: &[f64], dt: f64, vol: f64, out: &mut [f64]) {
        for c in 0..x.len() {
            if !self.active[c] {
                out[c] = x[c];
                continue;
            }
            let mut s = 0.0;
            for k in 0..4 {
                let f = self.flux[c][k];
                let upwind = if f > 0.0 { x[c] } else { self.nbr[c][k].map_or(0.0, |n| x[n]) };
                s += f * upwind;
            }
            out[c] = x[c] - dt / vol * s;
        }
    }
}

/// A flow solver bound to one grid and one parameter set.
#[derive(Debug, Clone)]
pub struct OseenSolver {
    pub grid: TensorGrid,
    pub params: FlowParams,
    adv_u: AdvectionStencil,
    adv_v: AdvectionStencil,
}

impl OseenSolver {
    pub fn new(grid: &TensorGrid, params: FlowParams) -> Result<Self> {
        check_grid(grid)?;
        let (nx, ny, _, _) = dims(grid);
        let psi = |x: f64, y: f64| params.b.stream(x, y);
        let xf = |i: usize| grid.face(0, i);
        let yf = |j: usize| grid.face(1, j);
        let xc = |i: usize| grid.center(0, i);
        let yc = |j: usize| grid.center(1, j);

        let mut adv_u = AdvectionStencil::empty((nx + 1) * ny);
        for i in 1..nx {
            for j in 0..ny {
                let c = i * ny + j;
                let (xw, xe, ys, yn) = (xc(i - 1), xc(i), yf(j), yf(j + 1));
                let east = psi(xe, yn) - psi(xe, ys);
                let west = psi(xw, yn) - psi(xw, ys);
                let north = -(psi(xe, yn) - psi(xw, yn));
                let south = -(psi(xe, ys) - psi(xw, ys));
                adv_u.flux[c] = [east, -west, north, -south];
                adv_u.nbr[c] =
                    [(i + 1 < nx).then(|| c + ny), (i > 1).then(|| c - ny), (j + 1 < ny).then(|| c + 1), (j > 0).then(|| c - 1)];
                adv_u.active[c] = true;
            }
        }
        let mut adv_v = AdvectionStencil::empty(nx * (ny + 1));
        for i in 0..nx {
            for j in 1..ny {
                let c = i * (ny + 1) + j;
                let (xw, xe, ys, yn) = (xf(i), xf(i + 1), yc(j - 1), yc(j));
                let east = psi(xe, yn) - psi(xe, ys);
                let west = psi(xw, yn) - psi(xw, ys);
                let north = -(psi(xe, yn) - psi(xw, yn));
                let south = -(psi(xe, ys) - psi(xw, ys));
                adv_v.flux[c] = [east, -west, north, -south];
                adv_v.nbr[c] = [
                    (i + 1 < nx).then(|| c + ny + 1),
                    (i > 0).then(|| c - (ny + 1)),
                    (j + 1 < ny).then(|| c + 1),
                    (j > 1).then(|| c - 1),
                ];
                adv_v.active[c] = true;
            }
        }
        Ok(Self { grid: grid.clone(), params, adv_u, adv_v })
    }

    /// Largest stable explicit advection step.
    pub fn cfl_bound(&self) -> f64 {
        let vol = self.grid.cell_volume();
        let r = self.adv_u.rate(vol).max(self.adv_v.rate(vol));
        if r > 0.0 {
            1.0 / r
        } else {
            f64::INFINITY
        }
    }

    /// Largest net outflow of `b` from any velocity control volume.
    pub fn advection_divergence(&self) -> f64 {
        let vol = self.grid.cell_volume();
        self.adv_u.flux.iter().chain(&self.adv_v.flux).map(|f| f.iter().sum::<f64>().abs() / vol).fold(0.0, f64::max)
    }

    /// `(I − dt μ Δ_h) w = rhs` for one velocity component with Dirichlet
    /// walls (normal faces fixed, tangential via mirrored ghosts).
    fn diffusion_solve(&self, comp: usize, rhs: &[f64], guess: &[f64], dt: f64) -> Result<Vec<f64>> {
        let (nx, ny, hx, hy) = dims(&self.grid);
        let k = dt * self.params.mu;
        // along the staggered axis the unknowns are faces 1..n-1 and the
        // end faces are zero; across it the mirrored ghost adds one extra
        // diagonal unit at each wall row
        let (nf, nc, hf, hc) = if comp == 0 { (nx + 1, ny, hx, hy) } else { (ny + 1, nx, hy, hx) };
        let index = |f: usize, c: usize| if comp == 0 { f * ny + c } else { c * (ny + 1) + f };
        let (af, ac) = (k / (hf * hf), k / (hc * hc));
        let n = rhs.len();
        let mut diag = vec![1.0; n];
        for f in 1..nf - 1 {
            for c in 0..nc {
                let wall = (c == 0) as usize + (c == nc - 1) as usize;
                diag[index(f, c)] = 1.0 + 2.0 * af + (2.0 + wall as f64) * ac;
            }
        }
        let apply = |x: &[f64], out: &mut [f64]| {
            for f in 0..nf {
                for c in 0..nc {
                    let i = index(f, c);
                    if f == 0 || f == nf - 1 {
                        out[i] = x[i];
                        continue;
                    }
                    let mut s = diag[i] * x[i];
                    if f > 1 {
                        s -= af * x[index(f - 1, c)];
                    }
                    if f + 2 < nf {
                        s -= af * x[index(f + 1, c)];
                    }
                    if c > 0 {
                        s -= ac * x[index(f, c - 1)];
                    }
                    if c + 1 < nc {
                        s -= ac * x[index(f, c + 1)];
                    }
                    out[i] = s;
                }
            }
        };
        let mut x = guess.to_vec();
        pcg(&apply, &diag, rhs, &mut x, TOL_SOLVE, 0.0, 20 * n)?;
        Ok(x)
    }

    /// Solve the Neumann problem `Δ_h φ = rhs` (with `rhs` of zero mean)
    /// for the zero-mean `φ`.
    fn pressure_solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let (nx, ny, hx, hy) = dims(&self.grid);
        let (ax, ay) = (1.0 / (hx * hx), 1.0 / (hy * hy));
        let mean = rhs.iter().sum::<f64>() / rhs.len() as f64;
        // solve −Δ_h φ = −rhs, which is positive semidefinite
        let b: Vec<f64> = rhs.iter().map(|r| -(r - mean)).collect();
        let mut diag = vec![0.0; nx * ny];
        for i in 0..nx {
            for j in 0..ny {
                let nbx = (i > 0) as usize + (i + 1 < nx) as usize;
                let nby = (j > 0) as usize + (j + 1 < ny) as usize;
                diag[i * ny + j] = nbx as f64 * ax + nby as f64 * ay;
            }
        }
        let apply = |x: &[f64], out: &mut [f64]| {
            for i in 0..nx {
                for j in 0..ny {
                    let c = i * ny + j;
                    let mut s = diag[c] * x[c];
                    if i > 0 {
                        s -= ax * x[c - ny];
                    }
                    if i + 1 < nx {
                        s -= ax * x[c + ny];
                    }
                    if j > 0 {
                        s -= ay * x[c - 1];
                    }
                    if j + 1 < ny {
                        s -= ay * x[c + 1];
                    }
                    out[c] = s;
                }
            }
        };
        let mut x = vec![0.0; nx * ny];
        pcg(&apply, &diag, &b, &mut x, 1e-15, 0.05 * TOL_DIV, 20 * nx * ny)?;
        let m = x.iter().sum::<f64>() / x.len() as f64;
        x.iter_mut().for_each(|v| *v -= m);
        Ok(x)
    }

    /// One projection step. Returns the new velocity and the zero-mean
    /// pressure.
    pub fn step(
        &self,
        u: &VelocityField,
        p: &PressureField,
        dt: f64,
        source: Option<&Forcing>,
    ) -> Result<(VelocityField, PressureField)> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter { name: "dt", reason: "must be positive".into() });
        }
        if !u.grid.same_layout(&self.grid) || !p.grid.same_layout(&self.grid) {
            return Err(Error::GridMismatch("velocity/pressure grid differs from the solver grid".into()));
        }
        let bound = self.cfl_bound();
        if dt > bound {
            return Err(Error::StabilityViolation { dt, bound });
        }
        let (nx, ny, hx, hy) = dims(&self.grid);
        let vol = self.grid.cell_volume();
        let incremental = self.params.projection == Projection::Incremental;

        let mut ru = vec![0.0; u.u.len()];
        let mut rv = vec![0.0; u.v.len()];
        self.adv_u.apply(&u.u, dt, vol, &mut ru);
        self.adv_v.apply(&u.v, dt, vol, &mut rv);
        for i in 1..nx {
            for j in 0..ny {
                let c = i * ny + j;
                if let Some(f) = source {
                    ru[c] += dt * f.fu[c];
                }
                if incremental {
                    ru[c] -= dt * (p.p[i * ny + j] - p.p[(i - 1) * ny + j]) / hx;
                }
            }
        }
        for i in 0..nx {
            for j in 1..ny {
                let c = i * (ny + 1) + j;
                if let Some(f) = source {
                    rv[c] += dt * f.fv[c];
                }
                if incremental {
                    rv[c] -= dt * (p.p[i * ny + j] - p.p[i * ny + j - 1]) / hy;
                }
            }
        }
        let us = self.diffusion_solve(0, &ru, &u.u, dt)?;
        let vs = self.diffusion_solve(1, &rv, &u.v, dt)?;
        let mut out = VelocityField { grid: self.grid.clone(), time: u.time + dt, u: us, v: vs };
        let phi = self.pressure_solve(&out.divergence())?;
        for i in 1..nx {
            for j in 0..ny {
                out.u[i * ny + j] -= (phi[i * ny + j] - phi[(i - 1) * ny + j]) / hx;
            }
        }
        for i in 0..nx {
            for j in 1..ny {
                out.v[i * (ny + 1) + j] -= (phi[i * ny + j] - phi[i * ny + j - 1]) / hy;
            }
        }
        let div = out.max_divergence();
        if div > TOL_DIV {
            return Err(Error::LinearSolveFailure { residual: div, iterations: 0 });
        }
        let base = if incremental { p.p.as_slice() } else { &[][..] };
        let mut pn: Vec<f64> = phi.iter().enumerate().map(|(c, f)| base.get(c).copied().unwrap_or(0.0) + f / dt).collect();
        let m = pn.iter().sum::<f64>() / pn.len() as f64;
        pn.iter_mut().for_each(|x| *x -= m);
        Ok((out, PressureField { grid: self.grid.clone(), time: u.time + dt, p: pn }))
    }
}

/// One step of the flow solver (see [`OseenSolver::step`]).
pub fn oseen_step(
    u: &VelocityField,
    p: &PressureField,
    dt: f64,
    params: &FlowParams,
    source: Option<&Forcing>,
) -> Result<(VelocityField, PressureField)> {
    OseenSolver::new(&u.grid, params.clone())?.step(u, p, dt, source)
}

/// Integrate to `t_final`, asking `source(t)` for the forcing of each step
/// and keeping a snapshot every `snapshot_every` steps (always the first and
/// last).
pub fn run_flow(
    solver: &OseenSolver,
    u0: &VelocityField,
    t_final: f64,
    dt: f64,
    snapshot_every: usize,
    mut source: impl FnMut(f64) -> Option<Forcing>,
) -> Result<Vec<(VelocityField, PressureField)>> {
    let steps = crate::chain_dynamics::step_count(t_final, dt)?;
    let mut u = u0.clone();
    let mut p = PressureField::zeros(&u0.grid, u0.time);
    let mut out = vec![(u.clone(), p.clone())];
    let every = snapshot_every.max(1);
    for s in 1..=steps {
        let f = source(u.time);
        let (un, pn) = solver.step(&u, &p, dt, f.as_ref())?;
        u = un;
        p = pn;
        if s % every == 0 || s == steps {
            out.push((u.clone(), p.clone()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> TensorGrid {
        TensorGrid::uniform(-1.0, 1.0, n, 2).unwrap()
    }

    #[test]
    fn zero_stays_zero() {
        let g = grid(8);
        let solver = OseenSolver::new(&g, FlowParams::new(1.0).unwrap()).unwrap();
        let u = VelocityField::zeros(&g, 0.0).unwrap();
        let traj = run_flow(&solver, &u, 0.5, 0.05, 1, |_| None).unwrap();
        assert_eq!(traj.len(), 11);
        for (v, p) in &traj {
            assert!(v.u.iter().chain(&v.v).chain(&p.p).all(|&x| x == 0.0));
        }
    }

    #[test]
    fn zero_steps_returns_initial() {
        let g = grid(6);
        let solver = OseenSolver::new(&g, FlowParams::new(1.0).unwrap()).unwrap();
        let u = VelocityField::from_stream_function(&g, 0.0, |x, y| (1.0 - x * x).powi(2) * (1.0 - y * y).powi(2)).unwrap();
        let traj = run_flow(&solver, &u, 0.0, 0.1, 1, |_| None).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj[0].0, u);
    }

    #[test]
    fn stream_function_field_is_divergence_free() {
        let g = grid(16);
        let u = VelocityField::from_stream_function(&g, 0.0, |x, y| (3.0 * x + y).sin() * (1.0 - x * x) * (1.0 - y * y)).unwrap();
        assert!(u.max_divergence() < 1e-12);
        let s = OseenSolver::new(
            &g,
            FlowParams::new(1.0).unwrap().with_advection(Advection::Cellular(CellularFlow::new(1.0, 1.0, 1.0))),
        )
        .unwrap();
        assert!(s.advection_divergence() < 1e-13);
    }

    #[test]
    fn stress_divergence_examples() {
        let g = grid(5);
        let mut k = StressField::zeros(&g, 0.0);
        for (c, idx) in g.indices().enumerate() {
            let x = g.center(0, idx[0]);
            k.values[c * 4] = x;
        }
        let div = stress_divergence(&k);
        for c in 0..g.len() {
            assert!((div[2 * c] - 1.0).abs() < 1e-12);
            assert!(div[2 * c + 1].abs() < 1e-15);
        }
        let mut k = StressField::zeros(&g, 0.0);
        k.values.chunks_mut(4).for_each(|b| b.copy_from_slice(&[2.0, 0.5, 0.5, 1.0]));
        assert!(stress_divergence(&k).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn symmetric_stress_divergence_contracts_either_index() {
        let g = grid(4);
        let mut k = StressField::zeros(&g, 0.0);
        let mut kt = StressField::zeros(&g, 0.0);
        for (c, idx) in g.indices().enumerate() {
            let (x, y) = (g.center(0, idx[0]), g.center(1, idx[1]));
            let m = [x * y, x + y * y, x + y * y, x.sin()];
            k.values[c * 4..c * 4 + 4].copy_from_slice(&m);
            kt.values[c * 4..c * 4 + 4].copy_from_slice(&[m[0], m[2], m[1], m[3]]);
        }
        assert_eq!(stress_divergence(&k), stress_divergence(&kt));
    }

    #[test]
    fn sampling_nodes_walls_and_linear_fields() {
        let g = grid(8);
        let u = VelocityField::from_fn(&g, 0.0, |_, y| [y, 0.0]).unwrap();
        for &(x, y) in &[(0.1, 0.3), (-0.6, -0.7), (0.55, 0.8)] {
            let s = u.sample_velocity(&[x, y]).unwrap();
            assert!((s[0] - y).abs() < 1e-14, "{s:?} at ({x},{y})");
            assert_eq!(s[1], 0.0);
        }
        // a face node
        let s = u.sample_velocity(&[g.face(0, 3), g.center(1, 2)]).unwrap();
        assert_eq!(s[0], u.u[3 * 8 + 2]);
        assert_eq!(u.sample_velocity(&[1.0, 0.3]).unwrap(), [0.0, 0.0]);
        assert_eq!(u.sample_velocity(&[0.2, -1.0]).unwrap(), [0.0, 0.0]);
        assert!(matches!(u.sample_velocity(&[1.5, 0.0]), Err(Error::OutsideDomain)));
    }

    #[test]
    fn ghost_mirroring_vanishes_at_the_wall() {
        let g = grid(8);
        let u = VelocityField::from_fn(&g, 0.0, |x, y| [1.0 + x, 1.0 + y]).unwrap();
        // just inside the wall the sampled tangential value tends to 0
        let s = u.sample_velocity(&[0.1, 1.0 - 1e-9]).unwrap();
        assert!(s[0].abs() < 1e-7);
    }

    #[test]
    fn cfl_violation_is_reported() {
        let g = grid(8);
        let p = FlowParams::new(1.0).unwrap().with_advection(Advection::Cellular(CellularFlow::new(50.0, 1.0, 1.0)));
        let s = OseenSolver::new(&g, p).unwrap();
        let u = VelocityField::zeros(&g, 0.0).unwrap();
        let pr = PressureField::zeros(&g, 0.0);
        assert!(matches!(s.step(&u, &pr, 10.0, None), Err(Error::StabilityViolation { .. })));
    }

    #[test]
    fn energy_decays_without_source() {
        let g = grid(16);
        let p = FlowParams::new(0.05).unwrap().with_advection(Advection::Cellular(CellularFlow::new(1.0, 1.0, 1.0)));
        let s = OseenSolver::new(&g, p).unwrap();
        let u = VelocityField::from_stream_function(&g, 0.0, |x, y| {
            (1.0 - x * x).powi(2) * (1.0 - y * y).powi(2) * (2.0 * x + y).sin()
        })
        .unwrap();
        let dt = 0.5 * s.cfl_bound().min(0.05);
        let traj = run_flow(&s, &u, 100.0 * dt, dt, 1, |_| None).unwrap();
        for w in traj.windows(2) {
            assert!(w[1].0.kinetic_energy() <= w[0].0.kinetic_energy() * (1.0 + 1e-13));
            assert!(w[1].0.max_divergence() <= TOL_DIV);
        }
    }

    #[test]
    fn higher_viscosity_lowers_steady_speed() {
        let g = grid(12);
        let f = Forcing::from_fn(&g, |x, y| [(1.0 - y * y) * (1.0 + x), 0.3 * x]).unwrap();
        let steady = |mu: f64| {
            let s = OseenSolver::new(&g, FlowParams::new(mu).unwrap()).unwrap();
            let traj = run_flow(&s, &VelocityField::zeros(&g, 0.0).unwrap(), 4.0, 0.1, 40, |_| Some(f.clone())).unwrap();
            traj.last().unwrap().0.max_abs()
        };
        assert!(steady(2.0) < steady(1.0));
    }
}
