//! Stochastic bead-spring chains: the underdamped Langevin system
//!
//! ```text
//! ε ṙ = v,   ε v̇ = 𝓛r + 𝒰(r) − v/ε + √(2β) Ẇ
//! ```
//!
//! with specular walls, and its overdamped (small-mass) limit
//! `ṙ_j = (𝓛r)_j + u(r_j) + √(2β) Ẇ_j`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::VelocitySampler;
use crate::geometry::ConvexDomain;
use crate::grid::TensorGrid;

pub const DEFAULT_MAX_REFLECTIONS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainParams {
    /// Number of springs; the chain has `springs + 1` beads.
    pub springs: usize,
    pub dim: usize,
    /// Bead mass is `eps²`.
    pub eps: f64,
    pub beta: f64,
    /// Spring constant of the Hookean force `F(q) = H q`.
    pub spring_constant: f64,
}

impl ChainParams {
    pub fn new(springs: usize, dim: usize, eps: f64, beta: f64, spring_constant: f64) -> Result<Self> {
        let p = Self { springs, dim, eps, beta, spring_constant };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParameter { name, reason: format!("must be positive, got {x}") })
            }
        };
        positive("eps", self.eps)?;
        positive("beta", self.beta)?;
        positive("spring_constant", self.spring_constant)?;
        if self.springs == 0 {
            return Err(Error::InvalidParameter { name: "springs", reason: "need J >= 1".into() });
        }
        if !(1..=3).contains(&self.dim) {
            return Err(Error::InvalidParameter { name: "dim", reason: "need d in 1..=3".into() });
        }
        Ok(())
    }

    pub fn beads(&self) -> usize {
        self.springs + 1
    }

    /// Length of the flattened `r` (or `v`) vector, `(J+1) d`.
    pub fn state_len(&self) -> usize {
        self.beads() * self.dim
    }
}

/// `𝓛r`: the chain "Neumann Laplacian" applied blockwise, without forming
/// the matrix. `r` is bead-major with `d` components per bead.
pub fn connectivity_apply(r: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; r.len()];
    connectivity_apply_into(r, d, &mut out);
    out
}

pub fn connectivity_apply_into(r: &[f64], d: usize, out: &mut [f64]) {
    let beads = r.len() / d;
    out.fill(0.0);
    for s in 0..beads.saturating_sub(1) {
        for k in 0..d {
            let q = r[(s + 1) * d + k] - r[s * d + k];
            out[s * d + k] += q;
            out[(s + 1) * d + k] -= q;
        }
    }
}

/// One chain: bead positions and velocities, bead-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub r: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct StepOptions {
    pub noise: bool,
    /// Include the spring drift `𝓛r`.
    pub springs: bool,
    pub max_reflections: usize,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self { noise: true, springs: true, max_reflections: DEFAULT_MAX_REFLECTIONS }
    }
}

/// Coefficients of the exact Ornstein–Uhlenbeck transition over `dt` for
/// `v̇ = F/ε − v/ε² + (√(2β)/ε) Ẇ` with frozen `F`, jointly with the
/// integrated velocity `X = ∫ v ds` (so that `Δr = X/ε`).
#[derive(Debug, Clone, Copy)]
struct OuTransition {
    decay: f64,
    force_gain_v: f64,
    vel_gain_x: f64,
    force_gain_x: f64,
    sd_v: f64,
    cross: f64,
    sd_x_perp: f64,
}

impl OuTransition {
    fn new(dt: f64, eps: f64, beta: f64) -> Self {
        let eps2 = eps * eps;
        let x = dt / eps2;
        let one_minus = -(-x).exp_m1();
        let one_minus_sq = -(-2.0 * x).exp_m1();
        // x - 2(1 - e^{-x}) + (1 - e^{-2x})/2, with its series for small x
        let g = if x < 1e-2 {
            x.powi(3) / 3.0 - x.powi(4) / 4.0 + 7.0 * x.powi(5) / 60.0
        } else {
            x - 2.0 * one_minus + 0.5 * one_minus_sq
        };
        let var_v = beta * one_minus_sq;
        let cov = beta * eps2 * one_minus * one_minus;
        let var_x = 2.0 * beta * eps2 * eps2 * g;
        let sd_v = var_v.sqrt();
        let cross = if sd_v > 0.0 { cov / sd_v } else { 0.0 };
        let sd_x_perp = (var_x - cross * cross).max(0.0).sqrt();
        Self {
            decay: 1.0 - one_minus,
            force_gain_v: eps * one_minus,
            vel_gain_x: eps2 * one_minus,
            force_gain_x: eps * (dt - eps2 * one_minus),
            sd_v,
            cross,
            sd_x_perp,
        }
    }
}

/// Reusable per-thread buffers.
struct Scratch {
    force: Vec<f64>,
    u: Vec<f64>,
    old: Vec<f64>,
}

impl Scratch {
    fn new(n: usize, d: usize) -> Self {
        Self { force: vec![0.0; n], u: vec![0.0; d], old: vec![0.0; n] }
    }
}

fn drift(state_r: &[f64], params: &ChainParams, u: &dyn VelocitySampler, springs: bool, s: &mut Scratch) {
    let d = params.dim;
    if springs {
        connectivity_apply_into(state_r, d, &mut s.force);
    } else {
        s.force.fill(0.0);
    }
    for j in 0..params.beads() {
        u.sample_into(&state_r[j * d..(j + 1) * d], &mut s.u);
        for k in 0..d {
            s.force[j * d + k] += s.u[k];
        }
    }
}

fn reflect_all(
    domain: &ConvexDomain,
    old: &[f64],
    r: &mut [f64],
    v: &mut [f64],
    d: usize,
    max: usize,
    chain: usize,
) -> Result<()> {
    for j in 0..old.len() / d {
        let sl = j * d..(j + 1) * d;
        if domain.reflect_path(&old[sl.clone()], &mut r[sl.clone()], &mut v[sl.clone()], max).is_none() {
            return Err(Error::StepRejected { chain, bead: j, max });
        }
        debug_assert!(domain.contains(&r[sl]), "bead left the domain after reflection");
    }
    Ok(())
}

fn kinetic_step_inner<R: Rng>(
    state: &mut ChainState,
    ou: &OuTransition,
    params: &ChainParams,
    domain: &ConvexDomain,
    u: &dyn VelocitySampler,
    rng: &mut R,
    opts: &StepOptions,
    chain: usize,
    s: &mut Scratch,
) -> Result<()> {
    drift(&state.r, params, u, opts.springs, s);
    s.old.copy_from_slice(&state.r);
    let inv_eps = 1.0 / params.eps;
    for i in 0..state.r.len() {
        let (z1, z2): (f64, f64) = if opts.noise { (rng.sample(StandardNormal), rng.sample(StandardNormal)) } else { (0.0, 0.0) };
        let v0 = state.v[i];
        let f = s.force[i];
        let x = ou.vel_gain_x * v0 + ou.force_gain_x * f + ou.cross * z1 + ou.sd_x_perp * z2;
        state.v[i] = ou.decay * v0 + ou.force_gain_v * f + ou.sd_v * z1;
        state.r[i] += x * inv_eps;
    }
    reflect_all(domain, &s.old, &mut state.r, &mut state.v, params.dim, opts.max_reflections, chain)
}

/// Advance one chain of the underdamped system by `dt`.
///
/// The velocity is advanced by the exact Ornstein–Uhlenbeck transition with
/// the drift `𝓛r + 𝒰` frozen over the step; the position is advanced by the
/// exactly integrated velocity of that same transition, and beads that leave
/// `Ω` are reflected specularly.
pub fn step_kinetic<R: Rng>(
    state: &mut ChainState,
    dt: f64,
    params: &ChainParams,
    domain: &ConvexDomain,
    u: &dyn VelocitySampler,
    rng: &mut R,
    opts: &StepOptions,
) -> Result<()> {
    check_dt(dt)?;
    let ou = OuTransition::new(dt, params.eps, params.beta);
    let mut s = Scratch::new(params.state_len(), params.dim);
    kinetic_step_inner(state, &ou, params, domain, u, rng, opts, 0, &mut s)
}

fn overdamped_step_inner<R: Rng>(
    r: &mut [f64],
    dt: f64,
    params: &ChainParams,
    domain: &ConvexDomain,
    u: &dyn VelocitySampler,
    rng: &mut R,
    opts: &StepOptions,
    chain: usize,
    s: &mut Scratch,
) -> Result<()> {
    drift(r, params, u, opts.springs, s);
    s.old.copy_from_slice(r);
    let amp = (2.0 * params.beta * dt).sqrt();
    for i in 0..r.len() {
        let z: f64 = if opts.noise { rng.sample(StandardNormal) } else { 0.0 };
        r[i] += dt * s.force[i] + amp * z;
    }
    // the velocity block is a dummy here; only positions are reflected
    let mut dummy = vec![0.0; r.len()];
    reflect_all(domain, &s.old, r, &mut dummy, params.dim, opts.max_reflections, chain)
}

/// Euler–Maruyama step of the overdamped chain with reflecting walls.
pub fn step_overdamped<R: Rng>(
    r: &mut [f64],
    dt: f64,
    params: &ChainParams,
    domain: &ConvexDomain,
    u: &dyn VelocitySampler,
    rng: &mut R,
    opts: &StepOptions,
) -> Result<()> {
    check_dt(dt)?;
    let mut s = Scratch::new(params.state_len(), params.dim);
    overdamped_step_inner(r, dt, params, domain, u, rng, opts, 0, &mut s)
}

fn check_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter { name: "dt", reason: format!("must be positive, got {dt}") })
    }
}

/// Which equation an ensemble integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dynamics {
    Kinetic,
    Overdamped,
}

/// `N` independent chains, each with its own ChaCha stream.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub chains: Vec<ChainState>,
    rngs: Vec<ChaCha8Rng>,
    pub seed: u64,
}

impl Ensemble {
    /// Chains with stream ids `0..N` of the given seed.
    pub fn new(chains: Vec<ChainState>, seed: u64) -> Result<Self> {
        if chains.is_empty() {
            return Err(Error::InvalidParameter { name: "N", reason: "ensemble must be nonempty".into() });
        }
        let rngs = (0..chains.len()).map(|i| chain_rng(seed, i as u64)).collect();
        Ok(Self { chains, rngs, seed })
    }

    /// Positions i.i.d. uniform on `Ω^{J+1}` (rejection from the bounding
    /// box) and velocities i.i.d. Maxwellian with variance `β`. Initial
    /// draws use a stream disjoint from the stepping streams.
    pub fn sample_uniform_maxwellian(n: usize, params: &ChainParams, domain: &ConvexDomain, seed: u64) -> Result<Self> {
        let mut init = chain_rng(seed, u64::MAX);
        let (lo, hi) = domain.bounding_box();
        let d = params.dim;
        let sd = params.beta.sqrt();
        let mut chains = Vec::with_capacity(n);
        for _ in 0..n {
            let mut r = vec![0.0; params.state_len()];
            for j in 0..params.beads() {
                loop {
                    for k in 0..d {
                        r[j * d + k] = init.random_range(lo[k]..hi[k]);
                    }
                    if domain.contains(&r[j * d..(j + 1) * d]) {
                        break;
                    }
                }
            }
            let v = (0..params.state_len()).map(|_| sd * init.sample::<f64, _>(StandardNormal)).collect();
            chains.push(ChainState { r, v });
        }
        Self::new(chains, seed)
    }

    pub fn len(&self) -> usize {
        self.chains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chains.is_empty()
    }

    /// Advance every chain by one step of `dt` (parallel over chains;
    /// bitwise independent of the thread count).
    pub fn step(
        &mut self,
        dynamics: Dynamics,
        dt: f64,
        params: &ChainParams,
        domain: &ConvexDomain,
        u: &dyn VelocitySampler,
        opts: &StepOptions,
    ) -> Result<()> {
        check_dt(dt)?;
        let ou = OuTransition::new(dt, params.eps, params.beta);
        let n = params.state_len();
        let d = params.dim;
        self.chains.par_iter_mut().zip(self.rngs.par_iter_mut()).enumerate().try_for_each_init(
            || Scratch::new(n, d),
            |s, (i, (chain, rng))| match dynamics {
                Dynamics::Kinetic => kinetic_step_inner(chain, &ou, params, domain, u, rng, opts, i, s),
                Dynamics::Overdamped => overdamped_step_inner(&mut chain.r, dt, params, domain, u, rng, opts, i, s),
            },
        )
    }
}

fn chain_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    pub chains: Vec<ChainState>,
}

/// Integrate to `t_final` in steps of `dt`, recording a snapshot at t = 0
/// and every `snapshot_every` steps (and always at the end).
#[allow(clippy::too_many_arguments)]
pub fn run_ensemble(
    ensemble: &mut Ensemble,
    dynamics: Dynamics,
    t_final: f64,
    dt: f64,
    snapshot_every: usize,
    params: &ChainParams,
    domain: &ConvexDomain,
    u: &dyn VelocitySampler,
    opts: &StepOptions,
) -> Result<Vec<Snapshot>> {
    let steps = step_count(t_final, dt)?;
    let every = snapshot_every.max(1);
    let mut out = vec![Snapshot { time: 0.0, chains: ensemble.chains.clone() }];
    for s in 1..=steps {
        ensemble.step(dynamics, dt, params, domain, u, opts)?;
        if s % every == 0 || s == steps {
            out.push(Snapshot { time: s as f64 * dt, chains: ensemble.chains.clone() });
        }
    }
    Ok(out)
}

/// Number of steps of size `dt` in `[0, t_final]`; `dt` must divide
/// `t_final` up to rounding.
pub fn step_count(t_final: f64, dt: f64) -> Result<usize> {
    check_dt(dt)?;
    if !(t_final >= 0.0) {
        return Err(Error::InvalidParameter { name: "t_final", reason: "must be nonnegative".into() });
    }
    let n = (t_final / dt).round();
    if (n * dt - t_final).abs() > 1e-9 * t_final.max(dt) {
        return Err(Error::InvalidParameter { name: "dt", reason: format!("{dt} does not divide t_final = {t_final}") });
    }
    Ok(n as usize)
}

/// Monte Carlo moments binned over `Ω^{J+1}`.
#[derive(Debug, Clone)]
pub struct EmpiricalMoments {
    pub grid: TensorGrid,
    pub counts: Vec<usize>,
    /// Fraction of chains per bin (sums to 1).
    pub rho_bar: Vec<f64>,
    /// `(1/ε)` mean velocity per bin; `None` marks an empty bin.
    pub current: Vec<Option<Vec<f64>>>,
    /// Mean `v ⊗ v` per bin, row-major `(J+1)d × (J+1)d`; `None` for empty bins.
    pub second: Vec<Option<Vec<f64>>>,
}

/// Bin chains by their full configuration `r ∈ Ω^{J+1}` on `grid`
/// (one axis per bead component) and accumulate `ϱ̄`, `𝒥`, `ℙ`.
pub fn empirical_moments(chains: &[ChainState], grid: &TensorGrid, eps: f64) -> Result<EmpiricalMoments> {
    let n = chains.first().map_or(0, |c| c.r.len());
    if grid.ndim() != n {
        return Err(Error::GridMismatch(format!("histogram has {} axes, configuration has {n} components", grid.ndim())));
    }
    let bins = grid.len();
    let mut counts = vec![0usize; bins];
    let mut vsum = vec![0.0; bins * n];
    let mut vvsum = vec![0.0; bins * n * n];
    let mut idx = vec![0usize; n];
    for c in chains {
        for k in 0..n {
            idx[k] = grid.locate(k, c.r[k]);
        }
        let b = grid.flat(&idx);
        counts[b] += 1;
        for a in 0..n {
            vsum[b * n + a] += c.v[a];
            for e in 0..n {
                vvsum[(b * n + a) * n + e] += c.v[a] * c.v[e];
            }
        }
    }
    let total = chains.len() as f64;
    let rho_bar = counts.iter().map(|&c| c as f64 / total).collect();
    let mut current = Vec::with_capacity(bins);
    let mut second = Vec::with_capacity(bins);
    for b in 0..bins {
        if counts[b] == 0 {
            current.push(None);
            second.push(None);
            continue;
        }
        let m = counts[b] as f64;
        current.push(Some(vsum[b * n..(b + 1) * n].iter().map(|s| s / (m * eps)).collect()));
        second.push(Some(vvsum[b * n * n..(b + 1) * n * n].iter().map(|s| s / m).collect()));
    }
    Ok(EmpiricalMoments { grid: grid.clone(), counts, rho_bar, current, second })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::ZeroFlow;

    fn params(eps: f64) -> ChainParams {
        ChainParams::new(1, 1, eps, 1.0, 1.0).unwrap()
    }

    #[test]
    fn connectivity_examples() {
        assert_eq!(connectivity_apply(&[0.0, 1.0], 1), vec![1.0, -1.0]);
        assert_eq!(connectivity_apply(&[0.0, 1.0, 3.0], 1), vec![1.0, 1.0, -2.0]);
        assert_eq!(connectivity_apply(&[0.4, -0.2, 0.4, -0.2, 0.4, -0.2], 2), vec![0.0; 6]);
    }

    #[test]
    fn connectivity_matches_dense_matrix() {
        let d = 2;
        let beads = 5;
        let r: Vec<f64> = (0..beads * d).map(|i| ((i * 7) % 11) as f64 * 0.3 - 1.0).collect();
        let out = connectivity_apply(&r, d);
        for j in 0..beads {
            for k in 0..d {
                let mut expect = 0.0;
                for m in 0..beads {
                    let coef = if m == j {
                        if j == 0 || j == beads - 1 {
                            -1.0
                        } else {
                            -2.0
                        }
                    } else if m + 1 == j || j + 1 == m {
                        1.0
                    } else {
                        0.0
                    };
                    expect += coef * r[m * d + k];
                }
                assert!((out[j * d + k] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn params_validation() {
        assert!(ChainParams::new(0, 1, 1.0, 1.0, 1.0).is_err());
        assert!(ChainParams::new(1, 1, 0.0, 1.0, 1.0).is_err());
        assert!(ChainParams::new(1, 4, 1.0, 1.0, 1.0).is_err());
        assert!(ChainParams::new(1, 1, 1.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn kinetic_rest_state_is_fixed_without_noise() {
        let dom = ConvexDomain::cube(1.0, 1).unwrap();
        let p = params(0.5);
        let mut s = ChainState { r: vec![0.2, 0.2], v: vec![0.0, 0.0] };
        let mut rng = chain_rng(1, 0);
        let opts = StepOptions { noise: false, ..Default::default() };
        step_kinetic(&mut s, 0.1, &p, &dom, &ZeroFlow { dim: 1 }, &mut rng, &opts).unwrap();
        assert_eq!(s, ChainState { r: vec![0.2, 0.2], v: vec![0.0, 0.0] });
    }

    #[test]
    fn velocity_decays_by_the_ou_factor_without_drift_or_noise() {
        let dom = ConvexDomain::cube(100.0, 2).unwrap();
        let p = ChainParams::new(2, 2, 0.3, 1.0, 1.0).unwrap();
        let v0 = vec![1.0, -2.0, 0.5, 0.25, -1.5, 3.0];
        let mut s = ChainState { r: vec![0.0; 6], v: v0.clone() };
        let opts = StepOptions { noise: false, springs: false, ..Default::default() };
        let dt = 0.05;
        let mut rng = chain_rng(3, 0);
        step_kinetic(&mut s, dt, &p, &dom, &ZeroFlow { dim: 2 }, &mut rng, &opts).unwrap();
        let decay = (-dt / (0.3f64 * 0.3)).exp();
        let n0: f64 = v0.iter().map(|x| x * x).sum::<f64>().sqrt();
        let n1: f64 = s.v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n1 - decay * n0).abs() < 1e-14);
        // position moved by the integrated velocity ε (1 - e^{-dt/ε²}) v0
        let disp = 0.3 * (1.0 - decay);
        for i in 0..6 {
            assert!((s.r[i] - disp * v0[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn wall_hit_reverses_normal_velocity() {
        let dom = ConvexDomain::cube(1.0, 2).unwrap();
        let p = ChainParams::new(1, 2, 1.0, 1.0, 1.0).unwrap();
        let mut s = ChainState { r: vec![0.95, 0.0, 0.0, 0.0], v: vec![3.0, 0.5, 0.0, 0.0] };
        let opts = StepOptions { noise: false, springs: false, ..Default::default() };
        let mut rng = chain_rng(0, 0);
        step_kinetic(&mut s, 0.05, &p, &dom, &ZeroFlow { dim: 2 }, &mut rng, &opts).unwrap();
        assert!(s.v[0] < 0.0);
        assert!(s.v[1] > 0.0);
        assert!(s.r[0] <= 1.0);
        let decay = (-0.05f64).exp();
        assert!((s.v[0] + 3.0 * decay).abs() < 1e-14);
    }

    #[test]
    fn reflections_preserve_speed() {
        let dom = ConvexDomain::cube(1.0, 2).unwrap();
        let p = ChainParams::new(1, 2, 1.0, 1.0, 1.0).unwrap();
        let v0 = vec![30.0, -17.0, -25.0, 11.0];
        let mut s = ChainState { r: vec![0.5, 0.5, -0.5, -0.5], v: v0.clone() };
        let opts = StepOptions { noise: false, springs: false, ..Default::default() };
        let mut rng = chain_rng(0, 0);
        step_kinetic(&mut s, 0.02, &p, &dom, &ZeroFlow { dim: 2 }, &mut rng, &opts).unwrap();
        let decay = (-0.02f64).exp();
        let n0: f64 = v0.iter().map(|x| x * x).sum::<f64>();
        let n1: f64 = s.v.iter().map(|x| x * x).sum::<f64>();
        assert!((n1 - decay * decay * n0).abs() < 1e-10);
        for j in 0..2 {
            assert!(dom.contains(&s.r[2 * j..2 * j + 2]));
        }
    }

    #[test]
    fn too_many_reflections_rejects_step() {
        let dom = ConvexDomain::cube(1.0, 1).unwrap();
        let p = params(1.0);
        let mut s = ChainState { r: vec![0.0, 0.0], v: vec![500.0, 0.0] };
        let opts = StepOptions { noise: false, springs: false, ..Default::default() };
        let mut rng = chain_rng(0, 0);
        let err = step_kinetic(&mut s, 1.0, &p, &dom, &ZeroFlow { dim: 1 }, &mut rng, &opts);
        assert!(matches!(err, Err(Error::StepRejected { bead: 0, .. })));
    }

    #[test]
    fn overdamped_connector_decays_exponentially() {
        let dom = ConvexDomain::cube(10.0, 1).unwrap();
        let p = params(1.0);
        let mut r = vec![-0.5, 0.5];
        let opts = StepOptions { noise: false, ..Default::default() };
        let mut rng = chain_rng(0, 0);
        let dt = 1e-4;
        for _ in 0..5000 {
            step_overdamped(&mut r, dt, &p, &dom, &ZeroFlow { dim: 1 }, &mut rng, &opts).unwrap();
        }
        let q = r[1] - r[0];
        // Euler: (1 - 2dt)^n vs e^{-2t}
        assert!((q - (1.0 - 2.0 * dt).powi(5000)).abs() < 1e-12);
        assert!((q - (-1.0f64).exp()).abs() < 1e-4);
        // centre of mass is unchanged
        assert!((r[0] + r[1]).abs() < 1e-12);
    }

    #[test]
    fn overdamped_rest_state_is_fixed() {
        let dom = ConvexDomain::cube(1.0, 2).unwrap();
        let p = ChainParams::new(2, 2, 1.0, 1.0, 1.0).unwrap();
        let mut r = vec![0.3, -0.1, 0.3, -0.1, 0.3, -0.1];
        let opts = StepOptions { noise: false, ..Default::default() };
        let mut rng = chain_rng(0, 0);
        step_overdamped(&mut r, 0.01, &p, &dom, &ZeroFlow { dim: 2 }, &mut rng, &opts).unwrap();
        assert_eq!(r, vec![0.3, -0.1, 0.3, -0.1, 0.3, -0.1]);
    }

    #[test]
    fn translation_equivariance() {
        // shifting the domain and the beads together commutes with stepping
        let p = ChainParams::new(1, 2, 0.5, 1.0, 1.0).unwrap();
        let shift = [0.25, -0.5];
        let dom = ConvexDomain::cube(1.0, 2).unwrap();
        let big = ConvexDomain::cube(50.0, 2).unwrap();
        let mut a = ChainState { r: vec![0.1, 0.2, -0.3, 0.4], v: vec![0.5, -0.5, 1.0, 0.0] };
        let mut b = a.clone();
        for j in 0..2 {
            for k in 0..2 {
                b.r[2 * j + k] += shift[k];
            }
        }
        let mut ra = chain_rng(9, 0);
        let mut rb = chain_rng(9, 0);
        let opts = StepOptions::default();
        for _ in 0..20 {
            step_kinetic(&mut a, 0.01, &p, &dom, &ZeroFlow { dim: 2 }, &mut ra, &opts).unwrap();
            step_kinetic(&mut b, 0.01, &p, &big, &ZeroFlow { dim: 2 }, &mut rb, &opts).unwrap();
        }
        // the small run stayed clear of its walls, so the shifted run matches
        for j in 0..2 {
            for k in 0..2 {
                assert!((a.r[2 * j + k] + shift[k] - b.r[2 * j + k]).abs() < 1e-12);
            }
        }
        for i in 0..4 {
            assert!((a.v[i] - b.v[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn run_ensemble_zero_steps_and_determinism() {
        let dom = ConvexDomain::cube(1.0, 2).unwrap();
        let p = ChainParams::new(2, 2, 0.5, 1.0, 1.0).unwrap();
        let e0 = Ensemble::sample_uniform_maxwellian(1, &p, &dom, 5).unwrap();
        let mut e = e0.clone();
        let snaps = run_ensemble(&mut e, Dynamics::Kinetic, 0.0, 0.1, 1, &p, &dom, &ZeroFlow { dim: 2 }, &StepOptions::default())
            .unwrap();
        assert_eq!(snaps.len(), 1);
        assert_eq!(snaps[0].chains, e0.chains);

        let run = || {
            let mut e = Ensemble::sample_uniform_maxwellian(64, &p, &dom, 11).unwrap();
            run_ensemble(&mut e, Dynamics::Kinetic, 0.2, 0.01, 5, &p, &dom, &ZeroFlow { dim: 2 }, &StepOptions::default())
                .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), 5);
        for (x, y) in a.iter().zip(&b) {
            for (cx, cy) in x.chains.iter().zip(&y.chains) {
                assert!(cx.r.iter().zip(&cy.r).all(|(p, q)| p.to_bits() == q.to_bits()));
                assert!(cx.v.iter().zip(&cy.v).all(|(p, q)| p.to_bits() == q.to_bits()));
            }
        }
    }

    #[test]
    fn step_count_requires_divisibility() {
        assert_eq!(step_count(1.0, 0.1).unwrap(), 10);
        assert!(step_count(1.0, 0.3).is_err());
        assert!(step_count(1.0, 0.0).is_err());
    }

    #[test]
    fn ou_transition_small_step_limits() {
        // dt << ε²: Var X ≈ (2β/ε²) dt³/3 ; dt >> ε²: Var(Δr) ≈ 2β dt
        let eps = 0.1;
        let t = OuTransition::new(1e-6, eps, 1.0);
        let var_x = t.cross * t.cross + t.sd_x_perp * t.sd_x_perp;
        let expect = 2.0 / (eps * eps) * 1e-18 / 3.0;
        assert!((var_x / expect - 1.0).abs() < 1e-3);
        let t = OuTransition::new(10.0, eps, 1.0);
        let var_x = t.cross * t.cross + t.sd_x_perp * t.sd_x_perp;
        let var_r = var_x / (eps * eps);
        assert!((var_r / 20.0 - 1.0).abs() < 1e-2);
        assert!((t.sd_v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn moments_of_indicator_and_maxwellian() {
        let grid = TensorGrid::uniform(-1.0, 1.0, 4, 2).unwrap();
        let chains: Vec<ChainState> = (0..10).map(|i| ChainState { r: vec![0.1, 0.1], v: vec![i as f64, -(i as f64)] }).collect();
        let m = empirical_moments(&chains, &grid, 0.5).unwrap();
        let b = grid.flat(&[2, 2]);
        assert_eq!(m.rho_bar[b], 1.0);
        assert_eq!(m.rho_bar.iter().sum::<f64>(), 1.0);
        assert!(m.current[0].is_none());
        assert_eq!(m.current[b].as_ref().unwrap(), &vec![9.0, -9.0]);
        let grid3 = TensorGrid::uniform(-1.0, 1.0, 4, 3).unwrap();
        assert!(matches!(empirical_moments(&chains, &grid3, 0.5), Err(Error::GridMismatch(_))));
    }
}
