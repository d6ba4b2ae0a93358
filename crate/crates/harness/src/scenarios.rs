//! Standalone runs of the chain ensemble, the kinetic Fokker–Planck solver
//! and the configuration-space solver.

use hookean_mkv::chain_dynamics::{empirical_moments, Ensemble, StepOptions};
use hookean_mkv::flow::VelocitySampler;
use hookean_mkv::fokker_planck::{
    assemble_fp_operator, check_energy_inequality, DensityField, EnergyReport, FpDiagnostics, FpOperator, PhaseGrid,
};
use hookean_mkv::io::{write_moments_csv, write_snapshot_csv, FieldContainer};
use hookean_mkv::macro_limit::{configuration_grid, EtaSolver, MacroDensity};
use hookean_mkv::stress::{kramers_from_ensemble, stress_bound};
use hookean_mkv::{ChainParams, ConvexDomain, TensorGrid};
use serde::Serialize;

use crate::config::{FpSpec, InitialFp, InitialMacro, MacroSpec, SimConfig};
use crate::error::{config, Context, Result};
use crate::output::{RunDir, Summary};

/// Tolerance on the relative mass drift of the deterministic solvers.
pub const MASS_TOL: f64 = 1e-10;
pub const POSITIVITY_TOL: f64 = 1e-12;
pub const PSD_TOL: f64 = 1e-12;

fn dump(dir: &RunDir, name: &str, c: &FieldContainer) -> Result<()> {
    dir.with_file(name, |w| c.write_to(w))
}

/// `ρ̂ = (1 + ½ sin(π r₀/2ℓ) tanh v₀)(1 + ¼ cos(π r_last/2ℓ))`, a smooth
/// nonequilibrium datum with nonzero current.
pub fn perturbed_density(grid: &PhaseGrid, beta: f64) -> Result<DensityField> {
    let dd = grid.axes();
    let nv = grid.v.len();
    let (mut ri, mut vi) = (vec![0; dd], vec![0; dd]);
    let len = grid.r.upper(0) - grid.r.lower()[0];
    let mut vals = vec![0.0; grid.len()];
    for ir in 0..grid.r.len() {
        grid.r.unflat(ir, &mut ri);
        let r0 = grid.r.center(0, ri[0]);
        let rl = grid.r.center(dd - 1, ri[dd - 1]);
        for iv in 0..nv {
            grid.v.unflat(iv, &mut vi);
            let v0 = grid.v.center(0, vi[0]);
            let a = 1.0 + 0.5 * (std::f64::consts::PI * r0 / len).sin() * v0.tanh();
            let b = 1.0 + 0.25 * (std::f64::consts::PI * rl / len).cos();
            vals[ir * nv + iv] = a * b;
        }
    }
    DensityField::from_rho_hat(grid, beta, vals).context("initial density")
}

pub fn fp_setup(spec: &FpSpec, params: &ChainParams, domain: &ConvexDomain) -> Result<(FpOperator, DensityField)> {
    let beta = params.beta;
    let v_max = spec.v_max.unwrap_or(6.0 * beta.sqrt());
    let grid = PhaseGrid::new(domain, params.beads(), spec.n_r, spec.n_v, v_max, beta).context("phase grid")?;
    let op = assemble_fp_operator(&grid, params, spec.alpha).context("fp operator")?;
    let rho = match spec.initial {
        InitialFp::Gibbs => DensityField::gibbs(&grid, params),
        InitialFp::Uniform => DensityField::uniform(&grid, beta),
        InitialFp::Perturbed => return Ok((op, perturbed_density(&grid, beta)?)),
    }
    .context("initial density")?;
    Ok((op, rho))
}

/// Result of a kinetic Fokker–Planck run.
#[derive(Debug, Clone)]
pub struct FpOutcome {
    pub initial: DensityField,
    pub last: DensityField,
    pub rows: Vec<FpDiagnostics>,
    pub energy: EnergyReport,
    pub dt: f64,
    pub min_before_clip: f64,
    pub clipped_steps: usize,
}

/// Integrate `spec.steps` steps; `on_step(step, density)` sees every state
/// including the initial one.
pub fn fp_run(
    op: &FpOperator,
    mut rho: DensityField,
    spec: &FpSpec,
    u: &dyn VelocitySampler,
    half_width: f64,
    mut on_step: impl FnMut(usize, &DensityField) -> Result<()>,
) -> Result<FpOutcome> {
    let bound = op.stability_bound(u);
    let dt = spec.dt.unwrap_or(spec.safety * bound);
    let u_sup = sup_on_domain(u, op);
    let initial = rho.clone();
    let mut rows = vec![FpDiagnostics::record(op, &rho, u_sup)];
    on_step(0, &rho)?;
    let mut min_before_clip = rho.min();
    let mut clipped_steps = 0;
    for s in 1..=spec.steps {
        let rep = op.step(&mut rho, dt, u).context("fp step")?;
        min_before_clip = min_before_clip.min(rep.min_before_clip);
        clipped_steps += usize::from(rep.clipped);
        rows.push(FpDiagnostics::record(op, &rho, u_sup));
        on_step(s, &rho)?;
    }
    let energy = check_energy_inequality(&rows, &op.params, half_width);
    Ok(FpOutcome { initial, last: rho, rows, energy, dt, min_before_clip, clipped_steps })
}

/// `max ‖u‖_∞` over the bead positions of the phase grid's `r` cells.
fn sup_on_domain(u: &dyn VelocitySampler, op: &FpOperator) -> f64 {
    let g = &op.grid.r;
    let d = op.grid.dim;
    let mut idx = vec![0; g.ndim()];
    let mut best = 0.0f64;
    for c in 0..g.len() {
        g.unflat(c, &mut idx);
        for j in 0..op.grid.beads {
            let p: Vec<f64> = (0..d).map(|k| g.center(j * d + k, idx[j * d + k])).collect();
            best = best.max(u.sample(&p).iter().fold(0.0f64, |m, x| m.max(x.abs())));
        }
    }
    best
}

pub fn half_width(domain: &ConvexDomain) -> f64 {
    domain.configuration_domain().half_width()
}

pub fn simulate_fp(cfg: &SimConfig, dir: &RunDir) -> Result<Summary> {
    let spec = cfg.fp.as_ref().ok_or_else(|| config("fp", "section required"))?;
    let params = cfg.chain_params()?;
    let domain = cfg.domain()?;
    let u = cfg.flow()?;
    let (op, rho) = fp_setup(spec, &params, &domain)?;
    let (beta, eps) = (params.beta, params.eps);
    let every = spec.dump_every;
    let last = spec.steps;
    let full = op.grid.full();
    let out = fp_run(&op, rho, spec, u.as_ref(), half_width(&domain), |s, rho| {
        if s == 0 || s == last || (every > 0 && s % every == 0) {
            let c = FieldContainer::new(&full, beta, eps, rho.time, rho.rho_hat.clone()).context("dump")?;
            dump(dir, &format!("fields/rho_hat_{s:06}.bin"), &c)?;
        }
        Ok(())
    })?;
    dir.with_file("diagnostics.csv", |w| FpDiagnostics::write_csv(&out.rows, w))?;
    dir.write_json("energy.json", &EnergyJson::from(&out.energy))?;

    let mut s = Summary::new("simulate-fp");
    let drift = out.rows.iter().map(|r| (r.mass - 1.0).abs()).fold(0.0, f64::max);
    s.check("mass", drift <= MASS_TOL, format!("max |mass - 1| = {drift:e}"));
    s.check("positivity", out.min_before_clip >= -POSITIVITY_TOL, format!("min before clipping {:e}", out.min_before_clip));
    s.check("energy-inequality", out.energy.violations.is_empty(), format!("{} violations", out.energy.violations.len()));
    if is_zero_flow(cfg) {
        s.check(
            "gibbs-entropy-monotone",
            out.energy.gibbs_increases.is_empty(),
            format!("{} increasing steps", out.energy.gibbs_increases.len()),
        );
    }
    s.metric("dt", out.dt);
    s.metric("steps", spec.steps);
    s.metric("mass_drift", drift);
    s.metric("l1_change", out.last.l1_distance(&out.initial, beta));
    s.metric("final_entropy", out.rows.last().map(|r| r.entropy));
    s.metric("final_gibbs_entropy", out.rows.last().map(|r| r.gibbs_entropy));
    Ok(s)
}

fn is_zero_flow(cfg: &SimConfig) -> bool {
    cfg.flow.kind == crate::config::FlowKind::Zero || cfg.flow.amplitude == 0.0
}

#[derive(Serialize)]
struct EnergyJson {
    times: Vec<f64>,
    lhs: Vec<f64>,
    rhs: Vec<f64>,
    dissipation_integral: Vec<f64>,
    violations: Vec<usize>,
    gibbs_increases: Vec<usize>,
}

impl From<&EnergyReport> for EnergyJson {
    fn from(r: &EnergyReport) -> Self {
        Self {
            times: r.times.clone(),
            lhs: r.lhs.clone(),
            rhs: r.rhs.clone(),
            dissipation_integral: r.dissipation_integral.clone(),
            violations: r.violations.clone(),
            gibbs_increases: r.gibbs_increases.clone(),
        }
    }
}

/// One recorded state of the configuration solver.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MacroRow {
    pub time: f64,
    pub mass: f64,
    pub min: f64,
    pub max: f64,
    pub l1_to_gibbs: f64,
}

pub fn macro_setup(spec: &MacroSpec, params: &ChainParams, domain: &ConvexDomain) -> Result<(EtaSolver, MacroDensity)> {
    let grid = configuration_grid(domain, params.beads(), spec.n_r).context("configuration grid")?;
    let solver = EtaSolver::new(&grid, params, true).context("eta solver")?;
    let eta = match spec.initial {
        InitialMacro::Uniform => MacroDensity::uniform(&grid),
        InitialMacro::Gibbs => MacroDensity::gibbs(&grid, params),
    }
    .context("initial eta")?;
    Ok((solver, eta))
}

/// Advance to `t_final`, recording every `record_every`.
pub fn macro_run(
    solver: &EtaSolver,
    eta: &mut MacroDensity,
    spec: &MacroSpec,
    u: &dyn VelocitySampler,
    mut on_record: impl FnMut(&MacroDensity) -> Result<()>,
) -> Result<Vec<MacroRow>> {
    let gibbs = MacroDensity::gibbs(&solver.grid, &solver.params).context("gibbs")?;
    let row = |e: &MacroDensity| -> Result<MacroRow> {
        Ok(MacroRow {
            time: e.time,
            mass: e.mass(),
            min: e.min(),
            max: e.max(),
            l1_to_gibbs: e.l1_distance(&gibbs).context("l1")?,
        })
    };
    let mut rows = vec![row(eta)?];
    on_record(eta)?;
    let n = (spec.t_final / spec.record_every).round() as usize;
    let mut t = 0.0;
    for k in 1..=n.max(usize::from(spec.t_final > 0.0)) {
        let target = if k == n.max(1) { spec.t_final } else { k as f64 * spec.record_every };
        solver.advance(eta, target - t, u, spec.safety).context("eta step")?;
        eta.time = target;
        t = target;
        rows.push(row(eta)?);
        on_record(eta)?;
    }
    Ok(rows)
}

pub fn simulate_macro(cfg: &SimConfig, dir: &RunDir) -> Result<Summary> {
    let spec = cfg.macro_.as_ref().ok_or_else(|| config("macro", "section required"))?;
    let params = cfg.chain_params()?;
    let domain = cfg.domain()?;
    let u = cfg.flow()?;
    let (solver, mut eta) = macro_setup(spec, &params, &domain)?;
    let mut k = 0;
    let rows = macro_run(&solver, &mut eta, spec, u.as_ref(), |e| {
        let c = FieldContainer::new(&e.grid, params.beta, 0.0, e.time, e.eta.clone()).context("dump")?;
        dump(dir, &format!("fields/eta_{k:06}.bin"), &c)?;
        k += 1;
        Ok(())
    })?;
    dir.with_file("diagnostics.csv", |w| {
        writeln!(w, "time,mass,min,max,l1_to_gibbs")?;
        for r in &rows {
            writeln!(w, "{:e},{:.17e},{:e},{:e},{:.17e}", r.time, r.mass, r.min, r.max, r.l1_to_gibbs)?;
        }
        Ok(())
    })?;
    let mut s = Summary::new("simulate-macro");
    let drift = rows.iter().map(|r| (r.mass - 1.0).abs()).fold(0.0, f64::max);
    let min = rows.iter().map(|r| r.min).fold(f64::INFINITY, f64::min);
    s.check("mass", drift <= MASS_TOL, format!("max |mass - 1| = {drift:e}"));
    s.check("positivity", min >= 0.0, format!("min eta {min:e}"));
    s.metric("mass_drift", drift);
    s.metric("final_l1_to_gibbs", rows.last().map(|r| r.l1_to_gibbs));
    Ok(s)
}

use std::io::Write;

/// Per-dump summary of an ensemble run.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct KineticRow {
    pub time: f64,
    pub kinetic_energy: f64,
    pub mean_q2: f64,
    pub max_stress: f64,
}

fn kinetic_row(time: f64, ens: &Ensemble, params: &ChainParams, max_stress: f64) -> KineticRow {
    let n = ens.len() as f64;
    let d = params.dim;
    let ke = ens.chains.iter().map(|c| 0.5 * c.v.iter().map(|x| x * x).sum::<f64>()).sum::<f64>() / n;
    let q2 = ens
        .chains
        .iter()
        .map(|c| {
            (0..params.springs).map(|j| (0..d).map(|k| (c.r[(j + 1) * d + k] - c.r[j * d + k]).powi(2)).sum::<f64>()).sum::<f64>()
        })
        .sum::<f64>()
        / n;
    KineticRow { time, kinetic_energy: ke, mean_q2: q2, max_stress }
}

/// The histogram grid on the bounding box of `Ω^{J+1}`.
pub fn moment_grid(domain: &ConvexDomain, beads: usize, bins: usize) -> Result<TensorGrid> {
    let (lo, hi) = domain.bounding_box();
    let d = lo.len();
    let l: Vec<f64> = (0..beads * d).map(|a| lo[a % d]).collect();
    let h: Vec<f64> = (0..beads * d).map(|a| hi[a % d]).collect();
    TensorGrid::new(&l, &h, &vec![bins; beads * d]).context("moment grid")
}

pub fn stress_grid(domain: &ConvexDomain, bins: usize) -> Result<TensorGrid> {
    let (lo, hi) = domain.bounding_box();
    TensorGrid::new(&lo, &hi, &vec![bins; lo.len()]).context("stress grid")
}

pub fn simulate_kinetic(cfg: &SimConfig, seed: u64, dir: &RunDir) -> Result<Summary> {
    let spec = cfg.kinetic.as_ref().ok_or_else(|| config("kinetic", "section required"))?;
    let params = cfg.chain_params()?;
    let domain = cfg.domain()?;
    let u = cfg.flow()?;
    let mut ens = Ensemble::sample_uniform_maxwellian(spec.n_chains, &params, &domain, seed).context("ensemble")?;
    let steps = hookean_mkv::chain_dynamics::step_count(spec.t_final, spec.dt).context("kinetic.dt")?;
    let mgrid = moment_grid(&domain, params.beads(), spec.bins)?;
    let sgrid = stress_grid(&domain, spec.stress_bins)?;
    let bound = stress_bound(params.springs, params.spring_constant, domain.configuration_domain().sup_norm_sq());
    let opts = StepOptions::default();
    let mut s = Summary::new("simulate-kinetic");
    let mut rows = Vec::new();
    let mut all_ok = true;
    let keep = spec.snapshot_chains.unwrap_or(spec.n_chains).min(spec.n_chains);
    let mut record = |step: usize, ens: &Ensemble, first: bool, s: &mut Summary| -> Result<()> {
        let t = step as f64 * spec.dt;
        dir.with_file(&format!("snapshots/snapshot_{step:06}.csv"), |w| {
            write_snapshot_csv(w, t, &ens.chains[..keep], params.dim, true)
        })?;
        let m = empirical_moments(&ens.chains, &mgrid, params.eps).context("moments")?;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(!first)
            .write(true)
            .truncate(first)
            .open(dir.path.join("moments.csv"))
            .map_err(crate::error::io(dir.path.join("moments.csv")))?;
        write_moments_csv(&mut f, t, &m, first).map_err(crate::error::io(dir.path.join("moments.csv")))?;
        let k = kramers_from_ensemble(&ens.chains, &sgrid, params.spring_constant, t);
        let ok_b = k.check_bound(bound).is_ok();
        let ok_p = k.check_symmetric_psd(PSD_TOL).is_ok();
        all_ok &= ok_b && ok_p;
        if !(ok_b && ok_p) {
            s.check("stress", false, format!("t = {t}: bound ok {ok_b}, psd ok {ok_p}"));
        }
        dir.with_file(&format!("stress/stress_{step:06}.csv"), |w| k.write_csv(w, true))?;
        rows.push(kinetic_row(t, ens, &params, k.max_frobenius()));
        Ok(())
    };
    record(0, &ens, true, &mut s)?;
    for step in 1..=steps {
        ens.step(spec.dynamics.into(), spec.dt, &params, &domain, u.as_ref(), &opts).context("ensemble step")?;
        if step == steps || (spec.snapshot_every > 0 && step % spec.snapshot_every == 0) {
            record(step, &ens, false, &mut s)?;
        }
    }
    dir.with_file("diagnostics.csv", |w| {
        writeln!(w, "time,kinetic_energy,mean_q2,max_stress")?;
        for r in &rows {
            writeln!(w, "{:e},{:.17e},{:.17e},{:.17e}", r.time, r.kinetic_energy, r.mean_q2, r.max_stress)?;
        }
        Ok(())
    })?;
    s.check("stress-bound-and-psd", all_ok, format!("bound {bound}"));
    s.metric("steps", steps);
    s.metric("stress_bound", bound);
    s.metric("final", rows.last().copied());
    Ok(s)
}
