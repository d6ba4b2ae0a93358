//! Staggered exchange between the chain ensemble and the flow solver.
//!
//! Starting from `u ≡ 0`, each exchange advances the chains `interval` micro
//! steps in the frozen flow, bins the Kramers stress on the flow cells and
//! takes one flow step forced by `∇·𝕂`.

use std::io::Write;

use hookean_mkv::chain_dynamics::{Dynamics, Ensemble, StepOptions};
use hookean_mkv::oseen::{Forcing, OseenSolver, PressureField, VelocityField};
use hookean_mkv::stress::{kramers_from_ensemble, stress_bound, StressField};
use hookean_mkv::TensorGrid;
use serde::Serialize;

use crate::config::{CouplingMode, SimConfig};
use crate::error::{config, Context, Result};
use crate::output::{RunDir, Summary};
use crate::scenarios::PSD_TOL;

/// State after one exchange.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ExchangeRecord {
    pub exchange: usize,
    pub time: f64,
    pub max_stress: f64,
    pub stress_bound: f64,
    pub bound_ok: bool,
    pub psd_ok: bool,
    pub kinetic_energy: f64,
    pub max_divergence: f64,
    pub max_velocity: f64,
}

#[derive(Debug, Clone)]
pub struct CoupledTrajectory {
    pub records: Vec<ExchangeRecord>,
    pub velocity: VelocityField,
    pub pressure: PressureField,
    pub stress: StressField,
    pub ensemble: Ensemble,
    pub dt_micro: f64,
}

/// The flow cells, which double as the stress bins.
pub fn flow_grid(cfg: &SimConfig) -> Result<TensorGrid> {
    let o = cfg.oseen.as_ref().ok_or_else(|| config("oseen", "section required"))?;
    let (lo, hi) = cfg.domain()?.bounding_box();
    TensorGrid::new(&lo, &hi, &[o.grid_n, o.grid_n]).context("flow grid")
}

/// Run the exchange loop to `coupling.t_final`; `on_exchange` sees the
/// state after every exchange.
pub fn coupled_iteration(
    cfg: &SimConfig,
    seed: u64,
    mut on_exchange: impl FnMut(&ExchangeRecord, &VelocityField, &StressField) -> Result<()>,
) -> Result<CoupledTrajectory> {
    let c = cfg.coupling.as_ref().ok_or_else(|| config("coupling", "section required"))?;
    let o = cfg.oseen.as_ref().ok_or_else(|| config("oseen", "section required"))?;
    let params = cfg.chain_params()?;
    let domain = cfg.domain()?;
    let grid = flow_grid(cfg)?;
    let solver = OseenSolver::new(&grid, cfg.flow_params()?).context("flow solver")?;
    let exchanges = hookean_mkv::chain_dynamics::step_count(c.t_final, o.dt).context("coupling.t_final")?;
    let dt_micro = o.dt / c.interval as f64;
    let bound = stress_bound(params.springs, params.spring_constant, domain.configuration_domain().sup_norm_sq());
    let opts = StepOptions::default();

    let mut ens = Ensemble::sample_uniform_maxwellian(c.n_chains, &params, &domain, seed).context("ensemble")?;
    let mut u = VelocityField::zeros(&grid, 0.0).context("flow")?;
    let mut p = PressureField::zeros(&grid, 0.0);
    let mut k = kramers_from_ensemble(&ens.chains, &grid, params.spring_constant, 0.0);
    let mut records = Vec::with_capacity(exchanges);
    for e in 1..=exchanges {
        for _ in 0..c.interval {
            ens.step(Dynamics::Kinetic, dt_micro, &params, &domain, &u, &opts).context("micro step")?;
        }
        let t = e as f64 * o.dt;
        k = kramers_from_ensemble(&ens.chains, &grid, params.spring_constant, t);
        let bound_ok = k.check_bound(bound).is_ok();
        let psd_ok = k.check_symmetric_psd(PSD_TOL).is_ok();
        if c.mode == CouplingMode::TwoWay {
            let source = if c.stress_scale == 0.0 {
                None
            } else {
                let mut f = Forcing::from_stress(&k).context("stress forcing")?;
                f.fu.iter_mut().chain(f.fv.iter_mut()).for_each(|x| *x *= c.stress_scale);
                Some(f)
            };
            let (un, pn) = solver.step(&u, &p, o.dt, source.as_ref()).context("flow step")?;
            u = un;
            p = pn;
        }
        let rec = ExchangeRecord {
            exchange: e,
            time: t,
            max_stress: k.max_frobenius(),
            stress_bound: bound,
            bound_ok,
            psd_ok,
            kinetic_energy: u.kinetic_energy(),
            max_divergence: u.max_divergence(),
            max_velocity: u.max_abs(),
        };
        on_exchange(&rec, &u, &k)?;
        records.push(rec);
    }
    Ok(CoupledTrajectory { records, velocity: u, pressure: p, stress: k, ensemble: ens, dt_micro })
}

pub fn simulate_coupled(cfg: &SimConfig, seed: u64, dir: &RunDir) -> Result<Summary> {
    let every = cfg.coupling.as_ref().map_or(0, |c| c.snapshot_every);
    let traj = coupled_iteration(cfg, seed, |rec, u, k| {
        if every > 0 && rec.exchange % every == 0 {
            let e = rec.exchange;
            dir.with_file(&format!("flow/velocity_{e:06}.csv"), |w| u.write_csv(None, w, true))?;
            dir.with_file(&format!("stress/stress_{e:06}.csv"), |w| k.write_csv(w, true))?;
        }
        Ok(())
    })?;
    dir.with_file("exchanges.csv", |w| {
        writeln!(w, "exchange,time,max_stress,stress_bound,bound_ok,psd_ok,kinetic_energy,max_divergence,max_velocity")?;
        for r in &traj.records {
            writeln!(
                w,
                "{},{:e},{:.17e},{:.17e},{},{},{:.17e},{:e},{:.17e}",
                r.exchange,
                r.time,
                r.max_stress,
                r.stress_bound,
                r.bound_ok,
                r.psd_ok,
                r.kinetic_energy,
                r.max_divergence,
                r.max_velocity
            )?;
        }
        Ok(())
    })?;
    dir.with_file("velocity_final.csv", |w| traj.velocity.write_csv(Some(&traj.pressure), w, true))?;
    dir.with_file("stress_final.csv", |w| traj.stress.write_csv(w, true))?;

    let mut s = Summary::new("simulate-coupled");
    let bad_bound = traj.records.iter().filter(|r| !r.bound_ok).count();
    let bad_psd = traj.records.iter().filter(|r| !r.psd_ok).count();
    let div = traj.records.iter().map(|r| r.max_divergence).fold(0.0, f64::max);
    s.check("stress-bound", bad_bound == 0, format!("{bad_bound} exchanges over the bound"));
    s.check("stress-psd", bad_psd == 0, format!("{bad_psd} exchanges not symmetric PSD"));
    s.check("divergence", div <= crate::verify::DIVERGENCE_TOL, format!("max {div:e}"));
    s.metric("exchanges", traj.records.len());
    s.metric("dt_micro", traj.dt_micro);
    s.metric("max_stress", traj.records.iter().map(|r| r.max_stress).fold(0.0, f64::max));
    s.metric("final_kinetic_energy", traj.records.last().map(|r| r.kinetic_energy));
    Ok(s)
}
