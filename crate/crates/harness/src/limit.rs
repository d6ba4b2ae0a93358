//! Small-mass sweep: chain ensembles at decreasing `ε` against the
//! configuration-space density `η` in the same flow.
//!
//! Replicate 0 runs to the last requested time; further replicates stop at
//! the first, where the pooled spatial distance is taken.

use std::io::Write;

use hookean_mkv::chain_dynamics::{step_count, Dynamics, Ensemble, StepOptions};
use hookean_mkv::macro_limit::{configuration_grid, equilibration_metrics, EtaSolver, MacroDensity};
use serde::Serialize;

use crate::config::{LimitSpec, SimConfig};
use crate::error::{config, Context, Result};
use crate::output::{RunDir, Summary};

/// Band for successive ratios of the second-moment deviation.
pub const SECOND_MOMENT_RATIO: (f64, f64) = (0.35, 1.0);
/// Error bars allowed in the monotonicity of the spatial distance.
pub const SPATIAL_ERROR_BARS: f64 = 2.0;
pub const ETA_SAFETY: f64 = 0.9;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LimitSample {
    pub eps: f64,
    pub replicate: usize,
    pub time: f64,
    pub velocity_l1: f64,
    pub second_moment: f64,
    pub spatial_l1: f64,
}

/// Replicate mean and standard error at one `(ε, t)`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PooledMetric {
    pub eps: f64,
    pub time: f64,
    pub replicates: usize,
    pub spatial_mean: f64,
    pub spatial_se: f64,
    pub velocity_mean: f64,
    pub second_moment_mean: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LimitReport {
    pub eps: Vec<f64>,
    pub times: Vec<f64>,
    pub samples: Vec<LimitSample>,
    pub pooled: Vec<PooledMetric>,
    pub eta_steps: usize,
    /// Metrics of the initial ensemble, which is exactly Maxwellian and
    /// uniform: the Monte Carlo floor at this ensemble size.
    pub noise_floor: LimitSample,
}

impl LimitReport {
    /// Replicate-0 metrics at `time`, in sweep order.
    pub fn single(&self, time: f64) -> Vec<LimitSample> {
        self.eps
            .iter()
            .filter_map(|&e| self.samples.iter().find(|s| s.eps == e && s.replicate == 0 && s.time == time).copied())
            .collect()
    }

    pub fn pooled_at(&self, time: f64) -> Vec<PooledMetric> {
        self.eps.iter().filter_map(|&e| self.pooled.iter().find(|p| p.eps == e && p.time == time).copied()).collect()
    }
}

/// `η` at each requested time, from the uniform density the ensembles start
/// from.
fn eta_snapshots(cfg: &SimConfig, spec: &LimitSpec, times: &[f64]) -> Result<(Vec<MacroDensity>, usize)> {
    let params = cfg.chain_params()?;
    let domain = cfg.domain()?;
    let u = cfg.flow()?;
    let grid = configuration_grid(&domain, params.beads(), spec.n_r).context("eta grid")?;
    let solver = EtaSolver::new(&grid, &params, true).context("eta solver")?;
    let mut eta = MacroDensity::uniform(&grid).context("eta")?;
    let mut out = Vec::new();
    let (mut t, mut steps) = (0.0, 0);
    for &target in times {
        steps += solver.advance(&mut eta, target - t, u.as_ref(), ETA_SAFETY).context("eta advance")?;
        eta.time = target;
        t = target;
        out.push(eta.clone());
    }
    Ok((out, steps))
}

pub fn limit_sweep(cfg: &SimConfig, seed: u64) -> Result<LimitReport> {
    let spec = cfg.limit.as_ref().ok_or_else(|| config("limit", "section required"))?;
    let mut times = spec.times.clone();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let domain = cfg.domain()?;
    let u = cfg.flow()?;
    let (etas, eta_steps) = eta_snapshots(cfg, spec, &times)?;
    let beads = cfg.chain.springs + 1;
    let bins = configuration_grid(&domain, beads, spec.bins).context("bins")?;
    let opts = StepOptions::default();
    let p0 = cfg.chain_params_eps(spec.eps_sweep[0])?;
    let ens0 = Ensemble::sample_uniform_maxwellian(spec.n_chains, &p0, &domain, seed).context("ensemble")?;
    let uniform = MacroDensity::uniform(&etas[0].grid).context("eta")?;
    let m0 = equilibration_metrics(&ens0.chains, &bins, spec.v_bins, &uniform, &p0).context("metrics")?;
    let noise_floor = LimitSample {
        eps: f64::NAN,
        replicate: 0,
        time: 0.0,
        velocity_l1: m0.velocity_l1,
        second_moment: m0.second_moment,
        spatial_l1: m0.spatial_l1,
    };
    let mut samples = Vec::new();
    for &eps in &spec.eps_sweep {
        let params = cfg.chain_params_eps(eps)?;
        let dt = spec.dt_factor * eps * eps;
        for rep in 0..spec.replicates {
            let horizon = if rep == 0 { times.len() } else { 1 };
            let rseed = seed.wrapping_add(rep as u64);
            let mut ens = Ensemble::sample_uniform_maxwellian(spec.n_chains, &params, &domain, rseed).context("ensemble")?;
            let mut t = 0.0;
            for k in 0..horizon {
                let n = step_count(times[k] - t, dt).context("limit.dt_factor")?;
                for _ in 0..n {
                    ens.step(Dynamics::Kinetic, dt, &params, &domain, u.as_ref(), &opts).context("ensemble step")?;
                }
                t = times[k];
                let m = equilibration_metrics(&ens.chains, &bins, spec.v_bins, &etas[k], &params).context("metrics")?;
                log::info!("eps {eps} replicate {rep} t {t}: {m:?}");
                samples.push(LimitSample {
                    eps,
                    replicate: rep,
                    time: t,
                    velocity_l1: m.velocity_l1,
                    second_moment: m.second_moment,
                    spatial_l1: m.spatial_l1,
                });
            }
        }
    }
    let mut pooled = Vec::new();
    for &eps in &spec.eps_sweep {
        for &time in &times {
            let s: Vec<&LimitSample> = samples.iter().filter(|s| s.eps == eps && s.time == time).collect();
            let n = s.len() as f64;
            let mean = |f: fn(&LimitSample) -> f64| s.iter().map(|x| f(x)).sum::<f64>() / n;
            let sm = mean(|x| x.spatial_l1);
            let se = if s.len() > 1 {
                (s.iter().map(|x| (x.spatial_l1 - sm).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
            } else {
                f64::NAN
            };
            pooled.push(PooledMetric {
                eps,
                time,
                replicates: s.len(),
                spatial_mean: sm,
                spatial_se: se,
                velocity_mean: mean(|x| x.velocity_l1),
                second_moment_mean: mean(|x| x.second_moment),
            });
        }
    }
    Ok(LimitReport { eps: spec.eps_sweep.clone(), times, samples, pooled, eta_steps, noise_floor })
}

/// Velocity distance strictly decreasing along the sweep, and successive
/// second-moment ratios inside the band.
pub fn equilibration_verdict(single: &[LimitSample]) -> (bool, bool, Vec<f64>) {
    let decreasing = single.windows(2).all(|w| w[1].velocity_l1 < w[0].velocity_l1);
    let ratios: Vec<f64> = single.windows(2).map(|w| w[1].second_moment / w[0].second_moment).collect();
    let banded = ratios.iter().all(|r| (SECOND_MOMENT_RATIO.0..=SECOND_MOMENT_RATIO.1).contains(r));
    (decreasing, banded, ratios)
}

/// `m_{k+1} ≤ m_k + 2 √(se_k² + se_{k+1}²)` along the sweep.
pub fn agreement_verdict(pooled: &[PooledMetric]) -> bool {
    pooled.windows(2).all(|w| {
        let bar = (w[0].spatial_se.powi(2) + w[1].spatial_se.powi(2)).sqrt();
        w[1].spatial_mean <= w[0].spatial_mean + SPATIAL_ERROR_BARS * bar
    })
}

pub fn compare_limit(cfg: &SimConfig, seed: u64, dir: &RunDir) -> Result<Summary> {
    let rep = limit_sweep(cfg, seed)?;
    dir.write_json("limit.json", &rep)?;
    dir.with_file("metrics.csv", |w| {
        writeln!(w, "eps,replicate,time,velocity_l1,second_moment,spatial_l1")?;
        for s in &rep.samples {
            writeln!(
                w,
                "{},{},{},{:.17e},{:.17e},{:.17e}",
                s.eps, s.replicate, s.time, s.velocity_l1, s.second_moment, s.spatial_l1
            )?;
        }
        Ok(())
    })?;
    for &eps in &rep.eps {
        let per: Vec<&LimitSample> = rep.samples.iter().filter(|s| s.eps == eps).collect();
        dir.write_json(&format!("eps_{eps}.json"), &per)?;
    }
    let (t_first, t_last) = (rep.times[0], *rep.times.last().expect("nonempty"));
    let single = rep.single(t_last);
    let (decreasing, banded, ratios) = equilibration_verdict(&single);
    let pooled = rep.pooled_at(t_first);
    let agree = agreement_verdict(&pooled);
    let mut s = Summary::new("compare-limit");
    let vl: Vec<f64> = single.iter().map(|x| x.velocity_l1).collect();
    s.check("velocity-l1-decreasing", decreasing, format!("t = {t_last}: {vl:?}"));
    s.check("second-moment-ratios", banded, format!("t = {t_last}: ratios {ratios:?}"));
    let sp: Vec<(f64, f64)> = pooled.iter().map(|p| (p.spatial_mean, p.spatial_se)).collect();
    s.check("spatial-l1-decreasing", agree, format!("t = {t_first}: (mean, se) {sp:?}"));
    s.metric("velocity_l1", vl);
    s.metric("second_moment_ratios", ratios);
    s.metric("spatial", sp);
    s.metric("eta_steps", rep.eta_steps);
    s.metric("noise_floor", rep.noise_floor);
    Ok(s)
}
