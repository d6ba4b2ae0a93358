//! Deterministic verification runs: the flow solver against a manufactured
//! solution, and the structural identities of the small-mass limit.

use std::io::Write;

use hookean_mkv::chain_dynamics::ChainState;
use hookean_mkv::flow::CellularFlow;
use hookean_mkv::macro_limit::{
    build_rouse, classical_fp_rhs, com_operator, inverse_change_of_variables, operator_identity_check, ClassicalGrid,
    ConfigMaxwellian, RouseStructure,
};
use hookean_mkv::oseen::{run_flow, Forcing, OseenSolver, PressureField, VelocityField};
use hookean_mkv::stress::{kramers_from_ensemble, kramers_macro, ConfigQuadrature};
use hookean_mkv::{ConvexDomain, TensorGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::config::SimConfig;
use crate::error::{config, Context, Result};
use crate::output::{RunDir, Summary};

pub const MMS_RATE_MIN: f64 = 1.8;
pub const DIVERGENCE_TOL: f64 = 1e-10;
pub const ENERGY_ROUNDOFF: f64 = 1e-14;
pub const ROUSE_MAX_SPRINGS: usize = 8;
pub const ROUSE_EIG_TOL: f64 = 1e-12;
pub const IDENTITY_TOL: f64 = 1e-6;
pub const Q_SUM_TOL: f64 = 1e-6;
pub const KRAMERS_QUAD_TOL: f64 = 1e-4;
pub const KRAMERS_SE: f64 = 4.0;

/// `u = (−4y(1−x²)²(1−y²), 4x(1−x²)(1−y²)²)` on `[−1, 1]²`, `p = xy`.
pub fn mms_velocity(x: f64, y: f64) -> [f64; 2] {
    let (sx, sy) = (1.0 - x * x, 1.0 - y * y);
    [-4.0 * y * sx * sx * sy, 4.0 * x * sx * sy * sy]
}

/// `−μΔu + ∇p` for [`mms_velocity`].
pub fn mms_forcing(mu: f64, x: f64, y: f64) -> [f64; 2] {
    let (x2, y2) = (x * x, y * y);
    let lap_x = -24.0 * x2 * x2 * y - 48.0 * x2 * y2 * y + 96.0 * x2 * y + 16.0 * y2 * y - 40.0 * y;
    let lap_y = 48.0 * x2 * x * y2 - 16.0 * x2 * x + 24.0 * x * y2 * y2 - 96.0 * x * y2 + 40.0 * x;
    [mu * lap_x + y, mu * lap_y + x]
}

#[derive(Debug, Clone, Serialize)]
pub struct OseenVerification {
    pub grids: Vec<usize>,
    pub errors: Vec<f64>,
    pub rates: Vec<f64>,
    pub max_divergence: f64,
    pub energy: Vec<f64>,
    pub energy_increases: usize,
}

/// Steady manufactured solution on every grid, then a source-free decay
/// from the same field on the finest grid.
pub fn oseen_verification(cfg: &SimConfig) -> Result<OseenVerification> {
    let o = cfg.oseen.as_ref().ok_or_else(|| config("oseen", "section required"))?;
    let mut params = cfg.flow_params()?;
    // the manufactured field is not steady under advection
    params.b = Default::default();
    let mu = params.mu;
    let mut errors = Vec::new();
    let mut max_div = 0.0f64;
    for &n in &o.mms_grids {
        let g = TensorGrid::uniform(-1.0, 1.0, n, 2).context("mms grid")?;
        let solver = OseenSolver::new(&g, params.clone()).context("flow solver")?;
        let f = Forcing::from_fn(&g, |x, y| mms_forcing(mu, x, y)).context("forcing")?;
        let mut u = VelocityField::zeros(&g, 0.0).context("flow")?;
        let mut p = PressureField::zeros(&g, 0.0);
        let steps = hookean_mkv::chain_dynamics::step_count(o.mms_t_final, o.dt).context("oseen.dt")?;
        for _ in 0..steps {
            let (un, pn) = solver.step(&u, &p, o.dt, Some(&f)).context("flow step")?;
            max_div = max_div.max(un.max_divergence());
            u = un;
            p = pn;
        }
        errors.push(u.l2_distance(&VelocityField::from_fn(&g, 0.0, mms_velocity).context("exact")?));
    }
    let rates = errors
        .windows(2)
        .zip(o.mms_grids.windows(2))
        .map(|(e, n)| (e[0] / e[1]).ln() / (n[1] as f64 / n[0] as f64).ln())
        .collect();

    let n = *o.mms_grids.last().expect("validated nonempty");
    let g = TensorGrid::uniform(-1.0, 1.0, n, 2).context("grid")?;
    let solver = OseenSolver::new(&g, cfg.flow_params()?).context("flow solver")?;
    let u0 = VelocityField::from_fn(&g, 0.0, mms_velocity).context("initial flow")?;
    // advection is explicit; shrink the step to a divisor of 1 below its bound
    let k = (1.0 / o.dt.min(0.9 * solver.cfl_bound())).ceil();
    let traj = run_flow(&solver, &u0, 1.0, 1.0 / k, 1, |_| None).context("source-free run")?;
    let energy: Vec<f64> = traj.iter().map(|(u, _)| u.kinetic_energy()).collect();
    max_div = traj.iter().skip(1).fold(max_div, |m, (u, _)| m.max(u.max_divergence()));
    let energy_increases = energy.windows(2).filter(|e| e[1] > e[0] + ENERGY_ROUNDOFF * e[0]).count();
    Ok(OseenVerification { grids: o.mms_grids.clone(), errors, rates, max_divergence: max_div, energy, energy_increases })
}

pub fn verify_oseen(cfg: &SimConfig, dir: &RunDir) -> Result<Summary> {
    let v = oseen_verification(cfg)?;
    dir.write_json("oseen_verification.json", &v)?;
    dir.with_file("energy.csv", |w| {
        writeln!(w, "step,kinetic_energy")?;
        for (k, e) in v.energy.iter().enumerate() {
            writeln!(w, "{k},{e:.17e}")?;
        }
        Ok(())
    })?;
    let mut s = Summary::new("verify-oseen");
    let worst = v.rates.iter().copied().fold(f64::INFINITY, f64::min);
    s.check("mms-rate", worst >= MMS_RATE_MIN, format!("errors {:?}, rates {:?}", v.errors, v.rates));
    s.check("divergence", v.max_divergence <= DIVERGENCE_TOL, format!("max {:e}", v.max_divergence));
    s.check("energy-decay", v.energy_increases == 0, format!("{} increasing steps", v.energy_increases));
    s.metric("rates", &v.rates);
    s.metric("errors", &v.errors);
    s.metric("max_divergence", v.max_divergence);
    Ok(s)
}

#[derive(Debug, Clone, Serialize)]
pub struct RouseCheck {
    pub max_springs: usize,
    pub closed_form_exact: bool,
    pub max_eigen_error: f64,
}

pub fn rouse_check(max_springs: usize) -> Result<RouseCheck> {
    let mut exact = true;
    let mut worst = 0.0f64;
    for j in 1..=max_springs {
        let r = build_rouse(j).context("rouse")?;
        exact &= r.rouse == RouseStructure::closed_form(j);
        let ev = r.eigenvalues();
        let cf = RouseStructure::closed_form_eigenvalues(j);
        worst = ev.iter().zip(&cf).fold(worst, |m, (a, b)| m.max((a - b).abs()));
    }
    Ok(RouseCheck { max_springs, closed_form_exact: exact, max_eigen_error: worst })
}

/// Polynomial test functions with O(1) values on the sampled box.
type TestFn = Box<dyn Fn(&[f64]) -> f64>;

fn identity_polynomials() -> Vec<(&'static str, TestFn)> {
    vec![
        (
            "weighted-quadratic",
            Box::new(|r: &[f64]| {
                let n = r.len() as f64;
                r.iter().enumerate().map(|(k, x)| ((k % 3) as f64 + 1.0) / n * x * x).sum::<f64>() + 0.5 * r[0] * r[r.len() - 1]
            }),
        ),
        (
            "cubic",
            Box::new(|r: &[f64]| {
                let n = r.len() as f64;
                let s: f64 = r.iter().enumerate().map(|(k, x)| if k % 2 == 0 { *x } else { -0.5 * x }).sum::<f64>() / n;
                0.5 * s * s * s + r.iter().map(|x| x * x).sum::<f64>() / r.len() as f64
            }),
        ),
        ("quartic-product", Box::new(|r: &[f64]| 0.3 * r[0] * r[0] * r[r.len() - 1] * r[r.len() - 1] + r[0] * r[1])),
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityCase {
    pub springs: usize,
    pub dim: usize,
    pub function: String,
    pub discrepancy: f64,
}

pub fn operator_identity_cases(seed: u64) -> Result<Vec<IdentityCase>> {
    let mut out = Vec::new();
    for j in 1..=3 {
        for d in 1..=2 {
            for (name, f) in identity_polynomials() {
                let e = operator_identity_check(j, d, f.as_ref(), 50, 1e-4, seed).context("operator identity")?;
                out.push(IdentityCase { springs: j, dim: d, function: name.into(), discrepancy: e });
            }
        }
    }
    Ok(out)
}

/// `max |∫ L ψ dq − L_x ∫ ψ dq|` for a smooth non-factorised `ψ` in a
/// cellular flow.
pub fn q_sum_discrepancy(springs: usize, n: usize) -> Result<f64> {
    let dom = ConvexDomain::cube(1.0, 2).context("domain")?;
    let cg = ClassicalGrid::new(&dom, springs, n, n).context("classical grid")?;
    let u = CellularFlow::new(0.8, 1.0, 1.0);
    let psi = cg.from_fn(|x, q| {
        let q2: f64 = q.iter().map(|s| s * s).sum();
        (1.0 + 0.3 * (x[0] + 0.5 * x[1]).sin()) * (-q2 / 2.0).exp() * (1.0 + 0.2 * q[0] * x[1])
    });
    let r = classical_fp_rhs(&cg, &psi, &u, 1.0).context("classical operator")?;
    let lhs = cg.q_integrate(&r);
    let rhs = com_operator(&cg.x_grid(), &cg.q_integrate(&psi), &u, 1.0, springs);
    Ok(lhs.iter().zip(&rhs).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
}

#[derive(Debug, Clone, Serialize)]
pub struct KramersCheck {
    pub springs: usize,
    pub dim: usize,
    pub expected: f64,
    pub quadrature_rel_error: f64,
    /// Worst `|K_ab − expected_ab| / SE_ab` of the ensemble estimate.
    pub ensemble_z: f64,
    pub ensemble_values: Vec<f64>,
}

/// `𝕂` for configuration density `∝ 𝔐` truncated at `6√β`: by quadrature
/// and from `n_chains` sampled chains.
pub fn kramers_closure(springs: usize, d: usize, beta: f64, n_chains: usize, seed: u64) -> Result<KramersCheck> {
    let h = 1.0;
    let cut = 6.0 * beta.sqrt();
    let expected = springs as f64 * h * beta;
    let cm = ConfigMaxwellian { beta };
    let cell = TensorGrid::new(&vec![-0.5; d], &vec![0.5; d], &vec![1; d]).context("cell")?;
    let nodes = if springs * d <= 2 { 48 } else { 24 };
    let quad = ConfigQuadrature::new(springs, &vec![-cut; d], &vec![cut; d], nodes);
    let k = kramers_macro(&|_, q| cm.eval(q), &quad, &cell, h, 0.0);
    let kq = k.cell(0);
    let mut rel = 0.0f64;
    for a in 0..d {
        for b in 0..d {
            let e = if a == b { expected } else { 0.0 };
            rel = rel.max((kq[a * d + b] - e).abs() / expected);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = beta.sqrt();
    let mut chains = Vec::with_capacity(n_chains);
    let mut per_chain = Vec::with_capacity(n_chains);
    for _ in 0..n_chains {
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
        let q: Vec<f64> = (0..springs * d)
            .map(|_| loop {
                let s: f64 = sd * rng.sample::<f64, _>(StandardNormal);
                if s.abs() <= cut {
                    break s;
                }
            })
            .collect();
        let r = inverse_change_of_variables(&q, &x, d);
        per_chain.push(hookean_mkv::stress::chain_stress(&r, d, h));
        chains.push(ChainState { r, v: vec![0.0; (springs + 1) * d] });
    }
    let ke = kramers_from_ensemble(&chains, &cell, h, 0.0);
    let values = ke.cell(0).to_vec();
    let nf = n_chains as f64;
    let mut z = 0.0f64;
    for e in 0..d * d {
        let mean = values[e];
        let var = per_chain.iter().map(|s| (s[e] - mean).powi(2)).sum::<f64>() / (nf - 1.0);
        let target = if e % (d + 1) == 0 { expected } else { 0.0 };
        z = z.max((mean - target).abs() / (var / nf).sqrt());
    }
    Ok(KramersCheck { springs, dim: d, expected, quadrature_rel_error: rel, ensemble_z: z, ensemble_values: values })
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityReport {
    pub rouse: RouseCheck,
    pub operator_identity: Vec<IdentityCase>,
    pub q_sum: Vec<(usize, f64)>,
    pub kramers: Vec<KramersCheck>,
}

pub fn identity_report(seed: u64, beta: f64) -> Result<IdentityReport> {
    let rouse = rouse_check(ROUSE_MAX_SPRINGS)?;
    let operator_identity = operator_identity_cases(seed)?;
    let q_sum = vec![(1, q_sum_discrepancy(1, 10)?), (2, q_sum_discrepancy(2, 6)?)];
    let kramers = vec![kramers_closure(1, 2, beta, 100_000, seed)?, kramers_closure(2, 2, beta, 100_000, seed + 1)?];
    Ok(IdentityReport { rouse, operator_identity, q_sum, kramers })
}

pub fn verify_identities(cfg: &SimConfig, seed: u64, dir: &RunDir) -> Result<Summary> {
    let rep = identity_report(seed, cfg.chain.beta)?;
    dir.write_json("identities.json", &rep)?;
    let mut s = Summary::new("verify-identities");
    s.check("rouse-closed-form", rep.rouse.closed_form_exact, format!("J <= {}", rep.rouse.max_springs));
    s.check(
        "rouse-eigenvalues",
        rep.rouse.max_eigen_error <= ROUSE_EIG_TOL,
        format!("max error {:e}", rep.rouse.max_eigen_error),
    );
    let worst = rep.operator_identity.iter().map(|c| c.discrepancy).fold(0.0, f64::max);
    s.check("operator-identity", worst <= IDENTITY_TOL, format!("max discrepancy {worst:e}"));
    let qs = rep.q_sum.iter().map(|c| c.1).fold(0.0, f64::max);
    s.check("q-sum-reduction", qs <= Q_SUM_TOL, format!("max discrepancy {qs:e}"));
    for k in &rep.kramers {
        s.check(
            &format!("kramers-quadrature-J{}", k.springs),
            k.quadrature_rel_error <= KRAMERS_QUAD_TOL,
            format!("relative error {:e}", k.quadrature_rel_error),
        );
        s.check(
            &format!("kramers-ensemble-J{}", k.springs),
            k.ensemble_z <= KRAMERS_SE,
            format!("{:.2} standard errors", k.ensemble_z),
        );
    }
    s.metric("operator_identity_max", worst);
    s.metric("q_sum_max", qs);
    Ok(s)
}
