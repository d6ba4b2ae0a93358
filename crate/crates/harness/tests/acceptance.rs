//! Acceptance suite: one PASS/FAIL line per criterion, run in sequence so
//! that the wall-clock limits are measured without competing work.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use hookean_mkv_harness::{run_scenario, verify, Scenario, SimConfig, Summary};
use serde_json::Value;

fn config(name: &str) -> SimConfig {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    SimConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

struct Outcome {
    summary: Summary,
    dir: PathBuf,
    elapsed: Duration,
}

fn run(scenario: Scenario, cfg_name: &str, root: &Path) -> Outcome {
    let cfg = config(cfg_name);
    let out = root.join(cfg_name.trim_end_matches(".toml"));
    let t = Instant::now();
    let (dir, summary) = run_scenario(scenario, &cfg, Some(&out), None).unwrap_or_else(|e| panic!("{cfg_name}: {e}"));
    Outcome { summary, dir, elapsed: t.elapsed() }
}

fn metric(s: &Summary, key: &str) -> f64 {
    s.metrics.get(key).and_then(Value::as_f64).unwrap_or_else(|| panic!("metric {key} missing"))
}

fn assertion(s: &Summary, name: &str) -> bool {
    s.assertions.iter().find(|a| a.name == name).unwrap_or_else(|| panic!("assertion {name} missing")).passed
}

#[derive(Default)]
struct Ledger {
    lines: Vec<(bool, String)>,
}

impl Ledger {
    fn record(&mut self, n: usize, ok: bool, what: &str, detail: String) {
        let line = format!("{} criterion {n:>2}: {what} ({detail})", if ok { "PASS" } else { "FAIL" });
        // straight to stderr so the lines survive libtest output capture
        let _ = writeln!(std::io::stderr(), "{line}");
        self.lines.push((ok, line));
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut led = Ledger::default();

    // 1: mass over 10³ steps
    let c1 = run(Scenario::SimulateFp, "fp_mass.toml", root);
    let drift = metric(&c1.summary, "mass_drift");
    let steps = metric(&c1.summary, "steps");
    led.record(
        1,
        drift <= 1e-10 && steps >= 1000.0 && c1.elapsed <= Duration::from_secs(120),
        "FP mass conservation",
        format!("max |mass - 1| = {drift:.2e} over {steps} steps, {:.0} s", secs(c1.elapsed)),
    );

    // 2: Gibbs stationarity of both solvers
    let c2 = run(Scenario::SimulateFp, "fp_gibbs.toml", root);
    let l1_fp = metric(&c2.summary, "l1_change");
    let dt = metric(&c2.summary, "dt");
    let t_fp = dt * metric(&c2.summary, "steps");
    let c2m = run(Scenario::SimulateMacro, "macro_gibbs.toml", root);
    let l1_eta = metric(&c2m.summary, "final_l1_to_gibbs");
    led.record(
        2,
        l1_fp <= 1e-3
            && l1_eta <= 1e-3
            && (t_fp - 1.0).abs() < 1e-9
            && c2.elapsed <= Duration::from_secs(300)
            && c2m.elapsed <= Duration::from_secs(300),
        "Gibbs stationarity",
        format!(
            "FP L1 drift {l1_fp:.2e} over T = {t_fp}, {:.0} s; eta L1 drift {l1_eta:.2e}, {:.0} s",
            secs(c2.elapsed),
            secs(c2m.elapsed)
        ),
    );

    // 3 and 4: one sweep provides both
    let c3 = run(Scenario::CompareLimit, "limit.toml", root);
    let s3 = &c3.summary;
    let vl = s3.metrics["velocity_l1"].clone();
    let ratios = s3.metrics["second_moment_ratios"].clone();
    led.record(
        3,
        assertion(s3, "velocity-l1-decreasing")
            && assertion(s3, "second-moment-ratios")
            && c3.elapsed <= Duration::from_secs(600),
        "momentum equilibration over eps = 0.5, 0.25, 0.125",
        format!(
            "velocity L1 {vl}, second-moment ratios {ratios}, noise floor {}, {:.0} s",
            s3.metrics["noise_floor"],
            secs(c3.elapsed)
        ),
    );
    led.record(
        4,
        assertion(s3, "spatial-l1-decreasing") && c3.elapsed <= Duration::from_secs(900),
        "kinetic to macro spatial agreement",
        format!("(mean, se) at T = 1: {}", s3.metrics["spatial"]),
    );

    // 5: every emitted stress field, uncoupled and two-way coupled
    let c5k = run(Scenario::SimulateKinetic, "kinetic.toml", root);
    let c5c = run(Scenario::SimulateCoupled, "coupled.toml", root);
    let ok5 = assertion(&c5k.summary, "stress-bound-and-psd")
        && assertion(&c5c.summary, "stress-bound")
        && assertion(&c5c.summary, "stress-psd");
    led.record(
        5,
        ok5,
        "stress bound and symmetric PSD",
        format!(
            "kinetic max {:.3} of bound {}, coupled max {:.3} over {} exchanges",
            c5k.summary.metrics["final"]["max_stress"].as_f64().unwrap_or(f64::NAN),
            metric(&c5k.summary, "stress_bound"),
            metric(&c5c.summary, "max_stress"),
            metric(&c5c.summary, "exchanges"),
        ),
    );

    // 6, 8, 9, 10 come from the identity run
    let ci = run(Scenario::VerifyIdentities, "identities.toml", root);
    let rep: Value = serde_json::from_str(&std::fs::read_to_string(ci.dir.join("identities.json")).unwrap()).unwrap();
    let kr = rep["kramers"].as_array().unwrap();
    let quad = kr.iter().map(|k| k["quadrature_rel_error"].as_f64().unwrap()).fold(0.0, f64::max);
    let z = kr.iter().map(|k| k["ensemble_z"].as_f64().unwrap()).fold(0.0, f64::max);
    led.record(
        6,
        quad <= verify::KRAMERS_QUAD_TOL && z <= verify::KRAMERS_SE && ci.elapsed <= Duration::from_secs(120),
        "Kramers closure J H beta I",
        format!("quadrature rel. error {quad:.2e}, ensemble {z:.2} SE, J = 1, 2"),
    );

    // 7: flow solver
    let c7 = run(Scenario::VerifyOseen, "oseen.toml", root);
    let s7 = &c7.summary;
    led.record(
        7,
        s7.passed() && c7.elapsed <= Duration::from_secs(180),
        "Oseen rate, divergence and energy",
        format!("rates {}, max divergence {:.2e}, {:.0} s", s7.metrics["rates"], metric(s7, "max_divergence"), secs(c7.elapsed)),
    );

    let s = &ci.summary;
    let t_rouse = Instant::now();
    let rouse = verify::rouse_check(verify::ROUSE_MAX_SPRINGS).unwrap();
    let rouse_time = t_rouse.elapsed();
    led.record(
        8,
        assertion(s, "rouse-closed-form") && assertion(s, "rouse-eigenvalues") && rouse_time <= Duration::from_secs(1),
        "Rouse structure for J <= 8",
        format!("max eigenvalue error {:.2e}, {:.3} s", rouse.max_eigen_error, secs(rouse_time)),
    );
    let t9 = Instant::now();
    let cases = verify::operator_identity_cases(11).unwrap();
    let t9 = t9.elapsed();
    let worst9 = cases.iter().map(|c| c.discrepancy).fold(0.0, f64::max);
    led.record(
        9,
        assertion(s, "operator-identity") && worst9 <= verify::IDENTITY_TOL && t9 <= Duration::from_secs(10),
        "operator identity, J = 1..3, d = 1, 2",
        format!("max discrepancy {worst9:.2e} over {} cases, {:.2} s", cases.len(), secs(t9)),
    );
    let t10 = Instant::now();
    let q_sum = [verify::q_sum_discrepancy(1, 10).unwrap(), verify::q_sum_discrepancy(2, 6).unwrap()];
    let t10 = t10.elapsed();
    let worst10 = q_sum.iter().copied().fold(0.0, f64::max);
    led.record(
        10,
        assertion(s, "q-sum-reduction") && worst10 <= verify::Q_SUM_TOL && t10 <= Duration::from_secs(30),
        "q-integrated classical operator",
        format!("max discrepancy {worst10:.2e}, J = 1, 2, {:.2} s", secs(t10)),
    );

    // 11: along the zero-flow FP runs above
    let mono = assertion(&c1.summary, "gibbs-entropy-monotone") && assertion(&c2.summary, "gibbs-entropy-monotone");
    led.record(
        11,
        mono,
        "Gibbs-relative entropy non-increasing with u = 0",
        format!(
            "perturbed run final {:.3e}, Gibbs run final {:.3e}",
            metric(&c1.summary, "final_gibbs_entropy"),
            metric(&c2.summary, "final_gibbs_entropy")
        ),
    );

    let failed: Vec<&String> = led.lines.iter().filter(|l| !l.0).map(|l| &l.1).collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("\n"));
}
