use std::path::Path;
use std::process::Command;

use hookean_mkv::chain_dynamics::{Dynamics, Ensemble, StepOptions};
use hookean_mkv::flow::ZeroFlow;
use hookean_mkv::oseen::{run_flow, OseenSolver, VelocityField};
use hookean_mkv_harness::coupled::{coupled_iteration, flow_grid};
use hookean_mkv_harness::report::{compare_report, compare_runs};
use hookean_mkv_harness::{run_scenario, HarnessError, Scenario, SimConfig};

const BOX2: &str = r#"
[domain]
kind = "box"
lo = [-1.0, -1.0]
hi = [1.0, 1.0]
"#;

const BOX1: &str = r#"
[domain]
kind = "box"
lo = [-1.0]
hi = [1.0]
"#;

fn kinetic_cfg(seed: u64) -> SimConfig {
    SimConfig::parse(&format!(
        "seed = {seed}\n{BOX2}\n[chain]\nsprings = 2\ndim = 2\neps = 0.5\n[flow]\nkind = \"cellular\"\n\
         [kinetic]\nn_chains = 500\ndt = 0.01\nt_final = 0.2\nsnapshot_every = 5\n"
    ))
    .unwrap()
}

fn fp_cfg(steps: usize, initial: &str) -> SimConfig {
    SimConfig::parse(&format!(
        "{BOX1}\n[chain]\nsprings = 1\ndim = 1\neps = 0.5\n[fp]\nn_r = 12\nn_v = 16\nsteps = {steps}\ninitial = \"{initial}\"\n"
    ))
    .unwrap()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn zero_steps_write_manifest_and_initial_state_only() {
    let tmp = tempfile::tempdir().unwrap();
    let (dir, s) = run_scenario(Scenario::SimulateFp, &fp_cfg(0, "perturbed"), Some(tmp.path()), None).unwrap();
    assert!(s.passed());
    assert!(dir.join("manifest.json").is_file() && dir.join("summary.json").is_file());
    let dumps: Vec<_> = std::fs::read_dir(dir.join("fields")).unwrap().collect();
    assert_eq!(dumps.len(), 1);
    assert!(dir.join("fields/rho_hat_000000.bin").is_file());
    let diag = String::from_utf8(read(&dir.join("diagnostics.csv"))).unwrap();
    assert_eq!(diag.lines().count(), 2);
}

#[test]
fn same_config_and_seed_give_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, _) = run_scenario(Scenario::SimulateKinetic, &kinetic_cfg(3), Some(&tmp.path().join("a")), None).unwrap();
    let (b, _) = run_scenario(Scenario::SimulateKinetic, &kinetic_cfg(3), Some(&tmp.path().join("b")), None).unwrap();
    for f in ["diagnostics.csv", "moments.csv", "snapshots/snapshot_000020.csv", "stress/stress_000010.csv"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    let cmp = compare_runs(&a, &b).unwrap();
    assert!(!cmp.is_empty());
    assert!(cmp.iter().all(|c| c.max_abs == 0.0 && c.text_mismatches == 0));

    let (c, _) = run_scenario(Scenario::SimulateKinetic, &kinetic_cfg(3), Some(&tmp.path().join("c")), Some(4)).unwrap();
    assert_ne!(read(&a.join("diagnostics.csv")), read(&c.join("diagnostics.csv")));
}

#[test]
fn report_on_identical_runs_is_all_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fp_cfg(20, "perturbed");
    let (a, _) = run_scenario(Scenario::SimulateFp, &cfg, Some(&tmp.path().join("a")), None).unwrap();
    let (b, _) = run_scenario(Scenario::SimulateFp, &cfg, Some(&tmp.path().join("b")), None).unwrap();
    let rep = compare_report(&[a, b]).unwrap();
    assert!(rep.all_passed);
    assert!(rep.comparisons.iter().any(|c| c.l1 == Some(0.0)));
    assert!(rep.comparisons.iter().all(|c| c.max_abs == 0.0 && c.l1.unwrap_or(0.0) == 0.0));
}

#[test]
fn report_names_the_missing_file() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, _) = run_scenario(Scenario::SimulateFp, &fp_cfg(2, "uniform"), Some(&tmp.path().join("a")), None).unwrap();
    std::fs::remove_file(a.join("summary.json")).unwrap();
    match compare_report(std::slice::from_ref(&a)) {
        Err(HarnessError::MissingFile(p)) => assert_eq!(p, a.join("summary.json")),
        other => panic!("{other:?}"),
    }
    match compare_report(&[tmp.path().join("nowhere")]) {
        Err(HarnessError::MissingFile(p)) => assert_eq!(p, tmp.path().join("nowhere")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn report_rejects_different_grids() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, _) = run_scenario(Scenario::SimulateFp, &fp_cfg(2, "uniform"), Some(&tmp.path().join("a")), None).unwrap();
    let mut cfg = fp_cfg(2, "uniform");
    cfg.fp.as_mut().unwrap().n_r = 10;
    let (b, _) = run_scenario(Scenario::SimulateFp, &cfg, Some(&tmp.path().join("b")), None).unwrap();
    assert!(matches!(compare_report(&[a, b]), Err(HarnessError::GridMismatch(_))));
}

/// Cross-validation of the two kinetic solvers through their position
/// marginals after relaxation from the same uniform start.
#[test]
fn fp_and_ensemble_marginals_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let base = format!("seed = 9\n{BOX1}\n[chain]\nsprings = 1\ndim = 1\neps = 0.5\n");
    let fp =
        SimConfig::parse(&format!("{base}[fp]\nn_r = 24\nn_v = 24\ndt = 0.002\nsteps = 250\ninitial = \"uniform\"\n")).unwrap();
    let kin = SimConfig::parse(&format!("{base}[kinetic]\nn_chains = 100000\ndt = 0.002\nt_final = 0.5\nbins = 4\n")).unwrap();
    let (a, _) = run_scenario(Scenario::SimulateFp, &fp, Some(&tmp.path().join("fp")), None).unwrap();
    let (b, _) = run_scenario(Scenario::SimulateKinetic, &kin, Some(&tmp.path().join("kin")), None).unwrap();
    let rep = compare_report(&[a, b]).unwrap();
    let m = &rep.marginals[0];
    eprintln!("{m:?}");
    assert!((m.fp_time - m.kinetic_time).abs() < 1e-9);
    assert!(m.passed, "distance {} band {}", m.distance, m.band);
}

fn coupled_cfg(mode: &str, scale: f64) -> SimConfig {
    SimConfig::parse(&format!(
        "seed = 21\n{BOX2}\n[chain]\nsprings = 1\ndim = 2\neps = 0.5\n[oseen]\ndt = 0.05\ngrid_n = 8\n\
         [coupling]\nmode = \"{mode}\"\ninterval = 5\nn_chains = 2000\nt_final = 0.5\nstress_scale = {scale}\n"
    ))
    .unwrap()
}

#[test]
fn zero_stress_leaves_the_source_free_flow() {
    let cfg = coupled_cfg("two-way", 0.0);
    let traj = coupled_iteration(&cfg, 21, |_, _, _| Ok(())).unwrap();
    let g = flow_grid(&cfg).unwrap();
    let solver = OseenSolver::new(&g, cfg.flow_params().unwrap()).unwrap();
    let free = run_flow(&solver, &VelocityField::zeros(&g, 0.0).unwrap(), 0.5, 0.05, 1, |_| None).unwrap();
    let u = &free.last().unwrap().0;
    assert_eq!(traj.velocity.u, u.u);
    assert_eq!(traj.velocity.v, u.v);
}

#[test]
fn one_way_mode_reproduces_the_standalone_ensemble() {
    let cfg = coupled_cfg("one-way", 1.0);
    let traj = coupled_iteration(&cfg, 21, |_, _, _| Ok(())).unwrap();
    let params = cfg.chain_params().unwrap();
    let domain = cfg.domain().unwrap();
    let mut ens = Ensemble::sample_uniform_maxwellian(2000, &params, &domain, 21).unwrap();
    for _ in 0..50 {
        ens.step(Dynamics::Kinetic, traj.dt_micro, &params, &domain, &ZeroFlow { dim: 2 }, &StepOptions::default()).unwrap();
    }
    assert_eq!(ens.chains, traj.ensemble.chains);
}

#[test]
fn two_way_stress_respects_the_bound_at_every_exchange() {
    let traj = coupled_iteration(&coupled_cfg("two-way", 1.0), 21, |_, _, _| Ok(())).unwrap();
    assert_eq!(traj.records.len(), 10);
    for r in &traj.records {
        assert!(r.bound_ok && r.psd_ok && r.max_stress <= r.stress_bound, "{r:?}");
        assert!(r.max_divergence <= 1e-10);
    }
    assert!(traj.records.last().unwrap().kinetic_energy > 0.0);
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hookean-mkv"))
}

#[test]
fn cli_reports_config_errors_with_the_field_path() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.toml");
    std::fs::write(&p, format!("{BOX1}\n[chain]\nsprings = 1\ndim = 1\neps = 0.5\nbeta = -1.0\n")).unwrap();
    let out = cli().args(["simulate-macro", "--config"]).arg(&p).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("chain.beta"));

    std::fs::write(
        &p,
        format!("{BOX1}\n[chain]\nsprings = 1\ndim = 1\neps = 0.5\n[kinetic]\nn_chains = 5\ndt = 0.1\nt_final = 0.1\n"),
    )
    .unwrap();
    let out = cli().args(["simulate-kinetic", "--config"]).arg(&p).arg("--out").arg(tmp.path().join("r")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn cli_thread_count_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("k.toml");
    std::fs::write(&p, kinetic_cfg(8).to_toml()).unwrap();
    for (n, name) in [("1", "one"), ("3", "three")] {
        let out = cli()
            .args(["--threads", n, "simulate-kinetic", "--config"])
            .arg(&p)
            .arg("--out")
            .arg(tmp.path().join(name))
            .env("HOOKEAN_MKV_LOG", "warn")
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["diagnostics.csv", "moments.csv", "stress/stress_000020.csv"] {
        assert_eq!(read(&tmp.path().join("one").join(f)), read(&tmp.path().join("three").join(f)), "{f}");
    }
    let out = cli()
        .arg("report")
        .arg("--out")
        .arg(tmp.path().join("rep"))
        .arg(tmp.path().join("one"))
        .arg(tmp.path().join("three"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let rep: serde_json::Value = serde_json::from_slice(&read(&tmp.path().join("rep/report.json"))).unwrap();
    assert_eq!(rep["all_passed"], true);
}
