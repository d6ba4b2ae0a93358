use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hookean_mkv_harness::{report, run_scenario, RunDir, Scenario, SimConfig};

#[derive(Parser)]
#[command(name = "hookean-mkv", version, about = "Bead-spring chain simulations and verification runs")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    SimulateKinetic(RunArgs),
    SimulateFp(RunArgs),
    SimulateMacro(RunArgs),
    SimulateCoupled(RunArgs),
    VerifyOseen(RunArgs),
    VerifyIdentities(RunArgs),
    CompareLimit(RunArgs),
    /// Compare finished run directories.
    Report {
        #[arg(long, default_value = "runs/report")]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HOOKEAN_MKV_LOG", "info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::error!("cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let (scenario, args) = match cli.command {
        Command::SimulateKinetic(a) => (Scenario::SimulateKinetic, a),
        Command::SimulateFp(a) => (Scenario::SimulateFp, a),
        Command::SimulateMacro(a) => (Scenario::SimulateMacro, a),
        Command::SimulateCoupled(a) => (Scenario::SimulateCoupled, a),
        Command::VerifyOseen(a) => (Scenario::VerifyOseen, a),
        Command::VerifyIdentities(a) => (Scenario::VerifyIdentities, a),
        Command::CompareLimit(a) => (Scenario::CompareLimit, a),
        Command::Report { out, runs } => {
            let result = RunDir::create(&out).and_then(|dir| report::write_report(&runs, &dir).map(|s| (dir, s)));
            return finish(result.and_then(|(dir, s)| dir.write_summary(&s).map(|_| (dir.path, s))));
        }
    };
    let result = SimConfig::load(&args.config).and_then(|cfg| run_scenario(scenario, &cfg, args.out.as_deref(), args.seed));
    finish(result)
}

fn finish(result: hookean_mkv_harness::Result<(PathBuf, hookean_mkv_harness::Summary)>) -> ExitCode {
    match result {
        Ok((dir, s)) => {
            for a in s.assertions.iter().filter(|a| !a.passed) {
                eprintln!("FAILED {}: {}", a.name, a.detail);
            }
            println!("{} {} ({})", s.scenario, if s.passed() { "passed" } else { "FAILED" }, dir.display());
            if s.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
