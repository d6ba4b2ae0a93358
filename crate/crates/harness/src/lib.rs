//! Configuration, orchestration and reporting for `hookean-mkv` runs.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod config;
pub mod coupled;
pub mod error;
pub mod limit;
pub mod output;
pub mod report;
pub mod scenarios;
pub mod verify;

use std::path::{Path, PathBuf};

pub use config::SimConfig;
pub use error::{HarnessError, Result};
pub use output::{RunDir, Summary};

/// The scenarios behind the CLI subcommands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    SimulateKinetic,
    SimulateFp,
    SimulateMacro,
    SimulateCoupled,
    VerifyOseen,
    VerifyIdentities,
    CompareLimit,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::SimulateKinetic => "simulate-kinetic",
            Scenario::SimulateFp => "simulate-fp",
            Scenario::SimulateMacro => "simulate-macro",
            Scenario::SimulateCoupled => "simulate-coupled",
            Scenario::VerifyOseen => "verify-oseen",
            Scenario::VerifyIdentities => "verify-identities",
            Scenario::CompareLimit => "compare-limit",
        }
    }

    pub fn stochastic(self) -> bool {
        matches!(
            self,
            Scenario::SimulateKinetic | Scenario::SimulateCoupled | Scenario::VerifyIdentities | Scenario::CompareLimit
        )
    }
}

/// Run one scenario into `out` (or the config's default directory). The
/// manifest is written before any work starts and the summary at the end;
/// the returned summary's `passed()` decides the exit code.
pub fn run_scenario(scenario: Scenario, cfg: &SimConfig, out: Option<&Path>, seed: Option<u64>) -> Result<(PathBuf, Summary)> {
    let seed = if scenario.stochastic() { Some(cfg.seed(seed)?) } else { seed.or(cfg.seed) };
    let dir = RunDir::create(&cfg.output_dir(out))?;
    dir.write_manifest(scenario.name(), cfg, seed)?;
    log::info!("{} -> {}", scenario.name(), dir.path.display());
    let s = seed.unwrap_or(0);
    let summary = match scenario {
        Scenario::SimulateKinetic => scenarios::simulate_kinetic(cfg, s, &dir)?,
        Scenario::SimulateFp => scenarios::simulate_fp(cfg, &dir)?,
        Scenario::SimulateMacro => scenarios::simulate_macro(cfg, &dir)?,
        Scenario::SimulateCoupled => coupled::simulate_coupled(cfg, s, &dir)?,
        Scenario::VerifyOseen => verify::verify_oseen(cfg, &dir)?,
        Scenario::VerifyIdentities => verify::verify_identities(cfg, s, &dir)?,
        Scenario::CompareLimit => limit::compare_limit(cfg, s, &dir)?,
    };
    dir.write_summary(&summary)?;
    Ok((dir.path, summary))
}
