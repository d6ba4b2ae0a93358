//! TOML run configuration. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hookean_mkv::flow::{CellularFlow, VelocitySampler, ZeroFlow};
use hookean_mkv::oseen::{Advection, FlowParams, Projection};
use hookean_mkv::{ChainParams, ConvexDomain, Dynamics};

use crate::error::{config, Context, HarnessError, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Free-form run label, echoed into the manifest.
    #[serde(default = "default_name")]
    pub name: String,
    pub seed: Option<u64>,
    pub domain: DomainSpec,
    pub chain: ChainSpec,
    #[serde(default)]
    pub flow: FlowSpec,
    pub kinetic: Option<KineticSpec>,
    pub fp: Option<FpSpec>,
    #[serde(rename = "macro")]
    pub macro_: Option<MacroSpec>,
    pub oseen: Option<OseenSpec>,
    pub coupling: Option<CouplingSpec>,
    pub limit: Option<LimitSpec>,
}

fn default_name() -> String {
    "run".into()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub enum DomainKindSpec {
    Box,
    Disk,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub kind: DomainKindSpec,
    #[serde(default)]
    pub lo: Vec<f64>,
    #[serde(default)]
    pub hi: Vec<f64>,
    pub radius: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    pub springs: usize,
    pub dim: usize,
    pub eps: f64,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "one")]
    pub spring_constant: f64,
}

fn one() -> f64 {
    1.0
}

/// Prescribed solvent velocity for the uncoupled scenarios.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    #[serde(default)]
    pub kind: FlowKind,
    #[serde(default = "one")]
    pub amplitude: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FlowKind {
    #[default]
    Zero,
    Cellular,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DynamicsSpec {
    #[default]
    Kinetic,
    Overdamped,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct KineticSpec {
    pub n_chains: usize,
    pub dt: f64,
    pub t_final: f64,
    #[serde(default)]
    pub dynamics: DynamicsSpec,
    /// Steps between snapshot/moment dumps; 0 writes the first and last only.
    #[serde(default)]
    pub snapshot_every: usize,
    /// Chains written per snapshot (all if absent).
    pub snapshot_chains: Option<usize>,
    /// Histogram cells per configuration axis for the moments.
    #[serde(default = "three")]
    pub bins: usize,
    /// Centre-of-mass cells per axis for the stress.
    #[serde(default = "eight")]
    pub stress_bins: usize,
}

fn three() -> usize {
    3
}

fn eight() -> usize {
    8
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitialFp {
    Gibbs,
    #[default]
    Uniform,
    Perturbed,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FpSpec {
    pub n_r: usize,
    pub n_v: usize,
    /// Velocity cut-off; defaults to `6 √β`.
    pub v_max: Option<f64>,
    /// Step size; defaults to `safety ×` the stability bound.
    pub dt: Option<f64>,
    #[serde(default = "safety")]
    pub safety: f64,
    pub steps: usize,
    #[serde(default)]
    pub initial: InitialFp,
    #[serde(default)]
    pub alpha: f64,
    /// Steps between container dumps; 0 writes the first and last only.
    #[serde(default)]
    pub dump_every: usize,
}

fn safety() -> f64 {
    0.9
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitialMacro {
    #[default]
    Uniform,
    Gibbs,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MacroSpec {
    pub n_r: usize,
    pub t_final: f64,
    /// Time between recorded diagnostics.
    #[serde(default = "tenth")]
    pub record_every: f64,
    #[serde(default = "safety")]
    pub safety: f64,
    #[serde(default)]
    pub initial: InitialMacro,
}

fn tenth() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BKind {
    #[default]
    None,
    Cellular,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionSpec {
    #[default]
    Incremental,
    NonIncremental,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OseenSpec {
    #[serde(default = "one")]
    pub mu: f64,
    pub dt: f64,
    pub grid_n: usize,
    #[serde(default)]
    pub b_kind: BKind,
    #[serde(default = "one")]
    pub b_amplitude: f64,
    #[serde(default)]
    pub projection: ProjectionSpec,
    /// Grids for the manufactured-solution study (`verify-oseen`).
    #[serde(default = "mms_grids")]
    pub mms_grids: Vec<usize>,
    #[serde(default = "six")]
    pub mms_t_final: f64,
}

fn mms_grids() -> Vec<usize> {
    vec![32, 64]
}

fn six() -> f64 {
    6.0
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CouplingMode {
    /// Frozen solvent velocity.
    OneWay,
    #[default]
    TwoWay,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CouplingSpec {
    #[serde(default)]
    pub mode: CouplingMode,
    /// Micro steps per flow update; the micro step is `oseen.dt / interval`.
    #[serde(default = "ten")]
    pub interval: usize,
    pub n_chains: usize,
    pub t_final: f64,
    /// Multiplier of `∇·𝕂` in the momentum equation; 0 decouples.
    #[serde(default = "one")]
    pub stress_scale: f64,
    /// Exchanges between flow and stress dumps; 0 writes the final state only.
    #[serde(default)]
    pub snapshot_every: usize,
}

fn ten() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LimitSpec {
    #[serde(default = "eps_sweep")]
    pub eps_sweep: Vec<f64>,
    pub n_chains: usize,
    #[serde(default = "eight")]
    pub replicates: usize,
    /// Times at which the metrics are taken.
    #[serde(default = "limit_times")]
    pub times: Vec<f64>,
    /// Micro step as a multiple of `ε²`.
    #[serde(default = "dt_factor")]
    pub dt_factor: f64,
    #[serde(default = "three")]
    pub bins: usize,
    #[serde(default = "twelve")]
    pub v_bins: usize,
    /// Cells per axis of the `η` grid (a multiple of `bins`).
    #[serde(default = "twenty_four")]
    pub n_r: usize,
}

fn eps_sweep() -> Vec<f64> {
    vec![0.5, 0.25, 0.125]
}

fn limit_times() -> Vec<f64> {
    vec![1.0, 2.0]
}

fn dt_factor() -> f64 {
    0.125
}

fn twelve() -> usize {
    12
}

fn twenty_four() -> usize {
    24
}

impl SimConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(crate::error::io(path))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: SimConfig = toml::from_str(text).map_err(|e| {
            let path = e.span().map(|s| locate_key(text, s.start)).unwrap_or_default();
            config(path, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |path: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(config(path, format!("must be positive, got {x}")))
            }
        };
        match self.domain.kind {
            DomainKindSpec::Box => {
                if self.domain.lo.len() != self.domain.hi.len() || self.domain.lo.is_empty() {
                    return Err(config("domain.lo", "lo and hi must be nonempty and of equal length"));
                }
                if self.domain.lo.len() != self.chain.dim {
                    return Err(config("domain.lo", format!("length must equal chain.dim = {}", self.chain.dim)));
                }
            }
            DomainKindSpec::Disk => {
                pos("domain.radius", self.domain.radius.ok_or_else(|| config("domain.radius", "required for a disk"))?)?;
            }
        }
        if self.chain.springs == 0 {
            return Err(config("chain.springs", "need at least one spring"));
        }
        if !(1..=3).contains(&self.chain.dim) {
            return Err(config("chain.dim", "must be 1, 2 or 3"));
        }
        pos("chain.eps", self.chain.eps)?;
        pos("chain.beta", self.chain.beta)?;
        pos("chain.spring_constant", self.chain.spring_constant)?;
        if self.flow.kind == FlowKind::Cellular && self.chain.dim != 2 {
            return Err(config("flow.kind", "the cellular flow needs dim = 2"));
        }
        if let Some(k) = &self.kinetic {
            if k.n_chains == 0 {
                return Err(config("kinetic.n_chains", "must be positive"));
            }
            pos("kinetic.dt", k.dt)?;
            if !(k.t_final >= 0.0) {
                return Err(config("kinetic.t_final", "must be nonnegative"));
            }
            if k.bins == 0 || k.stress_bins == 0 {
                return Err(config("kinetic.bins", "bin counts must be positive"));
            }
        }
        if let Some(f) = &self.fp {
            if f.n_r < 2 {
                return Err(config("fp.n_r", "need at least 2 cells"));
            }
            if f.n_v < 8 {
                return Err(config("fp.n_v", "need at least 8 cells"));
            }
            if let Some(dt) = f.dt {
                pos("fp.dt", dt)?;
            }
            if !(f.safety > 0.0 && f.safety <= 1.0) {
                return Err(config("fp.safety", "must lie in (0, 1]"));
            }
            if !(f.alpha >= 0.0) {
                return Err(config("fp.alpha", "must be nonnegative"));
            }
        }
        if let Some(m) = &self.macro_ {
            if m.n_r < 2 {
                return Err(config("macro.n_r", "need at least 2 cells"));
            }
            pos("macro.record_every", m.record_every)?;
            if !(m.t_final >= 0.0) {
                return Err(config("macro.t_final", "must be nonnegative"));
            }
            if !(m.safety > 0.0 && m.safety <= 1.0) {
                return Err(config("macro.safety", "must lie in (0, 1]"));
            }
        }
        if let Some(o) = &self.oseen {
            pos("oseen.mu", o.mu)?;
            pos("oseen.dt", o.dt)?;
            if o.grid_n < 2 {
                return Err(config("oseen.grid_n", "need at least 2 cells"));
            }
            if o.mms_grids.len() < 2 || o.mms_grids.iter().any(|&n| n < 4) {
                return Err(config("oseen.mms_grids", "need two or more grids with at least 4 cells"));
            }
        }
        if let Some(c) = &self.coupling {
            if c.interval == 0 {
                return Err(config("coupling.interval", "must be at least 1"));
            }
            if c.n_chains == 0 {
                return Err(config("coupling.n_chains", "must be positive"));
            }
            if self.oseen.is_none() {
                return Err(config("oseen", "required by the coupling section"));
            }
            if !(c.t_final >= 0.0) {
                return Err(config("coupling.t_final", "must be nonnegative"));
            }
            if self.chain.dim != 2 {
                return Err(config("chain.dim", "coupled runs are two-dimensional"));
            }
        }
        if let Some(l) = &self.limit {
            if l.eps_sweep.is_empty() {
                return Err(config("limit.eps_sweep", "must be nonempty"));
            }
            for (i, &e) in l.eps_sweep.iter().enumerate() {
                pos(&format!("limit.eps_sweep[{i}]"), e)?;
            }
            if l.n_chains == 0 || l.replicates == 0 {
                return Err(config("limit.n_chains", "ensemble size and replicates must be positive"));
            }
            if l.bins == 0 || l.n_r % l.bins != 0 {
                return Err(config("limit.n_r", "must be a positive multiple of limit.bins"));
            }
            if l.v_bins == 0 {
                return Err(config("limit.v_bins", "must be positive"));
            }
            pos("limit.dt_factor", l.dt_factor)?;
            if l.times.is_empty() || l.times.iter().any(|t| !(*t > 0.0)) {
                return Err(config("limit.times", "need positive times"));
            }
        }
        Ok(())
    }

    /// Seed from the command line if given, else from the file.
    pub fn seed(&self, cli: Option<u64>) -> Result<u64> {
        cli.or(self.seed).ok_or_else(|| config("seed", "a seed is required for stochastic scenarios"))
    }

    pub fn domain(&self) -> Result<ConvexDomain> {
        let d = &self.domain;
        match d.kind {
            DomainKindSpec::Box => {
                let ext: Vec<(f64, f64)> = d.lo.iter().copied().zip(d.hi.iter().copied()).collect();
                ConvexDomain::new_box(&ext).context("domain")
            }
            DomainKindSpec::Disk => ConvexDomain::disk(d.radius.unwrap_or(1.0), self.chain.dim).context("domain"),
        }
    }

    pub fn chain_params(&self) -> Result<ChainParams> {
        self.chain_params_eps(self.chain.eps)
    }

    pub fn chain_params_eps(&self, eps: f64) -> Result<ChainParams> {
        let c = &self.chain;
        ChainParams::new(c.springs, c.dim, eps, c.beta, c.spring_constant).context("chain")
    }

    /// The prescribed flow on the domain's bounding box.
    pub fn flow(&self) -> Result<Box<dyn VelocitySampler>> {
        Ok(match self.flow.kind {
            FlowKind::Zero => Box::new(ZeroFlow { dim: self.chain.dim }),
            FlowKind::Cellular => {
                let (lo, hi) = self.domain()?.bounding_box();
                if (lo[0] + hi[0]).abs() > 1e-12 || (lo[1] + hi[1]).abs() > 1e-12 {
                    return Err(config("flow.kind", "the cellular flow needs a box centred at the origin"));
                }
                Box::new(CellularFlow::new(self.flow.amplitude, hi[0], hi[1]))
            }
        })
    }

    pub fn flow_params(&self) -> Result<FlowParams> {
        let o = self.oseen.as_ref().ok_or_else(|| config("oseen", "section required"))?;
        let mut p = FlowParams::new(o.mu).context("oseen")?;
        if o.b_kind == BKind::Cellular {
            let (_, hi) = self.domain()?.bounding_box();
            p = p.with_advection(Advection::Cellular(CellularFlow::new(o.b_amplitude, hi[0], hi[1])));
        }
        p.projection = match o.projection {
            ProjectionSpec::Incremental => Projection::Incremental,
            ProjectionSpec::NonIncremental => Projection::NonIncremental,
        };
        Ok(p)
    }

    pub fn output_dir(&self, cli: Option<&Path>) -> PathBuf {
        cli.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("runs").join(&self.name))
    }
}

impl From<DynamicsSpec> for Dynamics {
    fn from(d: DynamicsSpec) -> Self {
        match d {
            DynamicsSpec::Kinetic => Dynamics::Kinetic,
            DynamicsSpec::Overdamped => Dynamics::Overdamped,
        }
    }
}

/// Dotted key path of the table entry containing byte `offset`.
fn locate_key(text: &str, offset: usize) -> String {
    let mut table = String::new();
    let mut key = String::new();
    let mut pos = 0;
    for line in text.lines() {
        let t = line.trim();
        if pos > offset {
            break;
        }
        if t.starts_with('[') {
            table = t.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            key.clear();
        } else if let Some((k, _)) = t.split_once('=') {
            key = k.trim().to_string();
        }
        pos += line.len() + 1;
    }
    match (table.is_empty(), key.is_empty()) {
        (true, _) => key,
        (false, true) => table,
        (false, false) => format!("{table}.{key}"),
    }
}

impl From<toml::de::Error> for HarnessError {
    fn from(e: toml::de::Error) -> Self {
        config("", e.message().to_string())
    }
}
