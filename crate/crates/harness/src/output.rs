//! Run directories: manifest, summary and data files.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::SimConfig;
use crate::error::{io, Result};

pub const MANIFEST: &str = "manifest.json";
pub const SUMMARY: &str = "summary.json";

/// One in-run check.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Collected checks and scalar metrics of a run.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Summary {
    pub scenario: String,
    pub assertions: Vec<Assertion>,
    pub metrics: Map<String, Value>,
}

impl Summary {
    pub fn new(scenario: &str) -> Self {
        Self { scenario: scenario.into(), ..Default::default() }
    }

    pub fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) -> bool {
        let detail = detail.into();
        if !passed {
            log::error!("check `{name}` failed: {detail}");
        }
        self.assertions.push(Assertion { name: name.into(), passed, detail });
        passed
    }

    pub fn metric(&mut self, key: &str, value: impl Serialize) {
        self.metrics.insert(key.into(), serde_json::to_value(value).expect("metric serialises"));
    }

    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }
}

#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path) -> Result<Self> {
        std::fs::create_dir_all(path).map_err(io(path))?;
        Ok(Self { path: path.to_path_buf() })
    }

    pub fn file(&self, name: &str) -> Result<BufWriter<File>> {
        let p = self.path.join(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(io(parent))?;
        }
        Ok(BufWriter::new(File::create(&p).map_err(io(&p))?))
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let p = self.path.join(name);
        let text = serde_json::to_string_pretty(value).expect("json serialises");
        std::fs::write(&p, text + "\n").map_err(io(&p))
    }

    /// Config echo, code version and seed: enough to repeat the run.
    pub fn write_manifest(&self, scenario: &str, cfg: &SimConfig, seed: Option<u64>) -> Result<()> {
        let m = json!({
            "scenario": scenario,
            "seed": seed,
            "version": env!("CARGO_PKG_VERSION"),
            "git_describe": git_describe(),
            "config_toml": cfg.to_toml(),
            "config": cfg,
        });
        self.write_json(MANIFEST, &m)
    }

    pub fn write_summary(&self, s: &Summary) -> Result<()> {
        let mut v = serde_json::to_value(s).expect("summary serialises");
        v["passed"] = json!(s.passed());
        self.write_json(SUMMARY, &v)
    }

    /// Run `f` with a writer for `name`, mapping I/O errors to this file.
    pub fn with_file(&self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
        let mut w = self.file(name)?;
        f(&mut w).map_err(io(self.path.join(name)))?;
        use std::io::Write;
        w.flush().map_err(io(self.path.join(name)))
    }
}

pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}
