//! Comparison of finished run directories.
//!
//! Every directory must hold a manifest and a summary. Runs of the same
//! scenario are compared file by file against the first one: CSV tables by
//! the largest numeric difference, field containers by their L¹ distance.
//! A kinetic Fokker–Planck run and an ensemble run are also compared through
//! their position marginals on the ensemble's histogram bins.

use std::path::{Path, PathBuf};

use hookean_mkv::fokker_planck::maxwellian_cells;
use hookean_mkv::io::FieldContainer;
use hookean_mkv::TensorGrid;
use serde::Serialize;
use serde_json::Value;

use crate::error::{io, HarnessError, Result};
use crate::output::{RunDir, Summary, MANIFEST, SUMMARY};

/// Allowance for the spatial discretisation error of the kinetic solver in
/// the marginal comparison, on top of three Monte Carlo standard deviations.
pub const FP_SDE_DISCRETISATION_BAND: f64 = 0.03;

#[derive(Debug, Clone, Serialize)]
pub struct RunInfo {
    pub dir: PathBuf,
    pub scenario: String,
    pub passed: bool,
    pub summary: Value,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct FileComparison {
    pub reference: PathBuf,
    pub other: PathBuf,
    pub file: String,
    /// Largest absolute difference of matching numeric entries.
    pub max_abs: f64,
    /// `Σ |a − b|` times the cell volume (field containers only).
    pub l1: Option<f64>,
    pub text_mismatches: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct MarginalComparison {
    pub fp_run: PathBuf,
    pub kinetic_run: PathBuf,
    pub fp_time: f64,
    pub kinetic_time: f64,
    pub distance: f64,
    pub band: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub runs: Vec<RunInfo>,
    pub comparisons: Vec<FileComparison>,
    pub marginals: Vec<MarginalComparison>,
    pub all_passed: bool,
}

fn read_json(path: &Path) -> Result<Value> {
    if !path.is_file() {
        return Err(HarnessError::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Malformed { path: path.to_path_buf(), reason: e.to_string() })
}

pub fn load_run(dir: &Path) -> Result<RunInfo> {
    if !dir.is_dir() {
        return Err(HarnessError::MissingFile(dir.to_path_buf()));
    }
    read_json(&dir.join(MANIFEST))?;
    let summary = read_json(&dir.join(SUMMARY))?;
    let scenario = summary["scenario"].as_str().unwrap_or_default().to_string();
    let passed = summary["passed"]
        .as_bool()
        .ok_or_else(|| HarnessError::Malformed { path: dir.join(SUMMARY), reason: "no `passed` flag".into() })?;
    Ok(RunInfo { dir: dir.to_path_buf(), scenario, passed, summary })
}

/// Data files below `dir`, as sorted relative paths.
fn data_files(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(io(&d))? {
            let p = entry.map_err(io(&d))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "bin")) {
                let rel = p.strip_prefix(dir).expect("below dir").to_string_lossy().into_owned();
                out.push(rel);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn compare_csv(a: &Path, b: &Path) -> Result<(f64, usize)> {
    let ta = std::fs::read_to_string(a).map_err(io(a))?;
    let tb = std::fs::read_to_string(b).map_err(io(b))?;
    let (la, lb): (Vec<&str>, Vec<&str>) = (ta.lines().collect(), tb.lines().collect());
    if la.len() != lb.len() {
        return Err(HarnessError::GridMismatch(format!("{}: {} rows vs {}", b.display(), la.len(), lb.len())));
    }
    let (mut max_abs, mut text) = (0.0f64, 0);
    for (ra, rb) in la.iter().zip(&lb) {
        let (fa, fb): (Vec<&str>, Vec<&str>) = (ra.split(',').collect(), rb.split(',').collect());
        if fa.len() != fb.len() {
            return Err(HarnessError::GridMismatch(format!("{}: column count differs", b.display())));
        }
        for (x, y) in fa.iter().zip(&fb) {
            match (x.parse::<f64>(), y.parse::<f64>()) {
                (Ok(x), Ok(y)) if x == y => {}
                (Ok(x), Ok(y)) => max_abs = max_abs.max((x - y).abs()),
                _ if x == y => {}
                _ => text += 1,
            }
        }
    }
    Ok((max_abs, text))
}

fn read_container(path: &Path) -> Result<FieldContainer> {
    let bytes = std::fs::read(path).map_err(io(path))?;
    FieldContainer::read_from(&bytes[..]).map_err(|e| HarnessError::Malformed { path: path.to_path_buf(), reason: e.to_string() })
}

fn compare_containers(a: &Path, b: &Path) -> Result<(f64, f64)> {
    let (ca, cb) = (read_container(a)?, read_container(b)?);
    if ca.dims != cb.dims || ca.lower != cb.lower || ca.spacing != cb.spacing {
        return Err(HarnessError::GridMismatch(format!("{} and {} live on different grids", a.display(), b.display())));
    }
    let vol: f64 = ca.spacing.iter().product();
    let (mut max_abs, mut l1) = (0.0f64, 0.0);
    for (x, y) in ca.values.iter().zip(&cb.values) {
        max_abs = max_abs.max((x - y).abs());
        l1 += (x - y).abs() * vol;
    }
    Ok((max_abs, l1))
}

pub fn compare_runs(reference: &Path, other: &Path) -> Result<Vec<FileComparison>> {
    let mut out = Vec::new();
    for f in data_files(reference)? {
        let (pa, pb) = (reference.join(&f), other.join(&f));
        if !pb.is_file() {
            return Err(HarnessError::MissingFile(pb));
        }
        let (max_abs, l1, text_mismatches) = if f.ends_with(".bin") {
            let (m, l) = compare_containers(&pa, &pb)?;
            (m, Some(l), 0)
        } else {
            let (m, t) = compare_csv(&pa, &pb)?;
            (m, None, t)
        };
        out.push(FileComparison { reference: reference.into(), other: other.into(), file: f, max_abs, l1, text_mismatches });
    }
    Ok(out)
}

/// Position marginal of a phase-space container (`ρ̂` on `r × v`), as cell
/// masses on its `r` grid.
pub fn fp_position_marginal(c: &FieldContainer) -> Result<(TensorGrid, Vec<f64>)> {
    let n = c.dims.len() / 2;
    let sub = |range: std::ops::Range<usize>| -> Result<TensorGrid> {
        let lo = &c.lower[range.clone()];
        let hi: Vec<f64> = range.clone().map(|a| c.lower[a] + c.spacing[a] * c.dims[a] as f64).collect();
        TensorGrid::new(lo, &hi, &c.dims[range]).map_err(|e| HarnessError::GridMismatch(e.to_string()))
    };
    let (rg, vg) = (sub(0..n)?, sub(n..2 * n)?);
    let m = maxwellian_cells(&vg, c.beta);
    let (vol_r, vol_v) = (rg.cell_volume(), vg.cell_volume());
    let nv = vg.len();
    let out = (0..rg.len()).map(|ir| (0..nv).map(|iv| c.values[ir * nv + iv] * m[iv]).sum::<f64>() * vol_v * vol_r).collect();
    Ok((rg, out))
}

type BinnedDensity = (f64, Vec<(Vec<usize>, f64)>);

/// Last-time `(time, bin index, rho_bar)` rows of an ensemble `moments.csv`.
fn last_moments(path: &Path) -> Result<BinnedDensity> {
    if !path.is_file() {
        return Err(HarnessError::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    let bad = |reason: &str| HarnessError::Malformed { path: path.to_path_buf(), reason: reason.into() };
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty"))?.split(',').collect();
    let rank = header.iter().filter(|h| h.starts_with('i')).count();
    let rho_col = header.iter().position(|h| *h == "rho_bar").ok_or_else(|| bad("no rho_bar column"))?;
    let mut rows: Vec<(f64, Vec<usize>, f64)> = Vec::new();
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        let t: f64 = f[0].parse().map_err(|_| bad("time"))?;
        let idx = f[1..=rank].iter().map(|s| s.parse().map_err(|_| bad("bin index"))).collect::<Result<Vec<usize>>>()?;
        rows.push((t, idx, f[rho_col].parse().map_err(|_| bad("rho_bar"))?));
    }
    let t = rows.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    Ok((t, rows.into_iter().filter(|r| r.0 == t).map(|r| (r.1, r.2)).collect()))
}

/// L¹ distance of the position marginals of an FP run and an ensemble run,
/// against `3` Monte Carlo standard deviations plus
/// [`FP_SDE_DISCRETISATION_BAND`].
pub fn compare_marginals(fp_dir: &Path, kin_dir: &Path) -> Result<MarginalComparison> {
    let fields = fp_dir.join("fields");
    let mut dumps: Vec<String> =
        data_files(fp_dir)?.into_iter().filter(|f| f.starts_with("fields") && f.ends_with(".bin")).collect();
    dumps.sort();
    let last = dumps.pop().ok_or_else(|| HarnessError::MissingFile(fields.join("rho_hat_*.bin")))?;
    let c = read_container(&fp_dir.join(&last))?;
    let (rg, mass) = fp_position_marginal(&c)?;
    let (kt, rows) = last_moments(&kin_dir.join("moments.csv"))?;
    let rank = rg.ndim();
    let bins = rows.iter().fold(vec![0usize; rank], |mut m, (i, _)| {
        for a in 0..rank.min(i.len()) {
            m[a] = m[a].max(i[a] + 1);
        }
        m
    });
    if rows.first().map(|r| r.0.len()) != Some(rank) || bins.iter().zip(rg.shape()).any(|(b, n)| n % b != 0) {
        return Err(HarnessError::GridMismatch(format!("FP grid {:?} does not refine ensemble bins {bins:?}", rg.shape())));
    }
    let bg = TensorGrid::new(rg.lower(), &(0..rank).map(|a| rg.upper(a)).collect::<Vec<_>>(), &bins)
        .map_err(|e| HarnessError::GridMismatch(e.to_string()))?;
    let mut coarse = vec![0.0; bg.len()];
    let mut idx = vec![0; rank];
    for (c, m) in mass.iter().enumerate() {
        rg.unflat(c, &mut idx);
        for a in 0..rank {
            idx[a] /= rg.shape()[a] / bins[a];
        }
        coarse[bg.flat(&idx)] += m;
    }
    let kin = read_json(&kin_dir.join(MANIFEST))?;
    let n_chains = kin["config"]["kinetic"]["n_chains"].as_f64().unwrap_or(f64::INFINITY);
    let (mut distance, mut mc) = (0.0, 0.0);
    for (i, rho) in &rows {
        let p = coarse[bg.flat(i)];
        distance += (p - rho).abs();
        mc += (2.0 * p * (1.0 - p) / (std::f64::consts::PI * n_chains)).sqrt();
    }
    let band = 3.0 * mc + FP_SDE_DISCRETISATION_BAND;
    Ok(MarginalComparison {
        fp_run: fp_dir.into(),
        kinetic_run: kin_dir.into(),
        fp_time: c.time,
        kinetic_time: kt,
        distance,
        band,
        passed: distance <= band,
    })
}

pub fn compare_report(dirs: &[PathBuf]) -> Result<Report> {
    let runs = dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    let mut comparisons = Vec::new();
    let mut marginals = Vec::new();
    for (k, r) in runs.iter().enumerate() {
        if let Some(first) = runs[..k].iter().find(|f| f.scenario == r.scenario) {
            comparisons.extend(compare_runs(&first.dir, &r.dir)?);
        }
    }
    for f in runs.iter().filter(|r| r.scenario == "simulate-fp") {
        for k in runs.iter().filter(|r| r.scenario == "simulate-kinetic") {
            marginals.push(compare_marginals(&f.dir, &k.dir)?);
        }
    }
    let all_passed = runs.iter().all(|r| r.passed) && marginals.iter().all(|m| m.passed);
    Ok(Report { runs, comparisons, marginals, all_passed })
}

pub fn write_report(dirs: &[PathBuf], out: &RunDir) -> Result<Summary> {
    let rep = compare_report(dirs)?;
    out.write_json("report.json", &rep)?;
    out.with_file("comparisons.csv", |w| {
        use std::io::Write;
        writeln!(w, "reference,other,file,max_abs,l1,text_mismatches")?;
        for c in &rep.comparisons {
            let l1 = c.l1.map(|x| format!("{x:e}")).unwrap_or_default();
            writeln!(w, "{},{},{},{:e},{l1},{}", c.reference.display(), c.other.display(), c.file, c.max_abs, c.text_mismatches)?;
        }
        Ok(())
    })?;
    let mut s = Summary::new("report");
    for r in &rep.runs {
        s.check(&format!("run {}", r.dir.display()), r.passed, r.scenario.clone());
    }
    for m in &rep.marginals {
        s.check(
            &format!("marginal {} vs {}", m.fp_run.display(), m.kinetic_run.display()),
            m.passed,
            format!("distance {:e}, band {:e}", m.distance, m.band),
        );
    }
    s.metric("comparisons", rep.comparisons.len());
    s.metric("max_abs", rep.comparisons.iter().map(|c| c.max_abs).fold(0.0, f64::max));
    Ok(s)
}
