//! Python bindings: chain parameters, domains, chain ensembles, the kinetic
//! Fokker-Planck solver and the scenario runner.

#![allow(clippy::useless_conversion)]

use std::path::PathBuf;

use hookean_mkv::chain_dynamics::{Dynamics, Ensemble as CoreEnsemble, StepOptions};
use hookean_mkv::fokker_planck::{assemble_fp_operator, DensityField, FpDiagnostics, FpOperator, PhaseGrid};
use hookean_mkv::macro_limit::RouseStructure;
use hookean_mkv::stress::{kramers_from_ensemble, stress_bound as core_stress_bound};
use hookean_mkv::{CellularFlow, ChainParams as CoreParams, ConvexDomain, TensorGrid, VelocitySampler, ZeroFlow};
use hookean_mkv_harness::{run_scenario as harness_run, Scenario, SimConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(frozen)]
#[derive(Clone, Copy)]
struct ChainParams {
    inner: CoreParams,
}

#[pymethods]
impl ChainParams {
    #[new]
    #[pyo3(signature = (springs, dim, eps, beta = 1.0, spring_constant = 1.0))]
    fn new(springs: usize, dim: usize, eps: f64, beta: f64, spring_constant: f64) -> PyResult<Self> {
        Ok(Self { inner: CoreParams::new(springs, dim, eps, beta, spring_constant).map_err(value_err)? })
    }

    #[getter]
    fn springs(&self) -> usize {
        self.inner.springs
    }
    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }
    #[getter]
    fn eps(&self) -> f64 {
        self.inner.eps
    }
    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta
    }
    #[getter]
    fn spring_constant(&self) -> f64 {
        self.inner.spring_constant
    }
    #[getter]
    fn beads(&self) -> usize {
        self.inner.beads()
    }

    fn __repr__(&self) -> String {
        let p = self.inner;
        format!(
            "ChainParams(springs={}, dim={}, eps={}, beta={}, spring_constant={})",
            p.springs, p.dim, p.eps, p.beta, p.spring_constant
        )
    }
}

#[pyclass(frozen)]
#[derive(Clone)]
struct Domain {
    inner: ConvexDomain,
}

#[pymethods]
impl Domain {
    #[staticmethod]
    fn rectangle(lo: Vec<f64>, hi: Vec<f64>) -> PyResult<Self> {
        if lo.len() != hi.len() {
            return Err(PyValueError::new_err("lo and hi differ in length"));
        }
        let ext: Vec<(f64, f64)> = lo.into_iter().zip(hi).collect();
        Ok(Self { inner: ConvexDomain::new_box(&ext).map_err(value_err)? })
    }

    #[staticmethod]
    fn cube(half: f64, dim: usize) -> PyResult<Self> {
        Ok(Self { inner: ConvexDomain::cube(half, dim).map_err(value_err)? })
    }

    #[staticmethod]
    fn disk(radius: f64, dim: usize) -> PyResult<Self> {
        Ok(Self { inner: ConvexDomain::disk(radius, dim).map_err(value_err)? })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn contains(&self, z: Vec<f64>) -> bool {
        self.inner.contains(&z)
    }

    fn signed_distance(&self, z: Vec<f64>) -> f64 {
        self.inner.signed_distance(&z)
    }

    fn diameter(&self) -> f64 {
        self.inner.diameter()
    }

    fn volume(&self) -> f64 {
        self.inner.volume()
    }
}

/// `"zero"` or `"cellular"` with amplitude; the cellular flow needs a box
/// centred at the origin in two dimensions.
fn make_flow(kind: &str, amplitude: f64, domain: &ConvexDomain) -> PyResult<Box<dyn VelocitySampler + Send + Sync>> {
    match kind {
        "zero" => Ok(Box::new(ZeroFlow { dim: domain.dim() })),
        "cellular" => {
            let (lo, hi) = domain.bounding_box();
            if domain.dim() != 2 || (lo[0] + hi[0]).abs() > 1e-12 || (lo[1] + hi[1]).abs() > 1e-12 {
                return Err(PyValueError::new_err("the cellular flow needs a two-dimensional box centred at the origin"));
            }
            Ok(Box::new(CellularFlow::new(amplitude, hi[0], hi[1])))
        }
        other => Err(PyValueError::new_err(format!("unknown flow `{other}`"))),
    }
}

#[pyclass]
struct Ensemble {
    inner: CoreEnsemble,
    params: CoreParams,
    domain: ConvexDomain,
    time: f64,
}

#[pymethods]
impl Ensemble {
    /// Uniform positions and Maxwellian velocities.
    #[new]
    fn new(n: usize, params: &ChainParams, domain: &Domain, seed: u64) -> PyResult<Self> {
        let inner = CoreEnsemble::sample_uniform_maxwellian(n, &params.inner, &domain.inner, seed).map_err(value_err)?;
        Ok(Self { inner, params: params.inner, domain: domain.inner.clone(), time: 0.0 })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn time(&self) -> f64 {
        self.time
    }

    /// Advance `steps` steps of `dt`; `overdamped` switches to the
    /// configuration-space dynamics.
    #[pyo3(signature = (dt, steps = 1, flow = "zero", amplitude = 1.0, overdamped = false))]
    fn step(&mut self, py: Python<'_>, dt: f64, steps: usize, flow: &str, amplitude: f64, overdamped: bool) -> PyResult<()> {
        let u = make_flow(flow, amplitude, &self.domain)?;
        let dynamics = if overdamped { Dynamics::Overdamped } else { Dynamics::Kinetic };
        let opts = StepOptions::default();
        let (ens, params, domain) = (&mut self.inner, &self.params, &self.domain);
        py.allow_threads(|| {
            for _ in 0..steps {
                ens.step(dynamics, dt, params, domain, u.as_ref(), &opts)?;
            }
            Ok::<_, hookean_mkv::Error>(())
        })
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        self.time += dt * steps as f64;
        Ok(())
    }

    /// Bead positions per chain, bead-major.
    fn positions(&self) -> Vec<Vec<f64>> {
        self.inner.chains.iter().map(|c| c.r.clone()).collect()
    }

    fn velocities(&self) -> Vec<Vec<f64>> {
        self.inner.chains.iter().map(|c| c.v.clone()).collect()
    }

    /// Kramers stress on an `n × … × n` grid over the bounding box: one
    /// row-major `d × d` block per cell.
    fn kramers_stress(&self, n: usize) -> PyResult<Vec<Vec<f64>>> {
        let (lo, hi) = self.domain.bounding_box();
        let grid = TensorGrid::new(&lo, &hi, &vec![n; lo.len()]).map_err(value_err)?;
        let k = kramers_from_ensemble(&self.inner.chains, &grid, self.params.spring_constant, self.time);
        let dd = self.params.dim * self.params.dim;
        Ok(k.values.chunks(dd).map(<[f64]>::to_vec).collect())
    }

    fn stress_bound(&self) -> f64 {
        core_stress_bound(self.params.springs, self.params.spring_constant, self.domain.configuration_domain().sup_norm_sq())
    }
}

/// Kinetic Fokker-Planck density with its operator.
#[pyclass]
struct FokkerPlanck {
    op: FpOperator,
    rho: DensityField,
    params: CoreParams,
    domain: ConvexDomain,
}

#[pymethods]
impl FokkerPlanck {
    #[new]
    #[pyo3(signature = (params, domain, n_r, n_v, initial = "gibbs", v_max = None, alpha = 0.0))]
    fn new(
        params: &ChainParams,
        domain: &Domain,
        n_r: usize,
        n_v: usize,
        initial: &str,
        v_max: Option<f64>,
        alpha: f64,
    ) -> PyResult<Self> {
        let p = params.inner;
        let v_max = v_max.unwrap_or(6.0 * p.beta.sqrt());
        let grid = PhaseGrid::new(&domain.inner, p.beads(), n_r, n_v, v_max, p.beta).map_err(value_err)?;
        let op = assemble_fp_operator(&grid, &p, alpha).map_err(value_err)?;
        let rho = match initial {
            "gibbs" => DensityField::gibbs(&grid, &p),
            "uniform" => DensityField::uniform(&grid, p.beta),
            other => return Err(PyValueError::new_err(format!("unknown initial density `{other}`"))),
        }
        .map_err(value_err)?;
        Ok(Self { op, rho, params: p, domain: domain.inner.clone() })
    }

    #[getter]
    fn time(&self) -> f64 {
        self.rho.time
    }

    #[pyo3(signature = (flow = "zero", amplitude = 1.0))]
    fn stability_bound(&self, flow: &str, amplitude: f64) -> PyResult<f64> {
        Ok(self.op.stability_bound(make_flow(flow, amplitude, &self.domain)?.as_ref()))
    }

    #[pyo3(signature = (dt, steps = 1, flow = "zero", amplitude = 1.0))]
    fn step(&mut self, py: Python<'_>, dt: f64, steps: usize, flow: &str, amplitude: f64) -> PyResult<()> {
        let u = make_flow(flow, amplitude, &self.domain)?;
        let (op, rho) = (&self.op, &mut self.rho);
        py.allow_threads(|| {
            for _ in 0..steps {
                op.step(rho, dt, u.as_ref())?;
            }
            Ok::<_, hookean_mkv::Error>(())
        })
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn mass(&self) -> f64 {
        self.rho.mass(self.params.beta)
    }

    fn gibbs_entropy(&self) -> f64 {
        self.op.gibbs_entropy(&self.rho)
    }

    /// Time, mass, entropy, Gibbs entropy, dissipation and minimum.
    fn diagnostics(&self) -> (f64, f64, f64, f64, f64, f64) {
        let d = FpDiagnostics::record(&self.op, &self.rho, 0.0);
        (d.time, d.mass, d.entropy, d.gibbs_entropy, d.dissipation, d.min_rho)
    }

    fn density(&self) -> Vec<f64> {
        self.rho.rho_hat.clone()
    }
}

/// Eigenvalues of the Rouse matrix for `springs` springs.
#[pyfunction]
fn rouse_eigenvalues(springs: usize) -> PyResult<Vec<f64>> {
    Ok(hookean_mkv::macro_limit::build_rouse(springs).map_err(value_err)?.eigenvalues())
}

#[pyfunction]
fn rouse_closed_form_eigenvalues(springs: usize) -> Vec<f64> {
    RouseStructure::closed_form_eigenvalues(springs)
}

/// Run a CLI scenario from a TOML config and return its summary as JSON.
#[pyfunction]
#[pyo3(signature = (scenario, config, out = None, seed = None))]
fn run_scenario(
    py: Python<'_>,
    scenario: &str,
    config: PathBuf,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> PyResult<(String, String)> {
    let sc = match scenario {
        "simulate-kinetic" => Scenario::SimulateKinetic,
        "simulate-fp" => Scenario::SimulateFp,
        "simulate-macro" => Scenario::SimulateMacro,
        "simulate-coupled" => Scenario::SimulateCoupled,
        "verify-oseen" => Scenario::VerifyOseen,
        "verify-identities" => Scenario::VerifyIdentities,
        "compare-limit" => Scenario::CompareLimit,
        other => return Err(PyValueError::new_err(format!("unknown scenario `{other}`"))),
    };
    let cfg = SimConfig::load(&config).map_err(value_err)?;
    let (dir, summary) =
        py.allow_threads(|| harness_run(sc, &cfg, out.as_deref(), seed)).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let json = serde_json::to_string(&summary).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok((dir.display().to_string(), json))
}

#[pymodule]
fn hookean_mkv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<ChainParams>()?;
    m.add_class::<Domain>()?;
    m.add_class::<Ensemble>()?;
    m.add_class::<FokkerPlanck>()?;
    m.add_function(wrap_pyfunction!(rouse_eigenvalues, m)?)?;
    m.add_function(wrap_pyfunction!(rouse_closed_form_eigenvalues, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    Ok(())
}
