//! Python bindings: system loading, scenario generation, market clearing,
//! revenue curves and hulls, the centralized benchmark, and the
//! multi-agent equilibrium loop.

use hydromarket::equilibrium::{
    centralized_operation, run_equilibrium, EquilibriumOptions, SddpBudget,
};
use hydromarket::market::{self, Bid};
use hydromarket::scenario::{self, NoiseModel, ScenarioSet};
use hydromarket::system::{herfindahl_index, SystemModel};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

#[pyclass(name = "System")]
struct PySystem {
    inner: SystemModel,
}

#[pymethods]
impl PySystem {
    /// Parses a system description from JSON text.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        SystemModel::from_json(text)
            .map(|inner| Self { inner })
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_file(path: &str) -> PyResult<Self> {
        SystemModel::from_file(std::path::Path::new(path))
            .map(|inner| Self { inner })
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Broken invariants as human-readable strings; empty when valid.
    fn validate(&self) -> Vec<String> {
        self.inner.validate().iter().map(|v| v.to_string()).collect()
    }

    #[getter]
    fn stages(&self) -> usize {
        self.inner.stages
    }

    #[getter]
    fn demand(&self) -> Vec<f64> {
        self.inner.demand.clone()
    }

    #[getter]
    fn deficit_cost(&self) -> f64 {
        self.inner.deficit_cost
    }

    fn capacity_of(&self, agent: u32) -> f64 {
        self.inner.capacity_of(agent)
    }

    fn agent_ids(&self) -> Vec<u32> {
        self.inner.agents.iter().map(|a| a.id).collect()
    }
}

#[pyclass(name = "Scenarios")]
struct PyScenarios {
    inner: ScenarioSet,
}

#[pymethods]
impl PyScenarios {
    #[getter]
    fn samples(&self) -> usize {
        self.inner.samples
    }

    #[getter]
    fn stages(&self) -> usize {
        self.inner.stages
    }

    /// Inflow of one hydro plant (by position) as `[stage][sample]`.
    fn inflows(&self, hydro: usize) -> Vec<Vec<f64>> {
        self.inner
            .inflows
            .iter()
            .map(|per_sample| per_sample.iter().map(|v| v[hydro]).collect())
            .collect()
    }
}

/// Generates inflow and renewable scenarios. `noise_json` follows the
/// noise-model file layout; omit it for systems without hydro plants.
#[pyfunction]
#[pyo3(signature = (system, samples, seed, noise_json=None))]
fn generate_scenarios(
    system: &PySystem,
    samples: usize,
    seed: u64,
    noise_json: Option<&str>,
) -> PyResult<PyScenarios> {
    let noise = match noise_json {
        Some(text) => NoiseModel::from_json(&system.inner, text)
            .map_err(|e| PyValueError::new_err(e.to_string()))?,
        None if system.inner.hydros.is_empty() => NoiseModel::deterministic(&[]),
        None => {
            return Err(PyValueError::new_err(
                "system has hydro plants; provide noise_json",
            ))
        }
    };
    scenario::generate(&system.inner, &noise, samples, seed)
        .map(|inner| PyScenarios { inner })
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_bids(pairs: &[(u32, f64, f64)]) -> Vec<Bid> {
    pairs
        .iter()
        .map(|&(agent, price, quantity)| Bid {
            agent,
            price,
            quantity,
        })
        .collect()
}

/// Clears `bids` (triples of agent, price, quantity) against demand.
/// Returns {"accepted": [...], "price": .., "total_cost": ..}.
#[pyfunction]
fn clear_market<'py>(
    py: Python<'py>,
    bids: Vec<(u32, f64, f64)>,
    demand: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let outcome = market::clear_market(&to_bids(&bids), demand)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let out = PyDict::new(py);
    out.set_item("accepted", outcome.accepted)?;
    out.set_item("price", outcome.price)?;
    out.set_item("total_cost", outcome.total_cost)?;
    Ok(out)
}

/// Constant-price intervals of the strategic revenue curve as
/// (start, end, price) triples.
#[pyfunction]
fn revenue_curve_segments(
    other_bids: Vec<(u32, f64, f64)>,
    demand: f64,
    contract_price: f64,
    contract_quantity: f64,
    e_max: f64,
) -> Vec<(f64, f64, f64)> {
    market::revenue_curve(
        &to_bids(&other_bids),
        demand,
        contract_price,
        contract_quantity,
        e_max,
    )
    .segments
    .iter()
    .map(|s| (s.start, s.end, s.price))
    .collect()
}

/// Vertices of the concave revenue majorant as (energy, revenue) pairs.
#[pyfunction]
fn concave_hull_vertices(
    other_bids: Vec<(u32, f64, f64)>,
    demand: f64,
    contract_price: f64,
    contract_quantity: f64,
    e_max: f64,
) -> Vec<(f64, f64)> {
    let curve = market::revenue_curve(
        &to_bids(&other_bids),
        demand,
        contract_price,
        contract_quantity,
        e_max,
    );
    market::concave_hull(&curve).vertices
}

/// Trains and simulates the centralized dispatch; returns the mean spot
/// price, training lower bound, and the full price table.
#[pyfunction]
#[pyo3(signature = (system, scenarios, sddp_iterations=25, seed=0))]
fn run_centralized<'py>(
    py: Python<'py>,
    system: &PySystem,
    scenarios: &PyScenarios,
    sddp_iterations: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let outcome = centralized_operation(
        &system.inner,
        &scenarios.inner,
        SddpBudget {
            iterations: sddp_iterations,
            forward_passes: 1,
        },
        seed,
    )
    .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let out = PyDict::new(py);
    out.set_item("mean_price", outcome.mean_price)?;
    out.set_item(
        "lower_bound",
        outcome.training_log.last().map(|r| r.lower_bound),
    )?;
    out.set_item("prices", outcome.prices)?;
    out.set_item("spillage_fraction", outcome.spillage_fraction)?;
    out.set_item("storage_fraction", outcome.storage_fraction)?;
    Ok(out)
}

/// Runs the diagonalization loop; returns the aggregate report.
#[pyfunction]
#[pyo3(signature = (system, scenarios, max_iterations=8, tolerance=0.01, k_markov=3,
                    seed=0, contract_level=None, sddp_iterations=25))]
#[allow(clippy::too_many_arguments)]
fn run_equilibrium_py<'py>(
    py: Python<'py>,
    system: &PySystem,
    scenarios: &PyScenarios,
    max_iterations: usize,
    tolerance: f64,
    k_markov: usize,
    seed: u64,
    contract_level: Option<f64>,
    sddp_iterations: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let report = run_equilibrium(
        &system.inner,
        &scenarios.inner,
        &EquilibriumOptions {
            max_outer_iterations: max_iterations,
            tolerance,
            k_markov,
            seed,
            contract_level,
            sddp: SddpBudget {
                iterations: sddp_iterations,
                forward_passes: 1,
            },
        },
    )
    .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let out = PyDict::new(py);
    out.set_item("converged", report.converged)?;
    out.set_item("iterations", report.iterations)?;
    out.set_item("mean_price", report.mean_price)?;
    out.set_item("centralized_mean_price", report.centralized_mean_price)?;
    out.set_item("prices", report.prices)?;
    let revenue = PyDict::new(py);
    for (agent, value) in &report.revenue_per_mwh {
        revenue.set_item(agent, value)?;
    }
    out.set_item("revenue_per_mwh", revenue)?;
    out.set_item("spillage_fraction", report.spillage_fraction)?;
    out.set_item("storage_fraction", report.storage_fraction)?;
    Ok(out)
}

/// Sum of squared market shares; shares must sum to one.
#[pyfunction]
fn hhi(shares: Vec<f64>) -> PyResult<f64> {
    herfindahl_index(&shares).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn hydromarket_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySystem>()?;
    m.add_class::<PyScenarios>()?;
    m.add_function(wrap_pyfunction!(generate_scenarios, m)?)?;
    m.add_function(wrap_pyfunction!(clear_market, m)?)?;
    m.add_function(wrap_pyfunction!(revenue_curve_segments, m)?)?;
    m.add_function(wrap_pyfunction!(concave_hull_vertices, m)?)?;
    m.add_function(wrap_pyfunction!(run_centralized, m)?)?;
    m.add_function(wrap_pyfunction!(run_equilibrium_py, m)?)?;
    m.add_function(wrap_pyfunction!(hhi, m)?)?;
    Ok(())
}
