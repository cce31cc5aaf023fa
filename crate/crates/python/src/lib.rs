//! Python bindings. Results cross the boundary as plain dicts and lists with
//! the same field names as the JSON outputs of the command-line tool.

use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

use rankfuse::data::{
    self, CountyObservation, Direction, Group, GroupMap, OutcomeConfig, OutcomeSpec, PanelDataset,
};
use rankfuse::descriptives::{self, CorrelationMethod};
use rankfuse::harness::{self, RobustnessConfig};
use rankfuse::oracles::{self, SimScenario};
use rankfuse::preprocess::{self, AlignedMatrix};
use rankfuse::rank::{self, Sidedness};

create_exception!(rankfuse, RankfuseError, PyValueError);

fn err(e: impl std::fmt::Display) -> PyErr {
    RankfuseError::new_err(e.to_string())
}

fn coded(code: &str, e: impl std::fmt::Display) -> PyErr {
    RankfuseError::new_err(format!("{code}: {e}"))
}

/// Convert any serializable value to native Python objects via JSON.
fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parse_sidedness(s: &str) -> PyResult<Sidedness> {
    match s {
        "greater" | "greater_treat" => Ok(Sidedness::GreaterTreat),
        "two_sided" | "two-sided" => Ok(Sidedness::TwoSided),
        _ => Err(err(format!("unknown sidedness `{s}`"))),
    }
}

fn parse_direction(s: &str) -> PyResult<Direction> {
    match s {
        "higher_is_worse" => Ok(Direction::HigherIsWorse),
        "higher_is_better" => Ok(Direction::HigherIsBetter),
        _ => Err(err(format!("unknown direction `{s}`"))),
    }
}

fn group_map(groups: &Bound<'_, PyDict>) -> PyResult<GroupMap> {
    let mut map = GroupMap::default();
    for (k, v) in groups.iter() {
        let code: u8 = v.extract()?;
        let g = Group::from_code(code).ok_or_else(|| err("group must be 0 or 1"))?;
        map.assignment.insert(k.extract()?, g);
    }
    Ok(map)
}

fn groups_dict<'py>(py: Python<'py>, groups: &GroupMap) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (k, v) in &groups.assignment {
        d.set_item(k, v.code())?;
    }
    Ok(d)
}

/// Mid-ranks (ties share the mean of their positions), ascending.
#[pyfunction]
fn midranks(values: Vec<f64>) -> PyResult<Vec<f64>> {
    rank::midranks(&values).map_err(|e| coded(e.code(), e))
}

/// A county panel with named outcomes.
#[pyclass(frozen, module = "rankfuse")]
struct Panel {
    inner: PanelDataset,
}

impl Panel {
    fn checked_matrix(&self, groups: &GroupMap, c: Option<usize>) -> PyResult<AlignedMatrix> {
        let report = data::validate_panel_for(&self.inner, groups, c);
        if let Some(first) = report.errors.first() {
            return Err(err(format!(
                "validation failed with {} error(s); first: {first}",
                report.errors.len()
            )));
        }
        let aligned = preprocess::align_outcomes(&self.inner);
        preprocess::impute_state_median(&aligned).map_err(|e| coded(e.code(), e))
    }

    fn subsampled(
        &self,
        groups: &GroupMap,
        c: Option<usize>,
        seed: u64,
    ) -> PyResult<AlignedMatrix> {
        let full = self.checked_matrix(groups, c)?;
        match c {
            None => Ok(full),
            Some(c) => {
                let plan =
                    preprocess::plan_subsample(&full, c, seed).map_err(|e| coded(e.code(), e))?;
                preprocess::apply_subsample(&full, &plan).map_err(|e| coded(e.code(), e))
            }
        }
    }
}

#[pymethods]
impl Panel {
    /// Build a panel from `outcomes` as `(name, direction)` pairs and rows as
    /// `(county_id, state_id, values)` with `None` for missing values.
    #[new]
    fn new(
        outcomes: Vec<(String, String)>,
        rows: Vec<(String, String, Vec<Option<f64>>)>,
    ) -> PyResult<Self> {
        let specs = outcomes
            .into_iter()
            .map(|(name, dir)| Ok(OutcomeSpec::new(name, parse_direction(&dir)?)))
            .collect::<PyResult<Vec<_>>>()?;
        let obs = rows
            .into_iter()
            .map(|(county_id, state_id, values)| CountyObservation {
                county_id,
                state_id,
                values,
            })
            .collect();
        let inner = PanelDataset::new(specs, obs).map_err(|e| coded(e.code(), e))?;
        Ok(Panel { inner })
    }

    /// Read a panel CSV using an outcome config TOML.
    #[staticmethod]
    fn load(panel_path: &str, outcomes_path: &str) -> PyResult<Self> {
        let config = OutcomeConfig::load(outcomes_path).map_err(|e| coded(e.code(), e))?;
        let inner = data::load_panel(panel_path, &config).map_err(|e| coded(e.code(), e))?;
        Ok(Panel { inner })
    }

    #[getter]
    fn outcomes(&self) -> Vec<String> {
        self.inner.outcomes().iter().map(|o| o.name.clone()).collect()
    }

    #[getter]
    fn n_counties(&self) -> usize {
        self.inner.observations().len()
    }

    #[getter]
    fn state_counts(&self) -> std::collections::BTreeMap<String, usize> {
        self.inner.state_counts().clone()
    }

    /// Canonical CSV text of the panel.
    fn to_csv(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        data::write_panel(&self.inner, &mut buf).map_err(err)?;
        String::from_utf8(buf).map_err(err)
    }

    #[pyo3(signature = (groups, counties_per_state=None))]
    fn validate(
        &self,
        py: Python<'_>,
        groups: &Bound<'_, PyDict>,
        counties_per_state: Option<usize>,
    ) -> PyResult<Py<PyAny>> {
        let g = group_map(groups)?;
        to_py(py, &data::validate_panel_for(&self.inner, &g, counties_per_state))
    }

    /// Rank-sum test, optionally on a subsample of `counties_per_state`
    /// counties per state. Returns the result dict with per-state summaries
    /// under `"summaries"`.
    #[pyo3(signature = (groups, counties_per_state=None, seed=0, sidedness="greater"))]
    fn test(
        &self,
        py: Python<'_>,
        groups: &Bound<'_, PyDict>,
        counties_per_state: Option<usize>,
        seed: u64,
        sidedness: &str,
    ) -> PyResult<Py<PyAny>> {
        let g = group_map(groups)?;
        let side = parse_sidedness(sidedness)?;
        let matrix = self.subsampled(&g, counties_per_state, seed)?;
        let (mut result, summaries) =
            py.detach(|| rank::test_matrix(&matrix, &g, side)).map_err(|e| coded(e.code(), e))?;
        result.c = counties_per_state;
        let out = to_py(py, &result)?;
        out.bind(py).set_item("summaries", to_py(py, &summaries)?)?;
        out.bind(py).set_item("provenance", to_py(py, &matrix.provenance)?)?;
        Ok(out)
    }

    /// Label-permutation p-value for the difference in mean state aggregates.
    #[pyo3(signature = (groups, max_permutations=10_000, seed=0, counties_per_state=None))]
    fn permutation_test(
        &self,
        py: Python<'_>,
        groups: &Bound<'_, PyDict>,
        max_permutations: u64,
        seed: u64,
        counties_per_state: Option<usize>,
    ) -> PyResult<Py<PyAny>> {
        let g = group_map(groups)?;
        let matrix = self.subsampled(&g, counties_per_state, seed)?;
        let result = py
            .detach(|| {
                let table = rank::rank_table(&matrix)?;
                let summaries = rank::state_rank_summaries(&table, &matrix);
                oracles::permutation_test(&summaries, &g, max_permutations, seed)
            })
            .map_err(|e| coded(e.code(), e))?;
        to_py(py, &result)
    }

    /// Repeat the test over subsample sizes and replicates.
    #[pyo3(signature = (groups, c_values=vec![30, 40, 50], replicates=200, alpha_levels=vec![0.05, 0.10], seed=0, sidedness="greater"))]
    #[allow(clippy::too_many_arguments)]
    fn robustness(
        &self,
        py: Python<'_>,
        groups: &Bound<'_, PyDict>,
        c_values: Vec<usize>,
        replicates: usize,
        alpha_levels: Vec<f64>,
        seed: u64,
        sidedness: &str,
    ) -> PyResult<Py<PyAny>> {
        let g = group_map(groups)?;
        let cfg = RobustnessConfig {
            c_values,
            replicates,
            alpha_levels,
            master_seed: seed,
            sidedness: parse_sidedness(sidedness)?,
        };
        let run = py
            .detach(|| harness::run_robustness(&self.inner, &g, &cfg))
            .map_err(err)?;
        let out = to_py(py, &run.summary)?;
        out.bind(py).set_item("table", harness::summarize_table(&run.summary))?;
        Ok(out)
    }

    /// Outcome correlation matrix and standardized group differences.
    #[pyo3(signature = (groups, method="pearson"))]
    fn describe(
        &self,
        py: Python<'_>,
        groups: &Bound<'_, PyDict>,
        method: &str,
    ) -> PyResult<Py<PyAny>> {
        let g = group_map(groups)?;
        let method = match method {
            "pearson" => CorrelationMethod::Pearson,
            "spearman" => CorrelationMethod::Spearman,
            _ => return Err(err(format!("unknown method `{method}`"))),
        };
        let matrix = self.checked_matrix(&g, None)?;
        let summary = descriptives::describe(&matrix, &g, method).map_err(err)?;
        to_py(py, &summary)
    }

    fn __repr__(&self) -> String {
        format!(
            "Panel(counties={}, states={}, outcomes={:?})",
            self.inner.observations().len(),
            self.inner.n_states(),
            self.outcomes()
        )
    }
}

/// Draw a synthetic panel; returns `(panel, groups)`. `shift` is a float
/// applied to every outcome or a list with one entry per outcome.
#[pyfunction]
#[pyo3(signature = (m1=20, m0=20, n=50, k=5, shift=None, rho_within=0.0, rho_outcome=0.0, seed=0))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    m1: usize,
    m0: usize,
    n: usize,
    k: usize,
    shift: Option<&Bound<'py, PyAny>>,
    rho_within: f64,
    rho_outcome: f64,
    seed: u64,
) -> PyResult<(Panel, Bound<'py, PyDict>)> {
    let shift = shift_vec(shift, k)?;
    let sc = SimScenario::new(m1, m0, n, k, rho_within, rho_outcome, shift, seed).map_err(err)?;
    let (matrix, groups) = oracles::simulate_panel(&sc).map_err(err)?;
    let obs = matrix
        .rows()
        .iter()
        .map(|r| CountyObservation {
            county_id: r.county_id.clone(),
            state_id: r.state_id.clone(),
            values: r.values.iter().map(|v| Some(*v)).collect(),
        })
        .collect();
    let inner = PanelDataset::new(matrix.outcomes().to_vec(), obs).map_err(err)?;
    Ok((Panel { inner }, groups_dict(py, &groups)?))
}

fn shift_vec(shift: Option<&Bound<'_, PyAny>>, k: usize) -> PyResult<Vec<f64>> {
    match shift {
        None => Ok(vec![0.0; k]),
        Some(s) => match s.extract::<f64>() {
            Ok(v) => Ok(vec![v; k]),
            Err(_) => s.extract::<Vec<f64>>(),
        },
    }
}

/// Monte Carlo rejection rates of the one-sided test on simulated panels.
#[pyfunction]
#[pyo3(signature = (m1=20, m0=20, n=50, k=5, shift=None, rho_within=0.0, rho_outcome=0.0, seed=0, replicates=200, alpha_levels=vec![0.05, 0.10]))]
#[allow(clippy::too_many_arguments)]
fn calibration(
    py: Python<'_>,
    m1: usize,
    m0: usize,
    n: usize,
    k: usize,
    shift: Option<&Bound<'_, PyAny>>,
    rho_within: f64,
    rho_outcome: f64,
    seed: u64,
    replicates: usize,
    alpha_levels: Vec<f64>,
) -> PyResult<Py<PyAny>> {
    let shift = shift_vec(shift, k)?;
    let sc = SimScenario::new(m1, m0, n, k, rho_within, rho_outcome, shift, seed).map_err(err)?;
    let report = py
        .detach(|| oracles::calibration_run(&sc, replicates, &alpha_levels))
        .map_err(err)?;
    to_py(py, &report)
}

/// Read a group CSV into a `{state_id: 0 | 1}` dict.
#[pyfunction]
fn load_groups<'py>(py: Python<'py>, path: &str) -> PyResult<Bound<'py, PyDict>> {
    let (groups, _) = data::load_group_map(path).map_err(|e| coded(e.code(), e))?;
    groups_dict(py, &groups)
}

#[pymodule]
#[pyo3(name = "rankfuse")]
fn rankfuse_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Panel>()?;
    m.add_function(wrap_pyfunction!(midranks, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(calibration, m)?)?;
    m.add_function(wrap_pyfunction!(load_groups, m)?)?;
    m.add("RankfuseError", m.py().get_type::<RankfuseError>())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
