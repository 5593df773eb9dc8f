//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use raptr_lab::boolpoly::{sample_target, SparsePolynomial};
use raptr_lab::netcore::{self, ScalePattern};
use raptr_lab::numkit::RngStream;
use raptr_lab::runner::{self, ExperimentConfig};
use raptr_lab::sharedbase;
use raptr_lab::subnet::{self, ScheduleSpec};
use raptr_lab::trainers::pld_long_run_flops;
use raptr_lab::LabError;

fn to_py(err: LabError) -> PyErr {
    match err {
        LabError::Argument(_) | LabError::Dimension(_) | LabError::Config(_) | LabError::Json(_) | LabError::InfeasibleSchedule(_) => {
            PyValueError::new_err(err.to_string())
        }
        _ => PyRuntimeError::new_err(err.to_string()),
    }
}

fn rows_to_array(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must have equal length"));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn array_to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

#[pyclass(name = "GatePattern")]
#[derive(Clone)]
struct PyGatePattern {
    inner: subnet::GatePattern,
}

#[pymethods]
impl PyGatePattern {
    #[new]
    #[pyo3(signature = (bits, fixed = vec![]))]
    fn new(bits: Vec<bool>, fixed: Vec<usize>) -> PyResult<Self> {
        Ok(Self {
            inner: subnet::GatePattern::from_bits(bits, fixed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn full(depth: usize) -> Self {
        Self {
            inner: subnet::GatePattern::full(depth),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (p, depth, fixed = vec![], seed = 0, stream = 0))]
    fn sample(p: f64, depth: usize, fixed: Vec<usize>, seed: u64, stream: u64) -> PyResult<Self> {
        let mut rng = RngStream::new(seed, stream);
        Ok(Self {
            inner: subnet::sample_gates(p, &fixed, depth, &mut rng).map_err(to_py)?,
        })
    }

    #[getter]
    fn bits(&self) -> Vec<bool> {
        self.inner.bits().to_vec()
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth()
    }

    fn active_indices(&self) -> Vec<usize> {
        self.inner.active_indices()
    }

    fn active_count(&self) -> usize {
        self.inner.active_count()
    }

    /// Square-root gap scales.
    fn h_sqrt(&self) -> PyResult<Vec<f64>> {
        Ok(netcore::h_sqrt(&self.inner).map_err(to_py)?.0)
    }

    fn __repr__(&self) -> String {
        let s: String = self.inner.bits().iter().map(|&b| if b { '1' } else { '0' }).collect();
        format!("GatePattern('{s}')")
    }
}

#[pyclass(name = "ResidualNet")]
#[derive(Clone)]
struct PyResidualNet {
    inner: netcore::ResidualNet,
}

#[pymethods]
impl PyResidualNet {
    #[staticmethod]
    #[pyo3(signature = (d, hidden, depth, prenorm = true, readout_std = 0.1, seed = 0))]
    fn relu_mlp(d: usize, hidden: usize, depth: usize, prenorm: bool, readout_std: f64, seed: u64) -> PyResult<Self> {
        let mut rng = RngStream::new(seed, 0);
        Ok(Self {
            inner: netcore::ResidualNet::relu_mlp(d, hidden, depth, prenorm, readout_std, &mut rng).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: netcore::load_checkpoint(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        netcore::save_checkpoint(&self.inner, &path).map_err(to_py)
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Outputs for a batch of inputs; `scales` defaults to all ones.
    #[pyo3(signature = (x, scales = None))]
    fn forward(&self, x: Vec<Vec<f64>>, scales: Option<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = rows_to_array(x)?;
        let s = ScalePattern(scales.unwrap_or_else(|| vec![1.0; self.inner.depth()]));
        let tape = self.inner.forward(x.view(), &s).map_err(to_py)?;
        Ok(array_to_rows(&tape.output))
    }

    /// Largest relative gradient gap between gated and shared-base paths.
    #[pyo3(signature = (x, gates, scaled = false))]
    fn shared_base_discrepancy(&self, x: Vec<Vec<f64>>, gates: &PyGatePattern, scaled: bool) -> PyResult<f64> {
        let x = rows_to_array(x)?;
        let r = if scaled {
            sharedbase::equivalence_check_scaled(&self.inner, x.view(), &gates.inner)
        } else {
            sharedbase::equivalence_check(&self.inner, x.view(), &gates.inner)
        };
        r.map_err(to_py)
    }
}

#[pyclass(name = "SparsePolynomial")]
#[derive(Clone)]
struct PySparsePolynomial {
    inner: SparsePolynomial,
}

#[pymethods]
impl PySparsePolynomial {
    #[staticmethod]
    #[pyo3(signature = (d, max_degree, per_degree, support, seed = 0))]
    fn sample(d: usize, max_degree: usize, per_degree: usize, support: usize, seed: u64) -> PyResult<Self> {
        let mut rng = RngStream::new(seed, 1);
        Ok(Self {
            inner: sample_target(d, max_degree, per_degree, support, &mut rng).map_err(to_py)?,
        })
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d
    }

    /// `(degree, subset, coefficient)` per term.
    fn terms(&self) -> Vec<(usize, Vec<usize>, f64)> {
        self.inner.terms.iter().map(|t| (t.degree, t.subset.clone(), t.coeff)).collect()
    }

    fn eval(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let x = rows_to_array(x)?;
        Ok(self.inner.eval_batch(x.view()).map_err(to_py)?.to_vec())
    }
}

/// Builds a schedule from its JSON description; returns
/// `(shift, boundaries, average length)`.
#[pyfunction]
fn build_schedule(spec_json: &str, depth: usize, total_steps: usize) -> PyResult<(i64, Vec<usize>, f64)> {
    let spec: ScheduleSpec = serde_json::from_str(spec_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let built = spec.build(depth, total_steps).map_err(to_py)?;
    Ok((built.shift, built.schedule.boundaries(), built.schedule.avg_length()))
}

#[pyfunction]
#[pyo3(signature = (p, depth, fixed_count = 0))]
fn relative_flops(p: f64, depth: usize, fixed_count: usize) -> f64 {
    subnet::relative_flops(p, fixed_count, depth)
}

#[pyfunction]
fn pld_long_run_ratio(keep_floor: f64) -> f64 {
    pld_long_run_flops(keep_floor)
}

#[pyfunction]
fn flops_overhead(batch: usize, depth: usize) -> f64 {
    sharedbase::flops_overhead(batch, depth)
}

/// Runs a config given as a JSON string; returns the summary lines.
#[pyfunction]
#[pyo3(signature = (config_json, output_dir = None))]
fn run_config(py: Python<'_>, config_json: &str, output_dir: Option<PathBuf>) -> PyResult<Vec<String>> {
    let mut cfg = ExperimentConfig::from_json(config_json).map_err(to_py)?;
    if let Some(d) = output_dir {
        cfg.set_output_dir(d);
    }
    let report = py.allow_threads(|| runner::run(&cfg)).map_err(to_py)?;
    Ok(report.lines)
}

/// `(name, value, threshold, passed)` per check.
#[pyfunction]
fn selftest(py: Python<'_>) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let checks = py.allow_threads(runner::selftest).map_err(to_py)?;
    Ok(checks.into_iter().map(|c| {
        let ok = c.passed();
        (c.name, c.value, c.threshold, ok)
    }).collect())
}

#[pymodule]
fn raptr_lab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGatePattern>()?;
    m.add_class::<PyResidualNet>()?;
    m.add_class::<PySparsePolynomial>()?;
    m.add_function(wrap_pyfunction!(build_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(relative_flops, m)?)?;
    m.add_function(wrap_pyfunction!(pld_long_run_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(flops_overhead, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}
