//! Python module `hno`: game specs, the BVP solver, operator checkpoints,
//! closed-loop rollouts and the pipeline stages.

use std::path::{Path, PathBuf};

use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use hno_core::bvp::{self, SolverConfig};
use hno_core::game::{self, CaseId, GameModel, Slot, TypePair};
use hno_core::operator::{self, Activation, OperatorConfig};
use hno_core::pipeline::{self, PipelineConfig};
use hno_core::rng::substream;
use hno_core::rollout::{closed_loop_rollout, RolloutConfig};
use hno_core::Error;

create_exception!(hno, NumericalError, PyRuntimeError, "Solver or training failure.");
create_exception!(
    hno,
    ArtifactError,
    PyRuntimeError,
    "Missing, corrupt or mismatched artifact."
);

fn err(e: Error) -> PyErr {
    match e {
        Error::Config(_) => PyValueError::new_err(e.to_string()),
        Error::Numerical(_) | Error::Diverged { .. } => NumericalError::new_err(e.to_string()),
        _ => ArtifactError::new_err(e.to_string()),
    }
}

fn pair(theta1: f64, theta2: f64) -> PyResult<TypePair> {
    TypePair::new(theta1, theta2).map_err(err)
}

fn case(name: &str) -> PyResult<CaseId> {
    name.parse().map_err(err)
}

/// Constants and model functions of one case study.
#[pyclass(name = "GameSpec", module = "hno", from_py_object)]
#[derive(Clone)]
pub struct PyGameSpec {
    inner: game::GameSpec,
}

#[pymethods]
impl PyGameSpec {
    #[new]
    fn new(case_name: &str) -> PyResult<Self> {
        Ok(PyGameSpec {
            inner: game::GameSpec::new(case(case_name)?),
        })
    }

    #[getter]
    fn case(&self) -> &'static str {
        self.inner.case.as_str()
    }

    #[getter]
    fn horizon(&self) -> f64 {
        self.inner.horizon
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    #[getter]
    fn joint_dim(&self) -> usize {
        self.inner.joint_dim()
    }

    fn collision_threshold(&self, theta1: f64, theta2: f64) -> PyResult<f64> {
        Ok(self.inner.collision_threshold(pair(theta1, theta2)?))
    }

    fn distance(&self, joint_state: Vec<f64>) -> PyResult<f64> {
        self.check_joint(&joint_state)?;
        Ok(self.inner.distance(&joint_state))
    }

    fn penalty(&self, theta1: f64, theta2: f64, joint_state: Vec<f64>) -> PyResult<f64> {
        self.check_joint(&joint_state)?;
        Ok(self.inner.penalty(pair(theta1, theta2)?, &joint_state))
    }

    /// Terminal loss of player `slot` (1 or 2) at its own state.
    fn terminal_loss(&self, state: Vec<f64>, slot: i64) -> PyResult<f64> {
        let slot = Slot::try_from(slot).map_err(err)?;
        if state.len() != self.inner.state_dim() {
            return Err(PyValueError::new_err("state has the wrong length"));
        }
        Ok(self.inner.terminal_loss(&state, slot))
    }

    /// Control maximizing `λᵀf − l` for an own-state costate `λ`.
    fn maximize(&self, costate: Vec<f64>) -> PyResult<Vec<f64>> {
        if costate.len() != self.inner.state_dim() {
            return Err(PyValueError::new_err("costate has the wrong length"));
        }
        Ok(self.inner.maximize(&costate).map_err(err)?.control.to_vec())
    }

    /// A joint initial state drawn uniformly from the ground-truth boxes.
    fn sample_initial_state(&self, seed: u64) -> Vec<f64> {
        self.inner.sample_gt(&mut substream(seed, "python", &[]))
    }

    fn __repr__(&self) -> String {
        format!("GameSpec('{}')", self.inner.case)
    }
}

impl PyGameSpec {
    fn check_joint(&self, x: &[f64]) -> PyResult<()> {
        if x.len() == self.inner.joint_dim() {
            Ok(())
        } else {
            Err(PyValueError::new_err(format!(
                "joint state needs {} entries, got {}",
                self.inner.joint_dim(),
                x.len()
            )))
        }
    }
}

/// Equilibrium trajectory from `x0` at `t0` by the Pontryagin shooting
/// solver. Values are costs-to-go; costates are their gradients.
#[pyfunction]
#[pyo3(signature = (spec, theta1, theta2, x0, t0 = 0.0))]
fn solve_bvp<'py>(
    py: Python<'py>,
    spec: &PyGameSpec,
    theta1: f64,
    theta2: f64,
    x0: Vec<f64>,
    t0: f64,
) -> PyResult<Bound<'py, PyDict>> {
    spec.check_joint(&x0)?;
    let tp = pair(theta1, theta2)?;
    let game = spec.inner.clone();
    let traj = py
        .detach(move || bvp::solve_bvp(&game, tp, &x0, t0, &SolverConfig::default()))
        .map_err(|f| NumericalError::new_err(format!("{} after {} attempts", f.reason, f.attempts)))?;
    let d = PyDict::new(py);
    d.set_item("times", &traj.times)?;
    d.set_item("states", &traj.states)?;
    let controls: Vec<[Vec<f64>; 2]> = traj.controls.iter().map(|c| [c[0].to_vec(), c[1].to_vec()]).collect();
    d.set_item("controls", controls)?;
    d.set_item("values", &traj.cost_to_go)?;
    d.set_item("costates", &traj.costates)?;
    d.set_item("min_distance", traj.min_distance(&spec.inner))?;
    d.set_item("residual", traj.solver_residual)?;
    Ok(d)
}

/// Branch/trunk value operator.
#[pyclass(name = "Operator", module = "hno", from_py_object)]
#[derive(Clone)]
pub struct PyOperator {
    inner: operator::Operator,
}

#[pymethods]
impl PyOperator {
    /// Freshly initialized operator with the default architecture.
    #[staticmethod]
    #[pyo3(signature = (spec, activation = "tanh", seed = 0))]
    fn random(spec: &PyGameSpec, activation: &str, seed: u64) -> PyResult<Self> {
        let act: Activation = activation.parse().map_err(err)?;
        let cfg = OperatorConfig {
            activation: act,
            ..OperatorConfig::default()
        };
        let op = operator::Operator::new(&spec.inner, &cfg, &mut substream(seed, "python-init", &[])).map_err(err)?;
        Ok(PyOperator { inner: op })
    }

    #[staticmethod]
    fn load(path: PathBuf, case_name: &str) -> PyResult<Self> {
        Ok(PyOperator {
            inner: operator::Operator::load(&path, case(case_name)?).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn case(&self) -> &'static str {
        self.inner.spec.case.as_str()
    }

    #[getter]
    fn activation(&self) -> &'static str {
        self.inner.activation.as_str()
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    /// Ego value at an ego-first joint state.
    fn forward(&self, joint_state: Vec<f64>, t: f64, theta1: f64, theta2: f64) -> PyResult<f64> {
        self.inner.forward(&joint_state, t, pair(theta1, theta2)?).map_err(err)
    }

    /// `(value, grad_x, grad_t)`.
    fn value_and_gradient(
        &self,
        joint_state: Vec<f64>,
        t: f64,
        theta1: f64,
        theta2: f64,
    ) -> PyResult<(f64, Vec<f64>, f64)> {
        let vg = self
            .inner
            .value_and_gradient(&joint_state, t, pair(theta1, theta2)?)
            .map_err(err)?;
        Ok((vg.value, vg.grad_x, vg.grad_t))
    }

    fn __repr__(&self) -> String {
        format!(
            "Operator(case='{}', activation='{}', n_params={})",
            self.inner.spec.case,
            self.inner.activation,
            self.inner.n_params()
        )
    }
}

/// Closed-loop rollout with both players driven by the operator.
#[pyfunction]
#[pyo3(signature = (op, theta1, theta2, x0, dt = 0.1))]
fn rollout<'py>(
    py: Python<'py>,
    op: &PyOperator,
    theta1: f64,
    theta2: f64,
    x0: Vec<f64>,
    dt: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let tp = pair(theta1, theta2)?;
    let cfg = RolloutConfig {
        dt,
        ..RolloutConfig::default()
    };
    let o = &op.inner;
    let r = py
        .detach(|| closed_loop_rollout(o, &o.spec, tp, &x0, &cfg))
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("times", &r.times)?;
    d.set_item("states", &r.states)?;
    d.set_item("collided", r.collided)?;
    d.set_item("diverged", r.diverged)?;
    d.set_item("min_distance", r.min_distance)?;
    Ok(d)
}

/// A validated pipeline configuration and its stages.
#[pyclass(name = "Pipeline", module = "hno")]
pub struct PyPipeline {
    cfg: PipelineConfig,
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

#[pymethods]
impl PyPipeline {
    /// `overrides` are `key.path=value` strings, as on the command line.
    #[staticmethod]
    #[pyo3(signature = (text, overrides = Vec::new()))]
    fn from_toml(text: &str, overrides: Vec<String>) -> PyResult<Self> {
        Ok(PyPipeline {
            cfg: PipelineConfig::from_toml(text, &overrides).map_err(err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, overrides = Vec::new()))]
    fn load(path: PathBuf, overrides: Vec<String>) -> PyResult<Self> {
        Ok(PyPipeline {
            cfg: PipelineConfig::load(&path, &overrides).map_err(err)?,
        })
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.cfg.hash()
    }

    #[getter]
    fn output_dir(&self) -> String {
        path_str(&self.cfg.output_dir)
    }

    /// Returns the dataset directory.
    fn datagen(&self, py: Python<'_>) -> PyResult<String> {
        let cfg = &self.cfg;
        py.detach(|| pipeline::cmd_datagen(cfg))
            .map(|p| path_str(&p))
            .map_err(err)
    }

    /// Returns the final checkpoint path.
    #[pyo3(signature = (dataset = None))]
    fn train(&self, py: Python<'_>, dataset: Option<PathBuf>) -> PyResult<String> {
        let cfg = &self.cfg;
        let dataset = dataset.unwrap_or_else(|| cfg.output_dir.join("dataset"));
        py.detach(|| pipeline::cmd_train(cfg, &dataset))
            .map(|p| path_str(&p))
            .map_err(err)
    }

    /// `models` maps report names to checkpoint paths. Returns the
    /// evaluation directory.
    fn eval(&self, py: Python<'_>, models: Vec<(String, PathBuf)>) -> PyResult<String> {
        let cfg = &self.cfg;
        py.detach(|| pipeline::cmd_eval(cfg, &models))
            .map(|p| path_str(&p))
            .map_err(err)
    }

    /// Returns the NTK output directory.
    #[pyo3(signature = (checkpoints, dataset = None))]
    fn ntk(&self, py: Python<'_>, checkpoints: Vec<PathBuf>, dataset: Option<PathBuf>) -> PyResult<String> {
        let cfg = &self.cfg;
        let dataset = dataset.unwrap_or_else(|| cfg.output_dir.join("dataset"));
        py.detach(|| pipeline::cmd_ntk(cfg, &checkpoints, &dataset))
            .map(|p| path_str(&p))
            .map_err(err)
    }
}

/// Heatmap JSON and SVG from a report; returns the written paths.
#[pyfunction]
fn plot(report: PathBuf, out_dir: PathBuf) -> PyResult<Vec<String>> {
    let files = pipeline::cmd_plot(&report, &out_dir).map_err(err)?;
    Ok(files.iter().map(|p| path_str(p)).collect())
}

#[pymodule]
pub fn hno(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGameSpec>()?;
    m.add_class::<PyOperator>()?;
    m.add_class::<PyPipeline>()?;
    m.add_function(wrap_pyfunction!(solve_bvp, m)?)?;
    m.add_function(wrap_pyfunction!(rollout, m)?)?;
    m.add_function(wrap_pyfunction!(plot, m)?)?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add("ArtifactError", m.py().get_type::<ArtifactError>())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
