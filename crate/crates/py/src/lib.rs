//! Python bindings for the levy2b solvers.

use std::str::FromStr;

use levy2b::bsdej::{cfl_max_dt, solve_bsdej as core_solve_bsdej};
use levy2b::harness::{parse_config, run_suite as core_run_suite, RunOptions, Suite};
use levy2b::paths::mc_terminal as core_mc_terminal;
use levy2b::pide::{compare_fields as core_compare_fields, solve_pide as core_solve_pide};
use levy2b::value2::solve_dynamic as core_solve_dynamic;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn py_err(e: levy2b::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Expression in `t` and `x`, e.g. `"x^2 + sin(t)"`.
#[pyclass(name = "Expr", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyExpr {
    inner: levy2b::Expr,
    source: String,
}

#[pymethods]
impl PyExpr {
    #[new]
    fn new(source: &str) -> PyResult<Self> {
        let inner = levy2b::Expr::parse(source).map_err(py_err)?;
        Ok(Self {
            inner,
            source: source.to_string(),
        })
    }

    fn eval(&self, t: f64, x: f64) -> PyResult<f64> {
        self.inner.eval(t, x).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Expr({:?})", self.source)
    }
}

/// Diffusion coefficient `a` and a finite Lévy measure with atoms `marks[k]`, `rates[k]`.
#[pyclass(name = "ControlPoint", frozen, from_py_object)]
#[derive(Clone)]
struct PyControlPoint {
    inner: levy2b::ControlPoint,
}

#[pymethods]
impl PyControlPoint {
    #[new]
    #[pyo3(signature = (a, marks = Vec::new(), rates = Vec::new()))]
    fn new(a: f64, marks: Vec<f64>, rates: Vec<f64>) -> PyResult<Self> {
        if marks.len() != rates.len() {
            return Err(PyValueError::new_err("marks and rates must have the same length"));
        }
        let nu = levy2b::LevyMeasure::new(marks.into_iter().zip(rates).collect()).map_err(py_err)?;
        let inner = levy2b::ControlPoint::new(a, nu).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn a(&self) -> f64 {
        self.inner.a
    }

    #[getter]
    fn atoms(&self) -> Vec<(f64, f64)> {
        self.inner.nu.atoms().to_vec()
    }

    /// `a + Σλe²`.
    fn moment(&self) -> f64 {
        self.inner.moment()
    }

    /// Largest time step the explicit scheme accepts at spacing `dx`.
    fn cfl_max_dt(&self, dx: f64) -> f64 {
        cfl_max_dt(&self.inner, dx)
    }

    fn __repr__(&self) -> String {
        format!("ControlPoint(a={}, atoms={:?})", self.inner.a, self.inner.nu.atoms())
    }
}

#[pyclass(name = "ControlGrid", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyControlGrid {
    inner: levy2b::ControlGrid,
}

#[pymethods]
impl PyControlGrid {
    #[new]
    fn new(points: Vec<PyControlPoint>) -> PyResult<Self> {
        let inner = levy2b::ControlGrid::new(points.into_iter().map(|p| p.inner).collect()).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn points(&self) -> Vec<PyControlPoint> {
        self.inner
            .points()
            .iter()
            .map(|p| PyControlPoint { inner: p.clone() })
            .collect()
    }

    /// Union of all jump marks.
    fn marks(&self) -> Vec<f64> {
        self.inner.marks()
    }
}

/// Driver `κ_y y + κ_z √a z + Σ u(e) c(1∧|e|) λ + h0(t,x)`.
#[pyclass(name = "Generator", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyGenerator {
    inner: levy2b::GeneratorSpec,
}

#[pymethods]
impl PyGenerator {
    #[new]
    #[pyo3(signature = (kappa_y = 0.0, kappa_z = 0.0, jump_c = 0.0, delta = 0.5, h0 = "0"))]
    fn new(kappa_y: f64, kappa_z: f64, jump_c: f64, delta: f64, h0: &str) -> PyResult<Self> {
        Ok(Self {
            inner: levy2b::GeneratorSpec {
                kappa_y,
                kappa_z,
                jump_slope: levy2b::JumpSlope::new(jump_c, delta).map_err(py_err)?,
                h0: levy2b::Expr::parse(h0).map_err(py_err)?,
            },
        })
    }

    fn is_zero(&self) -> bool {
        self.inner.is_zero()
    }
}

#[pyclass(name = "Grid", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
struct PyGrid {
    inner: levy2b::SpaceTimeGrid,
}

#[pymethods]
impl PyGrid {
    #[new]
    fn new(x_min: f64, x_max: f64, nx: usize, t_end: f64, nt: usize) -> PyResult<Self> {
        let inner = levy2b::SpaceTimeGrid::new(x_min, x_max, nx, t_end, nt).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Grid whose time step is `safety` times the smallest CFL bound over `controls`.
    #[staticmethod]
    #[pyo3(signature = (x_min, x_max, nx, t_end, controls, safety = 0.9))]
    fn for_controls(x_min: f64, x_max: f64, nx: usize, t_end: f64, controls: &PyControlGrid, safety: f64) -> PyResult<Self> {
        if nx < 2 {
            return Err(PyValueError::new_err("nx must be at least 2"));
        }
        let dx = (x_max - x_min) / (nx - 1) as f64;
        let max_dt = controls
            .inner
            .points()
            .iter()
            .map(|c| cfl_max_dt(c, dx))
            .fold(f64::INFINITY, f64::min);
        let inner = levy2b::SpaceTimeGrid::with_max_dt(x_min, x_max, nx, t_end, safety * max_dt).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn nx(&self) -> usize {
        self.inner.nx
    }

    #[getter]
    fn nt(&self) -> usize {
        self.inner.nt
    }

    #[getter]
    fn dx(&self) -> f64 {
        self.inner.dx()
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt()
    }

    fn xs(&self) -> Vec<f64> {
        self.inner.xs()
    }

    fn ts(&self) -> Vec<f64> {
        (0..=self.inner.nt).map(|n| self.inner.t(n)).collect()
    }

    fn __repr__(&self) -> String {
        format!("Grid(nx={}, nt={}, dx={}, dt={})", self.inner.nx, self.inner.nt, self.inner.dx(), self.inner.dt())
    }
}

/// Values on every mesh node; `values[n][i]` sits at `(ts[n], xs[i])`.
#[pyclass(name = "Field", frozen)]
struct PyField {
    inner: levy2b::ValueField,
}

#[pymethods]
impl PyField {
    #[getter]
    fn grid(&self) -> PyGrid {
        PyGrid { inner: self.inner.grid }
    }

    #[getter]
    fn values(&self) -> Vec<Vec<f64>> {
        self.inner.data.clone()
    }

    fn at(&self, n: usize, i: usize) -> PyResult<f64> {
        self.inner
            .data
            .get(n)
            .and_then(|row| row.get(i))
            .copied()
            .ok_or_else(|| PyValueError::new_err(format!("node ({n}, {i}) is outside the grid")))
    }

    /// Slice at `t = 0`.
    fn initial(&self) -> Vec<f64> {
        self.inner.data[0].clone()
    }
}

#[pyfunction]
#[pyo3(signature = (controls, generator, terminal, grid, n_picard = 2))]
fn solve_pide(controls: &PyControlGrid, generator: &PyGenerator, terminal: &PyExpr, grid: &PyGrid, n_picard: usize) -> PyResult<PyField> {
    let sol = core_solve_pide(&controls.inner, &generator.inner, &terminal.inner, &grid.inner, n_picard).map_err(py_err)?;
    Ok(PyField { inner: sol.u })
}

/// Probabilistic value: pointwise sup over controls at every backward step.
#[pyfunction]
#[pyo3(signature = (controls, generator, terminal, grid, n_picard = 2))]
fn solve_dynamic(controls: &PyControlGrid, generator: &PyGenerator, terminal: &PyExpr, grid: &PyGrid, n_picard: usize) -> PyResult<PyField> {
    let sol = core_solve_dynamic(&controls.inner, &generator.inner, &terminal.inner, &grid.inner, n_picard).map_err(py_err)?;
    Ok(PyField { inner: sol.u })
}

/// Backward solution `y` for one fixed control.
#[pyfunction]
#[pyo3(signature = (control, generator, terminal, grid, n_picard = 2))]
fn solve_bsdej(control: &PyControlPoint, generator: &PyGenerator, terminal: &PyExpr, grid: &PyGrid, n_picard: usize) -> PyResult<PyField> {
    let sol = core_solve_bsdej(&control.inner, &generator.inner, &terminal.inner, &grid.inner, n_picard).map_err(py_err)?;
    Ok(PyField { inner: sol.y })
}

/// Monte Carlo `(mean, std_error)` of `g(X_T)` started from `x0` at `t0`.
#[pyfunction]
#[pyo3(signature = (control, g, x0, t0, t_end, dt, n_paths, seed = 1))]
#[allow(clippy::too_many_arguments)]
fn mc_terminal(control: &PyControlPoint, g: &PyExpr, x0: f64, t0: f64, t_end: f64, dt: f64, n_paths: usize, seed: u64) -> PyResult<(f64, f64)> {
    let est = core_mc_terminal(&control.inner, &g.inner, x0, t0, t_end, dt, n_paths, seed).map_err(py_err)?;
    Ok((est.mean, est.std_error))
}

/// `(sup, l2)` difference over `region` on all time slices.
#[pyfunction]
fn compare_fields(u1: &PyField, u2: &PyField, region: (f64, f64)) -> PyResult<(f64, f64)> {
    let d = core_compare_fields(&u1.inner, &u2.inner, region).map_err(py_err)?;
    Ok((d.sup_diff, d.l2_diff))
}

/// Runs a suite on configuration text and returns the JSON report.
#[pyfunction]
#[pyo3(signature = (config_text, suite = "all", seed = None))]
fn run_suite(config_text: &str, suite: &str, seed: Option<u64>) -> PyResult<String> {
    let cfg = parse_config(config_text).map_err(py_err)?;
    let suite = Suite::from_str(suite).map_err(PyValueError::new_err)?;
    let opts = RunOptions { seed, csv_dir: None };
    core_run_suite(&cfg, suite, &opts).to_json().map_err(py_err)
}

#[pymodule]
fn levy2b_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyExpr>()?;
    m.add_class::<PyControlPoint>()?;
    m.add_class::<PyControlGrid>()?;
    m.add_class::<PyGenerator>()?;
    m.add_class::<PyGrid>()?;
    m.add_class::<PyField>()?;
    m.add_function(wrap_pyfunction!(solve_pide, m)?)?;
    m.add_function(wrap_pyfunction!(solve_dynamic, m)?)?;
    m.add_function(wrap_pyfunction!(solve_bsdej, m)?)?;
    m.add_function(wrap_pyfunction!(mc_terminal, m)?)?;
    m.add_function(wrap_pyfunction!(compare_fields, m)?)?;
    m.add_function(wrap_pyfunction!(run_suite, m)?)?;
    Ok(())
}
