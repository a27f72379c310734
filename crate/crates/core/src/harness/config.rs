//! Problem configuration: flat `section.key = value` lines with `#` comments.
//!
//! ```text
//! grid.x_min = -8.0
//! grid.nt = "auto"
//! controls.0.a = 1.0
//! controls.0.marks = [1.0]
//! controls.0.rates = [0.5]
//! terminal.g = "x^2"
//! ```
//!
//! The syntax is a subset of TOML and is read with the `toml` crate. Every
//! problem found is reported with its key, not just the first.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Serialize;
use toml::Value;

use crate::bsdej::{cfl_max_dt, build_kernel_indexed, DEFAULT_PICARD};
use crate::controls::{validate_control_grid, ControlBounds, ControlGrid, ControlPoint, GeneratorSpec, JumpSlope, LevyMeasure};
use crate::error::{ConfigIssue, Error, Result};
use crate::expr::Expr;
use crate::grid::SpaceTimeGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeSteps {
    Auto,
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSection {
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub t_end: f64,
    pub nt: TimeSteps,
    pub safety: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            x_min: -8.0,
            x_max: 8.0,
            nx: 321,
            t_end: 1.0,
            nt: TimeSteps::Auto,
            safety: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSection {
    pub seed: u64,
    pub n_paths: usize,
    /// Simulation mesh for terminal-value estimates.
    pub mc_dt: f64,
    pub region: (f64, f64),
    pub probes: Vec<f64>,
    pub n_picard: usize,
    /// Split time of the dynamic programming check; must lie on the time
    /// mesh. The mid-horizon mesh time when absent.
    pub split_time: Option<f64>,
    pub tol_compare: f64,
    /// Closed-form `u(0, x0)`, checked by the solve suites when present.
    pub reference: Option<f64>,
    pub tol_reference: f64,
    pub x0: f64,
    /// Brownian weight of the Doléans-Dade exponential.
    pub eta: f64,
    /// Jump slope of the Doléans-Dade exponential, `γ(e) = c (1 ∧ |e|)`.
    pub doleans_c: f64,
    /// Audit tolerance; `1e-3 + 5 (Δt + Δx)` when absent.
    pub tol_audit: Option<f64>,
    pub audit_slices: usize,
    /// When present, `dpp-check` also requires `|static - dynamic| ≤` this on the region.
    pub tol_static_gap: Option<f64>,
    /// Rows per control in the `simulate` CSV export.
    pub csv_paths: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 1,
            n_paths: 100_000,
            mc_dt: 0.25,
            region: (-2.0, 2.0),
            probes: vec![-1.0, 0.0, 1.0],
            n_picard: DEFAULT_PICARD,
            split_time: None,
            tol_compare: 2e-2,
            reference: None,
            tol_reference: 2e-2,
            x0: 0.0,
            eta: 0.5,
            doleans_c: 0.5,
            tol_audit: None,
            audit_slices: 40,
            tol_static_gap: None,
            csv_paths: 1000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProblemConfig {
    /// Raw file contents, kept for the report digest.
    pub source: String,
    pub grid_section: GridSection,
    pub grid: SpaceTimeGrid,
    pub controls: ControlGrid,
    pub bounds: ControlBounds,
    pub generator: GeneratorSpec,
    pub terminal: Expr,
    pub run: RunSection,
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ProblemConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Config(vec![ConfigIssue {
            location: path.display().to_string(),
            message: e.to_string(),
        }])
    })?;
    parse_config(&text)
}

fn issue(location: impl Into<String>, message: impl Into<String>) -> ConfigIssue {
    ConfigIssue {
        location: location.into(),
        message: message.into(),
    }
}

fn error_message(e: Error) -> String {
    match e {
        Error::Spec(m) | Error::Domain(m) => m,
        other => other.to_string(),
    }
}

/// Flattened key/value view that remembers which keys were read.
struct Fields {
    values: BTreeMap<String, Value>,
    used: BTreeSet<String>,
    issues: Vec<ConfigIssue>,
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Float(f) => Some(*f),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

impl Fields {
    fn raw(&mut self, key: &str) -> Option<Value> {
        let v = self.values.get(key).cloned();
        if v.is_some() {
            self.used.insert(key.to_string());
        }
        v
    }

    fn type_error(&mut self, key: &str, expected: &str, got: &Value) {
        self.issues.push(issue(key, format!("expected {expected}, got {}", got.type_str())));
    }

    fn f64_opt(&mut self, key: &str) -> Option<f64> {
        let v = self.raw(key)?;
        let f = as_f64(&v);
        if f.is_none() {
            self.type_error(key, "a number", &v);
        }
        f
    }

    fn f64_or(&mut self, key: &str, default: f64) -> f64 {
        self.f64_opt(key).unwrap_or(default)
    }

    fn f64_required(&mut self, key: &str) -> Option<f64> {
        if !self.values.contains_key(key) {
            self.issues.push(issue(key, "missing required key"));
            return None;
        }
        self.f64_opt(key)
    }

    fn int_or(&mut self, key: &str, default: u64) -> u64 {
        match self.raw(key) {
            None => default,
            Some(Value::Integer(i)) if i >= 0 => i as u64,
            Some(v @ Value::Integer(_)) => {
                self.issues.push(issue(key, format!("must be nonnegative, got {v}")));
                default
            }
            Some(v) => {
                self.type_error(key, "an integer", &v);
                default
            }
        }
    }

    fn str_opt(&mut self, key: &str) -> Option<String> {
        match self.raw(key)? {
            Value::String(s) => Some(s),
            v => {
                self.type_error(key, "a string", &v);
                None
            }
        }
    }

    fn list_opt(&mut self, key: &str) -> Option<Vec<f64>> {
        match self.raw(key)? {
            Value::Array(items) => {
                let parsed: Option<Vec<f64>> = items.iter().map(as_f64).collect();
                if parsed.is_none() {
                    self.issues.push(issue(key, "expected a list of numbers"));
                }
                parsed
            }
            v => {
                self.type_error(key, "a list of numbers", &v);
                None
            }
        }
    }

    fn expr(&mut self, key: &str, default: Option<&str>) -> Option<Expr> {
        let src = match (self.str_opt(key), default) {
            (Some(s), _) => s,
            (None, Some(d)) if !self.values.contains_key(key) => d.to_string(),
            (None, None) if !self.values.contains_key(key) => {
                self.issues.push(issue(key, "missing required key"));
                return None;
            }
            (None, _) => return None,
        };
        match Expr::parse(&src) {
            Ok(e) => Some(e),
            Err(e) => {
                self.issues.push(issue(key, e.to_string()));
                None
            }
        }
    }
}

fn syntax_issue(text: &str, e: &toml::de::Error) -> ConfigIssue {
    let location = match e.span() {
        Some(span) => format!("line {}", text[..span.start.min(text.len())].matches('\n').count() + 1),
        None => "config".to_string(),
    };
    issue(location, e.message().to_string())
}

pub fn parse_config(text: &str) -> Result<ProblemConfig> {
    let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(vec![syntax_issue(text, &e)]))?;
    let mut values = BTreeMap::new();
    flatten("", &table, &mut values);
    let mut f = Fields {
        values,
        used: BTreeSet::new(),
        issues: Vec::new(),
    };

    let defaults = GridSection::default();
    let mut grid_section = GridSection {
        x_min: f.f64_or("grid.x_min", defaults.x_min),
        x_max: f.f64_or("grid.x_max", defaults.x_max),
        nx: f.int_or("grid.nx", defaults.nx as u64) as usize,
        t_end: f.f64_or("grid.T", defaults.t_end),
        nt: TimeSteps::Auto,
        safety: f.f64_or("grid.safety", defaults.safety),
    };
    match f.raw("grid.nt") {
        None => {}
        Some(Value::String(s)) if s == "auto" => {}
        Some(Value::Integer(n)) if n >= 1 => grid_section.nt = TimeSteps::Fixed(n as usize),
        Some(v) => f.issues.push(issue("grid.nt", format!("expected \"auto\" or a positive integer, got {v}"))),
    }
    if grid_section.nx < 3 {
        f.issues.push(issue("grid.nx", format!("nx ≥ 3 required, got {}", grid_section.nx)));
    }
    if !(grid_section.x_min < grid_section.x_max) {
        f.issues.push(issue("grid.x_max", "must exceed grid.x_min"));
    }
    if !(grid_section.t_end > 0.0) {
        f.issues.push(issue("grid.T", "must be positive"));
    }
    if !(grid_section.safety > 0.0 && grid_section.safety <= 1.0) {
        f.issues.push(issue("grid.safety", "must lie in (0, 1]"));
    }

    let bounds = ControlBounds {
        a_min: f.f64_or("controls.a_min", 0.0),
        a_max: f.f64_or("controls.a_max", f64::INFINITY),
        moment_cap: f.f64_or("controls.moment_cap", f64::INFINITY),
    };
    let mut points = Vec::new();
    let mut controls_ok = true;
    for k in 0.. {
        let prefix = format!("controls.{k}");
        if !f.values.keys().any(|key| key.starts_with(&format!("{prefix}."))) {
            break;
        }
        let a = f.f64_required(&format!("{prefix}.a"));
        let marks = f.list_opt(&format!("{prefix}.marks")).unwrap_or_default();
        let rates = f.list_opt(&format!("{prefix}.rates")).unwrap_or_default();
        if marks.len() != rates.len() {
            f.issues.push(issue(
                format!("{prefix}.rates"),
                format!("{} rates for {} marks", rates.len(), marks.len()),
            ));
            controls_ok = false;
            continue;
        }
        let Some(a) = a else {
            controls_ok = false;
            continue;
        };
        match LevyMeasure::new(marks.into_iter().zip(rates).collect()).and_then(|nu| ControlPoint::new(a, nu)) {
            Ok(c) => points.push(c),
            Err(e) => {
                f.issues.push(issue(prefix, error_message(e)));
                controls_ok = false;
            }
        }
    }
    let controls = if points.is_empty() {
        if controls_ok {
            f.issues.push(issue("controls.0.a", "missing required key (at least one control)"));
        }
        None
    } else if controls_ok {
        let grid = ControlGrid::new(points).ok();
        if let Some(g) = &grid {
            let report = validate_control_grid(g, bounds);
            for check in report.checks.iter().filter(|c| !c.pass) {
                for v in &check.violations {
                    f.issues.push(issue(format!("controls.{}", check.index), v.clone()));
                }
            }
        }
        grid
    } else {
        None
    };

    let kappa_y = f.f64_or("generator.kappa_y", 0.0);
    let kappa_z = f.f64_or("generator.kappa_z", 0.0);
    let jump_c = f.f64_or("generator.jump_c", 0.0);
    let delta = f.f64_or("generator.delta", 0.5);
    let jump_slope = match JumpSlope::new(jump_c, delta) {
        Ok(s) => Some(s),
        Err(e) => {
            f.issues.push(issue("generator.jump_c", error_message(e)));
            None
        }
    };
    let h0 = f.expr("generator.h0", Some("0"));
    let terminal = f.expr("terminal.g", None);

    let d = RunSection::default();
    let region = match f.list_opt("run.region") {
        None => d.region,
        Some(r) if r.len() == 2 && r[0] < r[1] => (r[0], r[1]),
        Some(_) => {
            f.issues.push(issue("run.region", "expected [lo, hi] with lo < hi"));
            d.region
        }
    };
    let run = RunSection {
        seed: f.int_or("run.seed", d.seed),
        n_paths: f.int_or("run.n_paths", d.n_paths as u64) as usize,
        mc_dt: f.f64_or("run.mc_dt", d.mc_dt),
        region,
        probes: f.list_opt("run.probes").unwrap_or(d.probes),
        n_picard: f.int_or("run.n_picard", d.n_picard as u64) as usize,
        split_time: f.f64_opt("run.split_time"),
        tol_compare: f.f64_or("run.tol_compare", d.tol_compare),
        reference: f.f64_opt("run.reference"),
        tol_reference: f.f64_or("run.tol_reference", d.tol_reference),
        x0: f.f64_or("run.x0", d.x0),
        eta: f.f64_or("run.eta", d.eta),
        doleans_c: f.f64_or("run.doleans_c", d.doleans_c),
        tol_audit: f.f64_opt("run.tol_audit"),
        audit_slices: f.int_or("run.audit_slices", d.audit_slices as u64) as usize,
        tol_static_gap: f.f64_opt("run.tol_static_gap"),
        csv_paths: f.int_or("run.csv_paths", d.csv_paths as u64) as usize,
    };
    if run.n_paths < 2 {
        f.issues.push(issue("run.n_paths", "at least 2 paths required"));
    }
    if !(run.mc_dt > 0.0) {
        f.issues.push(issue("run.mc_dt", "must be positive"));
    }
    if run.n_picard < 1 {
        f.issues.push(issue("run.n_picard", "at least one pass required"));
    }
    if let Err(e) = JumpSlope::new(run.doleans_c, delta) {
        f.issues.push(issue("run.doleans_c", error_message(e)));
    }

    let unknown: Vec<String> = f.values.keys().filter(|k| !f.used.contains(*k)).cloned().collect();
    for k in unknown {
        f.issues.push(issue(k, "unknown key"));
    }

    let grid = match &controls {
        Some(ctrl) if f.issues.is_empty() => match build_grid(&grid_section, ctrl) {
            Ok(g) => Some(g),
            Err(e) => {
                f.issues.push(issue("grid.nt", error_message(e)));
                None
            }
        },
        _ => None,
    };

    if !f.issues.is_empty() {
        return Err(Error::Config(f.issues));
    }
    let (Some(grid), Some(controls), Some(jump_slope), Some(h0), Some(terminal)) = (grid, controls, jump_slope, h0, terminal)
    else {
        unreachable!("every missing piece records an issue");
    };
    Ok(ProblemConfig {
        source: text.to_string(),
        grid_section,
        grid,
        controls,
        bounds,
        generator: GeneratorSpec {
            kappa_y,
            kappa_z,
            jump_slope,
            h0,
        },
        terminal,
        run,
    })
}

/// Resolves `nt = "auto"` as `safety × min_c cfl_max_dt(c)` and checks CFL for a fixed `nt`.
pub fn build_grid(section: &GridSection, controls: &ControlGrid) -> Result<SpaceTimeGrid> {
    let probe = SpaceTimeGrid::new(section.x_min, section.x_max, section.nx, section.t_end, 1)?;
    let grid = match section.nt {
        TimeSteps::Fixed(nt) => SpaceTimeGrid::new(section.x_min, section.x_max, section.nx, section.t_end, nt)?,
        TimeSteps::Auto => {
            let dx = probe.dx();
            let max_dt = controls
                .points()
                .iter()
                .map(|c| cfl_max_dt(c, dx))
                .fold(f64::INFINITY, f64::min);
            SpaceTimeGrid::with_max_dt(section.x_min, section.x_max, section.nx, section.t_end, section.safety * max_dt)?
        }
    };
    for (k, c) in controls.points().iter().enumerate() {
        build_kernel_indexed(c, &grid, k)?;
    }
    Ok(grid)
}
