//! Analytic route: explicit finite differences for
//! `-∂_t u - ĥ(t, x, u, Du, u(·+e) - u, D²u, u(t, x + ·)) = 0`, `u(T) = g`,
//! plus field comparison and a viscosity sub/super-solution audit.

use rayon::prelude::*;
use serde::Serialize;

use crate::bsdej::{build_kernel_indexed, cfl_max_dt, sample_terminal};
use crate::controls::{eval_generator, hamiltonian_hat, ControlGrid, GeneratorSpec, HamiltonianInput, JumpValues};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::grid::{curvature, gradient, interp, SpaceTimeGrid, ValueField};

#[derive(Debug, Clone)]
pub struct PideSolution {
    pub u: ValueField,
    /// `min_c cfl_max_dt(c) / Δt`; at least 1 whenever the solve succeeded.
    pub cfl_margin: f64,
    /// Sup over the central half of the grid of the change caused by
    /// widening the domain by a quarter on each side.
    pub boundary_influence: Option<f64>,
}

/// `u_values(e) = v(x_i + e) - v(x_i)` for every mark of the control grid.
fn jump_increments(grid: &SpaceTimeGrid, slice: &[f64], i: usize, marks: &[f64]) -> JumpValues {
    let xi = grid.x(i);
    JumpValues::from_fn(marks, |e| interp(grid, slice, xi + e) - slice[i])
}

/// One explicit step `u_i = v_i + Δt ĥ(...)` from the next slice `v`.
///
/// `ĥ` is re-evaluated `n_picard` times with `y` set to the latest value of
/// `u_i`, the first pass using `v_i`. Boundary nodes only receive the driver,
/// with zero gradient and jump arguments.
fn pide_step(
    grid_ctrl: &ControlGrid,
    g_spec: &GeneratorSpec,
    grid: &SpaceTimeGrid,
    marks: &[f64],
    next: &[f64],
    t: f64,
    n_picard: usize,
) -> Result<Vec<f64>> {
    let dt = grid.dt();
    let last = grid.nx - 1;
    let passes = if g_spec.is_zero() { 1 } else { n_picard.max(1) };
    (0..grid.nx)
        .map(|i| {
            let x = grid.x(i);
            let boundary = i == 0 || i == last;
            let (z, u_values) = if boundary {
                (0.0, JumpValues::from_fn(marks, |_| 0.0))
            } else {
                (gradient(grid, next, i), jump_increments(grid, next, i, marks))
            };
            let mut y = next[i];
            for _ in 0..passes {
                let h = if boundary {
                    if g_spec.is_zero() {
                        0.0
                    } else {
                        let mut best = f64::NEG_INFINITY;
                        for c in grid_ctrl.points() {
                            best = best.max(eval_generator(g_spec, t, x, y, z, &u_values, c)?);
                        }
                        best
                    }
                } else {
                    let v_shift = |e: f64| if e == 0.0 { next[i] } else { interp(grid, next, x + e) };
                    let input = HamiltonianInput {
                        t,
                        x,
                        y,
                        z,
                        u_values: &u_values,
                        d2: curvature(grid, next, i),
                        v_shift: &v_shift,
                    };
                    hamiltonian_hat(g_spec, grid_ctrl, &input)?.0
                };
                y = next[i] + dt * h;
            }
            Ok(y)
        })
        .collect()
}

fn sweep(
    grid_ctrl: &ControlGrid,
    g_spec: &GeneratorSpec,
    terminal_slice: Vec<f64>,
    grid: &SpaceTimeGrid,
    n_picard: usize,
) -> Result<ValueField> {
    for (k, c) in grid_ctrl.points().iter().enumerate() {
        build_kernel_indexed(c, grid, k)?;
    }
    let marks = grid_ctrl.marks();
    let mut u = ValueField::zeros(*grid);
    u.data[grid.nt] = terminal_slice;
    for n in (0..grid.nt).rev() {
        u.data[n] = pide_step(grid_ctrl, g_spec, grid, &marks, &u.data[n + 1], grid.t(n), n_picard)?;
    }
    Ok(u)
}

pub fn solve_pide(
    grid_ctrl: &ControlGrid,
    g_spec: &GeneratorSpec,
    terminal: &Expr,
    grid: &SpaceTimeGrid,
    n_picard: usize,
) -> Result<PideSolution> {
    let u = sweep(grid_ctrl, g_spec, sample_terminal(terminal, grid)?, grid, n_picard)?;
    let dx = grid.dx();
    let cfl_margin = grid_ctrl
        .points()
        .iter()
        .map(|c| cfl_max_dt(c, dx))
        .fold(f64::INFINITY, f64::min)
        / grid.dt();
    let boundary_influence = boundary_influence(grid_ctrl, g_spec, terminal, grid, &u, n_picard).ok();
    Ok(PideSolution {
        u,
        cfl_margin,
        boundary_influence,
    })
}

/// Terminal slice given directly; no boundary diagnostic.
pub fn solve_pide_from(
    grid_ctrl: &ControlGrid,
    g_spec: &GeneratorSpec,
    terminal_slice: Vec<f64>,
    grid: &SpaceTimeGrid,
    n_picard: usize,
) -> Result<ValueField> {
    if terminal_slice.len() != grid.nx {
        return Err(Error::GridMismatch("terminal slice length differs from nx".into()));
    }
    sweep(grid_ctrl, g_spec, terminal_slice, grid, n_picard)
}

/// Re-solves on a grid widened by `nx/4` nodes per side and returns the sup
/// difference at `t = 0` over the central half of the original grid.
pub fn boundary_influence(
    grid_ctrl: &ControlGrid,
    g_spec: &GeneratorSpec,
    terminal: &Expr,
    grid: &SpaceTimeGrid,
    u: &ValueField,
    n_picard: usize,
) -> Result<f64> {
    let extra = grid.nx / 4;
    let wide = grid.widened(extra);
    let w = sweep(grid_ctrl, g_spec, sample_terminal(terminal, &wide)?, &wide, n_picard)?;
    let lo = grid.x_min + 0.25 * (grid.x_max - grid.x_min);
    let hi = grid.x_max - 0.25 * (grid.x_max - grid.x_min);
    Ok(grid
        .region_nodes(lo, hi)
        .map(|i| (u.at(0, i) - w.at(0, i + extra)).abs())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FieldDiff {
    pub sup_diff: f64,
    /// `sqrt(Σ d² Δx Δt)` over the region and all slices.
    pub l2_diff: f64,
    /// `(t, x)` of the first node attaining `sup_diff`; `None` if the fields agree.
    pub location: Option<(f64, f64)>,
}

/// Differences of two fields on the interior nodes inside `region`, over all slices.
pub fn compare_fields(u1: &ValueField, u2: &ValueField, region: (f64, f64)) -> Result<FieldDiff> {
    let grid = u1.grid;
    if !grid.same_mesh(&u2.grid) {
        return Err(Error::GridMismatch(format!("{:?} vs {:?}", grid, u2.grid)));
    }
    let nodes = grid.region_nodes(region.0, region.1);
    let mut sup_diff = 0.0;
    let mut sum_sq = 0.0;
    let mut location = None;
    for n in 0..=grid.nt {
        for i in nodes.clone() {
            let d = (u1.at(n, i) - u2.at(n, i)).abs();
            sum_sq += d * d;
            if d > sup_diff {
                sup_diff = d;
                location = Some((grid.t(n), grid.x(i)));
            }
        }
    }
    Ok(FieldDiff {
        sup_diff,
        l2_diff: (sum_sq * grid.dx() * grid.dt()).sqrt(),
        location,
    })
}

/// Test functions `φ(t, x) = p (x - c)² + q (t - t_n) + offset` touching `u` at `(t_n, x_i)`.
#[derive(Debug, Clone, Serialize)]
pub struct TestFunctionFamily {
    pub curvatures: Vec<f64>,
    pub slopes: Vec<f64>,
    /// Centres are every `center_stride`-th interior node inside `region`.
    pub center_stride: usize,
    /// Audited nodes: interior nodes inside `region`.
    pub region: (f64, f64),
    /// Every `slice_stride`-th interior slice is audited.
    pub slice_stride: usize,
    /// Half-width in nodes of the spatial window for the local extremum.
    pub window: usize,
}

impl Default for TestFunctionFamily {
    fn default() -> Self {
        Self {
            curvatures: vec![-2.0, -0.5, 0.5, 2.0],
            slopes: vec![-1.0, 1.0],
            center_stride: 8,
            region: (-2.0, 2.0),
            slice_stride: 1,
            window: 3,
        }
    }
}

impl TestFunctionFamily {
    /// Slice stride giving roughly `target` audited slices.
    pub fn with_slice_budget(mut self, grid: &SpaceTimeGrid, target: usize) -> Self {
        self.slice_stride = (grid.nt / target.max(1)).max(1);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Super,
    Sub,
}

#[derive(Debug, Clone, Serialize)]
pub struct ViolationRecord {
    pub kind: ViolationKind,
    pub t: f64,
    pub x: f64,
    pub node: (usize, usize),
    pub center: f64,
    pub p: f64,
    pub q: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ViscosityReport {
    pub tol: f64,
    /// Number of `(φ, node)` pairs at which `u - φ` had a strict local extremum.
    pub touches_checked: usize,
    pub super_violations: usize,
    pub sub_violations: usize,
    /// Smallest residual found at a local minimum.
    pub worst_super: Option<f64>,
    /// Largest residual found at a local maximum.
    pub worst_sub: Option<f64>,
    /// At most `MAX_RECORDS` violations, in (slice, node, φ) order.
    pub violations: Vec<ViolationRecord>,
}

pub const MAX_RECORDS: usize = 1000;

/// `1e-3 + 5 (Δt + Δx)`.
pub fn default_audit_tol(grid: &SpaceTimeGrid) -> f64 {
    1e-3 + 5.0 * (grid.dt() + grid.dx())
}

#[derive(Clone, Copy, PartialEq)]
enum Extremum {
    Min,
    Max,
}

/// Strict extremum of `d` over the window, centre `(1, r)`.
fn strict_extremum(d: &[Vec<f64>], r: usize) -> Option<Extremum> {
    let centre = d[1][r];
    let mut is_min = true;
    let mut is_max = true;
    for (s, row) in d.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            if s == 1 && k == r {
                continue;
            }
            is_min &= v > centre;
            is_max &= v < centre;
        }
    }
    if is_min {
        Some(Extremum::Min)
    } else if is_max {
        Some(Extremum::Max)
    } else {
        None
    }
}

/// Checks the sub/super-solution inequalities with quadratic test functions.
///
/// At a strict local extremum of `u - φ` over three slices and `2·window + 1`
/// nodes, `φ` is shifted to touch `u` and the residual
/// `r = -∂_tφ - ĥ(t, x, u, Dφ, ·, D²φ, w)` is evaluated, where `w(e)` is the
/// shifted `φ` inside the window and `u` outside it.
/// A minimum with `r < -tol` is a super-solution violation, a maximum with
/// `r > tol` a sub-solution violation.
pub fn viscosity_audit(
    u: &ValueField,
    fam: &TestFunctionFamily,
    grid_ctrl: &ControlGrid,
    g_spec: &GeneratorSpec,
    tol: f64,
) -> Result<ViscosityReport> {
    let grid = u.grid;
    let r = fam.window.max(1);
    let dx = grid.dx();
    let marks = grid_ctrl.marks();
    let nodes: Vec<usize> = grid
        .region_nodes(fam.region.0, fam.region.1)
        .filter(|&i| i >= r && i + r < grid.nx)
        .collect();
    let centers: Vec<f64> = grid
        .region_nodes(fam.region.0, fam.region.1)
        .step_by(fam.center_stride.max(1))
        .map(|i| grid.x(i))
        .collect();
    let slices: Vec<usize> = (1..grid.nt).step_by(fam.slice_stride.max(1)).collect();

    struct Partial {
        touches: usize,
        records: Vec<ViolationRecord>,
        supers: usize,
        subs: usize,
        worst_super: Option<f64>,
        worst_sub: Option<f64>,
    }

    let per_slice: Vec<Result<Partial>> = slices
        .par_iter()
        .map(|&n| {
            let t = grid.t(n);
            let mut out = Partial {
                touches: 0,
                records: Vec::new(),
                supers: 0,
                subs: 0,
                worst_super: None,
                worst_sub: None,
            };
            let slice = u.slice(n);
            let mut window = vec![vec![0.0; 2 * r + 1]; 3];
            for &i in &nodes {
                let x = grid.x(i);
                for &c in &centers {
                    for &p in &fam.curvatures {
                        for &q in &fam.slopes {
                            let phi = |tt: f64, xx: f64| p * (xx - c) * (xx - c) + q * (tt - t);
                            for (s, row) in window.iter_mut().enumerate() {
                                let m = n + s - 1;
                                for (k, cell) in row.iter_mut().enumerate() {
                                    let j = i + k - r;
                                    *cell = u.at(m, j) - phi(grid.t(m), grid.x(j));
                                }
                            }
                            let Some(kind) = strict_extremum(&window, r) else {
                                continue;
                            };
                            out.touches += 1;
                            let offset = window[1][r];
                            let reach = r as f64 * dx * (1.0 + 1e-9);
                            let w = |e: f64| {
                                if e.abs() <= reach {
                                    phi(t, x + e) + offset
                                } else {
                                    interp(&grid, slice, x + e)
                                }
                            };
                            let base = w(0.0);
                            let u_values = JumpValues::from_fn(&marks, |e| w(e) - base);
                            let input = HamiltonianInput {
                                t,
                                x,
                                y: slice[i],
                                z: 2.0 * p * (x - c),
                                u_values: &u_values,
                                d2: 2.0 * p,
                                v_shift: &w,
                            };
                            let residual = -q - hamiltonian_hat(g_spec, grid_ctrl, &input)?.0;
                            let violated = match kind {
                                Extremum::Min => {
                                    out.worst_super = Some(out.worst_super.map_or(residual, |v: f64| v.min(residual)));
                                    residual < -tol
                                }
                                Extremum::Max => {
                                    out.worst_sub = Some(out.worst_sub.map_or(residual, |v: f64| v.max(residual)));
                                    residual > tol
                                }
                            };
                            if violated {
                                let kind = match kind {
                                    Extremum::Min => {
                                        out.supers += 1;
                                        ViolationKind::Super
                                    }
                                    Extremum::Max => {
                                        out.subs += 1;
                                        ViolationKind::Sub
                                    }
                                };
                                if out.records.len() < MAX_RECORDS {
                                    out.records.push(ViolationRecord {
                                        kind,
                                        t,
                                        x,
                                        node: (n, i),
                                        center: c,
                                        p,
                                        q,
                                        residual,
                                    });
                                }
                            }
                        }
                    }
                }
            }
            Ok(out)
        })
        .collect();

    let mut report = ViscosityReport {
        tol,
        touches_checked: 0,
        super_violations: 0,
        sub_violations: 0,
        worst_super: None,
        worst_sub: None,
        violations: Vec::new(),
    };
    for part in per_slice {
        let part = part?;
        report.touches_checked += part.touches;
        report.super_violations += part.supers;
        report.sub_violations += part.subs;
        report.worst_super = match (report.worst_super, part.worst_super) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        report.worst_sub = match (report.worst_sub, part.worst_sub) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
        for rec in part.records {
            if report.violations.len() < MAX_RECORDS {
                report.violations.push(rec);
            }
        }
    }
    Ok(report)
}
