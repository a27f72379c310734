//! Second-order layer: the value field as a supremum of BSDEJ values over the
//! control grid, the nondecreasing `K` increments, and the dynamic
//! programming checks.
//!
//! Two suprema are computed. The dynamic one pastes controls step by step
//! (per-node max of the one-step maps), the static one holds a single
//! control over the whole horizon and maximises at `t = 0`. The static value
//! never exceeds the dynamic one.

use serde::Serialize;

use crate::bsdej::{backward_step, build_kernel_indexed, sample_terminal, solve_bsdej_from, FieldSolution, TransitionKernel};
use crate::controls::{ControlGrid, GeneratorSpec};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::grid::{SpaceTimeGrid, ValueField};

#[derive(Debug, Clone)]
pub struct DynamicSolution {
    pub u: ValueField,
    /// `argmax[n][i]`: the control selected when producing `u[n][i]`.
    pub argmax: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct StaticSolution {
    pub u0: Vec<f64>,
    pub argmax0: Vec<usize>,
    pub per_control: Vec<FieldSolution>,
}

pub(crate) fn kernels(grid_ctrl: &ControlGrid, grid: &SpaceTimeGrid) -> Result<Vec<TransitionKernel>> {
    grid_ctrl
        .points()
        .iter()
        .enumerate()
        .map(|(k, c)| build_kernel_indexed(c, grid, k))
        .collect()
}

/// Per-node max over controls of one backward step each; lowest index wins ties.
fn dynamic_step(
    grid_ctrl: &ControlGrid,
    kernels: &[TransitionKernel],
    g_spec: &GeneratorSpec,
    next: &[f64],
    t: f64,
    n_picard: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut best: Option<(Vec<f64>, Vec<usize>)> = None;
    for (k, (c, kernel)) in grid_ctrl.points().iter().zip(kernels).enumerate() {
        let step = backward_step(kernel, g_spec, c, next, t, n_picard)?;
        match &mut best {
            None => best = Some((step.y, vec![k; next.len()])),
            Some((values, idx)) => {
                for (i, v) in step.y.into_iter().enumerate() {
                    if v > values[i] {
                        values[i] = v;
                        idx[i] = k;
                    }
                }
            }
        }
    }
    Ok(best.expect("non-empty control grid"))
}

/// Sweeps backward from slice `n_end` (given) down to `n_start`.
fn dynamic_sweep(
    grid_ctrl: &ControlGrid,
    kernels: &[TransitionKernel],
    g_spec: &GeneratorSpec,
    grid: &SpaceTimeGrid,
    field: &mut ValueField,
    argmax: &mut [Vec<usize>],
    n_start: usize,
    n_end: usize,
    n_picard: usize,
) -> Result<()> {
    for n in (n_start..n_end).rev() {
        let (values, idx) = dynamic_step(grid_ctrl, kernels, g_spec, &field.data[n + 1], grid.t(n), n_picard)?;
        field.data[n] = values;
        argmax[n] = idx;
    }
    Ok(())
}

pub fn solve_dynamic(
    grid_ctrl: &ControlGrid,
    g_spec: &GeneratorSpec,
    terminal: &Expr,
    grid: &SpaceTimeGrid,
    n_picard: usize,
) -> Result<DynamicSolution> {
    solve_dynamic_from(grid_ctrl, g_spec, sample_terminal(terminal, grid)?, grid, n_picard)
}

pub fn solve_dynamic_from(
    grid_ctrl: &ControlGrid,
    g_spec: &GeneratorSpec,
    terminal_slice: Vec<f64>,
    grid: &SpaceTimeGrid,
    n_picard: usize,
) -> Result<DynamicSolution> {
    if terminal_slice.len() != grid.nx {
        return Err(Error::GridMismatch("terminal slice length differs from nx".into()));
    }
    let kernels = kernels(grid_ctrl, grid)?;
    let mut u = ValueField::zeros(*grid);
    u.data[grid.nt] = terminal_slice;
    let mut argmax = vec![Vec::new(); grid.nt];
    dynamic_sweep(grid_ctrl, &kernels, g_spec, grid, &mut u, &mut argmax, 0, grid.nt, n_picard)?;
    Ok(DynamicSolution { u, argmax })
}

pub fn solve_static(
    grid_ctrl: &ControlGrid,
    g_spec: &GeneratorSpec,
    terminal: &Expr,
    grid: &SpaceTimeGrid,
    n_picard: usize,
) -> Result<StaticSolution> {
    solve_static_from(grid_ctrl, g_spec, sample_terminal(terminal, grid)?, grid, n_picard)
}

pub fn solve_static_from(
    grid_ctrl: &ControlGrid,
    g_spec: &GeneratorSpec,
    terminal_slice: Vec<f64>,
    grid: &SpaceTimeGrid,
    n_picard: usize,
) -> Result<StaticSolution> {
    // fail on the first offending control with its index
    kernels(grid_ctrl, grid)?;
    let per_control: Vec<FieldSolution> = grid_ctrl
        .points()
        .iter()
        .map(|c| solve_bsdej_from(c, g_spec, terminal_slice.clone(), grid, n_picard))
        .collect::<Result<_>>()?;
    let mut u0 = per_control[0].y.initial().to_vec();
    let mut argmax0 = vec![0; grid.nx];
    for (k, sol) in per_control.iter().enumerate().skip(1) {
        for (i, &v) in sol.y.initial().iter().enumerate() {
            if v > u0[i] {
                u0[i] = v;
                argmax0[i] = k;
            }
        }
    }
    Ok(StaticSolution {
        u0,
        argmax0,
        per_control,
    })
}

/// `ΔK` per control: `dk[c][n][i] = u[n][i] - (one step of u[n+1] under c)_i`.
#[derive(Debug, Clone)]
pub struct KIncrementField {
    pub grid: SpaceTimeGrid,
    pub dk: Vec<Vec<Vec<f64>>>,
    /// Expected accumulated `K_T` from `(t_n, x_i)` under each constant control.
    pub total: Vec<ValueField>,
}

pub fn k_increments(
    u: &ValueField,
    grid_ctrl: &ControlGrid,
    g_spec: &GeneratorSpec,
    n_picard: usize,
) -> Result<KIncrementField> {
    let grid = u.grid;
    let kernels = kernels(grid_ctrl, &grid)?;
    let mut dk = Vec::with_capacity(grid_ctrl.len());
    let mut total = Vec::with_capacity(grid_ctrl.len());
    for (c, kernel) in grid_ctrl.points().iter().zip(&kernels) {
        let mut per_step = vec![Vec::new(); grid.nt];
        let mut acc = ValueField::zeros(grid);
        for n in (0..grid.nt).rev() {
            let step = backward_step(kernel, g_spec, c, u.slice(n + 1), grid.t(n), n_picard)?;
            let inc: Vec<f64> = u.slice(n).iter().zip(&step.y).map(|(a, b)| a - b).collect();
            let carried = kernel.apply(acc.slice(n + 1));
            acc.data[n] = inc.iter().zip(&carried).map(|(d, k)| d + k).collect();
            per_step[n] = inc;
        }
        dk.push(per_step);
        total.push(acc);
    }
    Ok(KIncrementField { grid, dk, total })
}

#[derive(Debug, Clone, Serialize)]
pub struct MinimalityReport {
    /// Largest value over `(n, i)` of `min_c ΔK`. The discrete minimum condition is that this is 0.
    pub max_of_minima: f64,
    pub min_increment: f64,
    /// Count of `ΔK < -1e-10`.
    pub negative_violations: usize,
    /// `min_c ΔK` per `(n, i)`.
    #[serde(skip)]
    pub minima: Vec<Vec<f64>>,
    /// Expected total `K_T` from `t = 0`, per control and node.
    #[serde(skip)]
    pub total_k0: Vec<Vec<f64>>,
}

pub const NEGATIVE_K_TOL: f64 = 1e-10;

pub fn minimality_report(k: &KIncrementField) -> MinimalityReport {
    let grid = k.grid;
    let mut minima = vec![vec![f64::INFINITY; grid.nx]; grid.nt];
    let mut min_increment = f64::INFINITY;
    let mut negative_violations = 0;
    for per_control in &k.dk {
        for (n, slice) in per_control.iter().enumerate() {
            for (i, &v) in slice.iter().enumerate() {
                minima[n][i] = minima[n][i].min(v);
                min_increment = min_increment.min(v);
                if v < -NEGATIVE_K_TOL {
                    negative_violations += 1;
                }
            }
        }
    }
    let max_of_minima = minima
        .iter()
        .flat_map(|s| s.iter().copied())
        .fold(f64::NEG_INFINITY, f64::max);
    MinimalityReport {
        max_of_minima,
        min_increment,
        negative_violations,
        minima,
        total_k0: k.total.iter().map(|f| f.initial().to_vec()).collect(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DppReport {
    pub split_index: usize,
    /// Sup-norm between the one-pass and two-stage dynamic values at `t = 0`.
    pub factorization_diff: f64,
    /// `max_i (static-over-split - dynamic)(0, x_i)`; nonpositive up to rounding.
    pub static_excess: f64,
    /// `max_i |static-over-split - dynamic|(0, x_i)` on the region nodes.
    pub static_gap: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn dpp_check(
    grid_ctrl: &ControlGrid,
    g_spec: &GeneratorSpec,
    terminal: &Expr,
    grid: &SpaceTimeGrid,
    split_time: f64,
    region: (f64, f64),
    n_picard: usize,
) -> Result<DppReport> {
    let split = grid
        .time_index(split_time)
        .filter(|&n| n > 0 && n < grid.nt)
        .ok_or_else(|| {
            Error::Config(vec![crate::error::ConfigIssue {
                location: "run.split_time".into(),
                message: format!("{split_time} is not an interior mesh time (dt = {})", grid.dt()),
            }])
        })?;
    let full = solve_dynamic(grid_ctrl, g_spec, terminal, grid, n_picard)?;

    // stage one on [t1, T], stage two on [0, t1] from the stage-one slice
    let kernels = kernels(grid_ctrl, grid)?;
    let mut staged = ValueField::zeros(*grid);
    staged.data[grid.nt] = sample_terminal(terminal, grid)?;
    let mut argmax = vec![Vec::new(); grid.nt];
    dynamic_sweep(grid_ctrl, &kernels, g_spec, grid, &mut staged, &mut argmax, split, grid.nt, n_picard)?;
    let handoff = staged.data[split].clone();
    let mut second = ValueField::zeros(*grid);
    second.data[split] = handoff.clone();
    dynamic_sweep(grid_ctrl, &kernels, g_spec, grid, &mut second, &mut argmax, 0, split, n_picard)?;
    let factorization_diff = full
        .u
        .initial()
        .iter()
        .zip(second.initial())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    // constant controls on [0, t1] with terminal data u(t1, ·)
    let head = SpaceTimeGrid::new(grid.x_min, grid.x_max, grid.nx, grid.t(split), split)?;
    let stat = solve_static_from(grid_ctrl, g_spec, handoff, &head, n_picard)?;
    let dynamic0 = full.u.initial();
    let static_excess = stat
        .u0
        .iter()
        .zip(dynamic0)
        .map(|(s, d)| s - d)
        .fold(f64::NEG_INFINITY, f64::max);
    let static_gap = grid
        .region_nodes(region.0, region.1)
        .map(|i| (stat.u0[i] - dynamic0[i]).abs())
        .fold(0.0, f64::max);
    Ok(DppReport {
        split_index: split,
        factorization_diff,
        static_excess,
        static_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsdej::{cfl_max_dt, solve_bsdej};
    use crate::controls::{ControlPoint, LevyMeasure};

    fn small_grid(ctrl: &ControlGrid) -> SpaceTimeGrid {
        let dx = 0.1;
        let dt = ctrl.points().iter().map(|c| cfl_max_dt(c, dx)).fold(f64::INFINITY, f64::min);
        SpaceTimeGrid::with_max_dt(-6.0, 6.0, 121, 1.0, 0.9 * dt).unwrap()
    }

    fn two_vol() -> ControlGrid {
        ControlGrid::new(vec![ControlPoint::diffusive(1.0).unwrap(), ControlPoint::diffusive(2.0).unwrap()]).unwrap()
    }

    #[test]
    fn singleton_is_bitwise_bsdej() {
        let c = ControlPoint::new(1.0, LevyMeasure::new(vec![(0.7, 0.4)]).unwrap()).unwrap();
        let ctrl = ControlGrid::singleton(c.clone());
        let grid = small_grid(&ctrl);
        let g = Expr::parse("abs(x) - x^2/10").unwrap();
        let dynamic = solve_dynamic(&ctrl, &GeneratorSpec::zero(), &g, &grid, 2).unwrap();
        let single = solve_bsdej(&c, &GeneratorSpec::zero(), &g, &grid, 2).unwrap();
        assert_eq!(dynamic.u.data, single.y.data);
        let stat = solve_static(&ctrl, &GeneratorSpec::zero(), &g, &grid, 2).unwrap();
        assert_eq!(stat.u0, single.y.initial());
    }

    #[test]
    fn convex_terminal_selects_high_volatility() {
        let ctrl = two_vol();
        let grid = small_grid(&ctrl);
        let dynamic = solve_dynamic(&ctrl, &GeneratorSpec::zero(), &Expr::parse("x^2").unwrap(), &grid, 2).unwrap();
        assert!((dynamic.u.value_at_start(0.0) - 2.0).abs() < 2e-2);
        for i in grid.region_nodes(-2.0, 2.0) {
            assert_eq!(dynamic.argmax[0][i], 1);
        }
    }

    #[test]
    fn k_increments_vanish_for_optimal_control() {
        let ctrl = two_vol();
        let grid = small_grid(&ctrl);
        let zero = GeneratorSpec::zero();
        let dynamic = solve_dynamic(&ctrl, &zero, &Expr::parse("x^2").unwrap(), &grid, 2).unwrap();
        let k = k_increments(&dynamic.u, &ctrl, &zero, 2).unwrap();
        let i = grid.nearest(0.0);
        let n = grid.nt / 2;
        assert_eq!(k.dk[1][n][i], 0.0);
        // defect = ½Δt(2-1)·curvature = Δt for x²
        assert!((k.dk[0][n][i] - grid.dt()).abs() < 1e-9, "{} {}", k.dk[0][n][i], grid.dt());
        let rep = minimality_report(&k);
        assert!(rep.max_of_minima <= 1e-10);
        assert_eq!(rep.negative_violations, 0);
        // expected K_T under a=1 is u - y^{a=1}, which is 2 - 1 at the origin
        let y1 = solve_bsdej(&ctrl.points()[0], &zero, &Expr::parse("x^2").unwrap(), &grid, 2).unwrap();
        for j in 0..grid.nx {
            assert!((rep.total_k0[0][j] - (dynamic.u.at(0, j) - y1.y.at(0, j))).abs() < 1e-10);
        }
        assert!((rep.total_k0[0][i] - 1.0).abs() < 1e-3, "{}", rep.total_k0[0][i]);
        assert!(rep.total_k0[1][i].abs() < 1e-12);
    }

    #[test]
    fn singleton_has_no_k() {
        let ctrl = ControlGrid::singleton(ControlPoint::diffusive(1.0).unwrap());
        let grid = small_grid(&ctrl);
        let zero = GeneratorSpec::zero();
        let dynamic = solve_dynamic(&ctrl, &zero, &Expr::parse("sin(x)").unwrap(), &grid, 2).unwrap();
        let rep = minimality_report(&k_increments(&dynamic.u, &ctrl, &zero, 2).unwrap());
        assert_eq!(rep.max_of_minima, 0.0);
        assert_eq!(rep.min_increment, 0.0);
        assert_eq!(rep.negative_violations, 0);
    }

    #[test]
    fn dpp_factorises() {
        let ctrl = two_vol();
        let grid = small_grid(&ctrl);
        let rep = dpp_check(&ctrl, &GeneratorSpec::zero(), &Expr::parse("x^2").unwrap(), &grid, grid.t(grid.nt / 2), (-2.0, 2.0), 2).unwrap();
        assert!(rep.factorization_diff <= 1e-12);
        assert!(rep.static_excess <= 1e-10);
        assert!(rep.static_gap <= 1e-2);
        assert!(matches!(
            dpp_check(&ctrl, &GeneratorSpec::zero(), &Expr::parse("x^2").unwrap(), &grid, 0.5 * grid.dt(), (-2.0, 2.0), 2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn nonconvex_terminal_separates_static_and_dynamic() {
        let ctrl = two_vol();
        let grid = small_grid(&ctrl);
        let g = Expr::parse("max(x, 0) - max(-x, 0)^3").unwrap();
        let dynamic = solve_dynamic(&ctrl, &GeneratorSpec::zero(), &g, &grid, 2).unwrap();
        let stat = solve_static(&ctrl, &GeneratorSpec::zero(), &g, &grid, 2).unwrap();
        let region = grid.region_nodes(-2.0, 2.0);
        let margin = region.clone().map(|i| dynamic.u.at(0, i) - stat.u0[i]).fold(0.0, f64::max);
        assert!(margin > 1e-3, "margin {margin}");
        for i in 0..grid.nx {
            assert!(stat.u0[i] <= dynamic.u.at(0, i));
        }
    }
}
