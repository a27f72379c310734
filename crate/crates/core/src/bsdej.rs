//! Backward induction for a standard BSDE with jumps under one fixed control.
//!
//! The Lévy martingale is replaced by a Markov chain on the spatial grid:
//! a trinomial diffusion stencil, jump mass split linearly between the two
//! nodes bracketing each target, and the compensating drift `-Σλe` split
//! centrally between the two neighbours. Every interior row is a
//! probability vector with zero mean displacement, so affine functions are
//! preserved exactly.
//!
//! One explicit step reads
//! `y_i = Σ_j p_ij y'_j + Δt f(t, x_i, y'_i, z_i, u_i)`, with `z` the central
//! difference of the next slice and `u_i(e) = y'(x_i + e) - y'(x_i)`.
//! Boundary nodes are absorbing: they keep their value and only receive the
//! driver, evaluated with zero gradient and zero jump reads so that the
//! step stays monotone there.

use std::collections::BTreeMap;

use crate::controls::{eval_generator, ControlPoint, GeneratorSpec, JumpValues};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::grid::{gradient, interp, SpaceTimeGrid, ValueField};

pub const DEFAULT_PICARD: usize = 2;

/// Largest `Δt` keeping the stay-probability nonnegative.
pub fn cfl_max_dt(c: &ControlPoint, dx: f64) -> f64 {
    1.0 / (c.a / (dx * dx) + c.nu.total_intensity())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryPolicy {
    Absorbing,
}

/// One-step transition probabilities of the lattice chain.
#[derive(Debug, Clone)]
pub struct TransitionKernel {
    pub grid: SpaceTimeGrid,
    /// `rows[i]` lists `(j, p_ij)` in increasing `j`, diagonal included.
    pub rows: Vec<Vec<(usize, f64)>>,
    /// Whether some of row `i`'s mass was clamped onto a boundary node.
    pub clamped: Vec<bool>,
    pub boundary: BoundaryPolicy,
}

impl TransitionKernel {
    pub fn row_sum(&self, i: usize) -> f64 {
        self.rows[i].iter().map(|&(_, p)| p).sum()
    }

    pub fn mean_displacement(&self, i: usize) -> f64 {
        let xi = self.grid.x(i);
        self.rows[i].iter().map(|&(j, p)| p * (self.grid.x(j) - xi)).sum()
    }

    /// `(P v)_i`, with nonnegative weights summed in column order.
    pub fn apply_row(&self, i: usize, v: &[f64]) -> f64 {
        self.rows[i].iter().map(|&(j, p)| p * v[j]).sum()
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.grid.nx).map(|i| self.apply_row(i, v)).collect()
    }
}

fn check_cfl(c: &ControlPoint, grid: &SpaceTimeGrid, index: usize) -> Result<()> {
    let dx = grid.dx();
    let max_dt = cfl_max_dt(c, dx);
    let dt = grid.dt();
    if dt > max_dt * (1.0 + 1e-12) {
        return Err(Error::Cfl {
            control: index,
            dt,
            max_dt,
        });
    }
    // the central drift split must not make a neighbour weight negative
    let drift = c.nu.first_moment().abs();
    if drift * dx > c.a * (1.0 + 1e-12) {
        return Err(Error::Spec(format!(
            "control {index}: compensating drift {drift} too strong for dx = {dx} (need |Σλe|·dx ≤ a = {})",
            c.a
        )));
    }
    Ok(())
}

pub fn build_kernel(c: &ControlPoint, grid: &SpaceTimeGrid) -> Result<TransitionKernel> {
    build_kernel_indexed(c, grid, 0)
}

pub(crate) fn build_kernel_indexed(
    c: &ControlPoint,
    grid: &SpaceTimeGrid,
    index: usize,
) -> Result<TransitionKernel> {
    check_cfl(c, grid, index)?;
    let dx = grid.dx();
    let dt = grid.dt();
    let last = grid.nx - 1;
    let p_diff = c.a * dt / (2.0 * dx * dx);
    let drift = -dt * c.nu.first_moment();
    let p_drift = drift / (2.0 * dx);

    let mut rows = Vec::with_capacity(grid.nx);
    let mut clamped = vec![false; grid.nx];
    for i in 0..grid.nx {
        if i == 0 || i == last {
            rows.push(vec![(i, 1.0)]);
            continue;
        }
        let mut off: BTreeMap<usize, f64> = BTreeMap::new();
        *off.entry(i - 1).or_default() += p_diff - p_drift;
        *off.entry(i + 1).or_default() += p_diff + p_drift;
        let xi = grid.x(i);
        for &(e, lambda) in c.nu.atoms() {
            let mass = lambda * dt;
            let target = xi + e;
            if target <= grid.x_min || target >= grid.x_max {
                clamped[i] = true;
            }
            let (j, w) = grid.bracket(target);
            if w > 0.0 {
                *off.entry(j).or_default() += mass * w;
            }
            if w < 1.0 {
                *off.entry(j + 1).or_default() += mass * (1.0 - w);
            }
        }
        // jump mass landing on node i is part of the stay-probability
        off.remove(&i);
        let stay = 1.0 - off.values().sum::<f64>();
        if stay < -1e-12 || off.values().any(|&p| p < -1e-15) {
            return Err(Error::Cfl {
                control: index,
                dt,
                max_dt: cfl_max_dt(c, dx),
            });
        }
        for p in off.values_mut() {
            *p = p.max(0.0);
        }
        off.insert(i, stay.max(0.0));
        rows.push(off.into_iter().collect());
    }
    Ok(TransitionKernel {
        grid: *grid,
        rows,
        clamped,
        boundary: BoundaryPolicy::Absorbing,
    })
}

/// Output of one backward step.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub u: Vec<JumpValues>,
}

fn marks(c: &ControlPoint) -> Vec<f64> {
    c.nu.atoms().iter().map(|&(e, _)| e).collect()
}

/// `u_i(e) = interp(slice, x_i + e) - slice_i` for every atom of `c`.
pub fn jump_reads(grid: &SpaceTimeGrid, slice: &[f64], i: usize, c: &ControlPoint) -> JumpValues {
    let xi = grid.x(i);
    JumpValues::new(
        c.nu
            .atoms()
            .iter()
            .map(|&(e, _)| (e, interp(grid, slice, xi + e) - slice[i]))
            .collect(),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn backward_step(
    k: &TransitionKernel,
    g_spec: &GeneratorSpec,
    c: &ControlPoint,
    next_slice: &[f64],
    t: f64,
    n_picard: usize,
) -> Result<StepResult> {
    let grid = &k.grid;
    let dt = grid.dt();
    let skip_driver = g_spec.is_zero();
    let mut y = Vec::with_capacity(grid.nx);
    let mut z = Vec::with_capacity(grid.nx);
    let mut u = Vec::with_capacity(grid.nx);
    let last = grid.nx - 1;
    for i in 0..grid.nx {
        let mean = k.apply_row(i, next_slice);
        let (zi, ui) = if i == 0 || i == last {
            (0.0, JumpValues::from_fn(&marks(c), |_| 0.0))
        } else {
            (gradient(grid, next_slice, i), jump_reads(grid, next_slice, i, c))
        };
        let yi = if skip_driver {
            mean
        } else {
            let xi = grid.x(i);
            let mut yi = mean + dt * eval_generator(g_spec, t, xi, next_slice[i], zi, &ui, c)?;
            for _ in 1..n_picard.max(1) {
                yi = mean + dt * eval_generator(g_spec, t, xi, yi, zi, &ui, c)?;
            }
            yi
        };
        y.push(yi);
        z.push(zi);
        u.push(ui);
    }
    Ok(StepResult { y, z, u })
}

/// `(y, z, u)` of a BSDEJ on the whole grid, under one control.
#[derive(Debug, Clone)]
pub struct FieldSolution {
    pub y: ValueField,
    /// `z.data[n]` is the gradient proxy used to produce slice `n`;
    /// the terminal slice holds the gradient of the terminal data.
    pub z: ValueField,
    /// `u[n][i]` is the jump read used to produce `y[n][i]`.
    pub u: Vec<Vec<JumpValues>>,
    pub control: ControlPoint,
}

pub fn sample_terminal(terminal: &Expr, grid: &SpaceTimeGrid) -> Result<Vec<f64>> {
    (0..grid.nx).map(|i| terminal.eval(grid.t_end, grid.x(i))).collect()
}

pub fn solve_bsdej(
    c: &ControlPoint,
    g_spec: &GeneratorSpec,
    terminal: &Expr,
    grid: &SpaceTimeGrid,
    n_picard: usize,
) -> Result<FieldSolution> {
    let terminal_slice = sample_terminal(terminal, grid)?;
    solve_bsdej_from(c, g_spec, terminal_slice, grid, n_picard)
}

/// Backward induction starting from an explicit terminal slice.
pub fn solve_bsdej_from(
    c: &ControlPoint,
    g_spec: &GeneratorSpec,
    terminal_slice: Vec<f64>,
    grid: &SpaceTimeGrid,
    n_picard: usize,
) -> Result<FieldSolution> {
    if terminal_slice.len() != grid.nx {
        return Err(Error::GridMismatch(format!(
            "terminal slice has {} nodes, grid has {}",
            terminal_slice.len(),
            grid.nx
        )));
    }
    let kernel = build_kernel(c, grid)?;
    let mut y = ValueField::zeros(*grid);
    let mut z = ValueField::zeros(*grid);
    let mut u = vec![Vec::new(); grid.nt + 1];
    z.data[grid.nt] = (0..grid.nx).map(|i| gradient(grid, &terminal_slice, i)).collect();
    u[grid.nt] = (0..grid.nx).map(|i| jump_reads(grid, &terminal_slice, i, c)).collect();
    y.data[grid.nt] = terminal_slice;
    for n in (0..grid.nt).rev() {
        let step = backward_step(&kernel, g_spec, c, &y.data[n + 1], grid.t(n), n_picard)?;
        y.data[n] = step.y;
        z.data[n] = step.z;
        u[n] = step.u;
    }
    Ok(FieldSolution {
        y,
        z,
        u,
        control: c.clone(),
    })
}

/// Sup-norm bound for the explicit scheme with `n_picard` passes:
/// `ρ^nt (sup|g| + T sup|h0|)`, `ρ = Σ_{k≤n_picard} (LΔt)^k`, which tends to
/// `e^{LT}(sup|g| + T sup|h0|)` as `Δt → 0`.
pub fn apriori_bound(g_sup: f64, h0_sup: f64, lipschitz: f64, grid: &SpaceTimeGrid, n_picard: usize) -> f64 {
    let step = lipschitz * grid.dt();
    let rho: f64 = (0..=n_picard.max(1)).map(|k| step.powi(k as i32)).sum();
    rho.powi(grid.nt as i32) * (g_sup + grid.t_end * h0_sup)
}
