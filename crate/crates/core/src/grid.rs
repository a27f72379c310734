//! Uniform space-time mesh and the fields that live on it.

use serde::Serialize;

use crate::error::{Error, Result};

/// Uniform mesh of `[x_min, x_max] × [0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpaceTimeGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub t_end: f64,
    pub nt: usize,
}

// Offsets closer than this (in units of dx) to a node are snapped onto it.
const SNAP: f64 = 1e-9;

impl SpaceTimeGrid {
    pub fn new(x_min: f64, x_max: f64, nx: usize, t_end: f64, nt: usize) -> Result<Self> {
        if !(x_min.is_finite() && x_max.is_finite() && x_min < x_max) {
            return Err(Error::Spec(format!("need x_min < x_max, got [{x_min}, {x_max}]")));
        }
        if nx < 3 {
            return Err(Error::Spec(format!("nx ≥ 3 required, got {nx}")));
        }
        if !(t_end.is_finite() && t_end > 0.0) {
            return Err(Error::Spec(format!("horizon T must be positive, got {t_end}")));
        }
        if nt < 1 {
            return Err(Error::Spec("nt ≥ 1 required".into()));
        }
        Ok(Self {
            x_min,
            x_max,
            nx,
            t_end,
            nt,
        })
    }

    /// Builds the grid with the coarsest `nt` such that `T/nt ≤ max_dt`.
    pub fn with_max_dt(x_min: f64, x_max: f64, nx: usize, t_end: f64, max_dt: f64) -> Result<Self> {
        if !(max_dt > 0.0) {
            return Err(Error::Spec(format!("max dt must be positive, got {max_dt}")));
        }
        let nt = (t_end / max_dt * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        Self::new(x_min, x_max, nx, t_end, nt)
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nx - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.nt as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        if i + 1 == self.nx {
            self.x_max
        } else {
            self.x_min + i as f64 * self.dx()
        }
    }

    pub fn t(&self, n: usize) -> f64 {
        if n == self.nt {
            self.t_end
        } else {
            n as f64 * self.dt()
        }
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.nx).map(|i| self.x(i)).collect()
    }

    /// Same spacing and time mesh, with `extra` nodes added on each side.
    pub fn widened(&self, extra: usize) -> Self {
        let dx = self.dx();
        Self {
            x_min: self.x_min - extra as f64 * dx,
            x_max: self.x_max + extra as f64 * dx,
            nx: self.nx + 2 * extra,
            ..*self
        }
    }

    /// Time index of `t`, if `t` lies on the mesh.
    pub fn time_index(&self, t: f64) -> Option<usize> {
        let pos = t / self.dt();
        let n = pos.round();
        ((pos - n).abs() <= 1e-9 && n >= 0.0 && n <= self.nt as f64).then_some(n as usize)
    }

    /// Nearest node index to `x`, clamped to the grid.
    pub fn nearest(&self, x: f64) -> usize {
        let pos = ((x - self.x_min) / self.dx()).round();
        pos.clamp(0.0, (self.nx - 1) as f64) as usize
    }

    /// The two nodes bracketing `x` and the weight on the left one.
    /// Points beyond the grid are clamped onto the boundary node.
    pub fn bracket(&self, x: f64) -> (usize, f64) {
        let last = self.nx - 1;
        let pos = (x - self.x_min) / self.dx();
        if pos <= 0.0 {
            return (0, 1.0);
        }
        if pos >= last as f64 {
            return (last - 1, 0.0);
        }
        let rounded = pos.round();
        if (pos - rounded).abs() < SNAP {
            let j = rounded as usize;
            return if j == last { (last - 1, 0.0) } else { (j, 1.0) };
        }
        let j = pos.floor() as usize;
        (j, 1.0 - (pos - j as f64))
    }

    pub fn same_mesh(&self, other: &SpaceTimeGrid) -> bool {
        self == other
    }

    /// Node indices strictly inside the grid whose abscissa lies in `[lo, hi]`.
    pub fn region_nodes(&self, lo: f64, hi: f64) -> std::ops::Range<usize> {
        let eps = 1e-9 * self.dx();
        let first = (1..self.nx - 1).find(|&i| self.x(i) >= lo - eps).unwrap_or(self.nx - 1);
        let last = (1..self.nx - 1).rev().find(|&i| self.x(i) <= hi + eps).unwrap_or(0);
        if first > last {
            first..first
        } else {
            first..last + 1
        }
    }
}

/// Linear interpolation of a slice, clamped at the boundary nodes.
pub fn interp(grid: &SpaceTimeGrid, slice: &[f64], x: f64) -> f64 {
    let (j, w) = grid.bracket(x);
    if w == 1.0 {
        slice[j]
    } else if w == 0.0 {
        slice[j + 1]
    } else {
        w * slice[j] + (1.0 - w) * slice[j + 1]
    }
}

/// Central difference in the interior, one-sided at the two ends.
pub fn gradient(grid: &SpaceTimeGrid, slice: &[f64], i: usize) -> f64 {
    let dx = grid.dx();
    let last = grid.nx - 1;
    if i == 0 {
        (slice[1] - slice[0]) / dx
    } else if i == last {
        (slice[last] - slice[last - 1]) / dx
    } else {
        (slice[i + 1] - slice[i - 1]) / (2.0 * dx)
    }
}

/// Second central difference; zero at boundary nodes.
pub fn curvature(grid: &SpaceTimeGrid, slice: &[f64], i: usize) -> f64 {
    if i == 0 || i + 1 == grid.nx {
        return 0.0;
    }
    let dx = grid.dx();
    (slice[i + 1] - 2.0 * slice[i] + slice[i - 1]) / (dx * dx)
}

/// A scalar field on every time slice of a grid; `data[n][i]` is the value at `(t_n, x_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    pub grid: SpaceTimeGrid,
    pub data: Vec<Vec<f64>>,
}

impl ValueField {
    pub fn zeros(grid: SpaceTimeGrid) -> Self {
        Self {
            grid,
            data: vec![vec![0.0; grid.nx]; grid.nt + 1],
        }
    }

    pub fn slice(&self, n: usize) -> &[f64] {
        &self.data[n]
    }

    pub fn at(&self, n: usize, i: usize) -> f64 {
        self.data[n][i]
    }

    pub fn initial(&self) -> &[f64] {
        &self.data[0]
    }

    pub fn terminal(&self) -> &[f64] {
        &self.data[self.grid.nt]
    }

    /// Interpolated value at `(t_0, x)`.
    pub fn value_at_start(&self, x: f64) -> f64 {
        interp(&self.grid, &self.data[0], x)
    }

    pub fn sup_norm(&self) -> f64 {
        self.data
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}
