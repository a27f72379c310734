//! Forward simulation of the Lévy martingale under one control, pathwise
//! quadratic variation, stochastic exponentials and Monte Carlo estimates.
//!
//! Each path draws from its own ChaCha stream selected by
//! `(master_seed, path_index)`, so results do not depend on how many paths
//! are generated or in which order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::controls::ControlPoint;
use crate::error::{Error, Result};
use crate::expr::Expr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub path_index: u64,
}

impl SeedSpec {
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.path_index);
        rng
    }
}

/// Skeleton of one càdlàg trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub x0: f64,
    pub t0: f64,
    pub t_end: f64,
    pub mesh: f64,
    /// Increments of the continuous part, each `N(0, a·mesh)`.
    pub cont_incr: Vec<f64>,
    /// `(τ_j, e_j)` with strictly increasing `τ_j ∈ (t0, T]`.
    pub jumps: Vec<(f64, f64)>,
    /// Compensating drift `-Σλ_k e_k`.
    pub drift_rate: f64,
}

impl PathSample {
    pub fn horizon(&self) -> f64 {
        self.t_end - self.t0
    }

    pub fn state_at(&self, t: f64) -> f64 {
        let t = t.clamp(self.t0, self.t_end);
        let steps = (((t - self.t0) / self.mesh) * (1.0 + 1e-12)).floor() as usize;
        let steps = steps.min(self.cont_incr.len());
        let cont: f64 = self.cont_incr[..steps].iter().sum();
        let jumps: f64 = self.jumps.iter().filter(|&&(tau, _)| tau <= t).map(|&(_, e)| e).sum();
        self.x0 + cont + self.drift_rate * (t - self.t0) + jumps
    }

    pub fn terminal(&self) -> f64 {
        let cont: f64 = self.cont_incr.iter().sum();
        let jumps: f64 = self.jumps.iter().map(|&(_, e)| e).sum();
        self.x0 + cont + self.drift_rate * self.horizon() + jumps
    }

    /// `sup_s |B_s - x0|²`, monitored on the mesh and on both sides of each jump.
    pub fn sup_sq_displacement(&self) -> f64 {
        let mut sup: f64 = 0.0;
        let mut cont = 0.0;
        let mut jump_sum = 0.0;
        let mut next_jump = 0;
        let mut level = |t: f64, cont: f64, jumps: f64| {
            let d = cont + self.drift_rate * (t - self.t0) + jumps;
            sup = sup.max(d * d);
        };
        for (k, incr) in self.cont_incr.iter().enumerate() {
            let t_next = if k + 1 == self.cont_incr.len() {
                self.t_end
            } else {
                self.t0 + (k + 1) as f64 * self.mesh
            };
            // continuous part is frozen at its left mesh value between nodes
            while next_jump < self.jumps.len() && self.jumps[next_jump].0 <= t_next {
                let (tau, e) = self.jumps[next_jump];
                level(tau, cont, jump_sum);
                jump_sum += e;
                level(tau, cont, jump_sum);
                next_jump += 1;
            }
            cont += incr;
            level(t_next, cont, jump_sum);
        }
        sup
    }
}

pub fn simulate_path(c: &ControlPoint, x0: f64, t0: f64, t_end: f64, dt: f64, seed: SeedSpec) -> PathSample {
    assert!(dt > 0.0 && t_end > t0, "need dt > 0 and T > t0");
    let horizon = t_end - t0;
    let n = ((horizon / dt) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    let mesh = horizon / n as f64;
    let mut rng = seed.rng();
    let sd = (c.a * mesh).sqrt();
    let cont_incr: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sd * z
        })
        .collect();

    let rate = c.nu.total_intensity();
    let mut jumps = Vec::new();
    if rate > 0.0 {
        let gaps = Exp::new(rate).expect("positive rate");
        let mut tau = t0;
        loop {
            tau += gaps.sample(&mut rng);
            if tau > t_end {
                break;
            }
            let pick = rng.random::<f64>() * rate;
            let mut acc = 0.0;
            let atoms = c.nu.atoms();
            let mut mark = atoms[atoms.len() - 1].0;
            for &(e, l) in atoms {
                acc += l;
                if pick < acc {
                    mark = e;
                    break;
                }
            }
            jumps.push((tau, mark));
        }
    }
    PathSample {
        x0,
        t0,
        t_end,
        mesh,
        cont_incr,
        jumps,
        drift_rate: -c.nu.first_moment(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadraticVariation {
    pub total: f64,
    pub continuous_density: f64,
    pub jump: f64,
}

/// Realised quadratic variation, its jump part, and the implied density of
/// the continuous part.
pub fn pathwise_qv(p: &PathSample) -> QuadraticVariation {
    let cont: f64 = p.cont_incr.iter().map(|d| d * d).sum();
    let jump: f64 = p.jumps.iter().map(|&(_, e)| e * e).sum();
    let total = cont + jump;
    QuadraticVariation {
        total,
        continuous_density: (total - jump) / p.horizon(),
        jump,
    }
}

/// Stochastic exponential of `η·W + ∫∫γ(e) μ̃(de, ds)` at the path's horizon,
/// where `W` is the standardised continuous part.
pub fn doleans_exponential(p: &PathSample, eta: f64, gamma: impl Fn(f64) -> f64, c: &ControlPoint) -> Result<f64> {
    for &(e, _) in c.nu.atoms() {
        let g = gamma(e);
        if !(g > -1.0) {
            return Err(Error::Spec(format!("jump slope must exceed -1, got {g} at mark {e}")));
        }
    }
    let horizon = p.horizon();
    let w: f64 = p.cont_incr.iter().sum::<f64>() / c.a.sqrt();
    let compensator: f64 = c.nu.atoms().iter().map(|&(e, l)| gamma(e) * l).sum();
    let mut exponent = eta * w - 0.5 * eta * eta * horizon - horizon * compensator;
    let mut product = 1.0;
    for &(_, e) in &p.jumps {
        let g = gamma(e);
        if !(g > -1.0) {
            return Err(Error::Spec(format!("jump slope must exceed -1, got {g} at mark {e}")));
        }
        exponent += g;
        product *= (1.0 + g) * (-g).exp();
    }
    Ok(exponent.exp() * product)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl McEstimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        Self {
            mean,
            std_error: (var / n as f64).sqrt(),
            n,
        }
    }

    /// `|mean - target| ≤ k·SE`.
    pub fn agrees_with(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.std_error
    }
}

/// Applies `f` to paths `0..n_paths` in parallel and collects in index order.
pub fn map_paths<T: Send>(
    c: &ControlPoint,
    x0: f64,
    t0: f64,
    t_end: f64,
    dt: f64,
    n_paths: usize,
    master_seed: u64,
    f: impl Fn(&PathSample) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    (0..n_paths as u64)
        .into_par_iter()
        .map(|path_index| {
            let p = simulate_path(c, x0, t0, t_end, dt, SeedSpec { master_seed, path_index });
            f(&p)
        })
        .collect()
}

/// Monte Carlo estimate of `E[g(B_T)]` started from `x0` at `t0`.
#[allow(clippy::too_many_arguments)]
pub fn mc_terminal(
    c: &ControlPoint,
    g: &Expr,
    x0: f64,
    t0: f64,
    t_end: f64,
    dt: f64,
    n_paths: usize,
    master_seed: u64,
) -> Result<McEstimate> {
    if n_paths < 2 {
        return Err(Error::Spec("Monte Carlo needs at least two paths".into()));
    }
    let samples = map_paths(c, x0, t0, t_end, dt, n_paths, master_seed, |p| g.eval(t_end, p.terminal()))?;
    Ok(McEstimate::from_samples(&samples))
}

/// Estimate of `E[sup_{s ≤ gap} |B_s - B_0|²]`.
pub fn sup_sq_estimate(c: &ControlPoint, gap: f64, dt: f64, n_paths: usize, master_seed: u64) -> Result<McEstimate> {
    let samples = map_paths(c, 0.0, 0.0, gap, dt, n_paths, master_seed, |p| Ok(p.sup_sq_displacement()))?;
    Ok(McEstimate::from_samples(&samples))
}
