//! The uncertainty set of (volatility, Lévy measure) pairs, the driver `f`,
//! the nonlocal operator `A`, and the two conjugate transforms built on top
//! of them.
//!
//! Lévy measures are finite lists of atoms, so every integral against a
//! measure is an exact finite sum.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::expr::Expr;

/// A finite-atom Lévy measure: marks `e_k != 0` with intensities `λ_k > 0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevyMeasure {
    atoms: Vec<(f64, f64)>,
}

impl LevyMeasure {
    pub fn empty() -> Self {
        Self { atoms: Vec::new() }
    }

    /// Atoms are kept in the order given.
    pub fn new(atoms: Vec<(f64, f64)>) -> Result<Self> {
        for (k, &(mark, rate)) in atoms.iter().enumerate() {
            if !mark.is_finite() || mark == 0.0 {
                return Err(Error::Spec(format!("atom {k}: mark must be finite and nonzero, got {mark}")));
            }
            if !rate.is_finite() || rate <= 0.0 {
                return Err(Error::Spec(format!("atom {k}: intensity must be finite and positive, got {rate}")));
            }
            if atoms[..k].iter().any(|&(m, _)| m == mark) {
                return Err(Error::Spec(format!("atom {k}: duplicate mark {mark}")));
            }
        }
        Ok(Self { atoms })
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn total_intensity(&self) -> f64 {
        self.atoms.iter().map(|&(_, l)| l).sum()
    }

    /// `Σ λ_k e_k`; the lattice and the simulator subtract this as drift.
    pub fn first_moment(&self) -> f64 {
        self.atoms.iter().map(|&(e, l)| l * e).sum()
    }

    pub fn second_moment(&self) -> f64 {
        self.atoms.iter().map(|&(e, l)| l * e * e).sum()
    }

    pub fn large_jump_first_moment(&self) -> f64 {
        self.atoms
            .iter()
            .filter(|&&(e, _)| e.abs() >= 1.0)
            .map(|&(e, l)| l * e.abs())
            .sum()
    }

    pub fn max_abs_mark(&self) -> f64 {
        self.atoms.iter().map(|&(e, _)| e.abs()).fold(0.0, f64::max)
    }
}

/// One element `(a, ν)` of the control set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlPoint {
    pub a: f64,
    pub nu: LevyMeasure,
}

impl ControlPoint {
    pub fn new(a: f64, nu: LevyMeasure) -> Result<Self> {
        if !a.is_finite() || a <= 0.0 {
            return Err(Error::Spec(format!("volatility level must be positive, got {a}")));
        }
        Ok(Self { a, nu })
    }

    pub fn diffusive(a: f64) -> Result<Self> {
        Self::new(a, LevyMeasure::empty())
    }

    /// `a + ∫|e|² ν + ∫_{|e|≥1} |e| ν`.
    pub fn moment(&self) -> f64 {
        self.a + self.nu.second_moment() + self.nu.large_jump_first_moment()
    }
}

impl fmt::Display for ControlPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(a={}", self.a)?;
        for (e, l) in self.nu.atoms() {
            write!(f, ", {e}@{l}")?;
        }
        f.write_str(")")
    }
}

/// Non-empty ordered list of controls. Order fixes argmax tie-breaking.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlGrid {
    points: Vec<ControlPoint>,
    uniform_moment: f64,
}

impl ControlGrid {
    pub fn new(points: Vec<ControlPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Spec("control grid must contain at least one control".into()));
        }
        let uniform_moment = points.iter().map(ControlPoint::moment).fold(0.0, f64::max);
        Ok(Self {
            points,
            uniform_moment,
        })
    }

    pub fn singleton(point: ControlPoint) -> Self {
        Self::new(vec![point]).expect("non-empty")
    }

    pub fn points(&self) -> &[ControlPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn uniform_moment(&self) -> f64 {
        self.uniform_moment
    }

    pub fn a_max(&self) -> f64 {
        self.points.iter().map(|p| p.a).fold(0.0, f64::max)
    }

    pub fn max_abs_mark(&self) -> f64 {
        self.points.iter().map(|p| p.nu.max_abs_mark()).fold(0.0, f64::max)
    }

    /// Sorted distinct marks across every control.
    pub fn marks(&self) -> Vec<f64> {
        let mut marks: Vec<f64> = self
            .points
            .iter()
            .flat_map(|p| p.nu.atoms().iter().map(|&(e, _)| e))
            .collect();
        marks.sort_by(f64::total_cmp);
        marks.dedup();
        marks
    }
}

/// Values indexed by jump mark, e.g. the candidate `U(e_k)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct JumpValues {
    entries: Vec<(f64, f64)>,
}

impl JumpValues {
    pub fn new(mut entries: Vec<(f64, f64)>) -> Self {
        entries.sort_by(|a, b| a.0.total_cmp(&b.0));
        entries.dedup_by(|a, b| a.0 == b.0);
        Self { entries }
    }

    pub fn from_fn(marks: &[f64], mut value: impl FnMut(f64) -> f64) -> Self {
        Self::new(marks.iter().map(|&e| (e, value(e))).collect())
    }

    pub fn get(&self, mark: f64) -> Option<f64> {
        self.entries
            .binary_search_by(|probe| probe.0.total_cmp(&mark))
            .ok()
            .map(|i| self.entries[i].1)
    }

    pub fn entries(&self) -> &[(f64, f64)] {
        &self.entries
    }

    fn require(&self, mark: f64) -> Result<f64> {
        self.get(mark)
            .ok_or_else(|| Error::Spec(format!("no jump value supplied for mark {mark}")))
    }
}

/// Jump-slope family `γ(e) = c·(1 ∧ |e|)` with `c ≥ -1 + δ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JumpSlope {
    pub c: f64,
    pub delta: f64,
}

impl JumpSlope {
    pub fn new(c: f64, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Spec(format!("jump slope margin delta must lie in (0, 1), got {delta}")));
        }
        if !c.is_finite() || c < -1.0 + delta {
            return Err(Error::Spec(format!(
                "jump slope c must exceed -1+delta = {}, got {c}",
                -1.0 + delta
            )));
        }
        Ok(Self { c, delta })
    }

    pub fn zero() -> Self {
        Self { c: 0.0, delta: 0.5 }
    }

    pub fn gamma(&self, mark: f64) -> f64 {
        self.c * mark.abs().min(1.0)
    }
}

/// Driver `f(t,x,y,z,u,a,ν) = κ_y y + κ_z √a z + Σ_k u(e_k) γ(e_k) λ_k + h0(t,x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub kappa_y: f64,
    pub kappa_z: f64,
    pub jump_slope: JumpSlope,
    pub h0: Expr,
}

impl GeneratorSpec {
    pub fn zero() -> Self {
        Self {
            kappa_y: 0.0,
            kappa_z: 0.0,
            jump_slope: JumpSlope::zero(),
            h0: Expr::constant(0.0),
        }
    }

    pub fn lipschitz(&self) -> f64 {
        self.kappa_y.abs().max(self.kappa_z.abs())
    }

    /// True when `f` is identically zero, whatever its arguments.
    pub fn is_zero(&self) -> bool {
        self.kappa_y == 0.0
            && self.kappa_z == 0.0
            && self.jump_slope.c == 0.0
            && self.h0 == Expr::constant(0.0)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn eval_generator(
    g: &GeneratorSpec,
    t: f64,
    x: f64,
    y: f64,
    z: f64,
    u_values: &JumpValues,
    c: &ControlPoint,
) -> Result<f64> {
    let mut jump_term = 0.0;
    for &(e, lambda) in c.nu.atoms() {
        jump_term += u_values.require(e)? * g.jump_slope.gamma(e) * lambda;
    }
    Ok(g.kappa_y * y + g.kappa_z * c.a.sqrt() * z + jump_term + g.h0.eval(t, x)?)
}

/// `(Av)(x, e) = v(x + e) - v(x) - e·dv`, with `dv` the caller's gradient at `x`.
pub fn nonlocal_a(v: impl Fn(f64) -> f64, x: f64, e: f64, dv: f64) -> f64 {
    v(x + e) - v(x) - e * dv
}

/// Arguments of the Hamiltonian at one point.
pub struct HamiltonianInput<'a> {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// `U(e)` for every mark used by the control grid.
    pub u_values: &'a JumpValues,
    /// Curvature argument `Γ`.
    pub d2: f64,
    /// `e ↦ v(x + e)`; `v_shift(0.0)` is `v(x)`.
    pub v_shift: &'a dyn Fn(f64) -> f64,
}

/// Value of one control inside the Hamiltonian supremum.
pub fn hamiltonian_summand(
    g: &GeneratorSpec,
    c: &ControlPoint,
    input: &HamiltonianInput<'_>,
) -> Result<f64> {
    let v0 = (input.v_shift)(0.0);
    let mut jumps = 0.0;
    for &(e, lambda) in c.nu.atoms() {
        jumps += lambda * ((input.v_shift)(e) - v0 - e * input.z);
    }
    let f = eval_generator(g, input.t, input.x, input.y, input.z, input.u_values, c)?;
    Ok(0.5 * c.a * input.d2 + jumps + f)
}

/// `ĥ = max over controls of ½aΓ + Σ_k λ_k (Av)(x,e_k) + f(...)`; returns the
/// value and the first maximising index.
///
/// `f` enters with the same sign as in the backward step `y = E[y'] + Δt f`,
/// so that `-∂_t u - ĥ = 0` is the equation solved by the backward induction.
pub fn hamiltonian_hat(
    g: &GeneratorSpec,
    grid: &ControlGrid,
    input: &HamiltonianInput<'_>,
) -> Result<(f64, usize)> {
    let mut best = (f64::NEG_INFINITY, 0);
    for (k, c) in grid.points().iter().enumerate() {
        let v = hamiltonian_summand(g, c, input)?;
        if v > best.0 {
            best = (v, k);
        }
    }
    if !best.0.is_finite() {
        return Err(Error::Spec("Hamiltonian is not finite".into()));
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FenchelValue {
    pub value: f64,
    pub gamma_index: usize,
    pub vbar_index: usize,
}

/// Grid conjugate `sup_{γ, ṽ} { ½aγ + Σ_k ṽ(e_k) λ_k - h(γ, ṽ) }`.
///
/// `h` may return `+∞` to mark points outside its domain. The first maximiser
/// in (γ index, ṽ index) lexicographic order wins ties.
pub fn fenchel_f(
    h: impl Fn(f64, &JumpValues) -> f64,
    gammas: &[f64],
    vbars: &[JumpValues],
    a: f64,
    nu: &LevyMeasure,
) -> Result<FenchelValue> {
    if gammas.is_empty() || vbars.is_empty() {
        return Err(Error::Spec("Fenchel transform needs non-empty grids".into()));
    }
    let mut integrals = Vec::with_capacity(vbars.len());
    for vbar in vbars {
        let mut s = 0.0;
        for &(e, lambda) in nu.atoms() {
            s += vbar.require(e)? * lambda;
        }
        integrals.push(s);
    }
    let mut best: Option<FenchelValue> = None;
    for (gi, &gamma) in gammas.iter().enumerate() {
        for (vi, vbar) in vbars.iter().enumerate() {
            let hv = h(gamma, vbar);
            if hv == f64::INFINITY {
                continue;
            }
            let value = 0.5 * a * gamma + integrals[vi] - hv;
            if best.is_none_or(|b| value > b.value) {
                best = Some(FenchelValue {
                    value,
                    gamma_index: gi,
                    vbar_index: vi,
                });
            }
        }
    }
    best.ok_or_else(|| Error::Spec("h is infinite on the whole grid".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ControlBounds {
    pub a_min: f64,
    pub a_max: f64,
    pub moment_cap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlCheck {
    pub index: usize,
    pub pass: bool,
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlReport {
    pub checks: Vec<ControlCheck>,
    pub uniform_moment: f64,
    pub pass: bool,
}

pub fn validate_control_grid(grid: &ControlGrid, bounds: ControlBounds) -> ControlReport {
    let checks: Vec<ControlCheck> = grid
        .points()
        .iter()
        .enumerate()
        .map(|(index, c)| {
            let mut violations = Vec::new();
            if c.a < bounds.a_min {
                violations.push(format!("a = {} below a_min = {}", c.a, bounds.a_min));
            }
            if c.a > bounds.a_max {
                violations.push(format!("a = {} above a_max = {}", c.a, bounds.a_max));
            }
            let m2 = c.nu.second_moment();
            if m2 > bounds.moment_cap {
                violations.push(format!("second_moment {m2} > moment_cap {}", bounds.moment_cap));
            }
            let m1 = c.nu.large_jump_first_moment();
            if m1 > bounds.moment_cap {
                violations.push(format!(
                    "large_jump_first_moment {m1} > moment_cap {}",
                    bounds.moment_cap
                ));
            }
            ControlCheck {
                index,
                pass: violations.is_empty(),
                violations,
            }
        })
        .collect();
    let pass = checks.iter().all(|c| c.pass);
    ControlReport {
        checks,
        uniform_moment: grid.uniform_moment(),
        pass,
    }
}
