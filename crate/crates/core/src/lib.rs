//! Second-order BSDEs with jumps and the fully nonlinear PIDE they represent,
//! solved on a uniform grid along two routes that are checked against each
//! other: backward induction on a lattice Markov chain (with a supremum over
//! a finite control grid) and an explicit monotone finite-difference scheme.

pub mod bsdej;
pub mod controls;
pub mod error;
pub mod expr;
pub mod grid;
pub mod harness;
pub mod paths;
pub mod pide;
pub mod value2;

pub use controls::{ControlGrid, ControlPoint, GeneratorSpec, JumpSlope, JumpValues, LevyMeasure};
pub use error::{ConfigIssue, Error, Result};
pub use expr::Expr;
pub use grid::{SpaceTimeGrid, ValueField};
