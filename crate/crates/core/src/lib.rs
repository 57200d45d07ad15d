//! Martingale-based control of general jump processes.
//!
//! The crate evaluates controlled Lévy-type generators, solves stationary and
//! finite-horizon HJB integro-differential equations by policy iteration,
//! simulates controlled semimartingales, and runs statistical checks of the
//! Bellman-process sub/martingale property, transversality and integrability
//! conditions. Closed-form benchmarks (jump-to-origin control, a free-boundary
//! problem and quadratic control with a Riccati solution) live in
//! [`examples`] and [`lq`].

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod action;
pub mod dynamics;
pub mod error;
pub mod examples;
pub mod generator;
pub mod hjb;
pub mod lq;
pub mod measures;
pub mod problem;
pub mod verify;

pub use action::{Action, ActionSpec, Jumps};
pub use error::{Error, Result};
pub use generator::{AnalyticField, GeneratorScheme, ScalarField};
pub use measures::{Atom, DensityGrid, JumpMeasure, MeasureSpec};
