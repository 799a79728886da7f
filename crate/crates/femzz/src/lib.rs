//! Adaptive finite elements for the 2D linear heat equation with
//! gradient-recovery a posteriori error control.
//!
//! The crate provides a newest-vertex bisection mesh, Lagrange P1..P4 spaces,
//! backward-Euler time stepping, recovery-based error indicators with a
//! precomputable coarsening preindicator, the space/time adaptive loop, and a
//! benchmark harness for convergence-order and effectivity studies.

pub mod coarsen_predict;
pub mod fespace;
pub mod heat_stepper;
pub mod adaptivity;
pub mod benchmarks;
pub mod indicators;
pub mod mesh;
pub mod recovery;
pub mod sparse;
