//! Averaging-based detection and certification of torus (Neimark–Sacker)
//! bifurcations in periodically perturbed planar differential equations.
//!
//! The pipeline runs through the modules in order: [`averaging`] computes the
//! averaged functions of a [`ode::FieldSpec`], [`hopf`] locates a Hopf point of
//! the first non-vanishing one, [`nsmap`] works on the true Poincaré map
//! (fixed points, critical curve, Lyapunov coefficients) and [`torus`] samples
//! the section to certify the bifurcating invariant curve.

pub mod expr;
pub mod ode;
pub mod averaging;
pub mod hopf;
pub mod nsmap;
pub mod torus;
pub mod paperlab;
pub mod pipeline;
