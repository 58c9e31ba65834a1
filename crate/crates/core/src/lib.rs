//! Global error amplification for numerical ODE trajectories.
//!
//! The global error of a computed trajectory is bounded by `2‖L†‖∞·δ`, where
//! `δ` bounds the local error and `L` is the linearised step-constraint
//! operator for one of four error models:
//!
//! | case | variables              | analysis                          |
//! |------|------------------------|-----------------------------------|
//! | 1    | `x_1..x_N`             | forward error                     |
//! | 2    | `x_0..x_N`             | shadowing                         |
//! | 3    | `x_1..x_N`, `h_0..h_{N-1}` | forward error, time rescaling |
//! | 4    | `x_0..x_N`, `h_0..h_{N-1}` | shadowing, time rescaling     |
//!
//! Modules:
//!
//! * [`ode`]: Dormand–Prince integration with residual capture, forward-Euler
//!   propagators, Adams–Bashforth 2.
//! * [`models`]: Lorenz '63 and a sine-Galerkin Kuramoto–Sivashinsky truncation.
//! * [`amplification`]: the four operators, their block-tridiagonal normal
//!   equations and the exact / Hager / residual estimators of `‖L†‖∞`.
//! * [`householder`]: continuous Householder triangularisation of the
//!   linearised flow.
//! * [`bvp`]: Lobatto IIIA collocation with damped Newton.
//! * [`manifold`]: evaluation of the inertial manifold graph `x = Ψ(t, y)`,
//!   time stepping on it, and manifold-level propagators.
//!
//! The crate is `no_std` (with `alloc`) unless the `std` feature is enabled.

#![cfg_attr(not(any(feature = "std", test)), no_std)]
// `!(a > b)` comparisons reject NaN on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod amplification;
pub mod bvp;
pub mod householder;
pub mod manifold;
pub mod models;
pub mod ode;

pub(crate) mod dense;

pub use amplification::{AmplificationError, AmplificationReport, CaseId};
pub use ode::{OdeError, Trajectory, TransitionSet, VectorField};
