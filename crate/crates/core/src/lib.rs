//! Nonrandomized Markov equilibrium policies for finite-horizon,
//! time-inconsistent stochastic control.
//!
//! The objective of the self at `(t, x)` is
//!
//! ```text
//! J_t(x; π) = E[ Σ_{k=t}^{T−1} C_k(t, x, x_k, u_k) + F(t, x, x_T) ] + G(t, x, E[H(x_T)])
//! ```
//!
//! It depends on the evaluation point and is nonlinear in the law of
//! `x_T`, so the Bellman principle fails. An equilibrium policy is one from
//! which no self gains by a one-step deviation. [`solver::solve`] computes
//! it by backward induction on the extended Bellman equation;
//! [`evaluate::verify_equilibrium`] certifies it independently at grid
//! resolution.
//!
//! ```no_run
//! use markov_equilibrium::examples::{mv_closed_form, mv_model, MeanVarianceParams};
//! use markov_equilibrium::evaluate::{verify_equilibrium, ProbeControls};
//! use markov_equilibrium::solver::{solve, SolverOptions};
//!
//! let params = MeanVarianceParams::default();
//! let model = mv_model(&params)?;
//! let dk = model.discretize()?;
//! let sol = solve(&model, &dk, &SolverOptions::default())?;
//! let oracle = mv_closed_form(&params)?;
//! assert!((sol.policy.control(1, 100) - oracle.control(1)).abs() < 1e-6);
//! let report = verify_equilibrium(&model, &dk, &sol.policy, ProbeControls::ControlGrid, 1e-6)?;
//! assert!(report.certified());
//! # Ok::<(), markov_equilibrium::Error>(())
//! ```

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod examples;
pub mod kernel;
pub mod model;
pub mod noise;
mod par;
pub mod policy;
pub mod search;
pub mod solver;

pub use error::{Error, Result};
pub use par::with_workers;
