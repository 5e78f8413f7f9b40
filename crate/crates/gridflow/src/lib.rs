//! Power-flow scenario generation and evaluation toolkit.
//!
//! The crate models AC networks in per-unit, solves the steady-state
//! power-flow equations with Newton's method, traces loadability curves
//! to the voltage-stability limit, perturbs base cases into labelled
//! scenario corpora, and scores voltage predictions against the nodal
//! balance equations.

pub mod balance;
pub mod caseio;
pub mod cpf;
pub mod grid;
pub mod metrics;
pub mod newton;
pub mod scenario;
