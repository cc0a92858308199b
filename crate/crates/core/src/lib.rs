//! Numerical workbench for the nonlinear disordered Stark lattice
//!
//! i ∂ₜuₙ + δ(uₙ₊₁ + uₙ₋₁) + n·uₙ + vₙuₙ + ε|uₙ|²uₙ = 0,  n ∈ ℤ,
//!
//! truncated to a finite site window. The crate executes, at desk scale, the
//! constructive machinery behind the existence proof of time quasi-periodic
//! localized states for this model:
//!
//! - [`weighted_ops`] — exponentially weighted operator algebra ‖A‖_r =
//!   Σ_l e^{r|l|} sup_{m−n=l}|A_{mn}| with forward-mode parameter derivatives,
//! - [`linear_kam`] — exact Töplitz first conjugation plus the quadratic KAM
//!   loop diagonalizing the linear operator, with every quantitative bound
//!   checked per step,
//! - [`quartic`] — the quartic interaction tensor in the diagonal frame and
//!   the Hamiltonian vector field,
//! - [`tf_series`] — sparse Taylor–Fourier polynomial algebra over
//!   (θ, I, q, q̄): weighted norms, Poisson brackets, gauge filtering,
//! - [`nonlinear_kam`] — action-angle reduction at the tangential sites, the
//!   homological equations, one or more nonlinear KAM steps, and the
//!   invariant-torus sampler,
//! - [`measure`] — Monte Carlo estimation of the resonant parameter measure,
//! - [`dynamics`] — direct integration of the lattice equation and
//!   localization / quasi-periodicity diagnostics.
//!
//! All operators and series carry dual-number derivatives with respect to a
//! configured set of disorder parameters, so the C¹ parameter dependence the
//! theory requires is evaluated exactly at each sampled realization.

pub mod config;
pub mod dual;
pub mod dynamics;
pub mod linear_kam;
pub mod measure;
pub mod nonlinear_kam;
pub mod quartic;
pub mod tf_series;
pub mod weighted_ops;

pub use config::RunConfig;
pub use dual::DualScalar;
pub use weighted_ops::{LatticeOperator, SiteWindow, WeightedNormValue};
