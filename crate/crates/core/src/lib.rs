//! Stochastic localization laboratory.
//!
//! Simulates Eldan's α-schemes and joint localization schemes over
//! finite-support measures, estimates the transport costs of the couplings
//! they induce, and fits parametric pushforward models by minimizing the
//! empirical SL distance.
//!
//! | module | contents |
//! |--------|----------|
//! | [`linalg`] | symmetric eigendecomposition, PSD powers, control matrices |
//! | [`measures`] | discrete and Gaussian measures, moments, Halton points |
//! | [`engine`] | single-measure SL engine, Gaussian closed-form backend |
//! | [`joint`] | joint SL with shared noise, coupling samples |
//! | [`metrics`] | SL distances, KL representation, exact W2 baselines |
//! | [`fit`] | Legendre pushforward models and the damped Newton fit |
//! | [`presets`] | built-in test distributions |

pub mod engine;
pub mod error;
pub mod fit;
pub mod joint;
pub mod linalg;
pub mod measures;
pub mod metrics;
pub mod parallel;
pub mod presets;

pub use error::{Error, Result};
