//! Credit-loss valuation engine.
//!
//! The crate implements a full desk-scale pipeline for valuing post-horizon
//! credit losses of a bullet loan under a latent-factor rating transition
//! model:
//!
//! * [`bayes`] — linear-Gaussian Kalman filter, RTS smoother and iterated
//!   mode estimation for multinomial observation densities;
//! * [`transition`] — the multinomial-logit transition model, migration
//!   simulation, cumulative PD term structures and approximate-ML
//!   calibration;
//! * [`lgd`] — AR(1) collateral dynamics with a closed-form expected-LGD
//!   formula plus a Monte Carlo cross-check;
//! * [`projection`] — dimension reduction of factor paths, either through
//!   the Bayesian smoother (transition probabilities treated as
//!   observations of a low-dimensional model) or through PCA;
//! * [`grid`] — training and querying of scattered-data valuation grids
//!   mapping low-dimensional coordinates to expected cumulative PD curves;
//! * [`loss`] — per-scenario loan losses and risk metrics (EL, VaR);
//! * [`experiments`] — the batch experiment stages behind the CLI.
//!
//! All stochastic code draws from counter-based ChaCha streams keyed by
//! `(seed, domain, index)` so parallel and serial runs produce identical
//! output; see [`rng`].

pub mod bayes;
pub mod config;
pub mod error;
pub mod experiments;
pub mod grid;
pub mod lgd;
pub mod loss;
pub mod math;
pub mod optim;
pub mod projection;
pub mod rng;
pub mod transition;

pub use error::{Error, Result};
