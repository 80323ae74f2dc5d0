//! Random-walk Metropolis on two-scale ("ridged") densities
//!
//! ```text
//! pi_eps(x, y) = eps^{-n_y} exp{ A(x) + B(x, y / eps) }
//! ```
//!
//! The crate simulates RWM chains on these targets in the standardized
//! coordinates `(x, u = y / eps)` and provides the objects needed to compare
//! them with their small-`eps` limits: the non-constant-volatility diffusion
//! limit (`diffusion`), the Markov jump-process limit of large proposals
//! (`jump`), the product-form high-dimensional acceptance rule (`highdim`),
//! and the curved-manifold generalisation (`manifold`, conjecture only).
//!
//! Every stochastic routine takes an externally owned random stream; parallel
//! runs derive one stream per chain from `(master_seed, chain_index)` through
//! [`rng::stream`], so results never depend on the thread count.

pub mod accept;
pub mod diagnostics;
pub mod diffusion;
pub mod error;
pub mod experiments;
pub mod highdim;
pub mod jump;
pub mod manifold;
pub mod quadrature;
pub mod rng;
pub mod rwm;
pub mod targets;

pub use accept::AcceptFunction;
pub use error::{Error, Result};
pub use rwm::{ChainState, ProposalRule, StepMode, StepSize, Trajectory};
pub use targets::{BuiltinTargetId, MultiscaleTarget, RidgeModel};
