//! Sharp and orthogonal off-policy evaluation of a target policy's worst- and
//! best-case value when the transition kernel may be perturbed by a bounded
//! density ratio.

pub mod approx;
pub mod bellman;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod fqe;
pub mod mdp;
pub mod mil;
pub mod oracle;
pub mod rng;

pub use error::{Error, Result};
