//! Bayesian variable selection for generalized linear mixed models.
//!
//! Fixed and random effects are switched in and out of the model by
//! indicator variables sampled jointly with the parameters. Random-effect
//! covariances use a modified Cholesky factorization so that dropping an
//! effect zeroes its row and column exactly.

pub mod error;
pub mod io;
pub(crate) mod linalg;
pub mod model;
pub mod ppc;
pub mod priors;
pub mod reparam;
pub mod sampler;
pub mod select;
pub mod simulate;

pub use error::{Error, Result};
pub use model::{
    Dataset, Family, FamilyKind, Hyperparameters, Link, ModelSpec, ParameterState, RandomBlockSpec, RandomDesign,
    SelectionMode,
};
pub use sampler::{run_chains, run_chains_with, Initialization, SamplerConfig, Trace};
