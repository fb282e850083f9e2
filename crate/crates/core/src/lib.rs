//! Matched bipartite stochastic block model with node covariates.
//!
//! Two node sets share `K` communities; an edge between side-1 node `i` and
//! side-2 node `j` has rate `p` when both carry the same community label and
//! `q` otherwise. Each side may carry Gaussian covariates whose means are
//! tied to the shared community centers, and per-node degree parameters can
//! be switched on for heterogeneous degrees.
//!
//! The crate provides a simulator ([`generator`]), spectral initializers
//! ([`spectral`]), a mean-field variational fitter ([`vb`]) with its
//! objective ([`elbo`]), evaluation metrics ([`eval`]), file formats
//! ([`io`]) and a parallel simulation driver ([`sweep`]).

pub mod elbo;
pub mod error;
pub mod eval;
pub mod generator;
pub mod graph;
pub mod io;
pub mod kmeans;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod spectral;
pub mod sweep;
pub mod vb;

pub use elbo::elbo;
pub use error::{Error, Result};
pub use graph::{BipartiteGraph, Edge};
pub use model::{
    BlockParams, CovariateParams, CovariateSet, DegreeParams, FitState, Likelihood, ModelParams, Side, SoftLabels,
    VariationalGaussians,
};
pub use spectral::{InitMethod, InitSpec};
pub use vb::{fit, FitOptions, FitResult, PqInit};
