//! Diversity weights for datasets.
//!
//! Per-example probabilities are chosen to maximise the probability-weighted
//! Vendi Score of a dataset, regularised by the entropy of the probabilities.
//! The crate also provides diversity-aware evaluation of generated samples
//! (Vendi Score, FID, weighted FID, mutual-information score, precision and
//! recall), an alias-table importance sampler, and a weighted-EM Gaussian
//! mixture used to demonstrate mode balancing end to end.
//!
//! Module map:
//!
//! | module | contents |
//! |--------|----------|
//! | [`linalg`] | feature matrices, row normalisation, Gram matrices, `eigh` |
//! | [`io`] | CSV and `DWM1` binary matrix formats |
//! | [`vendi`] | weighted similarity, Vendi Score, entropy, gradients |
//! | [`optimizer`] | log-space Adam maximisation of the weighted Vendi Score |
//! | [`sampler`] | Walker/Vose alias tables, batch sampling with replacement |
//! | [`metrics`] | Gaussian statistics, FID / wFID, MI score, precision/recall |
//! | [`gmm`] | weighted EM for Gaussian mixtures and the mode-balancing demo |
//! | [`cli`] | the `divw` command-line front end |

pub mod cli;
pub mod error;
pub mod gmm;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod optimizer;
pub mod par;
pub mod sampler;
pub mod vendi;

pub use error::{Error, Result};
pub use linalg::{eigh, gram_matrix, normalize_rows, EigenResult, FeatureMatrix, SimilarityMatrix};
pub use optimizer::{optimize_weights, OptimizationTrace, OptimizerConfig};
pub use par::Execution;
pub use vendi::{shannon_entropy, vendi_score, ProbabilityVector, VendiEvaluation, VendiKernel};
