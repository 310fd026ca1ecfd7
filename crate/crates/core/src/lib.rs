//! Cluster-guided unsupervised domain adaptation for speaker embeddings.
//!
//! The pipeline pre-trains a small embedding network on labeled source data
//! (angular-margin classification) jointly with a contrastive objective on
//! unlabeled target data, fine-tunes it with a contrastive center loss
//! against periodically refreshed spherical k-means clusters, pseudo-labels
//! the target domain and finally trains a fresh network on the union of the
//! source classes and the pseudo classes.
//!
//! Module map:
//!
//! | module        | contents                                                   |
//! |---------------|------------------------------------------------------------|
//! | [`datagen`]   | seeded two-domain synthetic speakers, augmented views, trials |
//! | [`embednet`]  | feed-forward embedding network, backprop, Adam, grad check |
//! | [`losses`]    | score functions, contrastive / AAM / center losses         |
//! | [`clustering`]| spherical k-means and pseudo labels                        |
//! | [`metrics`]   | EER, minDCF, purity, NMI, Calinski-Harabasz, silhouette    |
//! | [`pipeline`]  | the five training stages and the results document          |
//! | [`config`]    | configuration file parsing                                 |
//! | [`cli`]       | command-line dispatch                                      |

// Negated comparisons reject NaN on purpose; index loops follow the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod clustering;
pub mod config;
pub mod datagen;
pub mod embednet;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
