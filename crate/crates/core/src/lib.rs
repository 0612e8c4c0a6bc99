//! Heatmap-based unsupervised debugging of small image networks.
//!
//! The crate covers the automated part of the workflow:
//!
//! 1. [`micronet`] trains and runs a small convolutional network and records activations.
//! 2. [`lrp`] turns a traced forward pass into per-layer relevance heatmaps.
//! 3. [`heatmap`] normalizes heatmaps per layer and builds Euclidean distance matrices.
//! 4. [`cluster`] runs Ward-linkage agglomerative clustering, scores cuts with the weighted
//!    intra-cluster distance and picks the cluster count with a knee-point detector.
//! 5. [`selector`] assigns unlabeled improvement images to root-cause clusters under quotas.
//! 6. [`retrain`] bootstrap-balances the selected images and fine-tunes the network.
//! 7. [`synthlab`] renders parametric synthetic scenes and runs the evaluation harness.

pub mod cluster;
pub mod error;
pub mod heatmap;
pub mod lrp;
pub mod micronet;
pub mod retrain;
pub mod selector;
pub mod synthlab;

pub use error::{Error, Result};
