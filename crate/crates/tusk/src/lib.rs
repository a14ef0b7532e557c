//! TUSK: unsupervised multi-instance keypoint learning.
//!
//! An image autoencoder whose latent code is a sparse set of keypoints with
//! descriptors. A single heatmap detects any number of instances; descriptors
//! are clustered around learned prototypes with a sliced Wasserstein
//! objective over a GMM, plus a k-means pull and a thin-plate-spline
//! equivariance constraint. Includes procedural dataset generators and the
//! full evaluation stack (ARI, detection IoU, bipartite prototype/class
//! matching, landmark regression).

pub mod checkpoint;
pub mod cli;
pub mod datagen;
pub mod decoder;
pub mod diff;
pub mod encoder;
pub mod error;
pub mod evalmetrics;
pub mod linalg;
pub mod nn;
pub mod par;
pub mod prototypes;
pub mod rng;
pub mod trainer;
pub mod transforms;

pub use error::{Result, TuskError};
