//! Post-network recognition pipeline: activation tensors in, per-class AP out.
//!
//! Local descriptors from conv maps go through PCA, a diagonal GMM and
//! Fisher-vector encoding; global vectors and softmax scores are fused across
//! an object stream and a scene stream; one-vs-rest linear SVMs classify.

pub mod augment;
pub mod classify;
pub mod error;
pub mod eval;
pub mod fisher;
pub mod fusion;
pub mod gmm;
pub mod io;
pub mod normalize;
pub mod numeric;
pub mod pca;
pub mod pipeline;
pub mod tensors;

pub use error::{Error, Result};
pub use tensors::{
    DenseVector, FeatureMap, GlobalVector, Manifest, ManifestEntry, ScoreVector, Split, Stream,
    Tensor,
};
