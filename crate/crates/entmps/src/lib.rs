//! Unitary matrix-product-state (MPS) classifiers for square grayscale
//! images, with entanglement-guided architecture optimization.
//!
//! The pieces, bottom up:
//!
//! - [`tensor`] / [`linalg`]: dense tensors, contraction, Jacobi SVD,
//!   Householder QR, polar (nearest-isometry) factors.
//! - [`data`]: MNIST IDX ingestion, class pairs, 2D DCT, zigzag paths,
//!   linearization and the flat dataset cache.
//! - [`feature`]: the cos/sin feature map from scalars to unit `d`-vectors.
//! - [`model`]: the MPS classifier, canonical forms, evaluation and the
//!   checksummed model container.
//! - [`trainer`]: sweep optimizer with running environment accumulation and
//!   cached partial contractions.
//! - [`entropy`]: single-site and bipartite entanglement entropy profiles.
//! - [`architect`]: entropy-guided path reordering, length truncation and the
//!   full optimization pipeline.
//! - [`cli`]: batch subcommands over config files, emitting CSV/JSON.
//!
//! With the default `parallel` feature, per-sample work fans out over rayon;
//! reductions run over fixed-size chunks combined in a fixed order, so
//! results are independent of thread count. Disabling the feature falls back
//! to sequential loops with identical output.

pub mod architect;
pub mod cli;
pub mod data;
pub mod entropy;
pub mod trainer;
pub mod feature;
pub mod linalg;
pub mod model;
pub mod par;
pub mod tensor;
