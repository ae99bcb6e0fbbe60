//! CPU inference engine, static cost analyzer and face-verification pipeline
//! for the MobiFace face-embedding network.
//!
//! - [`tensor`]: dense `f32` NCHW tensors
//! - [`ops`]: convolution, batch norm (and folding), PReLU, FC, shortcuts
//! - [`graph`]: bottleneck builders, the stock architecture, shape tracing
//! - [`executor`]: forward pass and the flip-head embedding path
//! - [`analyzer`]: parameter/MAC/activation accounting, downsampling checks
//! - [`weights`]: the `MBFW` weight container and seeded initialization
//! - [`verify`]: preprocessing, cosine similarity, k-fold pair protocol
//! - [`oracle`]: naive reference kernels for cross-checking [`ops`]
//! - [`crosscheck`]: seeded randomized comparisons of [`ops`] against [`oracle`]

pub mod analyzer;
pub mod crosscheck;
pub mod error;
pub mod executor;
pub mod graph;
pub mod image;
pub mod ops;
pub mod oracle;
pub mod tensor;
pub mod verify;
pub mod weights;

pub use error::{Error, Result};
pub use executor::Model;
pub use graph::{build_mobiface, Architecture, BlockSpec, FlipHeadSpec, NetworkSpec};
pub use tensor::Tensor;
pub use weights::WeightStore;
