//! Few-shot crack segmentation under low light.
//!
//! A dual-branch prototype network: every image is processed both as RGB
//! and as its Retinex reflectance by one shared backbone. Support prototypes
//! from both branches are fused, a cross-similarity prior mask localises the
//! crack in the query, attention and an atrous pyramid enhance the query
//! features, and a self-supported prototype classifies every query pixel by
//! cosine similarity.

pub mod autograd;
pub mod cspmg;
pub mod data;
pub mod encoder;
pub mod engine;
pub mod error;
pub mod imageio;
pub mod loss;
pub mod model;
pub mod msfe;
pub mod nn;
pub mod primitives;
pub mod prototype;
pub mod retinex;
pub mod tensor;
pub mod types;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
pub use types::{BinaryMask, Branch, Episode, FeatureMap, ImageTensor, Level, Polarity, Prototype, Sample};
