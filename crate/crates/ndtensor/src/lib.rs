//! Minimal dense-tensor engine with reverse-mode gradients for exactly the
//! operator set a learned light-field codec needs: strided/dilated
//! convolution, transposed convolution, GELU, GDN/IGDN, squeeze-excitation
//! attention, concat/slice/upsample plumbing, and the two bin-likelihood
//! ops that drive rate estimation.
//!
//! Everything is double precision and deterministic: the same inputs give
//! bit-identical outputs.

pub mod checkpoint;
pub mod conv;
pub mod density;
pub mod error;
pub mod gdn;
pub mod gradcheck;
pub mod graph;
pub mod scalar;
pub mod tensor;

pub use checkpoint::{fnv1a64, hash_file, ParamEntry, ParamId, ParamStore};
pub use conv::{ConvSpec, DeconvSpec, PadMode, PadSpec};
pub use error::TensorError;
pub use gdn::{GdnParams, BETA_MIN};
pub use graph::{Graph, NodeId};
pub use tensor::{dims4, Tensor};
