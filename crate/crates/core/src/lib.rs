//! A desk-scale testbench for global-structure sensitivity.
//!
//! The crate generates structure-disrupted images by Gram-matrix texture
//! synthesis, scores feature extractors on the resulting odd-one-out
//! triplets, trains small classifiers with the 2n-class scheme, and runs
//! diagnostic probes. It also contains the protocol engine behind the
//! human psychophysics server.
//!
//! All numerics run on a small reverse-mode autodiff engine ([`Graph`])
//! over dense `f64` tensors ([`Tensor`]).

pub mod autodiff;
pub mod benchmark;
pub mod dataset;
pub mod dist;
pub mod distinguish;
pub mod error;
pub mod feature_net;
pub mod fixtures;
pub mod image_io;
pub mod optim;
pub mod probe;
pub mod psycho;
pub mod saliency;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod weights;

mod hashing;

pub use autodiff::{Graph, PoolKind, Var};
pub use error::{Error, Result};
pub use feature_net::{FeatureNet, FeatureNetConfig};
pub use hashing::{sha256_file, sha256_hex};
pub use synth::{synthesize, SynthesisConfig, SynthesisResult};
pub use tensor::Tensor;
