//! Inference engine, cost accounting and verification suite for the iFormer
//! family of mobile hybrid convolution/attention networks.
//!
//! Tensors are dense `f32` in NCHW row-major order. Every forward that cares
//! about memory traffic takes a [`Trace`], which counts physical layout
//! changes and records attention calls and stage shapes.

pub mod attention;
pub mod count;
pub mod error;
pub mod fusion;
pub mod io;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod verify;

pub use count::{count_macs, count_params, mac_breakdown, shma_complexity_formula};
pub use error::{Error, Result};
pub use fusion::{fold_bn_into_conv, fuse_model};
pub use io::WeightStore;
pub use model::{preset_config, InitPolicy, Model, ModelConfig};
pub use tensor::{Tensor, Trace};
