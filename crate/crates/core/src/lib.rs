//! Post-training uint8 quantization with channel-wise binary shift
//! equalization (WES), layer-wise and channel-wise baselines, and a
//! bit-exact fixed-point convolution simulator.
//!
//! The pipeline for a float model chain is:
//!
//! 1. fold batch norm into the preceding convolution ([`bnfold`]),
//! 2. optionally prune small weights ([`pruning`]),
//! 3. equalize channel ranges with power-of-two shifts ([`wes`]),
//! 4. quantize weights, calibrate activations, quantize bias and derive the
//!    requantization multipliers ([`quantizer`]),
//! 5. serialize ([`qformat`]) and run integer-only inference ([`fixedpoint`]).

pub mod bnfold;
pub mod error;
pub mod fixedpoint;
pub mod metrics;
pub mod model;
pub mod nelder_mead;
pub mod pruning;
pub mod qformat;
pub mod quantizer;
pub mod reference;
pub mod synth;
pub mod tensor;
pub mod wes;

pub use error::{Error, Result};
pub use model::{load_model, save_model, ModelGraph};
pub use qformat::{load_quantized, save_quantized};
pub use quantizer::{quantize_model, QuantizeOptions, QuantizedLayer, QuantizedModel, Scheme};
pub use tensor::Tensor;
