//! Desk-scale contextual caption generator with reverse-mode differentiation
//! written against dense matrices. Two architectures (prefix-conditioned
//! decoder and encoder-decoder), two stream blocks (dynamic convolution and
//! causal self-attention), AdamW training with linear warmup, greedy/beam
//! decoding, and a finite-difference gradient checker.

pub mod checkpoint;
pub mod generate;
pub mod gradcheck;
pub mod layers;
pub mod net;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use generate::{DecodeMode, DecoderState};
pub use net::{clean_instance, Arch, BlockKind, ContextInput, Model, ModelConfig, ModelParams};
pub use train::{train, LossCurve, TrainConfig, TrainItem};
