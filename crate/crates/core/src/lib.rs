//! Steganalysis of low-bit-rate VoIP streams from codec descriptors.
//!
//! The crate covers the whole pipeline: synthetic cover/stego descriptor
//! generation ([`descriptors`]), CutMix obfuscation ([`augment`]), the hybrid
//! attention classifier ([`model`]), contrastive + cross-entropy training over
//! cyclic triplets ([`training`]) and evaluation grids, latency benchmarking
//! and feature export ([`eval`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod config;
pub mod descriptors;
pub mod error;
pub mod eval;
pub mod model;
pub mod training;

pub use descriptors::{
    DatasetHeader, DescriptorKind, DescriptorMatrix, VoipSegment, FRAMES_PER_SECOND,
};
pub use error::{Error, Result};
pub use augment::CutMixConfig;
pub use config::Config;
pub use model::{Checkpoint, HamModel, Mode, ModelConfig};
pub use training::{TrainConfig, TrainOutcome};
