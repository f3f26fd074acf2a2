//! Filling-based masking for siamese ConvNets.
//!
//! Grid masks ([`maskgen`]) select, per region, which of two paired images
//! fills a mixture ([`mixer`]). The mixture is encoded by the online encoder
//! ([`nnet`]) and scored against clean-view keys with an InfoNCE loss whose
//! two terms are weighted by the kept-area fraction ([`objective`]).
//! [`trainer`] runs desk-scale pretraining and [`eval`] scores frozen
//! features with weighted k-NN.

pub mod augment;
pub mod batch;
pub mod bench;
pub mod datastore;
pub mod error;
pub mod eval;
pub mod maskgen;
pub mod mixer;
pub mod nnet;
pub mod objective;
pub mod rng;
pub mod trainer;

pub use batch::{BatchShape, ImageBatch, Normalization};
pub use error::{Error, Result};
pub use maskgen::{GridMask, MaskPattern, PixelMask, RatioPolicy};
pub use mixer::{FillMode, MixOutput, Pairing, PairingKind};
pub use objective::{EmbeddingBatch, KeyQueue, LossBreakdown};
pub use trainer::{TrainConfig, TrainState};
