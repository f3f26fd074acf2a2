//! Desk-scale convolutional encoder with a hand-written reverse pass, its
//! momentum twin, SGD and checkpoint persistence.

pub mod checkpoint;
pub mod encoder;
pub mod momentum;
pub mod optim;
pub mod params;
pub mod scalar;

pub use checkpoint::{load_params, save_params, Checkpoint};
pub use encoder::{backward, backward_tape, features, features_chunked, forward, forward_chunked, forward_tape, Tape};
pub use momentum::{momentum_update, MomentumPair};
pub use optim::{cosine_lr, Sgd};
pub use params::{Activation, ArchConfig, EncoderParams, Tensor};
pub use scalar::Scalar;
