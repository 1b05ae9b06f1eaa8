//! Dense tensors and a small convolutional network with hand-written backward passes.

pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod network;
pub mod tensor;

pub use layers::{BatchNorm, Conv2d, Layer, LayerCache, Mode, NnError, SeqGrads, Sequential};
pub use network::{NetConfig, Network, Preset, ANCHORS, HEAD_CHANNELS, VALUES_PER_ANCHOR};
pub use tensor::{Shape, Tensor};
