//! A compact CPU neural-network stack: 4D tensors, convolution layers with
//! hand-written backward passes, U-Net and plain CNN backbones, and Adam.

mod adam;
mod layers;
mod net;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use layers::{BatchNorm2d, Conv2d, ConvTranspose2x2, Param};
pub use net::{Architecture, Denoiser, DenoiserSpec, DenoiserState, Network, Tape};
pub use tensor::{Real, Tensor};
