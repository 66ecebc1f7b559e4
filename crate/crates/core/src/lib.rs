//! Hypernetwork-driven image editing at desk scale.
//!
//! A hypernetwork reads an image and a text-direction embedding and emits
//! multiplicative factors that reassign the convolution kernels of a small
//! style-modulated generator. Everything here is `no_std` + `alloc`: the
//! tensor engine, every model, training loops, metrics and the procedural
//! dataset. File formats and the command line live in the `hyperedit` crate.

#![no_std]

extern crate alloc;

pub mod autograd;
pub mod embedspace;
pub mod error;
pub mod evalkit;
pub mod hypereditor;
pub mod image;
pub mod layerselect;
pub mod nn;
pub mod rng;
pub mod synthworld;
pub mod tensor;
pub mod toygen;
pub mod trainloop;

pub use error::Error;
pub use tensor::Tensor;

pub type Result<T, E = Error> = core::result::Result<T, E>;
