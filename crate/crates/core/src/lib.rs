//! Dense convolutional networks with sparse feature reactivation.
//!
//! Each dense layer consumes the whole feature buffer through a learned group
//! convolution and, besides appending its output, refreshes the older
//! features through a sparse 1x1 "reactivation" convolution. Both masked
//! layers are pruned in stages during training and compiled into ordinary
//! group convolutions plus index maps for inference.

pub mod analysis;
pub mod cli;
pub mod compile;
pub mod config;
pub mod container;
pub mod error;
pub mod gradcheck;
pub mod lgc;
pub mod network;
pub mod nn;
pub mod ops;
pub mod reference;
pub mod schedule;
pub mod sfr;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Matrix, Shape4, Tensor4};
