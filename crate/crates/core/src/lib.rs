//! Convolutional classifier engine for lung-ultrasound frames.
//!
//! The crate covers the whole path from 8-bit grayscale PGM frames to a
//! covid/healthy prediction: preprocessing and augmentation ([`imaging`]),
//! the VGG-style 13-conv network ([`arch`], [`network`], [`kernels`]),
//! training with a conv freeze mask ([`training`]), dataset manifests
//! ([`dataset`]), the LUSW weight file ([`weights`]), an NDJSON TCP
//! inference service ([`service`]) and a per-layer benchmark ([`bench`]).

pub mod arch;
pub mod bench;
pub mod classifier;
pub mod cli;
pub mod dataset;
pub mod imaging;
pub mod kernels;
pub mod network;
pub mod service;
pub mod tensor;
pub mod training;
pub mod weights;

pub use arch::{parse_arch, LayerKind, LayerSpec, NetworkSpec, ParseError, DEFAULT_ARCH};
pub use kernels::KernelMode;
pub use network::{Network, NetworkError, Prediction, ShapeError};
pub use tensor::{Tensor, TensorError};
pub use weights::{WeightStore, WeightsError};
