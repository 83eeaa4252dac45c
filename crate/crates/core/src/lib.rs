//! Two-stage band-split Mamba-2 music source separation.
//!
//! The crate builds the full pipeline from scratch: STFT front end, band-split
//! encoder, bidirectional Mamba-2 dual-path core (with the SSD sequence layer
//! exposed in both its linear-recurrence and quadratic dual forms), two-stage
//! mask-plus-residual estimation, training with the two-stage loss, and SDR
//! evaluation.
//!
//! All numerics are generic over the scalar type ([`Scalar`]): `f64` is the
//! verification precision, `f32` the fast training/inference mode. Concrete
//! aliases for the main entry types live at the crate root.

pub mod bands;
pub mod config;
pub mod data;
pub mod dualnet;
pub mod error;
pub mod evaluation;
pub mod fft;
pub mod graph;
pub mod kernels;
pub mod mat;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod spectral;
pub mod ssd;
pub mod training;
pub mod verify;
pub mod wav;

pub use config::{ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use mat::Mat;
pub use scalar::Scalar;
pub use spectral::{ComplexSpectrogram, StftConfig};
pub use wav::{Audio, WavFormat};

/// 32-bit (fast) concrete aliases.
pub type Mat32 = Mat<f32>;
pub type Spectrogram32 = ComplexSpectrogram<f32>;
pub type ModelParams32 = model::ModelParams<f32>;
pub type Feature32 = bands::Feature<f32>;

/// 64-bit (verification) concrete aliases.
pub type Mat64 = Mat<f64>;
pub type Spectrogram64 = ComplexSpectrogram<f64>;
pub type ModelParams64 = model::ModelParams<f64>;
pub type Feature64 = bands::Feature<f64>;
