//! HYDRA-HGR: hybrid macro/micro vision-transformer gesture recognition from
//! high-density surface EMG.
//!
//! The pipeline runs bottom-up through these modules:
//!
//! * [`signal_model`] synthesizes multi-channel recordings as convolutive
//!   mixtures of motor-unit action potentials with known ground truth.
//! * [`preprocess`] turns recordings into μ-law normalized envelopes and
//!   fixed-size windows for the Macro path.
//! * [`decomposition`] separates raw windows into motor-unit spike trains.
//! * [`muap`] averages spike-triggered segments into MUAP waveforms and 8×16
//!   peak-to-peak images for the Micro path.
//! * [`vit`] is a vision transformer with hand-written backpropagation.
//! * [`fusion`] concatenates frozen Macro and Micro class tokens and trains a
//!   two-layer head.
//! * [`eval`] runs leave-one-repetition-out cross-validation and reports.

pub mod decomposition;
pub mod error;
pub mod eval;
pub mod features;
pub mod fusion;
pub mod layout;
pub mod muap;
pub mod nn;
pub mod preprocess;
pub mod signal_model;
pub mod tensor_io;
pub mod vit;

pub use error::{Error, Result};
pub use tensor_io::{read_tensor, write_tensor, SeededRng, Tensor};
