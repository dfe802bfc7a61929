//! Framework-free learned camera ISP pipeline.
//!
//! A small tensor/autograd engine ([`tensor`], [`ops`], [`tape`]), an
//! attention UNet RAW-to-sRGB model ([`arch`]), its composite training loss
//! ([`loss`]), image quality metrics ([`metrics`], [`color`]), analytic
//! complexity accounting ([`complexity`]), dataset IO ([`data`]) and a
//! desk-scale trainer ([`trainer`]).

pub mod arch;
pub mod color;
pub mod complexity;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod ops;
pub mod perceptual;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
