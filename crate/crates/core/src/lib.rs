//! Language-driven 3D affordance grounding on point clouds.
//!
//! The crate is organised bottom-up: [`tensor`] is a small reverse-mode
//! differentiation engine; [`text`], [`backbone`], [`fusion`], [`decoder`] and
//! [`apa`] are the model stages; [`objectives`] and [`metrics`] score them;
//! [`data`] generates synthetic part-labelled shapes with instructions; and
//! [`model`], [`train`] and [`checkpoint`] wire everything into a trainable,
//! reproducible pipeline.

pub mod error;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub mod apa;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod diagnostics;
pub mod fusion;
pub mod io;
pub mod metrics;
pub mod model;
pub mod text;
pub mod train;
