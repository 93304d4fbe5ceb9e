//! Time-series forecasting with a fuzzy-inference token interaction layer.
//!
//! The [`fis`] module holds the interaction layer itself; [`transformer`]
//! places it (or the [`attention`] baseline) inside a variate-tokenized
//! encoder; [`training`], [`gradcheck`] and [`evaluation`] fit, verify and
//! compare models on windows produced by [`data`].

pub mod attention;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod fis;
pub mod gradcheck;
pub mod membership;
pub mod params;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
