//! Single-encoder referring image segmentation: a shared-attention
//! vision-language encoder, shared FPN and shared mask decoder, trained and
//! evaluated on a synthetic referring-expression corpus.

pub mod ablation;
pub mod attention;
pub mod autodiff;
pub mod complexity;
pub mod config;
pub mod data;
pub mod decoder;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod fpn;
pub mod fusion;
pub mod io;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod params;
pub mod probe;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
