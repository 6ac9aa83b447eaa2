//! Continual-pretraining data construction, a toy masked language model,
//! relevance scoring and a two-tier serving cache for query-item search.

pub mod config;
pub mod corpus;
pub mod dke;
pub mod embed;
pub mod error;
pub mod icp;
pub mod io;
pub mod metrics;
pub mod mlm;
pub mod pet;
pub mod pretrain;
pub mod rcd;
pub mod serving;
pub mod synth;
pub mod vocab;

pub use error::{Error, Result};
