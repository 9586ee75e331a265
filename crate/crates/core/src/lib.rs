//! Cross-modal momentum contrastive learning for text-to-image person
//! retrieval, trained and evaluated on synthetic identities.

pub mod checks;
pub mod cm_moco;
pub mod config;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod objectives;
pub mod parallel;
pub mod plot;
pub mod retrieval;
pub mod synth_data;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
