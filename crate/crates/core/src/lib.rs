//! Class-imbalance tooling for multi-class image classification: grouped
//! stratified splits, class weighting and balanced sampling, crop-based
//! inference, a stacked SVM over crop predictions, and ensemble search.

pub(crate) mod csvio;

pub mod balance;
pub mod cropper;
pub mod ensemble;
pub mod error;
pub mod ingest;
pub mod meta;
pub mod metrics;
pub mod pipeline;
pub mod splits;
pub mod trainer;

pub use csvio::{format_sig9, write_atomic};
pub use error::Error;
