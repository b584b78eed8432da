//! Speaker embeddings from an x-vector network trained with softmax or
//! margin-based softmax losses, scored with an LDA + PLDA back-end and
//! evaluated with EER and minDCF.

mod binio;
pub mod backend;
pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod numeric;
pub mod trainer;

pub use error::{Error, Result};
pub use numeric::{Matrix, Rng};
