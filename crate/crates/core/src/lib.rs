//! Low-shot transfer detection: an SSD-style bounding-box regressor feeding
//! a Faster-RCNN-style region classifier, pre-trained on a large source
//! domain and fine-tuned on a few-shot target domain with background
//! depression and transfer-knowledge regularization.

pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod rng;
pub mod synthdata;
pub mod transfer;

pub use error::{LstdError, Result};
