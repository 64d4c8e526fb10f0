//! Audio-aware video-grounded dialogue.
//!
//! A compact encoder-decoder dialogue model trained with question-conditioned
//! audio/video weighting ([`sal`]) and masked-audio reconstruction with a
//! ranking upper bound ([`rle`]), plus beam-search decoding, caption metrics
//! and the evaluation reports built on them.

pub mod autograd;
pub mod data;
pub mod decode;
pub mod dlm;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rle;
pub mod sal;
pub mod session;
pub mod trainer;

pub use error::{HearError, Result};
