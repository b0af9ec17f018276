//! The ranker network and its losses.

pub mod gradcheck;
mod loss;
mod net;

pub use loss::{ranking_loss, total_loss};
pub use net::{DropoutRng, ModelConfig, Nar, Outputs, Prediction};
