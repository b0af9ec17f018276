//! Dense tensors, a reverse-mode tape, AdamW and the warm-up schedule.

mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{clip_global_norm, lr_at_step, AdamW, AdamWConfig};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{logistic_loss, Gradients, Graph, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
