//! Small dense reverse-mode autodiff in double precision, with the layers,
//! losses, optimizer, and checkpoint format used by the trajectory models.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{NumericsError, Result};
pub use graph::{Graph, Var};
pub use layers::{laplace_nll, GruCell, Linear, Mlp, MultiHeadAttention};
pub use optim::{cosine_lr, AdamW};
pub use params::{Gradients, ParameterStore};
pub use tensor::Tensor;
