//! Depth pruning for small decoder-only transformers.
//!
//! The crate trains or loads a byte-level GPT, ranks its blocks by how much
//! their removal perturbs the final hidden state, fuses the chosen block's
//! linear weights into its neighbours through learnable low-rank gates,
//! recovers the group by distillation against the unpruned group, and bakes
//! the result back into a plain model.

pub mod autograd;
pub mod checkpoint;
pub mod corpus;
pub mod distill;
pub mod error;
pub mod fusion;
pub mod gpt;
pub mod importance;
mod kernels;
pub mod optim;
pub mod pipeline;
pub mod tensor;
pub mod tokenizer;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use fusion::{build_partial_group, FusedLinear, PartialGroup};
pub use gpt::{Capture, GptConfig, GptModel, HiddenTap, LinearRole, TokenBatch, TransformerBlock};
pub use kernels::KL_LOG_EPS;
pub use tensor::{Float, Tensor};
