//! Role-grouped mixture-of-experts language models.
//!
//! Small decoder-only transformer experts are grouped by analyst role
//! (macro, micro, quant). A soft gate weights the roles, a hard
//! Gumbel-softmax gate picks one expert inside each role, and the mixed hidden
//! state runs through a residual feedforward block and a linear head.
//! Training is two-staged: each expert is first trained autoregressively on its
//! role corpus, then the assembled model is tuned on instruction records with
//! an entropy regularizer on the role gate.

pub mod error;
pub mod expert;
pub mod data;
pub mod evaluation;
pub mod numerics;
pub mod pipeline;
pub mod routing;

pub use error::{Error, Result};
pub use numerics::{Graph, Parameterized, SeededRng, Tensor, Var};
