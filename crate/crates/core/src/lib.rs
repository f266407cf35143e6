//! Desk-scale decoder-only transformer engine with inference-time dynamic
//! prompting: a bank of soft prompts is prepended behind an attention mask
//! that keeps prompts mutually invisible, the best prompt is picked from
//! attention mass at prefill, and non-selected prompts are discarded so the
//! run continues as if only the winner had been prepended.

pub mod adapters;
pub mod autodiff;
pub mod compress;
pub mod diag;
pub mod error;
pub mod harness;
pub mod idp;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tensor, Tensor64};
