//! Bi-decoder neural machine translation.
//!
//! A shared bidirectional LSTM encoder feeds two attention decoders: `D1`
//! translates into the target language and `D2` reconstructs the source.
//! `D2` is trained with likelihood, denoising and policy-gradient objectives
//! on a rotating schedule and is only used at training time.

pub mod decode;
pub mod error;
pub mod eval;
pub mod harness;
pub mod model;
pub mod objectives;
pub mod scheduler;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
