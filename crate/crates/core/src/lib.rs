//! Black-box, user-level watermarking for small autoregressive language
//! models: watermark construction, robustness-aware sparse parameter
//! selection, masked (optionally adversarial) injection, ownership
//! verification, and an attack/evaluation harness.

pub mod attacks;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod injector;
pub mod model;
pub mod pipeline;
pub mod selector;
pub mod util;
pub mod verifier;
pub mod watermark;

pub use error::{Error, Result};
