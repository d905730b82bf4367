//! Speculative decoding with a draft model that cross-attends into the
//! target model's KV cache, plus confidence-aware proposal expansion.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense kernels in double precision.
//! * [`mask`]: causal, block-wise and expanded-proposal attention masks.
//! * [`model`]: the frozen target, the GliDe draft and the vanilla drafter.
//! * [`speculation`]: proposals, expansion sets and linearization.
//! * [`verify`]: greedy, sampling and expanded-proposal verification and
//!   the decoding loop.
//! * [`train`]: synthetic corpora, AdamW, draft training and gradient checks.
//! * [`bench`]: metrics, experiments and sweeps.

pub mod bench;
pub mod error;
pub mod mask;
pub mod model;
pub mod par;
pub mod speculation;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
