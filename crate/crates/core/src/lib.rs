//! Label-smoothed cross-entropy over large vocabularies without materializing
//! the logit matrix, plus the calibration metrics and softmax entropy bounds
//! that go with it.
//!
//! Layout:
//!
//! - [`tensor`]: dense matrices, token sequences, block plans, the SCE1 file
//!   format and the deterministic instance generator.
//! - [`reduce`]: stable log-sum-exp, softmax, logit distance, KL to uniform.
//! - [`reference`]: the naive full-materialization oracle and finite differences.
//! - [`blocked`]: the tiled forward/backward engine.
//! - [`calibration`]: ECE, RMS-CE, SCE, ACE and reliability tables.
//! - [`entropy`]: norm and entropy lower bounds for an LM head.
//! - [`alloc`]: a counting global allocator used by benches and tests.

pub mod alloc;
pub mod blocked;
pub mod calibration;
pub mod entropy;
mod error;
pub mod reduce;
pub mod reference;
pub mod tensor;

pub use error::{Error, Result};
pub use reference::{Gradients, LossOutput, Reduction};
pub use tensor::{BlockPlan, DenseMatrix, TokenSequence};
