//! Hybrid mLSTM + sliding-window-attention sequence mixers, the teacher and
//! student models built from them, and the distillation pipeline that turns
//! a softmax-attention teacher into a constant-state student.

pub mod complexity;
pub mod corpus;
pub mod distill;
pub mod error;
pub mod evalkit;
pub mod io;
pub mod merge;
pub mod mixers;
pub mod selftest;
pub mod model;
pub mod tensor;

pub use error::{Category, Error, Result};
pub use tensor::{Float, Gradients, Tape, Tensor, Var};
