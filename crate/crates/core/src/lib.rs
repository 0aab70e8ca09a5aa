pub mod cli;
pub mod data;
pub mod decode;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod lattice;
pub mod seqnn;
pub mod train;
pub mod transition;

pub use error::{Error, Result};
