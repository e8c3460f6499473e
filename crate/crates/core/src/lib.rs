//! Style transfer by masked reconstruction.
//!
//! The pipeline has four stages: an attribution model scores how much each
//! token contributes to a style classification, a masking rule blanks the
//! tokens whose attribution exceeds a surplus over the uniform baseline, a
//! bidirectional encoder reconstructs the blanks under source/destination
//! style control codes, and an evaluation harness scores transfer strength
//! against content preservation.

pub mod attribution;
pub mod autograd;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod masking;
pub mod nn;
pub mod pipeline;
pub mod smlm;

pub use error::{Result, SmlmError};
