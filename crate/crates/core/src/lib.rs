//! Statistical convolutional networks over canonical-form distributions.

pub mod canonical;
pub mod detect;
pub mod error;
pub mod grad;
pub mod ica;
pub mod io;
pub mod layers;
pub mod normal;
pub mod synth;
pub mod tensor;
pub mod train;

pub use canonical::{BasisContext, CanonicalForm};
pub use error::{Result, ScnnError};
pub use ica::{Snippet, SnippetModel};
pub use tensor::{CanonicalTensor, Shape};
