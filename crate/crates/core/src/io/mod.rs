//! File formats.

mod binary;
mod text;

pub use binary::*;
pub use text::*;
