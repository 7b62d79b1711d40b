pub mod diff;
pub mod error;
pub mod experiments;
pub mod mlm;
pub mod promptgen;
pub mod template;
pub mod text;
pub mod training;

pub use error::{Error, Result};
