//! Super-resolution integrated frontal face synthesis.

pub mod error;
pub mod evaluate;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod selfcheck;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
