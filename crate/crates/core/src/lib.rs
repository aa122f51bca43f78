//! MinMaxCAM: class activation maps refined by common-region and
//! full-region regularization, with the pieces needed to train and score
//! them at desk scale.

pub mod cam;
pub mod error;
pub mod evaluate;
pub mod gradsuite;
pub mod minmax;
pub mod ndtensor;
pub mod nets;
pub mod pnm;
pub mod synthbench;
pub mod wsoleval;

pub use error::{Error, Result};
