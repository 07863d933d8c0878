pub mod cli;
pub mod conv_approx;
pub mod convnet;
pub mod deriv;
pub mod error;
pub mod fitting;
pub mod inr;
pub mod insp_op;
pub mod mlp;
pub mod numerics;
pub mod signal;

pub use error::{Error, Result};
