#![allow(clippy::needless_range_loop)]

pub mod attention;
pub mod autodiff;
pub mod charlm;
pub mod cli;
pub mod ctc;
pub mod error;
pub mod layers;
pub mod netzoo;
pub mod recurrent;
pub mod synthline;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
