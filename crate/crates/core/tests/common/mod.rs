#![allow(dead_code)]

mod gradients;
mod oracles;

pub use gradients::*;
pub use oracles::*;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}
