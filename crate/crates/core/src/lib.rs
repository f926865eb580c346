//! Cascade transformers for multi-person pose recognition.

pub mod cascade;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod eval;
pub mod geometry;
pub mod loss;
pub mod matcher;
pub mod nn;
pub mod render;
pub mod report;
pub mod tensor;
pub mod train;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/matching.md")]
    mod matching {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/cascade.md")]
    mod cascade {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/visualization.md")]
    mod visualization {}
}
