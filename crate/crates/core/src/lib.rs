//! Conditional discrete graph diffusion over architecture cell DAGs:
//! data model, categorical noise process, graph-transformer denoiser,
//! multi-condition guidance, training, sampling, a synthetic tabular
//! benchmark, and the evaluation harness.

pub mod artifacts;
pub mod bench;
pub mod cell;
pub mod conditioning;
pub mod denoiser;
pub mod error;
pub mod harness;
pub mod noise;
pub mod sampling;
pub mod spaces;
pub mod tape;
pub mod tensor;
pub mod training;
