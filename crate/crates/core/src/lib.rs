//! Few-shot spoken language understanding lab: episodic data handling,
//! a frozen-embedding encoder with manual backprop, three learners
//! (prototype-based, first-order MAML, finetuning), noise perturbations,
//! and deterministic parallel evaluation.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod episode;
pub mod error;
pub mod learners;
pub mod metrics;
pub mod perturb;
pub mod rng;
pub mod runner;
pub mod synth;
pub mod tensor;

pub use error::SluError;
