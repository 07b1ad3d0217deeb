//! Toy-scale hybrid-compressor vision-language pipeline.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`autograd`], [`gradcheck`]: dense `f64` tensors, a
//!   reverse-mode tape and a finite-difference oracle.
//! - [`compressor`]: the gated two-expert projector and the MLP / fusion
//!   baselines it is compared against.
//! - [`fec`]: key-frame selection, facial masking and sequence composition.
//! - [`lora`]: named low-rank adapters with merge support.
//! - [`pipeline`]: the toy model, AdamW, the cosine schedule and staged
//!   freeze-masked training.
//! - [`eval`]: synthetic two-domain data, recall metrics and gate telemetry.
//! - [`config`], [`checkpoint`]: run configuration and tensor persistence.

pub mod autograd;
pub mod checkpoint;
pub mod compressor;
pub mod config;
pub mod error;
pub mod eval;
pub mod fec;
pub mod gradcheck;
pub mod lora;
pub mod params;
pub mod pipeline;
pub mod tensor;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use gradcheck::{finite_diff_check, GradReport};
pub use params::{Bind, Binding, ParamSet};
pub use tensor::Tensor;

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
