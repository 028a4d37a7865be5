//! Cross-resolution face verification on a desk-scale budget.
//!
//! The crate trains a wavelet-downsampling residual network (the student) to
//! match a stride-convolution teacher across resolutions: the teacher sees
//! clean high-resolution faces, the student sees realistically degraded
//! low-resolution ones, and distillation losses pull their logits and wavelet
//! approximation bands together. Everything runs in pure Rust on a CPU in
//! minutes: synthetic identities, a tape-based autodiff engine, training,
//! verification, and the ablation table.
//!
//! Start with the runnable examples:
//!
//! ```text
//! cargo run --release -p wavedistill --example autodiff_gradients
//! cargo run --release -p wavedistill --example wavelet_subbands
//! cargo run --release -p wavedistill --example degradation_pipeline
//! cargo run --release -p wavedistill --example synthetic_identities
//! cargo run --release -p wavedistill --example train_teacher
//! cargo run --release -p wavedistill --example distill_student
//! cargo run --release -p wavedistill --example cross_resolution_eval
//! cargo run --release -p wavedistill --example ablation_study
//! ```
//!
//! or with the CLI: `cargo run --release -p wavedistill -- ablate --help`.

pub mod commands;
pub mod config;
pub mod conv;
pub mod degrade;
pub mod error;
pub mod eval;
pub mod graph;
pub mod loss;
pub mod net;
pub mod optim;
pub mod pgm;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
pub use graph::{Band, Graph, Value};
pub use tensor::Tensor;
