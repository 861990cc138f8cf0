//! Neural temporal point processes framed as neural processes.
//!
//! Each event sequence is treated as its own task. A masked transformer
//! encodes the local history of every event, a permutation-invariant pool
//! over earlier events yields a task-level feature (deterministic or
//! latent), and an optional cross-attention path adds event-specific
//! context. A log-normal mixture decoder models the next inter-event time.

/// Training allocates and frees large temporaries every step; the system
/// allocator hands them back to the kernel each time.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod heads;
pub mod kernels;
pub mod mixture;
pub mod model;
pub mod nn;
pub mod objective;
pub mod synth;
pub mod train;

pub use data::{Dataset, EventSequence, PaddedBatch};
pub use error::{DataError, Error, Result};
pub use model::{Model, ModelConfig, Variant};
