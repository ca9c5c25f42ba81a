//! modelhammer — a desk-scale fault-injection laboratory for tiny vision
//! models.
//!
//! The crate simulates Rowhammer-style attacks on stored network weights:
//! exact IEEE-754 bit flips in named parameter tensors, a DRAM placement and
//! aggressor/victim feasibility model, input-space trigger stamping for
//! Trojan activation, and the measurement campaigns (accuracy, ASR, ΔAcc,
//! RR, BFT sweeps) plus defenses (bit-flip-aware training, int8
//! quantization, robustness-aware architecture scoring) built on top.
//!
//! Everything is deterministic: fixed accumulation orders, seeded RNG
//! streams, and byte-exact snapshot/restore of weights. The `parallel`
//! feature (on by default) fans independent trials and per-sample
//! evaluations out over rayon; results are bit-identical either way.

pub mod bitflip;
pub mod campaign;
pub mod defenses;
pub mod dram;
pub mod error;
pub mod io;
pub mod model;
mod parallel;
pub mod tensor;
pub mod trigger;

pub use error::{Error, Result};
