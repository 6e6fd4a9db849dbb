//! Packed-slot homomorphic evaluation over an exact slot simulator.

pub mod bench;
pub mod cli;
pub mod cnn;
pub mod conv;
pub mod encode;
pub mod engine;
pub mod error;
pub mod matmul;
pub mod multi_ct;
pub mod oracle;
pub mod serialize;
pub mod virtual_ct;

pub use engine::{Backend, Ciphertext, EngineParams, LayoutTag, MaskRole, OpMeter, PlainMask, SimEngine};
pub use error::{Error, Result};
