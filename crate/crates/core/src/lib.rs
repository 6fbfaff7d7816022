//! Multiplication-free binary neural networks.
//!
//! Train small normalizer-free binary networks, fold them into a bit-packed
//! model whose inference needs only XNOR-popcount, additions, comparisons
//! and shifts, run that model with every arithmetic operation counted, and
//! statically audit how many multiplications a BN-Free network would need.

mod binio;
pub mod bitcore;
pub mod bundled;
pub mod data;
pub mod engine;
pub mod error;
pub mod exporter;
pub mod nfgraph;
pub mod opaudit;
pub mod trainer;

pub use error::{Error, Result};
