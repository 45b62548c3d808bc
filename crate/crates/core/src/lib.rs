pub mod algorithms;
pub mod diagnostics;
pub mod harness;
pub mod numkit;
pub mod par;
pub mod problems;
pub mod quantizer;
pub mod theory;
mod serde_float;
