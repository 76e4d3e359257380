pub mod engine;
pub mod error;
pub mod flow;
pub mod harness;
pub mod hash;
pub mod kv;
pub mod logits_cache;
pub mod model;
pub mod par;
pub mod protocol;
pub mod sampling;
pub mod server;

pub use error::{Error, Result};

pub type Token = u32;
