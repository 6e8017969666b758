pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod embeddings;
pub mod params;
pub mod prompts;
pub mod backbone;
pub mod objectives;
pub mod model;
pub mod data;
pub mod training;
pub mod evaluation;
pub mod verify;
pub mod cli;
