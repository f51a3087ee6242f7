pub mod config;
pub mod corpus;
pub mod cost;
pub mod detector;
pub mod encoding;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod llm;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod prompts;
pub mod relations;
pub mod simulate;
pub mod synthetic;
pub mod tape;
pub mod text;
pub mod workspace;
pub mod train;

pub use error::{Error, Result};
