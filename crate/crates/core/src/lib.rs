//! Step-level value preference optimization on a synthetic arithmetic
//! environment: MCTS annotation, step-level preference pairs, a joint
//! policy/value model, preference training and value-guided beam search.

pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod infer;
pub mod io;
pub mod mcts;
pub mod pairs;
pub mod pipeline;
pub mod policyval;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
