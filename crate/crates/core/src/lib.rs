//! Reinforcement-learned multi-hop path prediction over knowledge graphs.
//!
//! An agent walks a knowledge graph from a dialog's start entity for at most
//! two hops. Each state is rendered to text, embedded by a frozen encoder,
//! and scored against the embeddings of the current entity's out-edges.
//! The actor and critic are trained with PPO on a terminal reward for
//! reaching the goal entity, and evaluated with beam search under path@k and
//! target@k recall.

pub mod agent;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod env;
pub mod error;
pub mod eval;
pub mod fte;
pub mod graph;
pub mod pipeline;
pub mod ppo;
pub mod synth;
pub mod transe;

pub use error::{Error, ErrorKind, Result};
