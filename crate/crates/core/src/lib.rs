//! Structure/text knowledge fusion for sparse knowledge-graph completion.
//!
//! A relational message-passing model and a text classifier over entity
//! and relation names are pre-trained separately, then trained jointly:
//! mutual-learning KL terms on observed queries and variational-EM terms on
//! synthesized queries whose neighbourhoods are densified with sampled
//! labels.

pub mod checks;
pub mod densify;
mod error;
pub mod eval;
pub mod fixtures;
pub mod kg;
pub mod losses;
pub mod rng;
pub mod structure;
pub mod study;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
pub use kg::{KnowledgeGraph, Triple, TripleSplit};
