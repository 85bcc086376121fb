//! Lifelong knowledge graph embedding with per-snapshot entity spaces,
//! similarity-driven entity decoupling and importance-weighted inference.

pub mod checkpoint;
pub mod config;
pub mod decoupler;
pub mod error;
pub mod evaluator;
pub mod inference;
pub mod kg;
pub mod oracle;
pub mod store;
pub mod synth;
pub mod trainer;

pub use config::{Incidence, TrainConfig};
pub use error::{Error, Result};
pub use kg::{EntityId, GrowingKg, RelationId, Snapshot, SnapshotDelta, Triple};
pub use store::{EmbeddingStore, EntityEntry, Resolved, SnapshotSpace};
