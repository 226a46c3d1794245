//! Data-centric text-to-SQL toolkit.
//!
//! The crate covers the full pipeline around a text-to-SQL model: schema
//! linking over SQLite databases, SQL verification and training-data repair,
//! error-driven data augmentation, two-step SQL correction and
//! execution-grouped ensemble selection. Every LLM interaction goes through
//! [`judge::Judge`], which has a deterministic transcript-replay backend so
//! whole runs can be reproduced offline.

pub mod artifact;
pub mod augment;
pub mod catalog;
pub mod correct;
pub mod dataset;
pub mod ensemble;
pub mod exec;
pub mod judge;
pub mod linking;
pub mod par;
pub mod pipeline;
pub mod repair;
pub mod sql;
pub mod text;
pub mod value;
pub mod verify;

#[cfg(test)]
pub(crate) mod test_support;

pub use artifact::{read_artifact, write_artifact, Artifact, ArtifactError};
pub use catalog::{introspect, serialize_schema, SchemaGraph, Selection, ValueIndex};
pub use dataset::{load_dataset, DatasetSplit, QuestionRecord, SourceFormat};
pub use exec::{execute, results_equal, ExecutionOutcome};
pub use judge::{Judge, JudgeCall};
pub use par::ExecMode;
pub use value::SqlValue;
