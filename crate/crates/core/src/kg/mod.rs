//! Typed property graph, the relation schema, coherence rules and the four
//! construction stages (nodes, schema edges, causality, bridges).

pub mod coherence;
pub mod graph;
pub mod schema;
pub mod stages;

pub use coherence::{validate_coherence, CoherenceReport, RuleResult};
pub use graph::{EdgeRecord, NodeRecord, PropertyGraph, Provenance, Qualifier};
pub use schema::{Category, Schema, Tier, UNKNOWN};
pub use stages::{Mapping, StageStats};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KgError {
    #[error("label {0} is not in the node vocabulary")]
    UnknownLabel(String),
    #[error("relation {0} is not in the edge vocabulary")]
    UnknownRelation(String),
    #[error("property schema violation: {0}")]
    Property(String),
    #[error("node {0} already exists with a different payload")]
    Conflict(String),
    #[error("illegal edge {relation}: {head} -> {tail}")]
    Illegal {
        relation: String,
        head: String,
        tail: String,
    },
    #[error("qualifier error: {0}")]
    Qualifier(String),
    #[error("dangling endpoint {endpoint} for {relation}{}", .provenance.as_ref().map(|p| format!(" ({} row {})", p.table, p.row)).unwrap_or_default())]
    Dangling {
        relation: String,
        endpoint: String,
        provenance: Option<Provenance>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = KgError> = std::result::Result<T, E>;
