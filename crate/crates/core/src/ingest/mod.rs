//! Flat crash tables to knowledge graph: contract-driven decoding, the
//! four-stage build, and a synthetic table generator.

pub mod contract;
pub mod decode;
pub mod synth;

use std::path::Path;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use contract::{builtin_contracts, TableContract};
pub use decode::{decode_table, encode_table, DecodeOutcome, DecodedRow, Reject, Value};
pub use synth::{generate_synthetic_dataset, GroundTruth, Scale, SyntheticDataset};

use crate::kg::{stages, KgError, Mapping, PropertyGraph, Schema, StageStats};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("contract error: {0}")]
    Contract(String),
    #[error("parse error in table {table} at line {line}: {message}")]
    Parse { table: String, line: u64, message: String },
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: u8,
        #[source]
        source: KgError,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = IngestError> = std::result::Result<T, E>;

/// Raw CSV bytes per table name.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TableSet {
    pub tables: IndexMap<String, Vec<u8>>,
}

impl TableSet {
    pub fn get(&self, table: &str) -> Option<&[u8]> {
        self.tables.get(table).map(Vec::as_slice)
    }

    pub fn insert(&mut self, table: &str, bytes: Vec<u8>) {
        self.tables.insert(table.to_owned(), bytes);
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, bytes) in &self.tables {
            std::fs::write(dir.join(format!("{name}.csv")), bytes)?;
        }
        Ok(())
    }

    /// Reads `<table>.csv` for every contract table present in `dir`.
    pub fn read_dir(dir: &Path, contracts: &[TableContract]) -> Result<Self> {
        let mut set = Self::default();
        for c in contracts {
            let p = dir.join(format!("{}.csv", c.table));
            if p.exists() {
                set.insert(&c.table, std::fs::read(p)?);
            }
        }
        Ok(set)
    }
}

#[derive(Clone, Debug)]
pub struct DecodedTable {
    pub contract: TableContract,
    pub rows: Vec<DecodedRow>,
}

#[derive(Clone, Debug)]
pub struct IngestOutput {
    pub graph: PropertyGraph,
    pub stats: Vec<StageStats>,
    pub rejects: Vec<Reject>,
}

impl IngestOutput {
    pub fn stats_json(&self) -> String {
        serde_json::to_string_pretty(&self.stats).expect("stats serialize")
    }

    pub fn rejects_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["table", "row", "column", "reason"])
            .expect("in-memory write");
        for r in &self.rejects {
            w.write_record([r.table.as_str(), &r.row.to_string(), &r.column, &r.reason])
                .expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }
}

/// Contract set plus mapping used by [`ingest_dataset`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Contracts {
    pub tables: Vec<TableContract>,
    pub mapping: Mapping,
}

impl Contracts {
    pub fn builtin() -> Self {
        Self {
            tables: builtin_contracts(),
            mapping: Mapping::builtin(),
        }
    }
}

/// Decodes every table (concurrently) and runs the four stages in order.
pub fn ingest_dataset(tables: &TableSet, contracts: &Contracts, schema: &Schema) -> Result<IngestOutput> {
    for c in &contracts.tables {
        c.validate(schema)?;
        if tables.get(&c.table).is_none() {
            return Err(IngestError::Contract(format!("table {} is missing", c.table)));
        }
    }
    let decoded: Vec<(DecodedTable, Vec<Reject>)> = contracts
        .tables
        .par_iter()
        .map(|c| {
            let out = decode_table(tables.get(&c.table).expect("checked above"), c, schema)?;
            Ok((
                DecodedTable {
                    contract: c.clone(),
                    rows: out.rows,
                },
                out.rejects,
            ))
        })
        .collect::<Result<_>>()?;
    let mut rejects = Vec::new();
    let mut decoded_tables = Vec::with_capacity(decoded.len());
    for (t, r) in decoded {
        decoded_tables.push(t);
        rejects.extend(r);
    }
    for r in &rejects {
        log::warn!("rejected {} row {}: {}", r.table, r.row, r.reason);
    }

    let stage_err = |stage| move |source| IngestError::Stage { stage, source };
    let mut g = PropertyGraph::new();
    let mut stats = Vec::with_capacity(4);
    stages::build_nodes(&mut g, schema, &decoded_tables).map_err(stage_err(1))?;
    stats.push(StageStats::capture(1, "nodes", &g));
    stages::wire_schema_edges(&mut g, schema, &decoded_tables).map_err(stage_err(2))?;
    stats.push(StageStats::capture(2, "schema_relations", &g));
    stages::wire_causality(&mut g, schema, &decoded_tables).map_err(stage_err(3))?;
    stats.push(StageStats::capture(3, "causality", &g));
    stages::wire_bridges(&mut g, schema, &contracts.mapping).map_err(stage_err(4))?;
    stats.push(StageStats::capture(4, "bridging", &g));
    Ok(IngestOutput {
        graph: g,
        stats,
        rejects,
    })
}
