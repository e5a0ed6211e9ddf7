//! The four construction stages. Each stage reads decoded rows (or the
//! mapping file) and only ever adds nodes and edges.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::{EdgeRecord, NodeRecord, PropertyGraph, Provenance};
use super::schema::{Schema, Tier, UNKNOWN};
use super::{KgError, Result};
use crate::ingest::contract::{Endpoint, NodeRule, ValueSource};
use crate::ingest::{DecodedRow, DecodedTable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub stage: u8,
    pub name: String,
    pub nodes: usize,
    pub edges: usize,
    pub node_counts: BTreeMap<String, usize>,
    pub edge_counts: BTreeMap<String, usize>,
}

impl StageStats {
    pub fn capture(stage: u8, name: &str, g: &PropertyGraph) -> Self {
        Self {
            stage,
            name: name.to_owned(),
            nodes: g.node_count(),
            edges: g.edge_count(),
            node_counts: g.label_counts(),
            edge_counts: g.relation_counts(),
        }
    }
}

fn text(row: &DecodedRow, column: &str) -> Option<String> {
    row.get(column).map(|v| v.text())
}

fn node_from_rule(schema: &Schema, rule: &NodeRule, row: &DecodedRow) -> Result<Option<NodeRecord>> {
    let Some(key) = rule.key.iter().map(|c| text(row, c)).collect::<Option<Vec<_>>>() else {
        return Ok(None);
    };
    let t = schema
        .node_type(&rule.label)
        .ok_or_else(|| KgError::UnknownLabel(rule.label.clone()))?;
    let name = match &rule.name {
        ValueSource::Value { value } => value.clone(),
        ValueSource::Column { column } => text(row, column).unwrap_or_else(|| UNKNOWN.to_owned()),
    };
    let mut n = NodeRecord::new(
        Schema::entity_id(&rule.label, &key),
        &rule.label,
        Tier::Entity,
        &name,
        &t.class,
    );
    for (prop, col) in &rule.categorical {
        n.categorical
            .insert(prop.clone(), text(row, col).unwrap_or_else(|| UNKNOWN.to_owned()));
    }
    for (prop, col) in &rule.numeric {
        let v = row.get(col).and_then(|v| v.as_f64()).ok_or_else(|| {
            KgError::Property(format!("{} row {}: numeric column {col} is empty", row.table, row.row))
        })?;
        n.numeric.insert(prop.clone(), v);
    }
    Ok(Some(n))
}

/// Stage I: every attribute value node, then entity nodes from the tables.
pub fn build_nodes(g: &mut PropertyGraph, schema: &Schema, tables: &[DecodedTable]) -> Result<()> {
    for t in schema.attribute_types() {
        for v in &t.vocabulary {
            let n = NodeRecord::new(
                Schema::value_id(&t.label, &v.label),
                &t.label,
                Tier::Attribute,
                &v.label,
                &t.class,
            );
            g.upsert_node(schema, n, None)?;
        }
    }
    for table in tables {
        for rule in &table.contract.nodes {
            for row in &table.rows {
                if let Some(n) = node_from_rule(schema, rule, row)? {
                    g.upsert_node(schema, n, Some(Provenance::new(&row.table, row.row)))?;
                }
            }
        }
    }
    Ok(())
}

fn endpoint_id(ep: &Endpoint, row: &DecodedRow) -> Option<String> {
    match ep {
        Endpoint::Entity { entity, key } => {
            let parts = key.iter().map(|c| text(row, c)).collect::<Option<Vec<_>>>()?;
            Some(Schema::entity_id(entity, &parts))
        }
        Endpoint::Attribute { attribute, column } => Some(Schema::value_id(attribute, &text(row, column)?)),
    }
}

fn emit_edges(g: &mut PropertyGraph, schema: &Schema, tables: &[DecodedTable], stage: u8) -> Result<()> {
    for table in tables {
        for rule in table.contract.edges.iter().filter(|r| r.stage == stage) {
            for row in &table.rows {
                if let Some(c) = &rule.when {
                    if text(row, &c.column).as_deref() != Some(c.equals.as_str()) {
                        continue;
                    }
                }
                let (Some(head), Some(tail)) = (endpoint_id(&rule.head, row), endpoint_id(&rule.tail, row)) else {
                    continue;
                };
                let quals = rule
                    .qualifiers
                    .iter()
                    .map(|q| match &q.source {
                        ValueSource::Value { value } => Some((q.key.clone(), value.clone())),
                        ValueSource::Column { column } => text(row, column).map(|v| (q.key.clone(), v)),
                    })
                    .collect::<Option<Vec<_>>>();
                let Some(quals) = quals else { continue };
                let e = EdgeRecord::new(head, &rule.relation, tail, quals);
                g.add_edge(schema, e, Some(Provenance::new(&row.table, row.row)))?;
            }
        }
    }
    Ok(())
}

/// Stage II: deterministic relations prescribed by the table schema.
pub fn wire_schema_edges(g: &mut PropertyGraph, schema: &Schema, tables: &[DecodedTable]) -> Result<()> {
    emit_edges(g, schema, tables, 2)
}

/// Stage III: causality edges with provenance qualifiers.
pub fn wire_causality(g: &mut PropertyGraph, schema: &Schema, tables: &[DecodedTable]) -> Result<()> {
    emit_edges(g, schema, tables, 3)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappingEntry {
    pub relation: String,
    pub taxonomy: String,
    /// Attribute node type whose values are mapped.
    pub source: String,
    /// Bridge node type the values map onto.
    pub target: String,
    pub pairs: BTreeMap<String, String>,
}

/// Declarative alignment of attribute values onto bridge taxonomies.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Mapping {
    pub version: u32,
    pub mappings: Vec<MappingEntry>,
}

impl Mapping {
    pub fn builtin() -> Self {
        Self::from_json(include_str!("../../assets/mapping.json")).expect("bundled mapping is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| KgError::Config(format!("mapping: {e}")))
    }

    pub fn empty() -> Self {
        Self {
            version: 1,
            mappings: Vec::new(),
        }
    }
}

/// Stage IV: bridge nodes for every bridge type, then mapping edges.
pub fn wire_bridges(g: &mut PropertyGraph, schema: &Schema, mapping: &Mapping) -> Result<()> {
    for m in &mapping.mappings {
        match schema.node_type(&m.source) {
            Some(t) if t.tier == Tier::Attribute => {}
            _ => {
                return Err(KgError::Config(format!(
                    "mapping source {} is not an attribute type",
                    m.source
                )))
            }
        }
        match schema.node_type(&m.target) {
            Some(t) if t.tier == Tier::Bridge => {}
            _ => {
                return Err(KgError::Config(format!(
                    "mapping target {} is not a bridge type",
                    m.target
                )))
            }
        }
    }
    for t in &schema.bridge_types {
        for v in &t.vocabulary {
            let n = NodeRecord::new(
                Schema::value_id(&t.label, &v.label),
                &t.label,
                Tier::Bridge,
                &v.label,
                &t.class,
            );
            g.upsert_node(schema, n, None)?;
        }
    }
    for m in &mapping.mappings {
        for (value, target) in &m.pairs {
            let head = Schema::value_id(&m.source, value);
            let tail = Schema::value_id(&m.target, target);
            for id in [&head, &tail] {
                if g.node(id).is_none() {
                    return Err(KgError::Config(format!("mapping references unknown node {id}")));
                }
            }
            let e = EdgeRecord::new(head, &m.relation, tail, vec![("taxonomy".into(), m.taxonomy.clone())]);
            g.add_edge(schema, e, None)?;
        }
    }
    Ok(())
}
