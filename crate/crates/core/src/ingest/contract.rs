//! Table contracts: column domains plus declarative node/edge emission rules.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{IngestError, Result};
use crate::kg::{Schema, Tier};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnKind {
    /// Free-text identifier.
    Key,
    /// Integer code decoded through a node type's vocabulary.
    Code {
        domain: String,
    },
    Enum {
        values: Vec<String>,
    },
    Int {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        min: Option<i64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max: Option<i64>,
    },
    Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ColumnKind,
    #[serde(default)]
    pub nullable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ValueSource {
    Column { column: String },
    Value { value: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRule {
    pub label: String,
    pub key: Vec<String>,
    pub name: ValueSource,
    #[serde(default)]
    pub categorical: BTreeMap<String, String>,
    #[serde(default)]
    pub numeric: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Endpoint {
    Entity { entity: String, key: Vec<String> },
    Attribute { attribute: String, column: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualifierRule {
    pub key: String,
    #[serde(flatten)]
    pub source: ValueSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub column: String,
    pub equals: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeRule {
    pub relation: String,
    pub stage: u8,
    pub head: Endpoint,
    pub tail: Endpoint,
    #[serde(default)]
    pub qualifiers: Vec<QualifierRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub when: Option<Condition>,
}

impl EdgeRule {
    /// Every column the rule reads; the rule fires only if all are non-null.
    pub fn columns(&self) -> Vec<&str> {
        let mut cols = Vec::new();
        for ep in [&self.head, &self.tail] {
            match ep {
                Endpoint::Entity { key, .. } => cols.extend(key.iter().map(String::as_str)),
                Endpoint::Attribute { column, .. } => cols.push(column.as_str()),
            }
        }
        for q in &self.qualifiers {
            if let ValueSource::Column { column } = &q.source {
                cols.push(column.as_str());
            }
        }
        if let Some(c) = &self.when {
            cols.push(c.column.as_str());
        }
        cols
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableContract {
    pub table: String,
    pub columns: Vec<ColumnSpec>,
    #[serde(default)]
    pub nodes: Vec<NodeRule>,
    #[serde(default)]
    pub edges: Vec<EdgeRule>,
}

const BUILTIN: [&str; 5] = [
    include_str!("../../assets/contracts/crash.json"),
    include_str!("../../assets/contracts/vehicle.json"),
    include_str!("../../assets/contracts/occupant.json"),
    include_str!("../../assets/contracts/event.json"),
    include_str!("../../assets/contracts/contact.json"),
];

/// The bundled contract set in ingestion order.
pub fn builtin_contracts() -> Vec<TableContract> {
    BUILTIN
        .iter()
        .map(|s| serde_json::from_str(s).expect("bundled contract is valid"))
        .collect()
}

impl TableContract {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| IngestError::Contract(format!("contract: {e}")))
    }

    pub fn column(&self, name: &str) -> Option<&ColumnSpec> {
        self.columns.iter().find(|c| c.name == name)
    }

    /// Checks that every domain and rule reference resolves.
    pub fn validate(&self, schema: &Schema) -> Result<()> {
        let err = |m: String| Err(IngestError::Contract(format!("table {}: {m}", self.table)));
        let mut seen = HashSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return err(format!("duplicate column {}", c.name));
            }
            if let ColumnKind::Code { domain } = &c.kind {
                match schema.node_type(domain) {
                    Some(t) if !t.vocabulary.is_empty() => {}
                    _ => return err(format!("column {} decodes through unknown domain {domain}", c.name)),
                }
            }
        }
        let declared = |col: &str| seen.contains(col);
        for n in &self.nodes {
            match schema.node_type(&n.label) {
                Some(t) if t.tier == Tier::Entity => {}
                _ => return err(format!("node rule for non-entity type {}", n.label)),
            }
            let mut cols: Vec<&str> = n.key.iter().map(String::as_str).collect();
            cols.extend(n.categorical.values().map(String::as_str));
            cols.extend(n.numeric.values().map(String::as_str));
            if let ValueSource::Column { column } = &n.name {
                cols.push(column);
            }
            if let Some(c) = cols.iter().find(|c| !declared(c)) {
                return err(format!("node rule {} references undeclared column {c}", n.label));
            }
        }
        for e in &self.edges {
            if schema.relation(&e.relation).is_none() {
                return err(format!("unknown relation {}", e.relation));
            }
            if !(2..=3).contains(&e.stage) {
                return err(format!("edge rule {} has stage {}", e.relation, e.stage));
            }
            if let Some(c) = e.columns().iter().find(|c| !declared(c)) {
                return err(format!("edge rule {} references undeclared column {c}", e.relation));
            }
            for ep in [&e.head, &e.tail] {
                match ep {
                    Endpoint::Entity { entity, .. } => {
                        if schema.node_type(entity).map(|t| t.tier) != Some(Tier::Entity) {
                            return err(format!("edge rule {} names non-entity {entity}", e.relation));
                        }
                    }
                    Endpoint::Attribute { attribute, column } => {
                        let ok = matches!(
                            self.column(column).map(|c| &c.kind),
                            Some(ColumnKind::Code { domain }) if domain == attribute
                        );
                        if !ok {
                            return err(format!(
                                "edge rule {}: column {column} does not decode through {attribute}",
                                e.relation
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
