//! Node-type vocabularies, the relation legality matrix, qualifier
//! enumerations and count pairings, loaded from a versioned JSON file.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{KgError, Result};

pub const UNKNOWN: &str = "UNKNOWN";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Entity,
    Attribute,
    Bridge,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VocabEntry {
    pub code: i64,
    pub label: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NodeType {
    pub label: String,
    pub tier: Tier,
    /// Hierarchy class from the schema table (e.g. `vehicle_attribute`).
    pub class: String,
    #[serde(default)]
    pub vocabulary: Vec<VocabEntry>,
    /// Type-specific categorical properties beyond name/type/level.
    #[serde(default)]
    pub categorical: Vec<String>,
    #[serde(default)]
    pub numeric: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Schema,
    Contact,
    Causality,
    Bridging,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RelationSpec {
    pub name: String,
    pub stage: u8,
    pub category: Category,
    pub head: Vec<String>,
    pub tail: Vec<String>,
    #[serde(default)]
    pub qualifiers: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountRef {
    Nodes(String),
    Edges(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Pairing {
    pub name: String,
    pub lhs: CountRef,
    pub rhs: CountRef,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Schema {
    pub version: u32,
    pub node_types: Vec<NodeType>,
    pub bridge_types: Vec<NodeType>,
    pub relations: Vec<RelationSpec>,
    pub qualifiers: indexmap::IndexMap<String, Vec<String>>,
    pub pairings: Vec<Pairing>,
    #[serde(skip)]
    index: SchemaIndex,
}

#[derive(Clone, Debug, Default)]
struct SchemaIndex {
    node: HashMap<String, usize>,
    bridge: HashMap<String, usize>,
    relation: HashMap<String, usize>,
    decode: HashMap<(String, i64), String>,
    encode: HashMap<(String, String), i64>,
}

const BUILTIN: &str = include_str!("../../assets/schema.json");

impl Schema {
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN).expect("bundled schema is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut s: Schema = serde_json::from_str(text).map_err(|e| KgError::Config(format!("schema: {e}")))?;
        s.build_index()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    fn build_index(&mut self) -> Result<()> {
        let mut idx = SchemaIndex::default();
        for (i, t) in self.node_types.iter().enumerate() {
            if idx.node.insert(t.label.clone(), i).is_some() {
                return Err(KgError::Config(format!("duplicate node type {}", t.label)));
            }
        }
        for (i, t) in self.bridge_types.iter().enumerate() {
            if idx.node.contains_key(&t.label) || idx.bridge.insert(t.label.clone(), i).is_some() {
                return Err(KgError::Config(format!("duplicate node type {}", t.label)));
            }
        }
        for t in self.node_types.iter().chain(&self.bridge_types) {
            let mut labels = BTreeSet::new();
            for v in &t.vocabulary {
                if !labels.insert(v.label.as_str()) {
                    return Err(KgError::Config(format!("{}: duplicate value {}", t.label, v.label)));
                }
                if idx.decode.insert((t.label.clone(), v.code), v.label.clone()).is_some() {
                    return Err(KgError::Config(format!("{}: duplicate code {}", t.label, v.code)));
                }
                idx.encode.insert((t.label.clone(), v.label.clone()), v.code);
            }
        }
        for (i, r) in self.relations.iter().enumerate() {
            if idx.relation.insert(r.name.clone(), i).is_some() {
                return Err(KgError::Config(format!("duplicate relation {}", r.name)));
            }
            for l in r.head.iter().chain(&r.tail) {
                if !idx.node.contains_key(l) && !idx.bridge.contains_key(l) {
                    return Err(KgError::Config(format!(
                        "relation {} references unknown type {l}",
                        r.name
                    )));
                }
            }
            for q in &r.qualifiers {
                if !self.qualifiers.contains_key(q) {
                    return Err(KgError::Config(format!(
                        "relation {} references unknown qualifier {q}",
                        r.name
                    )));
                }
            }
        }
        self.index = idx;
        Ok(())
    }

    /// Any declared node type, Stage-I or bridge.
    pub fn node_type(&self, label: &str) -> Option<&NodeType> {
        if let Some(&i) = self.index.node.get(label) {
            return Some(&self.node_types[i]);
        }
        self.index.bridge.get(label).map(|&i| &self.bridge_types[i])
    }

    pub fn relation(&self, name: &str) -> Option<&RelationSpec> {
        self.index.relation.get(name).map(|&i| &self.relations[i])
    }

    pub fn relation_index(&self, name: &str) -> Option<usize> {
        self.index.relation.get(name).copied()
    }

    pub fn is_legal(&self, relation: &str, head_label: &str, tail_label: &str) -> bool {
        self.relation(relation)
            .is_some_and(|r| r.head.iter().any(|h| h == head_label) && r.tail.iter().any(|t| t == tail_label))
    }

    pub fn decode(&self, label: &str, code: i64) -> Option<&str> {
        self.index.decode.get(&(label.to_owned(), code)).map(String::as_str)
    }

    pub fn encode(&self, label: &str, value: &str) -> Option<i64> {
        self.index.encode.get(&(label.to_owned(), value.to_owned())).copied()
    }

    pub fn qualifier_values(&self, key: &str) -> Option<&[String]> {
        self.qualifiers.get(key).map(Vec::as_slice)
    }

    /// Attribute node types, in schema order.
    pub fn attribute_types(&self) -> impl Iterator<Item = &NodeType> {
        self.node_types.iter().filter(|t| t.tier == Tier::Attribute)
    }

    /// Composite id of an attribute or bridge node.
    pub fn value_id(label: &str, value: &str) -> String {
        format!("{label}:{value}")
    }

    /// Composite id of an entity node from its key parts.
    pub fn entity_id(label: &str, key: &[String]) -> String {
        format!("{label}:{}", key.join("-"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_vocabulary_sizes() {
        let s = Schema::builtin();
        assert_eq!(s.node_types.len(), 26);
        let attr_nodes: usize = s.attribute_types().map(|t| t.vocabulary.len()).sum();
        assert_eq!(attr_nodes, 286);
        assert_eq!(s.node_type("CRITEVENT").unwrap().vocabulary.len(), 50);
        assert_eq!(s.node_type("CITYSCAPES").unwrap().vocabulary.len(), 19);
        assert_eq!(s.node_type("MECHANISM").unwrap().vocabulary.len(), 8);
        let stage2 = s.relations.iter().filter(|r| r.stage == 2).count();
        assert_eq!(stage2, 26);
        assert_eq!(
            s.relations.iter().filter(|r| r.category == Category::Causality).count(),
            3
        );
    }

    #[test]
    fn decode_and_encode_are_inverse() {
        let s = Schema::builtin();
        assert_eq!(s.decode("LIGHTCOND", 1), Some("daylight"));
        assert_eq!(s.decode("LIGHTCOND", 99), Some(UNKNOWN));
        assert_eq!(s.decode("LIGHTCOND", 42), None);
        for t in s.attribute_types() {
            for v in &t.vocabulary {
                assert_eq!(s.encode(&t.label, &v.label), Some(v.code));
            }
        }
    }

    #[test]
    fn legality_matrix() {
        let s = Schema::builtin();
        assert!(s.is_legal("VehicleInvolved", "CRASH", "VEHICLE"));
        assert!(!s.is_legal("VehicleInvolved", "VEHICLE", "CRASH"));
        assert!(s.is_legal("ContactWith", "VEHICLE", "VEHICLE"));
        assert!(s.is_legal("Contactwith", "VEHICLE", "OBJCONT"));
        assert!(!s.is_legal("Contactwith", "VEHICLE", "VEHICLE"));
    }

    #[test]
    fn unknown_reference_is_a_config_error() {
        let mut v: serde_json::Value = serde_json::from_str(BUILTIN).unwrap();
        v["relations"][0]["tail"] = serde_json::json!(["NOPE"]);
        assert!(matches!(Schema::from_json(&v.to_string()), Err(KgError::Config(_))));
    }
}
