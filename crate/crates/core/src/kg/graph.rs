use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::schema::{Schema, Tier};
use super::{KgError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: String,
    pub label: String,
    pub tier: Tier,
    pub categorical: BTreeMap<String, String>,
    pub numeric: BTreeMap<String, f64>,
}

impl NodeRecord {
    /// A node with the three common categorical properties filled in.
    pub fn new(id: impl Into<String>, label: &str, tier: Tier, name: &str, level: &str) -> Self {
        let mut categorical = BTreeMap::new();
        categorical.insert("name".to_owned(), name.to_owned());
        categorical.insert("type".to_owned(), label.to_owned());
        categorical.insert("level".to_owned(), level.to_owned());
        Self {
            id: id.into(),
            label: label.to_owned(),
            tier,
            categorical,
            numeric: BTreeMap::new(),
        }
    }
}

pub type Qualifier = (String, String);

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub head: String,
    pub relation: String,
    pub tail: String,
    /// Kept sorted so that qualifier order never distinguishes edges.
    pub qualifiers: Vec<Qualifier>,
}

impl EdgeRecord {
    pub fn new(
        head: impl Into<String>,
        relation: &str,
        tail: impl Into<String>,
        mut qualifiers: Vec<Qualifier>,
    ) -> Self {
        qualifiers.sort();
        Self {
            head: head.into(),
            relation: relation.to_owned(),
            tail: tail.into(),
            qualifiers,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub table: String,
    pub row: usize,
}

impl Provenance {
    pub fn new(table: &str, row: usize) -> Self {
        Self {
            table: table.to_owned(),
            row,
        }
    }
}

/// Typed property graph with adjacency indices and per-element provenance.
#[derive(Clone, Debug, Default)]
pub struct PropertyGraph {
    nodes: IndexMap<String, NodeRecord>,
    node_prov: HashMap<String, Option<Provenance>>,
    edges: Vec<EdgeRecord>,
    edge_prov: Vec<Option<Provenance>>,
    edge_keys: HashSet<EdgeRecord>,
    by_head: HashMap<(String, String), Vec<usize>>,
    by_tail: HashMap<(String, String), Vec<usize>>,
}

impl PartialEq for PropertyGraph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes
            && self.edges == other.edges
            && self.edge_prov == other.edge_prov
            && self
                .nodes
                .keys()
                .all(|k| self.node_prov.get(k) == other.node_prov.get(k))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line {
    Node {
        #[serde(flatten)]
        node: NodeRecord,
        provenance: Option<Provenance>,
    },
    Edge {
        #[serde(flatten)]
        edge: EdgeRecord,
        provenance: Option<Provenance>,
    },
}

impl PropertyGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn node(&self, id: &str) -> Option<&NodeRecord> {
        self.nodes.get(id)
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.get_index_of(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeRecord> {
        self.nodes.values()
    }

    pub fn edges(&self) -> &[EdgeRecord] {
        &self.edges
    }

    pub fn node_provenance(&self, id: &str) -> Option<&Provenance> {
        self.node_prov.get(id).and_then(Option::as_ref)
    }

    pub fn edge_provenance(&self, i: usize) -> Option<&Provenance> {
        self.edge_prov.get(i).and_then(Option::as_ref)
    }

    pub fn contains_edge(&self, e: &EdgeRecord) -> bool {
        self.edge_keys.contains(e)
    }

    /// Edges leaving `head` with `relation`, as indices into [`Self::edges`].
    pub fn out_edges(&self, head: &str, relation: &str) -> &[usize] {
        self.by_head
            .get(&(head.to_owned(), relation.to_owned()))
            .map_or(&[], Vec::as_slice)
    }

    /// Edges entering `tail` with `relation`.
    pub fn in_edges(&self, tail: &str, relation: &str) -> &[usize] {
        self.by_tail
            .get(&(tail.to_owned(), relation.to_owned()))
            .map_or(&[], Vec::as_slice)
    }

    pub fn count_label(&self, label: &str) -> usize {
        self.nodes.values().filter(|n| n.label == label).count()
    }

    pub fn count_relation(&self, relation: &str) -> usize {
        self.edges.iter().filter(|e| e.relation == relation).count()
    }

    pub fn label_counts(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for n in self.nodes.values() {
            *m.entry(n.label.clone()).or_insert(0) += 1;
        }
        m
    }

    pub fn relation_counts(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for e in &self.edges {
            *m.entry(e.relation.clone()).or_insert(0) += 1;
        }
        m
    }

    /// Checks a node against its type's property schema.
    pub fn validate_node(schema: &Schema, n: &NodeRecord) -> Result<()> {
        let t = schema
            .node_type(&n.label)
            .ok_or_else(|| KgError::UnknownLabel(n.label.clone()))?;
        if t.tier != n.tier {
            return Err(KgError::Property(format!(
                "{}: tier {:?} but type is {:?}",
                n.id, n.tier, t.tier
            )));
        }
        let mut expected: Vec<&str> = vec!["level", "name", "type"];
        expected.extend(t.categorical.iter().map(String::as_str));
        expected.sort_unstable();
        let got: Vec<&str> = n.categorical.keys().map(String::as_str).collect();
        if got != expected {
            return Err(KgError::Property(format!(
                "{}: categorical properties {got:?}, expected {expected:?}",
                n.id
            )));
        }
        if n.categorical["type"] != n.label {
            return Err(KgError::Property(format!("{}: type property differs from label", n.id)));
        }
        let mut num_expected: Vec<&str> = t.numeric.iter().map(String::as_str).collect();
        num_expected.sort_unstable();
        let num_got: Vec<&str> = n.numeric.keys().map(String::as_str).collect();
        if num_got != num_expected {
            return Err(KgError::Property(format!(
                "{}: numeric properties {num_got:?}, expected {num_expected:?}",
                n.id
            )));
        }
        if let Some((k, v)) = n.numeric.iter().find(|(_, v)| !v.is_finite()) {
            return Err(KgError::Property(format!("{}: numeric property {k} = {v}", n.id)));
        }
        if !t.vocabulary.is_empty() && !t.vocabulary.iter().any(|v| v.label == n.categorical["name"]) {
            return Err(KgError::Property(format!(
                "{}: value outside the {} vocabulary",
                n.id, n.label
            )));
        }
        Ok(())
    }

    /// Inserts a node. Returns `false` when an identical node is already
    /// present; a different payload under the same id is an error.
    pub fn upsert_node(&mut self, schema: &Schema, n: NodeRecord, prov: Option<Provenance>) -> Result<bool> {
        Self::validate_node(schema, &n)?;
        self.insert_node_unchecked(n, prov)
    }

    fn insert_node_unchecked(&mut self, n: NodeRecord, prov: Option<Provenance>) -> Result<bool> {
        if let Some(existing) = self.nodes.get(&n.id) {
            if existing == &n {
                return Ok(false);
            }
            return Err(KgError::Conflict(n.id));
        }
        self.node_prov.insert(n.id.clone(), prov);
        self.nodes.insert(n.id.clone(), n);
        Ok(true)
    }

    /// Checks endpoint existence, legality and qualifier enumerations.
    pub fn check_edge(&self, schema: &Schema, e: &EdgeRecord) -> Result<()> {
        let spec = schema
            .relation(&e.relation)
            .ok_or_else(|| KgError::UnknownRelation(e.relation.clone()))?;
        let head = self.nodes.get(&e.head).ok_or_else(|| KgError::Dangling {
            relation: e.relation.clone(),
            endpoint: e.head.clone(),
            provenance: None,
        })?;
        let tail = self.nodes.get(&e.tail).ok_or_else(|| KgError::Dangling {
            relation: e.relation.clone(),
            endpoint: e.tail.clone(),
            provenance: None,
        })?;
        if !schema.is_legal(&e.relation, &head.label, &tail.label) {
            return Err(KgError::Illegal {
                relation: e.relation.clone(),
                head: head.label.clone(),
                tail: tail.label.clone(),
            });
        }
        for (k, v) in &e.qualifiers {
            if !spec.qualifiers.contains(k) {
                return Err(KgError::Qualifier(format!(
                    "{} does not carry qualifier {k}",
                    e.relation
                )));
            }
            let allowed = schema.qualifier_values(k).unwrap_or(&[]);
            if !allowed.contains(v) {
                return Err(KgError::Qualifier(format!("{k}={v} outside the declared enumeration")));
            }
        }
        Ok(())
    }

    /// Inserts an edge; duplicates (same endpoints, relation and qualifiers)
    /// are collapsed and return `false`.
    pub fn add_edge(&mut self, schema: &Schema, e: EdgeRecord, prov: Option<Provenance>) -> Result<bool> {
        if let Err(KgError::Dangling { relation, endpoint, .. }) = self.check_edge(schema, &e) {
            return Err(KgError::Dangling {
                relation,
                endpoint,
                provenance: prov,
            });
        }
        self.check_edge(schema, &e)?;
        Ok(self.insert_edge_unchecked(e, prov))
    }

    fn insert_edge_unchecked(&mut self, e: EdgeRecord, prov: Option<Provenance>) -> bool {
        if self.edge_keys.contains(&e) {
            return false;
        }
        let i = self.edges.len();
        self.by_head
            .entry((e.head.clone(), e.relation.clone()))
            .or_default()
            .push(i);
        self.by_tail
            .entry((e.tail.clone(), e.relation.clone()))
            .or_default()
            .push(i);
        self.edge_keys.insert(e.clone());
        self.edges.push(e);
        self.edge_prov.push(prov);
        true
    }

    /// Removes a node but leaves its edges in place (they become dangling).
    pub fn remove_node(&mut self, id: &str) -> Option<NodeRecord> {
        self.node_prov.remove(id);
        self.nodes.shift_remove(id)
    }

    /// One JSON object per line: all nodes in insertion order, then all edges.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for n in self.nodes.values() {
            let line = Line::Node {
                node: n.clone(),
                provenance: self.node_prov.get(&n.id).cloned().flatten(),
            };
            out.push_str(&serde_json::to_string(&line).expect("node serializes"));
            out.push('\n');
        }
        for (e, p) in self.edges.iter().zip(&self.edge_prov) {
            let line = Line::Edge {
                edge: e.clone(),
                provenance: p.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("edge serializes"));
            out.push('\n');
        }
        out
    }

    /// Rebuilds a graph from [`Self::to_ndjson`] output without schema checks.
    pub fn from_ndjson<R: BufRead>(reader: R) -> Result<Self> {
        let mut g = Self::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line =
                serde_json::from_str(&line).map_err(|e| KgError::Parse(format!("line {}: {e}", i + 1)))?;
            match parsed {
                Line::Node { node, provenance } => {
                    g.insert_node_unchecked(node, provenance)?;
                }
                Line::Edge { edge, provenance } => {
                    g.insert_edge_unchecked(edge, provenance);
                }
            }
        }
        Ok(g)
    }

    /// SHA-256 of the NDJSON export, hex-encoded.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_ndjson().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
