use serde::{Deserialize, Serialize};

use super::graph::PropertyGraph;
use super::schema::{CountRef, Schema};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleResult {
    pub rule: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoherenceReport {
    pub rules: Vec<RuleResult>,
}

impl CoherenceReport {
    pub fn all_passed(&self) -> bool {
        self.rules.iter().all(|r| r.passed)
    }

    pub fn failed(&self) -> Vec<&str> {
        self.rules
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.rule.as_str())
            .collect()
    }

    pub fn get(&self, rule: &str) -> Option<&RuleResult> {
        self.rules.iter().find(|r| r.rule == rule)
    }
}

fn count(g: &PropertyGraph, c: &CountRef) -> usize {
    match c {
        CountRef::Nodes(l) => g.count_label(l),
        CountRef::Edges(r) => g.count_relation(r),
    }
}

fn rule(name: String, violations: Vec<String>) -> RuleResult {
    let detail = match violations.len() {
        0 => "ok".to_owned(),
        n => format!("{n} violation(s); first: {}", violations[0]),
    };
    RuleResult {
        rule: name,
        passed: violations.is_empty(),
        detail,
    }
}

/// Runs every rule and reports each one, never short-circuiting.
///
/// Rules: one per count pairing in the schema, then `node_properties`,
/// `endpoint_legality`, `qualifier_enumeration` and `dangling_references`.
/// Edges with a missing endpoint are only reported by the last rule.
pub fn validate_coherence(g: &PropertyGraph, schema: &Schema) -> CoherenceReport {
    let mut rules = Vec::new();
    for p in &schema.pairings {
        let (l, r) = (count(g, &p.lhs), count(g, &p.rhs));
        rules.push(RuleResult {
            rule: format!("pairing:{}", p.name),
            passed: l == r,
            detail: format!("{l} vs {r}"),
        });
    }

    let node_violations = g
        .nodes()
        .filter_map(|n| PropertyGraph::validate_node(schema, n).err().map(|e| e.to_string()))
        .collect();
    rules.push(rule("node_properties".into(), node_violations));

    let mut legality = Vec::new();
    let mut qualifiers = Vec::new();
    let mut dangling = Vec::new();
    for e in g.edges() {
        let (h, t) = (g.node(&e.head), g.node(&e.tail));
        let Some(spec) = schema.relation(&e.relation) else {
            legality.push(format!("unknown relation {}", e.relation));
            continue;
        };
        match (h, t) {
            (Some(h), Some(t)) => {
                if !schema.is_legal(&e.relation, &h.label, &t.label) {
                    legality.push(format!("{} {}->{}", e.relation, h.label, t.label));
                }
            }
            _ => dangling.push(format!("{} {} -> {}", e.relation, e.head, e.tail)),
        }
        for (k, v) in &e.qualifiers {
            let ok = spec.qualifiers.contains(k) && schema.qualifier_values(k).is_some_and(|vals| vals.contains(v));
            if !ok {
                qualifiers.push(format!("{} {k}={v}", e.relation));
            }
        }
        if !e.qualifiers.is_empty() && spec.qualifiers.is_empty() {
            qualifiers.push(format!("{} carries qualifiers", e.relation));
        }
    }
    rules.push(rule("endpoint_legality".into(), legality));
    rules.push(rule("qualifier_enumeration".into(), qualifiers));
    rules.push(rule("dangling_references".into(), dangling));
    CoherenceReport { rules }
}
