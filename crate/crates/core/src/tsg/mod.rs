//! Ego-centric traffic scene graph: one ego node, every selected entity
//! tagged ⟨mechanism, side, severity⟩ and color coded by severity, exported
//! as versioned JSON and as Graphviz DOT.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{ScenePrediction, SceneSample, CITYSCAPES_CLASSES, MECHANISMS, SEVERITIES, SIDES};

pub const TSG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TsgError {
    #[error("invalid scene graph: {0}")]
    Invalid(String),
    #[error("scene graph JSON: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = TsgError> = std::result::Result<T, E>;

/// The four predicted severity classes plus the tier of unselected entities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisplayLevel {
    Imminent,
    Caution,
    Info,
    RelevantButNotCritical,
    Irrelevant,
}

impl DisplayLevel {
    pub const ALL: [DisplayLevel; 5] = [
        DisplayLevel::Imminent,
        DisplayLevel::Caution,
        DisplayLevel::Info,
        DisplayLevel::RelevantButNotCritical,
        DisplayLevel::Irrelevant,
    ];

    /// Display level of a severity class index.
    pub fn from_severity(i: usize) -> Option<Self> {
        Some(match SEVERITIES.get(i)? {
            &"info" => DisplayLevel::Info,
            &"caution" => DisplayLevel::Caution,
            &"imminent" => DisplayLevel::Imminent,
            _ => DisplayLevel::RelevantButNotCritical,
        })
    }

    pub fn color(self) -> &'static str {
        match self {
            DisplayLevel::Imminent => "#d7191c",
            DisplayLevel::Caution => "#fdae61",
            DisplayLevel::Info => "#ffffbf",
            DisplayLevel::RelevantButNotCritical => "#abd9e9",
            DisplayLevel::Irrelevant => "#d9d9d9",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationTag {
    pub mechanism: String,
    pub side: String,
    pub severity: String,
}

impl RelationTag {
    /// `⟨mechanism, side, severity⟩`.
    pub fn triplet(&self) -> String {
        format!("⟨{}, {}, {}⟩", self.mechanism, self.side, self.severity)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TagConfidence {
    pub mechanism: f64,
    pub side: f64,
    pub severity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsgEntity {
    /// Entity index within the scene.
    pub id: usize,
    pub class: String,
    pub relevance: f64,
    pub display: DisplayLevel,
    /// Present exactly for selected entities.
    pub tag: Option<RelationTag>,
    pub confidence: Option<TagConfidence>,
}

impl TsgEntity {
    pub fn is_selected(&self) -> bool {
        self.tag.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficSceneGraph {
    pub version: u32,
    pub scene: String,
    pub ego: String,
    pub entities: Vec<TsgEntity>,
}

fn arg_max(p: &[f64]) -> (usize, f64) {
    p.iter().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
    )
}

pub fn assemble_tsg(pred: &ScenePrediction, sample: &SceneSample) -> Result<TrafficSceneGraph> {
    if pred.entities.len() != sample.entities.len() {
        return Err(TsgError::Invalid(format!(
            "{} predictions for {} entities",
            pred.entities.len(),
            sample.entities.len()
        )));
    }
    let entities = pred
        .entities
        .iter()
        .zip(&sample.entities)
        .enumerate()
        .map(|(id, (p, e))| {
            let class = CITYSCAPES_CLASSES[e.class].to_string();
            if !p.selected {
                return TsgEntity {
                    id,
                    class,
                    relevance: p.p_relevant,
                    display: DisplayLevel::Irrelevant,
                    tag: None,
                    confidence: None,
                };
            }
            let (m, pm) = arg_max(&p.mechanism);
            let (s, ps) = arg_max(&p.side);
            let (v, pv) = arg_max(&p.severity);
            TsgEntity {
                id,
                class,
                relevance: p.p_relevant,
                display: DisplayLevel::from_severity(v).expect("severity index in range"),
                tag: Some(RelationTag {
                    mechanism: MECHANISMS[m].into(),
                    side: SIDES[s].into(),
                    severity: SEVERITIES[v].into(),
                }),
                confidence: Some(TagConfidence {
                    mechanism: pm,
                    side: ps,
                    severity: pv,
                }),
            }
        })
        .collect();
    let g = TrafficSceneGraph {
        version: TSG_VERSION,
        scene: pred.id.clone(),
        ego: "ego".into(),
        entities,
    };
    g.validate()?;
    Ok(g)
}

impl TrafficSceneGraph {
    pub fn selected(&self) -> impl Iterator<Item = &TsgEntity> {
        self.entities.iter().filter(|e| e.is_selected())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TsgError::Invalid(m));
        if self.version != TSG_VERSION {
            return bad(format!("unsupported version {}", self.version));
        }
        if self.ego.is_empty() {
            return bad("missing ego node".into());
        }
        let mut ids = BTreeSet::new();
        for e in &self.entities {
            if !ids.insert(e.id) {
                return bad(format!("duplicate entity id {}", e.id));
            }
            if !CITYSCAPES_CLASSES.contains(&e.class.as_str()) {
                return bad(format!("entity {}: unknown class {}", e.id, e.class));
            }
            if !(0.0..=1.0).contains(&e.relevance) {
                return bad(format!("entity {}: relevance {} outside [0, 1]", e.id, e.relevance));
            }
            match (&e.tag, &e.confidence) {
                (None, None) => {
                    if e.display != DisplayLevel::Irrelevant {
                        return bad(format!("entity {}: unselected but displayed as {:?}", e.id, e.display));
                    }
                }
                (Some(t), Some(c)) => {
                    let sev = SEVERITIES.iter().position(|s| *s == t.severity);
                    if !MECHANISMS.contains(&t.mechanism.as_str()) || !SIDES.contains(&t.side.as_str()) || sev.is_none()
                    {
                        return bad(format!(
                            "entity {}: tag {} outside the label vocabularies",
                            e.id,
                            t.triplet()
                        ));
                    }
                    if sev.and_then(DisplayLevel::from_severity) != Some(e.display) {
                        return bad(format!("entity {}: display level disagrees with severity", e.id));
                    }
                    if [c.mechanism, c.side, c.severity]
                        .iter()
                        .any(|p| !(0.0..=1.0).contains(p))
                    {
                        return bad(format!("entity {}: confidence outside [0, 1]", e.id));
                    }
                }
                _ => return bad(format!("entity {}: tag and confidence must appear together", e.id)),
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: Self = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// Ego plus the selected entities, in entity order, each filled with its
/// severity color and linked from the ego by a `mechanism/side` edge.
pub fn render_dot(g: &TrafficSceneGraph) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "digraph {} {{", quote(&g.scene));
    let _ = writeln!(s, "  node [style=filled, fontname=\"Helvetica\"];");
    let _ = writeln!(
        s,
        "  {} [label=\"ego\", shape=doublecircle, fillcolor=\"#ffffff\"];",
        quote(&g.ego)
    );
    for e in g.selected() {
        let _ = writeln!(
            s,
            "  e{} [label={}, fillcolor={}];",
            e.id,
            quote(&format!("{} #{}", e.class, e.id)),
            quote(e.display.color())
        );
    }
    for e in g.selected() {
        let t = e.tag.as_ref().expect("selected entities carry tags");
        let _ = writeln!(
            s,
            "  {} -> e{} [label={}];",
            quote(&g.ego),
            e.id,
            quote(&format!("{}/{}", t.mechanism, t.side))
        );
    }
    s.push_str("}\n");
    s
}

#[cfg(test)]
mod tests;
