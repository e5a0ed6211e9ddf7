use proptest::prelude::*;

use super::*;
use crate::scene::synth::{generate, SynthSceneConfig};
use crate::scene::EntityPrediction;

fn sample() -> SceneSample {
    let cfg = SynthSceneConfig {
        train: 1,
        val: 0,
        test: 0,
        min_entities: 5,
        max_entities: 5,
        ..Default::default()
    };
    generate(&cfg).unwrap().train.remove(0)
}

fn one_hot(n: usize, i: usize, p: f64) -> Vec<f64> {
    (0..n)
        .map(|j| if j == i { p } else { (1.0 - p) / (n - 1) as f64 })
        .collect()
}

fn prediction(s: &SceneSample, selected: &[bool], sev: usize) -> ScenePrediction {
    ScenePrediction {
        id: s.id.clone(),
        entities: selected
            .iter()
            .enumerate()
            .map(|(i, &sel)| EntityPrediction {
                p_relevant: if sel { 0.9 } else { 0.1 },
                selected: sel,
                mechanism: one_hot(8, (i + 6) % 8, 0.7),
                side: one_hot(3, 2, 0.8),
                severity: one_hot(4, sev, 0.6),
            })
            .collect(),
    }
}

/// Tokens of the DOT subset we emit: identifiers, quoted strings, `->`
/// and single punctuation characters.
fn tokenize(s: &str) -> Vec<String> {
    let c: Vec<char> = s.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < c.len() {
        match c[i] {
            w if w.is_whitespace() => i += 1,
            '"' => {
                let mut t = String::from("\"");
                i += 1;
                while c[i] != '"' {
                    if c[i] == '\\' {
                        t.push(c[i]);
                        i += 1;
                    }
                    t.push(c[i]);
                    i += 1;
                }
                t.push('"');
                i += 1;
                out.push(t);
            }
            '-' if c.get(i + 1) == Some(&'>') => {
                out.push("->".into());
                i += 2;
            }
            p if "{}[];=,".contains(p) => {
                out.push(p.to_string());
                i += 1;
            }
            _ => {
                let start = i;
                while i < c.len() && (c[i].is_alphanumeric() || c[i] == '_') {
                    i += 1;
                }
                assert!(i > start, "unexpected character {:?}", c[i]);
                out.push(c[start..i].iter().collect());
            }
        }
    }
    out
}

fn is_id(t: &str) -> bool {
    t.starts_with('"') || t.chars().all(|c| c.is_alphanumeric() || c == '_')
}

/// Parses `digraph ID { stmt* }` with node, edge and attribute statements;
/// returns `(node statements, edge statements)`.
fn parse_dot(s: &str) -> (usize, usize) {
    let t = tokenize(s);
    assert_eq!(t[0], "digraph");
    let mut i = 1;
    if is_id(&t[i]) && t[i] != "{" {
        i += 1;
    }
    assert_eq!(t[i], "{");
    i += 1;
    let attrs = |i: &mut usize| {
        if t[*i] == "[" {
            *i += 1;
            while t[*i] != "]" {
                assert!(is_id(&t[*i]));
                assert_eq!(t[*i + 1], "=");
                assert!(is_id(&t[*i + 2]));
                *i += 3;
                if t[*i] == "," {
                    *i += 1;
                }
            }
            *i += 1;
        }
    };
    let (mut nodes, mut edges) = (0, 0);
    while t[i] != "}" {
        if t[i] == "node" || t[i] == "edge" || t[i] == "graph" {
            i += 1;
            attrs(&mut i);
        } else {
            assert!(is_id(&t[i]), "bad statement at {}", t[i]);
            i += 1;
            if t[i] == "->" {
                assert!(is_id(&t[i + 1]));
                i += 2;
                edges += 1;
            } else {
                nodes += 1;
            }
            attrs(&mut i);
        }
        assert_eq!(t[i], ";");
        i += 1;
    }
    assert_eq!(i, t.len() - 1);
    (nodes, edges)
}

#[test]
fn no_selection_gives_ego_only() {
    let s = sample();
    let g = assemble_tsg(&prediction(&s, &[false; 5], 0), &s).unwrap();
    assert_eq!(g.selected().count(), 0);
    assert!(g
        .entities
        .iter()
        .all(|e| e.display == DisplayLevel::Irrelevant && e.tag.is_none()));
    let dot = render_dot(&g);
    assert_eq!(parse_dot(&dot), (1, 0));
}

#[test]
fn imminent_entity_gets_triplet_tag() {
    let s = sample();
    let g = assemble_tsg(&prediction(&s, &[true, false, false, false, false], 2), &s).unwrap();
    let e = &g.entities[0];
    assert_eq!(e.display, DisplayLevel::Imminent);
    assert_eq!(e.tag.as_ref().unwrap().triplet(), "⟨sideswipe, right, imminent⟩");
    let c = e.confidence.unwrap();
    assert_eq!((c.mechanism, c.side, c.severity), (0.7, 0.8, 0.6));
    assert!(render_dot(&g).contains("[label=\"sideswipe/right\"]"));
}

#[test]
fn json_round_trip_and_validation() {
    let s = sample();
    let g = assemble_tsg(&prediction(&s, &[true, false, true, true, false], 1), &s).unwrap();
    let text = g.to_json().unwrap();
    assert_eq!(TrafficSceneGraph::from_json(&text).unwrap(), g);

    let mut broken = g.clone();
    broken.entities[1].display = DisplayLevel::Caution;
    assert!(broken.validate().is_err());
    let mut broken = g.clone();
    broken.entities[0].tag.as_mut().unwrap().side = "behind".into();
    assert!(broken.validate().is_err());
    let mut broken = g.clone();
    broken.entities[0].confidence = None;
    assert!(broken.validate().is_err());
    let mut broken = g.clone();
    broken.version = 9;
    assert!(TrafficSceneGraph::from_json(&serde_json::to_string(&broken).unwrap()).is_err());
    let extra = text.replacen("\"scene\"", "\"extra\": 1, \"scene\"", 1);
    assert!(TrafficSceneGraph::from_json(&extra).is_err());
    assert!(assemble_tsg(&prediction(&s, &[true; 4], 0), &s).is_err());
}

#[test]
fn palette_is_total_and_injective() {
    let colors: BTreeSet<&str> = DisplayLevel::ALL.iter().map(|d| d.color()).collect();
    assert_eq!(colors.len(), 5);
    let from_sev: BTreeSet<DisplayLevel> = (0..4).map(|i| DisplayLevel::from_severity(i).unwrap()).collect();
    assert_eq!(from_sev.len(), 4);
    assert!(!from_sev.contains(&DisplayLevel::Irrelevant));
    assert_eq!(DisplayLevel::from_severity(4), None);
}

proptest! {
    #[test]
    fn dot_is_deterministic_and_counts_nodes(mask in prop::collection::vec(any::<bool>(), 5), sev in 0usize..4) {
        let s = sample();
        let g = assemble_tsg(&prediction(&s, &mask, sev), &s).unwrap();
        let a = render_dot(&g);
        prop_assert_eq!(&a, &render_dot(&g.clone()));
        let k = mask.iter().filter(|&&b| b).count();
        prop_assert_eq!(parse_dot(&a), (k + 1, k));
        let back = TrafficSceneGraph::from_json(&g.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, g);
    }
}
