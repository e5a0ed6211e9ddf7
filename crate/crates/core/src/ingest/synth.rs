//! Seeded generator of crash table sets that satisfy the bundled contracts.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::contract::builtin_contracts;
use super::decode::{encode_table, DecodedRow, Value};
use super::{IngestError, Result, TableSet};
use crate::kg::{Schema, Tier, UNKNOWN};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scale {
    pub crashes: usize,
    pub vehicles_per_crash: f64,
    pub occupants_per_vehicle: f64,
}

impl Default for Scale {
    fn default() -> Self {
        Self {
            crashes: 3331,
            vehicles_per_crash: 1.78,
            occupants_per_vehicle: 1.09,
        }
    }
}

/// Counts the generator commits to before any ingestion happens.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub node_counts: BTreeMap<String, usize>,
    pub edge_counts: BTreeMap<String, usize>,
    pub rows: BTreeMap<String, usize>,
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub tables: TableSet,
    pub truth: GroundTruth,
}

struct Gen<'a> {
    rng: ChaCha8Rng,
    schema: &'a Schema,
}

impl Gen<'_> {
    /// A vocabulary label of `domain`: `None` with probability `null_p`,
    /// UNKNOWN with a small probability, otherwise a uniform known value.
    fn code(&mut self, domain: &str, null_p: f64) -> Option<Value> {
        if null_p > 0.0 && self.rng.random_bool(null_p) {
            return None;
        }
        let vocab = &self.schema.node_type(domain).expect("domain exists").vocabulary;
        if self.rng.random_bool(0.03) {
            return Some(Value::Text(UNKNOWN.into()));
        }
        let known: Vec<&str> = vocab
            .iter()
            .map(|v| v.label.as_str())
            .filter(|l| *l != UNKNOWN)
            .collect();
        Some(Value::Text(
            (*known.choose(&mut self.rng).expect("non-empty vocabulary")).to_owned(),
        ))
    }

    fn count(&mut self, mean: f64) -> usize {
        if mean <= 1.0 {
            return 1;
        }
        let p = Poisson::new(mean - 1.0).expect("positive rate");
        1 + p.sample(&mut self.rng) as usize
    }
}

fn row(table: &str, n: usize, fields: Vec<(&str, Option<Value>)>) -> DecodedRow {
    DecodedRow {
        table: table.to_owned(),
        row: n,
        fields: fields.into_iter().map(|(k, v)| (k.to_owned(), v)).collect(),
    }
}

fn text(s: &str) -> Option<Value> {
    Some(Value::Text(s.to_owned()))
}

fn int(i: usize) -> Option<Value> {
    Some(Value::Int(i as i64))
}

/// Byte-identical output for equal `(seed, scale)`.
pub fn generate_synthetic_dataset(seed: u64, scale: Scale, schema: &Schema) -> Result<SyntheticDataset> {
    if scale.crashes < 1 || scale.vehicles_per_crash < 1.0 || scale.occupants_per_vehicle < 1.0 {
        return Err(IngestError::Config(format!(
            "scale values must be at least 1: {scale:?}"
        )));
    }
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(seed),
        schema,
    };
    let (mut crashes, mut vehicles, mut occupants, mut events, mut contacts) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for c in 0..scale.crashes {
        let case = format!("C{:05}", c + 1);
        let n_veh = g.count(scale.vehicles_per_crash);
        // the first crash carries both provenance combinations so every
        // qualifier value appears even at tiny scale
        let n_events = if c == 0 { 2 } else { g.count(1.5) };

        for v in 1..=n_veh {
            vehicles.push(row(
                "vehicle",
                vehicles.len() + 1,
                vec![
                    ("case_id", text(&case)),
                    ("veh_no", int(v)),
                    ("body_class", g.code("VEHCLASS", 0.0)),
                    ("crash_cat", g.code("CRASHCAT", 0.03)),
                    ("crash_conf", g.code("CRASHCONF", 0.03)),
                    ("conseq", g.code("CONSEQ", 0.9)),
                    ("dam_plane", g.code("DAMPLANE", 0.012)),
                    ("dam_sev", g.code("DAMSEV", 0.24)),
                    ("vais", g.code("VAIS", 0.0)),
                    ("premove", g.code("PREMOVE", 0.03)),
                    ("rollover", g.code("ROLLINITYP", 0.07)),
                    ("surf_type", g.code("SURFTYPE", 0.03)),
                    ("alignment", g.code("ALIGNMENT", 0.03)),
                    ("traf_dev", g.code("TRAFDEV", 0.03)),
                ],
            ));
            let n_occ = g.count(scale.occupants_per_vehicle);
            for o in 1..=n_occ {
                let role = if o == 1 { "driver" } else { "passenger" };
                occupants.push(row(
                    "occupant",
                    occupants.len() + 1,
                    vec![
                        ("case_id", text(&case)),
                        ("veh_no", int(v)),
                        ("occ_no", int(o)),
                        ("role", text(role)),
                        ("treatment", g.code("TREATMENT", 0.11)),
                        ("mais", g.code("MAIS", 0.0)),
                    ],
                ));
            }
        }

        for e in 1..=n_events {
            let (source, witness) = match (c, e) {
                (0, 1) => ("actor", "yes"),
                (0, _) => ("victim", "no"),
                (_, 1) => ("actor", if g.rng.random_bool(0.5) { "yes" } else { "no" }),
                _ => (
                    if g.rng.random_bool(0.6) { "victim" } else { "actor" },
                    if g.rng.random_bool(0.5) { "yes" } else { "no" },
                ),
            };
            let veh = g.rng.random_range(1..=n_veh);
            let imminent = if g.rng.random_bool(0.9) {
                int(g.rng.random_range(1..=n_veh))
            } else {
                None
            };
            events.push(row(
                "event",
                events.len() + 1,
                vec![
                    ("case_id", text(&case)),
                    ("event_no", int(e)),
                    ("veh_no", int(veh)),
                    ("source", text(source)),
                    ("witness", text(witness)),
                    ("crit_event", g.code("CRITEVENT", 0.0)),
                    ("crit_cat", g.code("CRITCAT", 0.0)),
                    ("imminent_veh", imminent),
                ],
            ));
        }

        for v in 1..n_veh {
            contacts.push(row(
                "contact",
                contacts.len() + 1,
                vec![
                    ("case_id", text(&case)),
                    ("veh_no", int(v)),
                    ("other_veh", int(v + 1)),
                    ("object", None),
                    ("impact_plane", g.code("DAMPLANE", 0.0)),
                ],
            ));
        }
        for v in 1..=n_veh {
            let p = if n_veh == 1 { 0.8 } else { 0.3 };
            if g.rng.random_bool(p) {
                contacts.push(row(
                    "contact",
                    contacts.len() + 1,
                    vec![
                        ("case_id", text(&case)),
                        ("veh_no", int(v)),
                        ("other_veh", None),
                        ("object", g.code("OBJCONT", 0.0)),
                        ("impact_plane", g.code("DAMPLANE", 0.0)),
                    ],
                ));
            }
        }

        crashes.push(row(
            "crash",
            crashes.len() + 1,
            vec![
                ("case_id", text(&case)),
                ("light", g.code("LIGHTCOND", 0.002)),
                ("weather", g.code("WEATHER", 0.003)),
                ("rel_junct", g.code("RELTOJUNCT", 0.0)),
                ("surf_cond", g.code("SURFCOND", 0.0015)),
                ("manner", g.code("MANCOLL", 0.018)),
                ("cais", g.code("CAIS", 0.0)),
                ("hour", int(g.rng.random_range(0..24))),
                ("weekday", int(g.rng.random_range(1..=7))),
                ("month", int(g.rng.random_range(1..=12))),
                ("vehicle_count", int(n_veh)),
                ("event_count", int(n_events)),
            ],
        ));
    }

    let mut truth = GroundTruth::default();
    for t in schema.node_types.iter().chain(&schema.bridge_types) {
        if t.tier != Tier::Entity {
            truth.node_counts.insert(t.label.clone(), t.vocabulary.len());
        }
    }
    truth.node_counts.insert("CRASH".into(), crashes.len());
    truth.node_counts.insert("VEHICLE".into(), vehicles.len());
    truth.node_counts.insert("OCCUPANT".into(), occupants.len());
    for (rel, n) in [
        ("VehicleInvolved", vehicles.len()),
        ("InstanceOf", vehicles.len()),
        ("MostSevereInjuryInVehicle", vehicles.len()),
        ("OccupantInvolved", occupants.len()),
        ("HasOccupant", occupants.len()),
        ("MostSevereInjury", occupants.len()),
        ("MostSevereInjuryInCrash", crashes.len()),
    ] {
        truth.edge_counts.insert(rel.into(), n);
    }

    let mut tables = TableSet::default();
    for c in builtin_contracts() {
        let rows = match c.table.as_str() {
            "crash" => &crashes,
            "vehicle" => &vehicles,
            "occupant" => &occupants,
            "event" => &events,
            "contact" => &contacts,
            other => {
                return Err(IngestError::Contract(format!(
                    "generator has no rows for table {other}"
                )))
            }
        };
        truth.rows.insert(c.table.clone(), rows.len());
        tables.insert(&c.table, encode_table(rows, &c, schema)?);
    }
    Ok(SyntheticDataset { tables, truth })
}
