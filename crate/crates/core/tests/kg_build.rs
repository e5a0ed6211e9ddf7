use std::collections::BTreeMap;

use hats_core::ingest::{
    builtin_contracts, decode_table, encode_table, generate_synthetic_dataset, ingest_dataset, Contracts, IngestError,
    Scale, TableSet,
};
use hats_core::kg::{validate_coherence, EdgeRecord, KgError, Mapping, PropertyGraph, Schema};
use proptest::prelude::*;

const CRASH: &str = "case_id,light,weather,rel_junct,surf_cond,manner,cais,hour,weekday,month,vehicle_count,event_count
A,1,1,1,1,2,3,8,2,3,2,1
B,2,,1,1,,1,14,5,7,1,0
C,1,2,2,2,3,2,22,6,11,2,0
";
const VEHICLE: &str = "case_id,veh_no,body_class,crash_cat,crash_conf,conseq,dam_plane,dam_sev,vais,premove,rollover,surf_type,alignment,traf_dev
A,1,1,,,,,,2,,,,,
A,2,2,2,,,1,,1,,,,,
B,1,1,,,,,,3,,,,,1
C,1,1,,,,,,1,,,,,
C,2,1,,,99,,,1,,,,,
";
const OCCUPANT: &str = "case_id,veh_no,occ_no,role,treatment,mais
A,1,1,driver,1,1
A,1,2,passenger,,2
A,2,1,driver,2,1
B,1,1,driver,,3
C,1,1,driver,1,1
C,2,1,driver,,1
";
const EVENT_HEADER: &str = "case_id,event_no,veh_no,source,witness,crit_event,crit_cat,imminent_veh\n";
const CONTACT: &str = "case_id,veh_no,other_veh,object,impact_plane
A,1,2,,1
B,1,,1,3
";

fn mini(event: &str) -> TableSet {
    let mut t = TableSet::default();
    for (name, body) in [
        ("crash", CRASH),
        ("vehicle", VEHICLE),
        ("occupant", OCCUPANT),
        ("event", event),
        ("contact", CONTACT),
    ] {
        t.insert(name, body.as_bytes().to_vec());
    }
    t
}

type Key = (String, String, String, Vec<(String, String)>);

fn multiset<'a>(edges: impl Iterator<Item = &'a EdgeRecord>) -> BTreeMap<Key, usize> {
    let mut m = BTreeMap::new();
    for e in edges {
        *m.entry((e.head.clone(), e.relation.clone(), e.tail.clone(), e.qualifiers.clone()))
            .or_insert(0) += 1;
    }
    m
}

fn expect(rows: &[(&str, &str, &str, &[(&str, &str)])]) -> BTreeMap<Key, usize> {
    let mut m = BTreeMap::new();
    for (h, r, t, q) in rows {
        let mut q: Vec<(String, String)> = q.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        q.sort();
        *m.entry((h.to_string(), r.to_string(), t.to_string(), q)).or_insert(0) += 1;
    }
    m
}

#[test]
fn mini_dataset_stage_two_matches_hand_enumeration() {
    let schema = Schema::builtin();
    let out = ingest_dataset(&mini(EVENT_HEADER), &Contracts::builtin(), &schema).unwrap();
    let stage2: Vec<&EdgeRecord> = out
        .graph
        .edges()
        .iter()
        .filter(|e| schema.relation(&e.relation).unwrap().stage == 2)
        .collect();
    let want = expect(&[
        ("CRASH:A", "LightCondition", "LIGHTCOND:daylight", &[]),
        ("CRASH:A", "WeatherCondition", "WEATHER:clear", &[]),
        ("CRASH:A", "RelationToJunction", "RELTOJUNCT:non_junction", &[]),
        ("CRASH:A", "SurfaceCondition", "SURFCOND:dry", &[]),
        ("CRASH:A", "CollisionManner", "MANCOLL:front_to_rear", &[]),
        ("CRASH:A", "MostSevereInjuryInCrash", "CAIS:moderate", &[]),
        ("CRASH:B", "LightCondition", "LIGHTCOND:dark_not_lighted", &[]),
        ("CRASH:B", "RelationToJunction", "RELTOJUNCT:non_junction", &[]),
        ("CRASH:B", "SurfaceCondition", "SURFCOND:dry", &[]),
        ("CRASH:B", "MostSevereInjuryInCrash", "CAIS:no_injury", &[]),
        ("CRASH:C", "LightCondition", "LIGHTCOND:daylight", &[]),
        ("CRASH:C", "WeatherCondition", "WEATHER:cloudy", &[]),
        ("CRASH:C", "RelationToJunction", "RELTOJUNCT:intersection", &[]),
        ("CRASH:C", "SurfaceCondition", "SURFCOND:wet", &[]),
        ("CRASH:C", "CollisionManner", "MANCOLL:front_to_front", &[]),
        ("CRASH:C", "MostSevereInjuryInCrash", "CAIS:minor", &[]),
        ("CRASH:A", "VehicleInvolved", "VEHICLE:A-1", &[]),
        ("CRASH:A", "VehicleInvolved", "VEHICLE:A-2", &[]),
        ("CRASH:B", "VehicleInvolved", "VEHICLE:B-1", &[]),
        ("CRASH:C", "VehicleInvolved", "VEHICLE:C-1", &[]),
        ("CRASH:C", "VehicleInvolved", "VEHICLE:C-2", &[]),
        ("VEHICLE:A-1", "InstanceOf", "VEHCLASS:passenger_car", &[]),
        ("VEHICLE:A-2", "InstanceOf", "VEHCLASS:sedan_4door", &[]),
        ("VEHICLE:B-1", "InstanceOf", "VEHCLASS:passenger_car", &[]),
        ("VEHICLE:C-1", "InstanceOf", "VEHCLASS:passenger_car", &[]),
        ("VEHICLE:C-2", "InstanceOf", "VEHCLASS:passenger_car", &[]),
        ("VEHICLE:A-1", "MostSevereInjuryInVehicle", "VAIS:minor", &[]),
        ("VEHICLE:A-2", "MostSevereInjuryInVehicle", "VAIS:no_injury", &[]),
        ("VEHICLE:B-1", "MostSevereInjuryInVehicle", "VAIS:moderate", &[]),
        ("VEHICLE:C-1", "MostSevereInjuryInVehicle", "VAIS:no_injury", &[]),
        ("VEHICLE:C-2", "MostSevereInjuryInVehicle", "VAIS:no_injury", &[]),
        ("VEHICLE:A-2", "CrashCategory", "CRASHCAT:same_direction", &[]),
        ("VEHICLE:A-2", "VehicleDamagePosition", "DAMPLANE:front", &[]),
        ("VEHICLE:B-1", "SignBestControlsTraffic", "TRAFDEV:no_controls", &[]),
        ("VEHICLE:C-2", "GeneralConsequence", "CONSEQ:UNKNOWN", &[]),
        ("CRASH:A", "OccupantInvolved", "OCCUPANT:A-1-1", &[]),
        ("CRASH:A", "OccupantInvolved", "OCCUPANT:A-1-2", &[]),
        ("CRASH:A", "OccupantInvolved", "OCCUPANT:A-2-1", &[]),
        ("CRASH:B", "OccupantInvolved", "OCCUPANT:B-1-1", &[]),
        ("CRASH:C", "OccupantInvolved", "OCCUPANT:C-1-1", &[]),
        ("CRASH:C", "OccupantInvolved", "OCCUPANT:C-2-1", &[]),
        ("VEHICLE:A-1", "HasOccupant", "OCCUPANT:A-1-1", &[]),
        ("VEHICLE:A-1", "HasOccupant", "OCCUPANT:A-1-2", &[]),
        ("VEHICLE:A-2", "HasOccupant", "OCCUPANT:A-2-1", &[]),
        ("VEHICLE:B-1", "HasOccupant", "OCCUPANT:B-1-1", &[]),
        ("VEHICLE:C-1", "HasOccupant", "OCCUPANT:C-1-1", &[]),
        ("VEHICLE:C-2", "HasOccupant", "OCCUPANT:C-2-1", &[]),
        ("OCCUPANT:A-1-1", "MostSevereInjury", "MAIS:no_injury", &[]),
        ("OCCUPANT:A-1-2", "MostSevereInjury", "MAIS:minor", &[]),
        ("OCCUPANT:A-2-1", "MostSevereInjury", "MAIS:no_injury", &[]),
        ("OCCUPANT:B-1-1", "MostSevereInjury", "MAIS:moderate", &[]),
        ("OCCUPANT:C-1-1", "MostSevereInjury", "MAIS:no_injury", &[]),
        ("OCCUPANT:C-2-1", "MostSevereInjury", "MAIS:no_injury", &[]),
        ("OCCUPANT:A-1-1", "TreatmentReceived", "TREATMENT:no_treatment", &[]),
        ("OCCUPANT:A-2-1", "TreatmentReceived", "TREATMENT:treated_at_scene", &[]),
        ("OCCUPANT:C-1-1", "TreatmentReceived", "TREATMENT:no_treatment", &[]),
        (
            "VEHICLE:A-1",
            "ContactWith",
            "VEHICLE:A-2",
            &[("impact_plane", "front")],
        ),
        (
            "VEHICLE:B-1",
            "Contactwith",
            "OBJCONT:tree",
            &[("impact_plane", "left_side")],
        ),
        ("CRASH:B", "EntityInvolved", "OBJCONT:tree", &[]),
    ]);
    assert_eq!(multiset(stage2.into_iter()), want);
    assert_eq!(
        out.graph.count_relation("HasOccupant"),
        out.graph.count_relation("OccupantInvolved")
    );
    assert!(validate_coherence(&out.graph, &schema).all_passed());
}

#[test]
fn event_row_emits_causality_edges() {
    let schema = Schema::builtin();
    let event = format!("{EVENT_HEADER}A,1,1,actor,yes,1,1,2\n");
    let out = ingest_dataset(&mini(&event), &Contracts::builtin(), &schema).unwrap();
    let stage3 = out
        .graph
        .edges()
        .iter()
        .filter(|e| schema.relation(&e.relation).unwrap().stage == 3);
    let want = expect(&[
        (
            "VEHICLE:A-1",
            "ImplicatedBy",
            "CRITEVENT:loss_of_control_blowout",
            &[("source", "actor"), ("role", "event"), ("witness", "yes")],
        ),
        (
            "VEHICLE:A-1",
            "ImplicatedBy",
            "CRITCAT:vehicle_loss_of_control",
            &[("source", "actor"), ("role", "factor"), ("witness", "yes")],
        ),
        (
            "VEHICLE:A-1",
            "LeadTo",
            "CRASH:A",
            &[("source", "actor"), ("role", "event")],
        ),
        (
            "CRITCAT:vehicle_loss_of_control",
            "LeadTo",
            "CRASH:A",
            &[("role", "factor")],
        ),
        (
            "CRITEVENT:loss_of_control_blowout",
            "MakeCrashImminentFor",
            "VEHICLE:A-2",
            &[("role", "event"), ("witness", "yes")],
        ),
    ]);
    assert_eq!(multiset(stage3), want);

    // victim rows do not lead to the crash
    let event = format!("{EVENT_HEADER}A,1,1,victim,no,1,1,\n");
    let out = ingest_dataset(&mini(&event), &Contracts::builtin(), &schema).unwrap();
    assert_eq!(out.graph.count_relation("LeadTo"), 1);
    assert_eq!(out.graph.count_relation("MakeCrashImminentFor"), 0);
}

#[test]
fn causality_qualifiers_survive_round_trip() {
    let schema = Schema::builtin();
    let event = format!("{EVENT_HEADER}A,1,1,actor,yes,1,1,2\n");
    let g = ingest_dataset(&mini(&event), &Contracts::builtin(), &schema)
        .unwrap()
        .graph;
    let back = PropertyGraph::from_ndjson(g.to_ndjson().as_bytes()).unwrap();
    assert_eq!(back, g);
    let e = back.edges().iter().find(|e| e.relation == "ImplicatedBy").unwrap();
    assert!(e.qualifiers.contains(&("source".into(), "actor".into())));
}

#[test]
fn dangling_vehicle_reference_fails_stage_two_with_row() {
    let schema = Schema::builtin();
    let mut t = mini(EVENT_HEADER);
    let vehicles = format!("{VEHICLE}Z,1,1,,,,,,1,,,,,\n");
    t.insert("vehicle", vehicles.into_bytes());
    let err = ingest_dataset(&t, &Contracts::builtin(), &schema).unwrap_err();
    match &err {
        IngestError::Stage {
            stage: 2,
            source: KgError::Dangling { provenance, .. },
        } => {
            let p = provenance.as_ref().unwrap();
            assert_eq!((p.table.as_str(), p.row), ("vehicle", 6));
        }
        e => panic!("unexpected {e:?}"),
    }
    assert!(err.to_string().contains("row 6"), "{err}");
}

#[test]
fn zero_rows_add_zero_schema_edges() {
    let schema = Schema::builtin();
    let mut t = TableSet::default();
    for c in builtin_contracts() {
        t.insert(&c.table, encode_table(&[], &c, &schema).unwrap());
    }
    let out = ingest_dataset(&t, &Contracts::builtin(), &schema).unwrap();
    let (s1, s2) = (&out.stats[0], &out.stats[1]);
    assert_eq!(s2.edges, s1.edges);
    assert_eq!(s1.edges, 0);
}

#[test]
fn empty_mapping_keeps_bridge_nodes_only() {
    let schema = Schema::builtin();
    let c = Contracts {
        tables: builtin_contracts(),
        mapping: Mapping::empty(),
    };
    let out = ingest_dataset(&mini(EVENT_HEADER), &c, &schema).unwrap();
    assert_eq!(out.graph.count_label("MECHANISM"), 8);
    assert_eq!(out.graph.count_label("CITYSCAPES"), 19);
    assert_eq!(out.graph.count_relation("CorrespondsToCityscapes"), 0);
    assert_eq!(out.graph.count_relation("CorrespondsToMechanism"), 0);
}

#[test]
fn mapping_with_unknown_type_is_config_error() {
    let schema = Schema::builtin();
    let mut c = Contracts::builtin();
    c.mapping.mappings[0].source = "NOPE".into();
    let err = ingest_dataset(&mini(EVENT_HEADER), &c, &schema).unwrap_err();
    assert!(
        matches!(
            err,
            IngestError::Stage {
                stage: 4,
                source: KgError::Config(_)
            }
        ),
        "{err:?}"
    );
}

#[test]
fn deleting_a_vehicle_fails_exactly_its_pairings_and_dangling() {
    let schema = Schema::builtin();
    let ds = generate_synthetic_dataset(
        3,
        Scale {
            crashes: 40,
            ..Scale::default()
        },
        &schema,
    )
    .unwrap();
    let mut g = ingest_dataset(&ds.tables, &Contracts::builtin(), &schema)
        .unwrap()
        .graph;
    assert!(validate_coherence(&g, &schema).all_passed());
    g.remove_node("VEHICLE:C00001-1").unwrap();
    let report = validate_coherence(&g, &schema);
    let mut failed = report.failed();
    failed.sort();
    assert_eq!(
        failed,
        [
            "dangling_references",
            "pairing:InstanceOf==VEHICLE",
            "pairing:MostSevereInjuryInVehicle==VEHICLE",
            "pairing:VehicleInvolved==VEHICLE",
        ]
    );
}

#[test]
fn default_synthetic_dataset_builds_coherently_and_idempotently() {
    let schema = Schema::builtin();
    let ds = generate_synthetic_dataset(7, Scale::default(), &schema).unwrap();
    let a = ingest_dataset(&ds.tables, &Contracts::builtin(), &schema).unwrap();
    assert!(a.rejects.is_empty());
    let report = validate_coherence(&a.graph, &schema);
    assert!(report.all_passed(), "{:?}", report.failed());
    assert_eq!(a.stats[0].node_counts["CRASH"], 3331);
    let b = ingest_dataset(&ds.tables, &Contracts::builtin(), &schema).unwrap();
    assert_eq!(a.graph.content_hash(), b.graph.content_hash());
    assert_eq!(a.graph, b.graph);

    for w in a.stats.windows(2) {
        assert!(w[1].nodes >= w[0].nodes && w[1].edges >= w[0].edges);
    }
    for (rel, n) in &ds.truth.edge_counts {
        assert_eq!(a.graph.count_relation(rel), *n, "{rel}");
    }
    for q in ["source", "role", "witness"] {
        for v in schema.qualifier_values(q).unwrap() {
            assert!(
                a.graph
                    .edges()
                    .iter()
                    .any(|e| e.qualifiers.contains(&(q.to_string(), v.clone()))),
                "{q}={v} never emitted"
            );
        }
    }
    let causal: usize = ["LeadTo", "MakeCrashImminentFor", "ImplicatedBy"]
        .iter()
        .map(|r| a.graph.count_relation(r))
        .sum();
    let stage3 = a
        .graph
        .edges()
        .iter()
        .filter(|e| schema.relation(&e.relation).unwrap().stage == 3)
        .count();
    assert_eq!(causal, stage3);
}

#[test]
fn generator_is_byte_deterministic() {
    let schema = Schema::builtin();
    let s = Scale {
        crashes: 50,
        ..Scale::default()
    };
    let a = generate_synthetic_dataset(11, s, &schema).unwrap();
    let b = generate_synthetic_dataset(11, s, &schema).unwrap();
    let c = generate_synthetic_dataset(12, s, &schema).unwrap();
    assert_eq!(a.tables, b.tables);
    assert_ne!(a.tables, c.tables);
}

#[test]
fn generator_rejects_scale_below_one() {
    let schema = Schema::builtin();
    for s in [
        Scale {
            crashes: 0,
            ..Scale::default()
        },
        Scale {
            vehicles_per_crash: 0.5,
            ..Scale::default()
        },
    ] {
        assert!(matches!(
            generate_synthetic_dataset(1, s, &schema),
            Err(IngestError::Config(_))
        ));
    }
}

#[test]
fn generated_hundred_rows_decode_without_rejects() {
    let schema = Schema::builtin();
    let ds = generate_synthetic_dataset(
        5,
        Scale {
            crashes: 100,
            ..Scale::default()
        },
        &schema,
    )
    .unwrap();
    let crash = &builtin_contracts()[0];
    let out = decode_table(ds.tables.get("crash").unwrap(), crash, &schema).unwrap();
    assert_eq!((out.rows.len(), out.rejects.len()), (100, 0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn node_counts_match_declared_truth(seed in any::<u64>(), crashes in 1usize..60, vpc in 1.0f64..3.0, opv in 1.0f64..2.5) {
        let schema = Schema::builtin();
        let scale = Scale { crashes, vehicles_per_crash: vpc, occupants_per_vehicle: opv };
        let ds = generate_synthetic_dataset(seed, scale, &schema).unwrap();
        let out = ingest_dataset(&ds.tables, &Contracts::builtin(), &schema).unwrap();
        prop_assert_eq!(&out.graph.label_counts(), &ds.truth.node_counts);
        prop_assert!(validate_coherence(&out.graph, &schema).all_passed());
    }

    #[test]
    fn decode_encode_identity_and_row_accounting(seed in any::<u64>(), crashes in 1usize..30) {
        let schema = Schema::builtin();
        let ds = generate_synthetic_dataset(seed, Scale { crashes, ..Scale::default() }, &schema).unwrap();
        for c in builtin_contracts() {
            let bytes = ds.tables.get(&c.table).unwrap();
            let out = decode_table(bytes, &c, &schema).unwrap();
            prop_assert_eq!(out.rows.len() + out.rejects.len(), ds.truth.rows[&c.table]);
            prop_assert_eq!(&encode_table(&out.rows, &c, &schema).unwrap(), &bytes.to_vec());
        }
    }
}
