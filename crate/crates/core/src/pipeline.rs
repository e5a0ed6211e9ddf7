//! Seeded end-to-end runs over an artifact directory. Each stage reads the
//! artifacts written by the stages before it, so any stage can be rerun on
//! its own.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ingest::{generate_synthetic_dataset, ingest_dataset, Contracts, IngestError, Scale, TableSet};
use crate::kg::{validate_coherence, KgError, NodeRecord, PropertyGraph, Schema};
use crate::kge::{evaluate, final_states, train, Embeddings, KgeConfig, KgeError, KgeModel};
use crate::metrics::MetricsError;
use crate::scene::synth::{generate, SynthSceneConfig};
use crate::scene::{
    evaluate_scenes, load_dir, predict, run_ablations, train_scene, KnowledgePrior, SceneConfig, SceneError, SceneModel,
};
use crate::triplets::{export_triplets, split_811, FilterIndex, Split, Splits, TripletDataset, TripletError};
use crate::tsg::{assemble_tsg, render_dot, TsgError, TSG_VERSION};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Prefix of environment variables that override config keys; `__`
/// separates nesting levels (`HATS_KGE__EPOCHS=3`).
pub const ENV_PREFIX: &str = "HATS_";

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("missing artifact {}: run `{stage}` first", path.display())]
    MissingArtifact { path: PathBuf, stage: &'static str },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Triplets(#[from] TripletError),
    #[error(transparent)]
    Kge(#[from] KgeError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Tsg(#[from] TsgError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Config and data validation failures, as opposed to runtime faults.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Validation(_) | Error::MissingArtifact { .. }
        ) || matches!(
            self,
            Error::Kge(KgeError::Config(_)) | Error::Scene(SceneError::Config(_))
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; copied into every stage's seed on [`RunConfig::resolve`].
    pub seed: u64,
    /// Input tables; `None` reads the tables written by `gen-synth`.
    pub data_dir: Option<PathBuf>,
    pub scale: Scale,
    pub kge: KgeConfig,
    pub scenes: SynthSceneConfig,
    pub heads: SceneConfig,
    /// Cutoffs for ranking and retrieval metrics.
    pub ks: Vec<usize>,
    /// Also train and evaluate the two ablated head variants.
    pub ablations: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: None,
            scale: Scale {
                crashes: 60,
                ..Scale::default()
            },
            kge: KgeConfig {
                dim: 32,
                epochs: 10,
                ..KgeConfig::default()
            },
            scenes: SynthSceneConfig::default(),
            heads: SceneConfig::default(),
            ks: vec![1, 5, 10, 20, 50],
            ablations: true,
        }
    }
}

fn set_path(root: &mut Value, path: &[String], value: Value) -> Result<()> {
    let mut cur = root;
    for (i, key) in path.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {}: not an object", path[..i].join("."))))?;
        if i + 1 == path.len() {
            if !obj.contains_key(key) {
                return Err(Error::Config(format!("unknown config key {}", path.join("."))));
            }
            obj.insert(key.clone(), value);
            return Ok(());
        }
        cur = obj
            .get_mut(key)
            .ok_or_else(|| Error::Config(format!("unknown config key {}", path.join("."))))?;
    }
    Ok(())
}

impl RunConfig {
    /// Defaults, then the JSON file, then `HATS_` overrides from `env`.
    pub fn load<I>(file: Option<&Path>, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut v = serde_json::to_value(Self::default())?;
        if let Some(p) = file {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            let file_cfg: Self =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            v = serde_json::to_value(file_cfg)?;
        }
        let mut overrides: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        overrides.sort();
        for (k, raw) in overrides {
            let path: Vec<String> = k[ENV_PREFIX.len()..].split("__").map(str::to_ascii_lowercase).collect();
            let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
            set_path(&mut v, &path, value)?;
        }
        serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
    }

    /// Propagates the master seed into every stage config and validates.
    pub fn resolve(mut self) -> Result<Self> {
        self.kge.seed = self.seed;
        self.scenes.seed = self.seed;
        self.heads.seed = self.seed;
        self.kge.validate()?;
        self.scenes.validate()?;
        self.heads.validate()?;
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("ks must be a non-empty list of positive cutoffs".into()));
        }
        if let Some(d) = &self.data_dir {
            if !d.is_dir() {
                return Err(Error::Config(format!("data_dir {} is not a directory", d.display())));
            }
        }
        Ok(self)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Artifact paths under the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn tables(&self) -> PathBuf {
        self.root.join("tables")
    }
    pub fn graph(&self) -> PathBuf {
        self.root.join("kg/graph.ndjson")
    }
    pub fn splits(&self) -> PathBuf {
        self.root.join("triplets/splits.json")
    }
    pub fn kge_checkpoint(&self) -> PathBuf {
        self.root.join("kge/checkpoint.bin")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.root.join("kge/embeddings.ndjson")
    }
    pub fn scenes(&self, split: &str) -> PathBuf {
        self.root.join("scenes").join(split)
    }
    pub fn heads_checkpoint(&self) -> PathBuf {
        self.root.join("heads/model.bin")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics")
    }
    pub fn tsg(&self) -> PathBuf {
        self.root.join("tsg")
    }
    pub fn manifests(&self) -> PathBuf {
        self.root.join("manifests")
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    write(path, serde_json::to_string_pretty(v)? + "\n")
}

fn require(path: PathBuf, stage: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact { path, stage })
    }
}

/// Every run records what produced its artifacts.
pub fn write_manifest(cfg: &RunConfig, out: &Path, command: &str, summary: &Value) -> Result<PathBuf> {
    let path = Layout::new(out).manifests().join(format!("{command}.json"));
    write_json(
        &path,
        &json!({
            "command": command,
            "seed": cfg.seed,
            "config_hash": cfg.hash(),
            "versions": {
                "hats": VERSION,
                "tsg_schema": TSG_VERSION,
            },
            "config": cfg,
            "summary": summary,
        }),
    )?;
    Ok(path)
}

pub fn gen_synth(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let schema = Schema::builtin();
    let ds = generate_synthetic_dataset(cfg.seed, cfg.scale, &schema)?;
    let dir = Layout::new(out).tables();
    ds.tables.write_dir(&dir)?;
    write_json(&dir.join("ground_truth.json"), &ds.truth)?;
    Ok(json!({ "rows": ds.truth.rows }))
}

fn load_graph(out: &Path) -> Result<PropertyGraph> {
    let p = require(Layout::new(out).graph(), "build-kg")?;
    Ok(PropertyGraph::from_ndjson(BufReader::new(fs::File::open(p)?))?)
}

pub fn build_kg(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let lay = Layout::new(out);
    let dir = match &cfg.data_dir {
        Some(d) => d.clone(),
        None => require(lay.tables(), "gen-synth")?,
    };
    let contracts = Contracts::builtin();
    let tables = TableSet::read_dir(&dir, &contracts.tables)?;
    let built = ingest_dataset(&tables, &contracts, &Schema::builtin())?;
    let hash = built.graph.content_hash();
    write(&lay.graph(), built.graph.to_ndjson())?;
    write(&out.join("kg/stages.json"), built.stats_json() + "\n")?;
    write(&out.join("kg/rejects.csv"), built.rejects_csv())?;
    write(&out.join("kg/hash.txt"), format!("{hash}\n"))?;
    Ok(json!({
        "nodes": built.graph.node_count(),
        "edges": built.graph.edge_count(),
        "rejects": built.rejects.len(),
        "hash": hash,
    }))
}

/// Schema checks on every node and edge plus the coherence rules. The
/// report is written before a failure is returned.
pub fn validate_kg(_cfg: &RunConfig, out: &Path) -> Result<Value> {
    let schema = Schema::builtin();
    let g = load_graph(out)?;
    let mut schema_errors = Vec::new();
    for n in g.nodes() {
        if let Err(e) = PropertyGraph::validate_node(&schema, n) {
            schema_errors.push(e.to_string());
        }
    }
    for e in g.edges() {
        if let Err(err) = g.check_edge(&schema, e) {
            schema_errors.push(err.to_string());
        }
    }
    let coherence = validate_coherence(&g, &schema);
    let passed = schema_errors.is_empty() && coherence.all_passed();
    let report = json!({
        "passed": passed,
        "hash": g.content_hash(),
        "schema_errors": schema_errors,
        "coherence": coherence,
    });
    write_json(&out.join("kg/validation.json"), &report)?;
    if !passed {
        let mut failed: Vec<String> = coherence.failed().iter().map(|s| s.to_string()).collect();
        failed.extend(schema_errors.into_iter().take(3));
        return Err(Error::Validation(failed.join("; ")));
    }
    Ok(json!({ "passed": true, "rules": coherence.rules.len() }))
}

pub fn export(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let g = load_graph(out)?;
    let data = export_triplets(&g);
    data.validate()?;
    let splits = split_811(&data, cfg.seed);
    splits.check(&data)?;
    let lay = Layout::new(out);
    write(&out.join("triplets/triplets.tsv"), data.to_tsv())?;
    write(&lay.splits(), splits.to_json() + "\n")?;
    Ok(json!({
        "triplets": data.triplets.len(),
        "relations": data.num_base_relations(),
        "train": splits.train.len(),
        "valid": splits.valid.len(),
        "test": splits.test.len(),
    }))
}

struct KgeInputs {
    nodes: Vec<NodeRecord>,
    data: TripletDataset,
    splits: Splits,
}

fn kge_inputs(out: &Path) -> Result<KgeInputs> {
    let g = load_graph(out)?;
    let mut data = export_triplets(&g);
    let text = fs::read_to_string(require(Layout::new(out).splits(), "export-triplets")?)?;
    let splits = Splits::from_json(&text)?;
    splits.check(&data)?;
    data.add_reciprocals()?;
    Ok(KgeInputs {
        nodes: g.nodes().cloned().collect(),
        data,
        splits,
    })
}

/// Trains (zero epochs leaves the initialization), then writes the
/// checkpoint and the final node embeddings.
pub fn train_kge(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let inp = kge_inputs(out)?;
    let mut model = KgeModel::new(cfg.kge.clone(), &inp.data, &inp.nodes)?;
    let report = train(&mut model, &inp.data, &inp.splits, |_, _| {})?;
    let lay = Layout::new(out);
    if let Some(dir) = lay.kge_checkpoint().parent() {
        fs::create_dir_all(dir)?;
    }
    model.save(&lay.kge_checkpoint())?;
    let h = final_states(&model, &inp.data, &inp.splits)?;
    write(&lay.embeddings(), Embeddings::from_states(&inp.data, &h)?.to_ndjson())?;
    write_json(&out.join("kge/train.json"), &report)?;
    Ok(json!({
        "epochs": report.epoch_loss.len(),
        "final_loss": report.epoch_loss.last(),
    }))
}

pub fn eval_kge(_cfg: &RunConfig, out: &Path) -> Result<Value> {
    let inp = kge_inputs(out)?;
    let ckpt = require(Layout::new(out).kge_checkpoint(), "train-kge")?;
    let model = KgeModel::load(&ckpt, &inp.data, &inp.nodes)?;
    let filter = FilterIndex::build(&inp.data);
    let valid = evaluate(&model, &inp.data, &inp.splits, &filter, Split::Valid)?;
    let test = evaluate(&model, &inp.data, &inp.splits, &filter, Split::Test)?;
    let report = json!({ "valid": valid, "test": test });
    write_json(&Layout::new(out).metrics().join("kge.json"), &report)?;
    Ok(json!({ "test_triplet_mrr": test.triplet.mrr, "test_triplet_h10": test.triplet.h10 }))
}

pub fn gen_scenes(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let s = generate(&cfg.scenes)?;
    let lay = Layout::new(out);
    let mut counts = BTreeMap::new();
    for (name, samples) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
        let dir = lay.scenes(name);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        for sample in samples {
            sample.save(&dir)?;
        }
        counts.insert(name, samples.len());
    }
    Ok(json!(counts))
}

fn load_prior(out: &Path) -> Result<KnowledgePrior> {
    let p = require(Layout::new(out).embeddings(), "train-kge")?;
    let emb = Embeddings::from_ndjson(BufReader::new(fs::File::open(p)?))?;
    Ok(KnowledgePrior::from_embeddings(&emb)?)
}

fn load_scenes(out: &Path, split: &str) -> Result<Vec<crate::scene::SceneSample>> {
    Ok(load_dir(&require(Layout::new(out).scenes(split), "gen-scenes")?)?)
}

fn load_heads(out: &Path) -> Result<SceneModel> {
    let prior = load_prior(out)?;
    let ckpt = require(Layout::new(out).heads_checkpoint(), "train-heads")?;
    Ok(SceneModel::load(&ckpt, prior)?)
}

pub fn train_heads(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let prior = load_prior(out)?;
    let train_set = load_scenes(out, "train")?;
    let val = load_scenes(out, "val")?;
    let (model, report) = train_scene(cfg.heads.clone(), prior, &train_set, &val)?;
    let lay = Layout::new(out);
    if let Some(dir) = lay.heads_checkpoint().parent() {
        fs::create_dir_all(dir)?;
    }
    model.save(&lay.heads_checkpoint())?;
    write_json(&out.join("heads/train.json"), &report)?;
    Ok(json!({ "best_epoch": report.best_epoch, "epochs": report.epoch_loss.len() }))
}

pub fn eval_heads(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let model = load_heads(out)?;
    let test = load_scenes(out, "test")?;
    let eval = evaluate_scenes(&model, &test, &cfg.ks)?;
    let lay = Layout::new(out);
    write_json(&lay.metrics().join("heads.json"), &eval)?;
    let mut summary = json!({
        "relevance_f1": eval.relevance.f1,
        "mechanism_acc": eval.mechanism_acc,
        "side_acc": eval.side_acc,
        "severity_acc": eval.severity_acc,
    });
    if cfg.ablations {
        let train_set = load_scenes(out, "train")?;
        let val = load_scenes(out, "val")?;
        let ab = run_ablations(&cfg.heads, &load_prior(out)?, &train_set, &val, &test, &cfg.ks)?;
        let holds = ab.direction_holds();
        write_json(
            &lay.metrics().join("ablation.json"),
            &json!({ "direction_holds": holds, "report": ab }),
        )?;
        summary["ablation_direction_holds"] = json!(holds);
    }
    Ok(summary)
}

/// One JSON and one DOT file per test scene.
pub fn emit_tsg(_cfg: &RunConfig, out: &Path) -> Result<Value> {
    let model = load_heads(out)?;
    let test = load_scenes(out, "test")?;
    let dir = Layout::new(out).tsg();
    fs::create_dir_all(&dir)?;
    let mut selected = 0;
    for s in &test {
        let g = assemble_tsg(&predict(&model, s)?, s)?;
        selected += g.selected().count();
        write(&dir.join(format!("{}.json", s.id)), g.to_json()?)?;
        write(&dir.join(format!("{}.dot", s.id)), render_dot(&g))?;
    }
    Ok(json!({ "graphs": test.len(), "selected": selected }))
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, x, out);
            }
        }
        Value::Array(a) => {
            for (i, x) in a.iter().enumerate() {
                flatten(&format!("{prefix}.{i}"), x, out);
            }
        }
        Value::Number(_) | Value::Bool(_) => out.push((prefix.to_string(), v.to_string())),
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        Value::Null => {}
    }
}

/// Aggregates every metric JSON into `report.json` and a flat
/// `report.csv` of `metric,value` rows.
pub fn report(_cfg: &RunConfig, out: &Path) -> Result<Value> {
    let dir = Layout::new(out).metrics();
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|_| Error::MissingArtifact {
            path: dir.clone(),
            stage: "eval-kge",
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && p.file_stem().is_some_and(|s| s != "report"))
        .collect();
    files.sort();
    let mut all = serde_json::Map::new();
    for f in &files {
        let name = f.file_stem().expect("json file").to_string_lossy().into_owned();
        all.insert(name, serde_json::from_str(&fs::read_to_string(f)?)?);
    }
    let all = Value::Object(all);
    write_json(&dir.join("report.json"), &all)?;
    let mut rows = Vec::new();
    flatten("", &all, &mut rows);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["metric", "value"]).map_err(|e| Error::Io(e.into()))?;
    for (k, v) in &rows {
        w.write_record([k, v]).map_err(|e| Error::Io(e.into()))?;
    }
    write(
        &dir.join("report.csv"),
        w.into_inner().map_err(|e| Error::Io(e.into_error()))?,
    )?;
    Ok(json!({ "sources": files.len(), "values": rows.len() }))
}

pub type Stage = fn(&RunConfig, &Path) -> Result<Value>;

/// Subcommand name and stage, in pipeline order.
pub const STAGES: [(&str, Stage); 11] = [
    ("gen-synth", gen_synth),
    ("build-kg", build_kg),
    ("validate-kg", validate_kg),
    ("export-triplets", export),
    ("train-kge", train_kge),
    ("eval-kge", eval_kge),
    ("gen-scenes", gen_scenes),
    ("train-heads", train_heads),
    ("eval-heads", eval_heads),
    ("emit-tsg", emit_tsg),
    ("report", report),
];

/// Runs one stage and writes its manifest.
pub fn run_stage(cfg: &RunConfig, out: &Path, command: &str) -> Result<Value> {
    let (_, stage) = STAGES
        .iter()
        .find(|(n, _)| *n == command)
        .ok_or_else(|| Error::Config(format!("unknown stage {command}")))?;
    fs::create_dir_all(out)?;
    let summary = stage(cfg, out)?;
    write_manifest(cfg, out, command, &summary)?;
    Ok(summary)
}

/// Every stage in order.
pub fn run_all(cfg: &RunConfig, out: &Path) -> Result<BTreeMap<String, Value>> {
    let mut summaries = BTreeMap::new();
    for (name, _) in STAGES {
        log::info!("stage {name}");
        summaries.insert(name.to_string(), run_stage(cfg, out, name)?);
    }
    Ok(summaries)
}
