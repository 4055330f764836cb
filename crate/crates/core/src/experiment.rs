//! Config-driven experiment pipeline: prepare data, pretrain the backbone,
//! build the item graph, train, evaluate. Stage outputs are cached under
//! content-hash keys so reruns skip finished work.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::AlignmentSchedule;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::dataset::{assign_longtail_groups, load_interactions, split_8_1_1, InteractionDataset, Split};
use crate::error::{EgraError, Result};
use crate::evaluator::{evaluate, longtail_evaluate, report_table, EvalReport, DEFAULT_KS};
use crate::features::{load_matrix, save_matrix, ModalityFeatureSet};
use crate::knn_graph::{build_gume_comparator_graph, topk_binary_graph, topk_weighted_graph, DEFAULT_H, DEFAULT_K};
use crate::model::{EgraModel, ModelState};
use crate::sparse::SparseAdjacency;
use crate::synthetic::{generate, SyntheticConfig};
use crate::trainer::{fit, pretrain_backbone, pretrain_config, Ablation, EpochRecord, TrainConfig};

/// Name of the marker file left in the output directory when a stage fails.
pub const FAILURE_MARKER: &str = "FAILED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `user item` lines, split 8:1:1 with the experiment seed.
    pub interactions: Option<PathBuf>,
    /// A split manifest (`user item split` lines); takes precedence over
    /// `interactions`.
    pub split: Option<PathBuf>,
    /// Modality name to `EGRAF1` feature file.
    pub features: BTreeMap<String, PathBuf>,
    /// External pretrained item embeddings; skips the pretraining stage.
    pub pretrained_embeddings: Option<PathBuf>,
    /// Generate a synthetic dataset instead of reading files.
    pub synthetic: Option<SyntheticConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            interactions: None,
            split: None,
            features: BTreeMap::new(),
            pretrained_embeddings: None,
            synthetic: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    /// Neighbors per item in the pretrained-embedding graph.
    pub h: usize,
    /// Neighbors per item in each modality graph.
    pub k: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig { h: DEFAULT_H, k: DEFAULT_K }
    }
}

/// Source of the item-item block of the behavior graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Enhancement {
    /// Top-H graph over pretrained item embeddings.
    #[default]
    Pretrained,
    /// Intersection of the per-modality Top-H graphs.
    Intersected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// One of `none`, `ebg`, `bda`, `en`, `ep`.
    pub ablation: String,
    pub enhancement: Enhancement,
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub graph: GraphConfig,
    pub train: TrainConfig,
    pub align: AlignmentSchedule,
    /// Dotted config key to the list of values it takes in a grid run.
    pub grid: BTreeMap<String, Vec<toml::Value>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 2024,
            ablation: "none".into(),
            enhancement: Enhancement::Pretrained,
            out_dir: PathBuf::from("runs/egra"),
            cache_dir: None,
            data: DataConfig::default(),
            graph: GraphConfig::default(),
            train: TrainConfig::default(),
            align: AlignmentSchedule::default(),
            grid: BTreeMap::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| EgraError::Config(e.to_string()))
    }

    /// Reads a config file. Relative data paths resolve against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| EgraError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.data;
        d.interactions.iter_mut().for_each(fix);
        d.split.iter_mut().for_each(fix);
        d.pretrained_embeddings.iter_mut().for_each(fix);
        d.features.values_mut().for_each(fix);
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn ablation(&self) -> Result<Ablation> {
        Ablation::parse(&self.ablation)
    }

    /// Variant label, e.g. `EGRA/BDA` or `EGRA[intersected]`.
    pub fn label(&self) -> Result<String> {
        let a = self.ablation()?;
        Ok(match (self.enhancement, a.ebg) {
            (Enhancement::Intersected, false) => format!("{}[intersected]", a.label()),
            _ => a.label(),
        })
    }

    /// Training settings with the experiment seed, ablation and schedule.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            seed: self.seed,
            ablation: self.ablation()?,
            schedule: self.align,
            ..self.train.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.out_dir.join("cache"))
    }

    /// Checks settings and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        self.train_config()?;
        if self.graph.h == 0 || self.graph.k == 0 {
            return Err(EgraError::Config("graph.h and graph.k must be positive".into()));
        }
        let d = &self.data;
        if d.synthetic.is_none() {
            if d.interactions.is_none() && d.split.is_none() {
                return Err(EgraError::Config(
                    "data.interactions, data.split or data.synthetic is required".into(),
                ));
            }
            if d.features.is_empty() {
                return Err(EgraError::Config("data.features lists no modality".into()));
            }
        }
        let mut files: Vec<(&str, &PathBuf)> = Vec::new();
        files.extend(d.interactions.iter().map(|p| ("data.interactions", p)));
        files.extend(d.split.iter().map(|p| ("data.split", p)));
        files.extend(d.pretrained_embeddings.iter().map(|p| ("data.pretrained_embeddings", p)));
        files.extend(d.features.values().map(|p| ("data.features", p)));
        for (key, p) in files {
            if !p.is_file() {
                return Err(EgraError::Config(format!("{key}: file not found: {}", p.display())));
            }
        }
        Ok(())
    }

    /// Digest of the resolved config, ignoring output locations and the grid.
    pub fn content_hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.cache_dir = None;
        c.grid.clear();
        hex::encode(Sha256::digest(c.to_toml_string().as_bytes()))
    }

    /// Returns a copy with the dotted `key` set to `value`.
    pub fn with_override(&self, key: &str, value: &toml::Value) -> Result<Self> {
        let mut tree = toml::Value::try_from(self)
            .map_err(|e| EgraError::Config(format!("config does not serialize: {e}")))?;
        let mut node = &mut tree;
        let parts: Vec<&str> = key.split('.').collect();
        for (depth, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| EgraError::Config(format!("'{key}' does not name a config table")))?;
            if depth + 1 == parts.len() {
                let v = match (table.get(*part), value) {
                    (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(*i as f64),
                    _ => value.clone(),
                };
                table.insert(part.to_string(), v);
                break;
            }
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        tree.try_into()
            .map_err(|e| EgraError::Config(format!("override {key} = {value}: {e}")))
    }
}

/// Incremental content key.
struct Key(Sha256);

impl Key {
    fn new(stage: &str) -> Self {
        let mut h = Sha256::new();
        h.update(stage.as_bytes());
        Key(h)
    }

    fn part(mut self, s: &str) -> Self {
        self.0.update((s.len() as u64).to_le_bytes());
        self.0.update(s.as_bytes());
        self
    }

    fn finish(self) -> String {
        hex::encode(&self.0.finalize()[..12])
    }
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| EgraError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config serializes")
}

/// Cache directory with hit bookkeeping.
#[derive(Debug)]
pub struct StageCache {
    dir: PathBuf,
    /// Files reused during this run.
    pub hits: Vec<String>,
}

impl StageCache {
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| EgraError::io(dir, e))?;
        Ok(StageCache {
            dir: dir.to_path_buf(),
            hits: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Loads `name` if present, otherwise computes and stores it.
    fn get_or<T>(
        &mut self,
        name: &str,
        load: impl FnOnce(&Path) -> Result<T>,
        store: impl FnOnce(&Path, &T) -> Result<()>,
        compute: impl FnOnce() -> Result<T>,
    ) -> Result<T> {
        let path = self.path(name);
        if path.exists() {
            info!("reusing cached {name}");
            self.hits.push(name.to_string());
            return load(&path);
        }
        let value = compute()?;
        // write then rename so an interrupted run never leaves a partial entry
        let tmp = self.path(&format!("{name}.partial"));
        store(&tmp, &value)?;
        fs::rename(&tmp, &path).map_err(|e| EgraError::io(&path, e))?;
        Ok(value)
    }

    fn graph(&mut self, name: &str, compute: impl FnOnce() -> Result<SparseAdjacency>) -> Result<SparseAdjacency> {
        self.get_or(name, SparseAdjacency::load, |p, g| g.save(p), compute)
    }

    fn matrix(&mut self, name: &str, compute: impl FnOnce() -> Result<Array2<f32>>) -> Result<Array2<f32>> {
        self.get_or(name, load_matrix, |p, m| save_matrix(p, m), compute)
    }
}

/// Dataset, features and semantic graphs with their content keys.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: InteractionDataset,
    pub features: ModalityFeatureSet,
    /// Raw (unnormalized) Top-K graphs in modality-name order.
    pub semantic_graphs: Vec<SparseAdjacency>,
    data_key: String,
    feature_keys: Vec<String>,
}

/// Loads or generates the data and builds the modality graphs.
pub fn prepare(cfg: &ExperimentConfig, cache: &mut StageCache) -> Result<Prepared> {
    let (dataset, features, data_key, feature_keys) = match &cfg.data.synthetic {
        Some(syn) => {
            let data = generate(syn)?;
            let key = Key::new("synthetic").part(&json(syn)).finish();
            let fkeys = data
                .features
                .modalities()
                .map(|m| Key::new("synthetic-feature").part(&key).part(m).finish())
                .collect();
            (data.dataset, data.features, key, fkeys)
        }
        None => {
            let (ds, key) = load_split(cfg, cache)?;
            let mut features = ModalityFeatureSet::new();
            let mut fkeys = Vec::new();
            for (name, path) in &cfg.data.features {
                features.insert(name, load_matrix(path)?, ds.num_items)?;
                fkeys.push(file_digest(path)?);
            }
            (ds, features, key, fkeys)
        }
    };
    let mut semantic_graphs = Vec::new();
    for ((name, m), fkey) in features.iter().zip(&feature_keys) {
        let key = Key::new("semantic").part(fkey).part(&cfg.graph.k.to_string()).finish();
        let g = cache.graph(&format!("semantic-{name}-{key}.egrag"), || {
            info!("building Top-{} graph for modality '{name}'", cfg.graph.k);
            topk_weighted_graph(m.view(), cfg.graph.k)
        })?;
        semantic_graphs.push(g);
    }
    Ok(Prepared {
        dataset,
        features,
        semantic_graphs,
        data_key,
        feature_keys,
    })
}

fn load_split(cfg: &ExperimentConfig, cache: &mut StageCache) -> Result<(InteractionDataset, String)> {
    if let Some(manifest) = &cfg.data.split {
        let ds = InteractionDataset::read_split_manifest(manifest)?;
        return Ok((ds, file_digest(manifest)?));
    }
    let path = cfg.data.interactions.as_ref().expect("validated");
    let key = Key::new("split")
        .part(&file_digest(path)?)
        .part(&cfg.seed.to_string())
        .finish();
    let ds = cache.get_or(
        &format!("split-{key}.txt"),
        InteractionDataset::read_split_manifest,
        |p, ds| ds.write_split_manifest(p),
        || split_8_1_1(&load_interactions(path)?, cfg.seed),
    )?;
    Ok((ds, key))
}

/// Pretrained item embeddings: the external file when configured, otherwise
/// the (cached) pretraining stage. Returns the embeddings and their key.
pub fn pretrained_embeddings(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    cache: &mut StageCache,
) -> Result<(Array2<f32>, String)> {
    if let Some(path) = &cfg.data.pretrained_embeddings {
        let m = load_matrix(path)?;
        if m.nrows() != prep.dataset.num_items {
            return Err(EgraError::Shape(format!(
                "pretrained embeddings have {} rows for {} items",
                m.nrows(),
                prep.dataset.num_items
            )));
        }
        return Ok((m, file_digest(path)?));
    }
    let tc = cfg.train_config()?;
    let pre = pretrain_config(&tc);
    let key = Key::new("pretrain")
        .part(&prep.data_key)
        .part(&prep.feature_keys.join(","))
        .part(&cfg.graph.k.to_string())
        .part(&json(&pre))
        .part(&json(&pre.schedule))
        .part(&cfg.seed.to_string())
        .finish();
    let m = cache.matrix(&format!("pretrained-{key}.bin"), || {
        info!("pretraining backbone");
        pretrain_backbone(&prep.dataset, &prep.features, &prep.semantic_graphs, &tc)
    })?;
    Ok((m, key))
}

/// Item-item block of the behavior graph, or `None` under the EBG ablation.
pub fn item_graph(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    cache: &mut StageCache,
) -> Result<Option<SparseAdjacency>> {
    if cfg.ablation()?.ebg {
        return Ok(None);
    }
    let h = cfg.graph.h.to_string();
    let g = match cfg.enhancement {
        Enhancement::Pretrained => {
            let (e_pt, key) = pretrained_embeddings(cfg, prep, cache)?;
            let key = Key::new("item-graph").part(&key).part(&h).finish();
            cache.graph(&format!("item-graph-{key}.egrag"), || {
                info!("building Top-{} item graph", cfg.graph.h);
                topk_binary_graph(e_pt.view(), cfg.graph.h)
            })?
        }
        Enhancement::Intersected => {
            let key = Key::new("intersected")
                .part(&prep.feature_keys.join(","))
                .part(&h)
                .finish();
            cache.graph(&format!("intersected-{key}.egrag"), || {
                let mut graphs = prep
                    .features
                    .iter()
                    .map(|(_, m)| topk_binary_graph(m.view(), cfg.graph.h));
                let mut acc = graphs.next().expect("at least one modality")?;
                for g in graphs {
                    acc = build_gume_comparator_graph(&acc, &g?)?;
                }
                Ok(acc)
            })?
        }
    };
    Ok(Some(g))
}

/// Model of a config over prepared data.
pub fn build_model(cfg: &ExperimentConfig, prep: &Prepared, cache: &mut StageCache) -> Result<EgraModel> {
    let g = item_graph(cfg, prep, cache)?;
    EgraModel::new(
        &prep.dataset,
        &prep.features,
        g.as_ref(),
        &prep.semantic_graphs,
        cfg.train_config()?.dims(),
    )
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub label: String,
    pub config_hash: String,
    pub test: EvalReport,
    /// Per popularity group, head first.
    pub longtail: Vec<Option<EvalReport>>,
    pub best_epoch: usize,
    pub best_valid: f64,
    pub history: Vec<EpochRecord>,
    pub cache_hits: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainSummary {
    best_epoch: usize,
    best_valid: f64,
}

/// Runs a stage and leaves a failure marker in `out_dir` if it fails.
fn stage<T>(out_dir: &Path, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().inspect_err(|e| {
        let _ = fs::write(
            out_dir.join(FAILURE_MARKER),
            format!("stage = {name}\nerror = {e}\n"),
        );
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| EgraError::io(path, e))
}

/// Runs the full pipeline and writes `report.txt`, `report.tsv`,
/// `longtail.tsv`, `history.jsonl`, `config.toml` and `checkpoint/` into
/// the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let out = cfg.out_dir.as_path();
    fs::create_dir_all(out).map_err(|e| EgraError::io(out, e))?;
    let _ = fs::remove_file(out.join(FAILURE_MARKER));
    let mut cache = StageCache::open(&cfg.cache_dir())?;
    let label = cfg.label()?;
    let config_hash = cfg.content_hash();
    write(&out.join("config.toml"), &cfg.to_toml_string())?;
    info!("running {label} (config {})", &config_hash[..12]);

    let prep = stage(out, "prepare", || prepare(cfg, &mut cache))?;
    let model = stage(out, "build-graph", || build_model(cfg, &prep, &mut cache))?;
    let ds = &prep.dataset;

    let train_key = Key::new("train").part(&config_hash).part(&prep.data_key).finish();
    let ckpt_dir = cache.path(&format!("train-{train_key}"));
    let template = model.init_state(&mut rand::rng());
    let (state, history, summary) = stage(out, "train", || {
        if ckpt_dir.join("summary.json").exists() {
            info!("reusing cached train-{train_key}");
            cache.hits.push(format!("train-{train_key}"));
            let state = load_checkpoint(&ckpt_dir, &template)?;
            let history = read_history(&ckpt_dir.join("history.jsonl"))?;
            let s = fs::read_to_string(ckpt_dir.join("summary.json"))
                .map_err(|e| EgraError::io(&ckpt_dir, e))?;
            let summary: TrainSummary =
                serde_json::from_str(&s).map_err(|e| EgraError::Data(e.to_string()))?;
            return Ok((state, history, summary));
        }
        let result = fit(&model, ds, &cfg.train_config()?)?;
        let tmp = cache.path(&format!("train-{train_key}.partial"));
        let _ = fs::remove_dir_all(&tmp);
        save_checkpoint(&result.state, &tmp)?;
        write(&tmp.join("history.jsonl"), &result.history_jsonl())?;
        let summary = TrainSummary {
            best_epoch: result.best_epoch,
            best_valid: result.best_valid,
        };
        write(&tmp.join("summary.json"), &json(&summary))?;
        fs::rename(&tmp, &ckpt_dir).map_err(|e| EgraError::io(&ckpt_dir, e))?;
        // evaluate the stored precision so cached and fresh runs agree
        let state = load_checkpoint(&ckpt_dir, &template)?;
        Ok((state, result.history, summary))
    })?;

    let (test, longtail) = stage(out, "evaluate", || {
        let mut reports = evaluate_state(&model, ds, &state)?;
        for r in std::iter::once(&mut reports.0).chain(reports.1.iter_mut().flatten()) {
            r.metadata.insert("config_hash".into(), config_hash.clone());
            r.metadata.insert("seed".into(), cfg.seed.to_string());
            r.metadata.insert("epoch".into(), summary.best_epoch.to_string());
            r.metadata.insert("variant".into(), label.clone());
        }
        Ok(reports)
    })?;

    save_checkpoint(&state, &out.join("checkpoint"))?;
    let history_text: String = history
        .iter()
        .map(|r| json(r) + "\n")
        .collect();
    write(&out.join("history.jsonl"), &history_text)?;
    let mut report = test.to_kv("test");
    let _ = writeln!(report, "valid.best_recall@{} = {:.6}", cfg.train.valid_k, summary.best_valid);
    for (g, r) in longtail.iter().enumerate() {
        match r {
            Some(r) => report.push_str(&r.to_kv(&format!("group{}", g + 1))),
            None => {
                let _ = writeln!(report, "group{}.absent = true", g + 1);
            }
        }
    }
    write(&out.join("report.txt"), &report)?;
    write(&out.join("report.tsv"), &report_table(&[(label.clone(), test.clone())], &DEFAULT_KS))?;
    write(&out.join("longtail.tsv"), &longtail_table(&longtail))?;

    Ok(ExperimentOutcome {
        label,
        config_hash,
        test,
        longtail,
        best_epoch: summary.best_epoch,
        best_valid: summary.best_valid,
        history,
        cache_hits: cache.hits,
    })
}

fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| EgraError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| EgraError::Data(format!("{}: {e}", path.display()))))
        .collect()
}

/// Test metrics and per-group metrics of a trained state.
pub fn evaluate_state(
    model: &EgraModel,
    ds: &InteractionDataset,
    state: &ModelState,
) -> Result<(EvalReport, Vec<Option<EvalReport>>)> {
    if ds.test.is_empty() {
        return Err(EgraError::Data("test split is empty".into()));
    }
    let fused = model.forward(state)?.fused;
    let test = evaluate(fused.view(), ds, Split::Test, &DEFAULT_KS)?;
    let groups = assign_longtail_groups(ds);
    let longtail = longtail_evaluate(fused.view(), ds, &groups, &DEFAULT_KS)?;
    Ok((test, longtail))
}

/// Evaluates a saved checkpoint under a config, rebuilding (cached) graphs.
pub fn evaluate_checkpoint(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
) -> Result<(EvalReport, Vec<Option<EvalReport>>)> {
    cfg.validate()?;
    let mut cache = StageCache::open(&cfg.cache_dir())?;
    let prep = prepare(cfg, &mut cache)?;
    let model = build_model(cfg, &prep, &mut cache)?;
    let template = model.init_state(&mut rand::rng());
    let state = load_checkpoint(checkpoint, &template)?;
    evaluate_state(&model, &prep.dataset, &state)
}

/// `group R@10 R@20 N@10 N@20` rows; absent groups are marked `-`.
pub fn longtail_table(groups: &[Option<EvalReport>]) -> String {
    let mut out = String::from("group\tusers\tR@10\tR@20\tN@10\tN@20\n");
    for (g, r) in groups.iter().enumerate() {
        match r {
            Some(r) => {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                    g + 1,
                    r.num_users,
                    r.recall_at(10),
                    r.recall_at(20),
                    r.ndcg_at(10),
                    r.ndcg_at(20)
                );
            }
            None => {
                let _ = writeln!(out, "{}\t0\t-\t-\t-\t-", g + 1);
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct GridCell {
    /// Grid key to the value used in this cell.
    pub assignment: BTreeMap<String, String>,
    pub outcome: ExperimentOutcome,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub cells: Vec<GridCell>,
    /// Index of the cell with the best validation recall.
    pub best: usize,
    /// One row per cell.
    pub summary: String,
    /// Per grid key and value, the best validation recall among the cells
    /// using that value and the test metrics of that cell.
    pub sensitivity: String,
}

/// Cartesian product of the grid values, in key order.
pub fn grid_cells(grid: &BTreeMap<String, Vec<toml::Value>>) -> Vec<Vec<(String, toml::Value)>> {
    let mut cells: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
    for (key, values) in grid {
        cells = cells
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    cells
}

fn value_text(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Runs every grid combination into `<out_dir>/cells/<n>` with a shared
/// cache and writes `grid.tsv` and `sensitivity.tsv`.
pub fn run_grid(cfg: &ExperimentConfig) -> Result<GridOutcome> {
    if cfg.grid.is_empty() || cfg.grid.values().any(Vec::is_empty) {
        return Err(EgraError::Config("grid is empty".into()));
    }
    let cache_dir = cfg.cache_dir();
    let mut cells = Vec::new();
    for (n, assignment) in grid_cells(&cfg.grid).into_iter().enumerate() {
        let mut c = cfg.clone();
        c.grid.clear();
        for (key, value) in &assignment {
            c = c.with_override(key, value)?;
        }
        c.out_dir = cfg.out_dir.join("cells").join(format!("{n:03}"));
        c.cache_dir = Some(cache_dir.clone());
        c.validate()?;
        let outcome = run_experiment(&c)?;
        cells.push(GridCell {
            assignment: assignment.iter().map(|(k, v)| (k.clone(), value_text(v))).collect(),
            outcome,
        });
    }
    let best = (0..cells.len())
        .max_by(|&a, &b| {
            cells[a]
                .outcome
                .best_valid
                .total_cmp(&cells[b].outcome.best_valid)
                .then(b.cmp(&a))
        })
        .expect("grid is nonempty");

    let keys: Vec<&String> = cfg.grid.keys().collect();
    let mut summary = String::from("cell");
    for k in &keys {
        let _ = write!(summary, "\t{k}");
    }
    summary.push_str("\tvalid_R@20\tR@10\tR@20\tN@10\tN@20\tbest\n");
    for (n, c) in cells.iter().enumerate() {
        let _ = write!(summary, "{n}");
        for k in &keys {
            let _ = write!(summary, "\t{}", c.assignment[*k]);
        }
        let t = &c.outcome.test;
        let _ = writeln!(
            summary,
            "\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}",
            c.outcome.best_valid,
            t.recall_at(10),
            t.recall_at(20),
            t.ndcg_at(10),
            t.ndcg_at(20),
            if n == best { "*" } else { "" }
        );
    }

    let mut sensitivity = String::from("parameter\tvalue\tvalid_R@20\tR@20\tN@20\n");
    for (key, values) in &cfg.grid {
        for v in values {
            let text = value_text(v);
            let pick = cells
                .iter()
                .filter(|c| c.assignment[key] == text)
                .max_by(|a, b| a.outcome.best_valid.total_cmp(&b.outcome.best_valid));
            if let Some(c) = pick {
                let _ = writeln!(
                    sensitivity,
                    "{key}\t{text}\t{:.4}\t{:.4}\t{:.4}",
                    c.outcome.best_valid,
                    c.outcome.test.recall_at(20),
                    c.outcome.test.ndcg_at(20)
                );
            }
        }
    }
    write(&cfg.out_dir.join("grid.tsv"), &summary)?;
    write(&cfg.out_dir.join("sensitivity.tsv"), &sensitivity)?;
    Ok(GridOutcome {
        cells,
        best,
        summary,
        sensitivity,
    })
}
