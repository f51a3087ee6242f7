//! On-disk workspace: one subdirectory per stage, each with a manifest.
//!
//! ```text
//! <ws>/corpus/      targets.jsonl, context.jsonl
//! <ws>/env/         environments.jsonl, graphs.jsonl
//! <ws>/relations/<method>/  graphs.jsonl, reports.jsonl, calls.jsonl
//! <ws>/train/<method>/<model>/seed-<n>/  checkpoint.json
//! <ws>/eval/<method>/<model>/  summary.json, summary.csv, seed-<n>.json
//! <ws>/analysis/    types.json, assignments.csv, distribution.csv
//! <ws>/cache/       embeddings and LLM responses
//! ```
//!
//! A stage is skipped when its manifest records the current config hash,
//! unless forced. Stages only read earlier stages' files.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{RelationSource, RunConfig};
use crate::corpus::{ingest_corpus, Corpus, Schema, Split};
use crate::cost::{count_tokens, CostReport};
use crate::detector::ModelKind;
use crate::encoding::{ContextEnvironment, EmbeddingCache, Embedder};
use crate::error::{Error, Result};
use crate::graph::OmissionGraph;
use crate::llm::{CallRecord, ClientKind, LlmBackend, LlmCaller, RemoteBackend, ResponseCache};
use crate::metrics::MetricsReport;
use crate::pipeline::{self, MetricsSummary, SeedResult, SplitGraphs};
use crate::prompts::{IntentSample, SimMode};
use crate::relations::IntentReport;
use crate::simulate::{self, assign_type, TypeDistribution, TypeEntry, TypeStub, ZAxis};
use crate::train::{predict, train, Checkpoint};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub outputs: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

pub struct Workspace {
    root: PathBuf,
}

/// Held for the duration of a command; removes the lock file on drop.
pub struct WorkspaceLock {
    path: PathBuf,
}

impl Drop for WorkspaceLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::MissingStage(path.to_path_buf()));
    }
    let mut out = Vec::new();
    for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(v)?)?;
    Ok(())
}

fn model_dir_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::OmiGraph => "omigraph",
        ModelKind::TargetOnly => "target-only",
    }
}

impl Workspace {
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Workspace {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn lock(&self) -> Result<WorkspaceLock> {
        let path = self.root.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(WorkspaceLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(self.root.clone())),
            Err(e) => Err(e.into()),
        }
    }

    pub fn dir(&self, parts: &[&str]) -> PathBuf {
        parts.iter().fold(self.root.clone(), |p, s| p.join(s))
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.dir(&["corpus"])
    }

    pub fn relations_dir(&self, source: RelationSource) -> PathBuf {
        self.dir(&["relations", source.as_str()])
    }

    pub fn train_dir(&self, source: RelationSource, kind: ModelKind) -> PathBuf {
        self.dir(&["train", source.as_str(), model_dir_name(kind)])
    }

    pub fn eval_dir(&self, source: RelationSource, kind: ModelKind) -> PathBuf {
        self.dir(&["eval", source.as_str(), model_dir_name(kind)])
    }

    pub fn checkpoint_path(&self, source: RelationSource, kind: ModelKind, seed: u64) -> PathBuf {
        self.train_dir(source, kind).join(format!("seed-{seed}")).join("checkpoint.json")
    }

    /// Config hash combined with the ingested corpus hash, so re-ingesting
    /// invalidates every later stage.
    fn stage_hash(&self, cfg: &RunConfig) -> String {
        let corpus = fs::read(self.corpus_dir().join("manifest.json"))
            .ok()
            .and_then(|b| serde_json::from_slice::<Manifest>(&b).ok())
            .map(|m| m.config_hash)
            .unwrap_or_default();
        crate::text::sha256_hex(&[&cfg.hash(), &corpus])
    }

    fn manifest_matches(dir: &Path, hash: &str) -> bool {
        fs::read(dir.join("manifest.json"))
            .ok()
            .and_then(|b| serde_json::from_slice::<Manifest>(&b).ok())
            .is_some_and(|m| m.config_hash == hash)
    }

    fn finish(dir: &Path, stage: &str, hash: &str, outputs: &[&str]) -> Result<()> {
        write_json(
            &dir.join("manifest.json"),
            &Manifest {
                stage: stage.into(),
                config_hash: hash.into(),
                outputs: outputs.iter().map(|s| s.to_string()).collect(),
            },
        )
    }

    pub fn embedder(&self, cfg: &RunConfig) -> Result<Embedder> {
        let cache = Arc::new(EmbeddingCache::open(&self.dir(&["cache", "embeddings"]))?);
        pipeline::make_embedder(cfg, cache)
    }

    pub fn response_cache(&self) -> Result<ResponseCache> {
        ResponseCache::open(&self.dir(&["cache", "llm"]))
    }

    pub fn load_corpora(&self) -> Result<(Corpus, Corpus)> {
        let dir = self.corpus_dir();
        for f in ["targets.jsonl", "context.jsonl"] {
            if !dir.join(f).exists() {
                return Err(Error::MissingStage(dir.join(f)));
            }
        }
        Ok((
            ingest_corpus(&dir.join("targets.jsonl"), Schema::Target)?,
            ingest_corpus(&dir.join("context.jsonl"), Schema::Context)?,
        ))
    }

    /// Copies validated corpora into the workspace.
    pub fn ingest(&self, targets: &Path, context: &Path) -> Result<(usize, usize)> {
        let t = ingest_corpus(targets, Schema::Target)?;
        let c = ingest_corpus(context, Schema::Context)?;
        let dir = self.corpus_dir();
        fs::create_dir_all(&dir)?;
        t.write_jsonl(&dir.join("targets.jsonl"))?;
        c.write_jsonl(&dir.join("context.jsonl"))?;
        let hash = crate::text::sha256_hex(&[
            &fs::read_to_string(dir.join("targets.jsonl"))?,
            &fs::read_to_string(dir.join("context.jsonl"))?,
        ]);
        Self::finish(&dir, "ingest", &hash, &["targets.jsonl", "context.jsonl"])?;
        Ok((t.len(), c.len()))
    }

    /// Candidate pools, top-K environments and graph construction.
    pub fn build_env(&self, cfg: &RunConfig, force: bool) -> Result<StageStatus> {
        let dir = self.dir(&["env"]);
        let hash = self.stage_hash(cfg);
        if !force && Self::manifest_matches(&dir, &hash) {
            return Ok(StageStatus::Skipped);
        }
        let (targets, context) = self.load_corpora()?;
        let embedder = self.embedder(cfg)?;
        let envs = pipeline::build_environments(&targets, &context, cfg.window_days, cfg.top_k, &embedder)?;
        let graphs = pipeline::build_graphs(&targets, &context, &envs, cfg.max_segments, &embedder)?;
        write_jsonl(&dir.join("environments.jsonl"), &envs)?;
        write_jsonl(&dir.join("graphs.jsonl"), &graphs)?;
        embedder.flush_manifest()?;
        Self::finish(&dir, "build-env", &hash, &["environments.jsonl", "graphs.jsonl"])?;
        Ok(StageStatus::Ran)
    }

    pub fn environments(&self) -> Result<Vec<ContextEnvironment>> {
        read_jsonl(&self.dir(&["env", "environments.jsonl"]))
    }

    /// Intent inference over the built graphs.
    pub fn infer_intents(&self, cfg: &RunConfig, force: bool) -> Result<StageStatus> {
        let dir = self.relations_dir(RelationSource::Full);
        let hash = self.stage_hash(cfg);
        if !force && Self::manifest_matches(&dir, &hash) {
            return Ok(StageStatus::Skipped);
        }
        let (targets, _) = self.load_corpora()?;
        let embedder = self.embedder(cfg)?;
        let mut graphs: Vec<OmissionGraph> = read_jsonl(&self.dir(&["env", "graphs.jsonl"]))?;
        pipeline::hydrate_graphs(&mut graphs, &targets, &embedder)?;
        let cache = self.response_cache()?;
        let reports = pipeline::relate_full(&mut graphs, &cfg.client_spec(), &cache, &embedder)?;
        let calls: Vec<CallRecord> = reports.iter().flat_map(|r| r.calls.clone()).collect();
        write_jsonl(&dir.join("graphs.jsonl"), &graphs)?;
        write_jsonl(&dir.join("reports.jsonl"), &reports)?;
        write_jsonl(&dir.join("calls.jsonl"), &calls)?;
        Self::finish(&dir, "infer-intents", &hash, &["graphs.jsonl", "reports.jsonl", "calls.jsonl"])?;
        Ok(StageStatus::Ran)
    }

    /// Simulated environments in place of retrieval and intent inference.
    pub fn simulate(&self, cfg: &RunConfig, mode: SimMode, force: bool) -> Result<StageStatus> {
        let source = match mode {
            SimMode::SimZero => RelationSource::SimZero,
            SimMode::SimRule => RelationSource::SimRule,
        };
        let dir = self.relations_dir(source);
        let hash = self.stage_hash(cfg);
        if !force && Self::manifest_matches(&dir, &hash) {
            return Ok(StageStatus::Skipped);
        }
        let (targets, _) = self.load_corpora()?;
        let embedder = self.embedder(cfg)?;
        let mut graphs = pipeline::build_target_graphs(&targets, cfg.max_segments, &embedder)?;
        let cache = self.response_cache()?;
        let outcomes = pipeline::relate_simulated(&mut graphs, &targets, mode, &cfg.client_spec(), &cache, &embedder)?;
        let calls: Vec<CallRecord> = outcomes.iter().flat_map(|o| o.calls.clone()).collect();
        write_jsonl(&dir.join("graphs.jsonl"), &graphs)?;
        write_jsonl(&dir.join("triples.jsonl"), &outcomes)?;
        write_jsonl(&dir.join("calls.jsonl"), &calls)?;
        embedder.flush_manifest()?;
        Self::finish(&dir, mode.as_str(), &hash, &["graphs.jsonl", "triples.jsonl", "calls.jsonl"])?;
        Ok(StageStatus::Ran)
    }

    fn split_graphs(&self, cfg: &RunConfig) -> Result<SplitGraphs> {
        let (targets, _) = self.load_corpora()?;
        let embedder = self.embedder(cfg)?;
        let mut graphs: Vec<OmissionGraph> = read_jsonl(&self.relations_dir(cfg.relations).join("graphs.jsonl"))?;
        pipeline::hydrate_graphs(&mut graphs, &targets, &embedder)?;
        pipeline::split_graphs(&graphs, &targets)
    }

    /// One checkpoint per configured seed.
    pub fn train(&self, cfg: &RunConfig, force: bool) -> Result<StageStatus> {
        let dir = self.train_dir(cfg.relations, cfg.model);
        let hash = self.stage_hash(cfg);
        if !force && Self::manifest_matches(&dir, &hash) {
            return Ok(StageStatus::Skipped);
        }
        let splits = self.split_graphs(cfg)?;
        let mut outputs = Vec::new();
        for &seed in &cfg.seeds {
            let mut model = crate::detector::Model::new(cfg.model_config(cfg.model, seed))?;
            let history = train(&mut model, &splits.train, &splits.val, &cfg.train_config(seed))?;
            log::info!(
                "seed {seed}: best epoch {} (val macF1 {:.4})",
                history.best_epoch,
                history.best_val_macro_f1
            );
            let path = self.checkpoint_path(cfg.relations, cfg.model, seed);
            Checkpoint::new(model, cfg.hash(), Some(history)).save(&path)?;
            outputs.push(format!("seed-{seed}/checkpoint.json"));
        }
        let outputs: Vec<&str> = outputs.iter().map(String::as_str).collect();
        Self::finish(&dir, "train", &hash, &outputs)?;
        Ok(StageStatus::Ran)
    }

    /// Scores one checkpoint on a split and writes its predictions.
    pub fn eval(&self, cfg: &RunConfig, checkpoint: &Path, split: Split) -> Result<MetricsReport> {
        let ckpt = Checkpoint::load(checkpoint)?;
        if ckpt.config_hash != cfg.hash() {
            log::warn!("checkpoint was trained under a different config");
        }
        let splits = self.split_graphs(cfg)?;
        let graphs = match split {
            Split::Train => &splits.train,
            Split::Val => &splits.val,
            Split::Test => &splits.test,
        };
        let preds = predict(&ckpt.model, graphs)?;
        let report = crate::metrics::evaluate_predictions(&preds)?;
        let dir = self.eval_dir(cfg.relations, ckpt.model.config.kind);
        let stem = format!("seed-{}-{}", ckpt.seed, split_name(split));
        write_jsonl(&dir.join(format!("{stem}.predictions.jsonl")), &preds)?;
        write_json(&dir.join(format!("{stem}.json")), &report)?;
        fs::write(
            dir.join(format!("{stem}.csv")),
            format!("{}\n{}\n", MetricsReport::csv_header(), report.csv_row()),
        )?;
        Ok(report)
    }

    /// Token costs over every method whose relation stage has run.
    pub fn cost_report(&self) -> Result<CostReport> {
        let mut calls = Vec::new();
        for source in [RelationSource::Full, RelationSource::SimZero, RelationSource::SimRule] {
            let p = self.relations_dir(source).join("calls.jsonl");
            if p.exists() {
                calls.extend(read_jsonl::<CallRecord>(&p)?);
            }
        }
        let report = count_tokens(&calls);
        let dir = self.dir(&["analysis"]);
        write_json(&dir.join("cost.json"), &report)?;
        fs::write(dir.join("cost.csv"), report.to_csv())?;
        Ok(report)
    }

    /// Omission-type taxonomy over the flagged intent annotations.
    pub fn analyze_types(&self, cfg: &RunConfig, max_samples: usize, batch_size: usize, axis: ZAxis) -> Result<TypeAnalysis> {
        let (targets, _) = self.load_corpora()?;
        let reports: Vec<IntentReport> = read_jsonl(&self.relations_dir(RelationSource::Full).join("reports.jsonl"))?;
        let graphs: Vec<OmissionGraph> = read_jsonl(&self.relations_dir(RelationSource::Full).join("graphs.jsonl"))?;
        let text: HashMap<(&str, usize), &str> = graphs
            .iter()
            .flat_map(|g| g.nodes.iter())
            .map(|n| ((n.parent_id.as_str(), n.segment_index), n.text.as_str()))
            .collect();
        let mut samples = Vec::new();
        let mut classes = Vec::new();
        for a in reports.iter().flat_map(|r| &r.annotations).filter(|a| a.flagged) {
            if samples.len() >= max_samples {
                break;
            }
            let seg = |p: &crate::relations::SegmentRef| text.get(&(p.parent_id.as_str(), p.index)).copied().unwrap_or("");
            samples.push(IntentSample {
                segment: seg(&a.target_seg).to_string(),
                intent: a.intent_text.clone(),
                omitted: seg(&a.context_seg).to_string(),
            });
            classes.push(targets.require(&a.target_seg.parent_id)?.label);
        }
        let spec = cfg.client_spec();
        let backend: Arc<dyn LlmBackend> = match spec.kind {
            ClientKind::Remote => Arc::new(RemoteBackend::from_env()?),
            ClientKind::Stub => Arc::new(TypeStub),
        };
        let cache = self.response_cache()?;
        let caller = LlmCaller {
            spec: &spec,
            backend: backend.as_ref(),
            cache: &cache,
        };
        let batches = simulate::categorize_batch(&samples, batch_size, &caller)?;
        let final_types = simulate::consolidate_types(&batches.lists, &caller)?;
        let assignments: Vec<(crate::corpus::Label, String)> = samples
            .iter()
            .zip(&classes)
            .filter_map(|(s, c)| Some(((*c)?, assign_type(&s.intent)?.name().to_string())))
            .collect();
        let names: Vec<String> = final_types.types.iter().map(|t| t.name.clone()).collect();
        let distribution = simulate::type_distribution(&assignments, &names, axis)?;
        let dir = self.dir(&["analysis"]);
        write_json(&dir.join("types.json"), &final_types.types)?;
        let mut csv = String::from("class,type\n");
        for (c, t) in &assignments {
            csv.push_str(&format!("{},{t}\n", c.as_f64() as u8));
        }
        fs::write(dir.join("assignments.csv"), csv)?;
        fs::write(dir.join("distribution.csv"), distribution.to_csv())?;
        let mut calls = batches.calls;
        calls.push(final_types.call);
        write_jsonl(&dir.join("type_calls.jsonl"), &calls)?;
        Ok(TypeAnalysis {
            samples: samples.len(),
            types: final_types.types,
            out_of_range: final_types.out_of_range,
            distribution,
        })
    }

    /// The full pipeline over every configured seed.
    pub fn run(&self, cfg: &RunConfig, force: bool) -> Result<ExperimentReport> {
        fs::write(self.root.join("config.toml"), cfg.to_toml())?;
        match cfg.relations {
            RelationSource::Full => {
                self.build_env(cfg, force).map_err(|e| e.in_stage("build-env"))?;
                self.infer_intents(cfg, force).map_err(|e| e.in_stage("infer-intents"))?;
            }
            RelationSource::SimZero => {
                self.simulate(cfg, SimMode::SimZero, force).map_err(|e| e.in_stage("simulate"))?;
            }
            RelationSource::SimRule => {
                self.simulate(cfg, SimMode::SimRule, force).map_err(|e| e.in_stage("simulate"))?;
            }
        }
        self.train(cfg, force).map_err(|e| e.in_stage("train"))?;
        let per_seed = cfg
            .seeds
            .iter()
            .map(|&seed| {
                let path = self.checkpoint_path(cfg.relations, cfg.model, seed);
                let history = Checkpoint::load(&path)?
                    .history
                    .ok_or_else(|| Error::invalid("checkpoint carries no training history"))?;
                let test = self.eval(cfg, &path, Split::Test)?;
                Ok(SeedResult { seed, history, test })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_stage("eval"))?;
        let summary = MetricsSummary::of(&per_seed.iter().map(|r| &r.test).collect::<Vec<_>>());
        let cost = self.cost_report().map_err(|e| e.in_stage("cost-report"))?;
        let report = ExperimentReport {
            config_hash: cfg.hash(),
            relations: cfg.relations,
            model: cfg.model,
            per_seed,
            summary,
            cost,
        };
        let dir = self.eval_dir(cfg.relations, cfg.model);
        write_json(&dir.join("summary.json"), &report)?;
        fs::write(dir.join("summary.csv"), report.summary.to_csv())?;
        Ok(report)
    }
}

pub fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub relations: RelationSource,
    pub model: ModelKind,
    pub per_seed: Vec<SeedResult>,
    pub summary: MetricsSummary,
    pub cost: CostReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TypeAnalysis {
    pub samples: usize,
    pub types: Vec<TypeEntry>,
    pub out_of_range: bool,
    pub distribution: TypeDistribution,
}
