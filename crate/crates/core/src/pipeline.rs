//! In-memory pipeline stages shared by the workspace runner and tests.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RelationSource, RunConfig};
use crate::corpus::{build_candidate_pool, Corpus, Split};
use crate::detector::{Model, ModelKind};
use crate::encoding::{
    select_environment, ContextEnvironment, EmbeddingCache, Embedder, EncoderKind, HashStubEncoder, LmEncoder,
    PrecomputedStates, TextEncoder,
};
use crate::error::{Error, Result};
use crate::graph::{build_graph, OmissionGraph};
use crate::llm::{ClientKind, LlmBackend, LlmCaller, LlmClientSpec, RemoteBackend, ResponseCache};
use crate::metrics::MetricsReport;
use crate::prompts::SimMode;
use crate::relations::{apply_intents, infer_all, IntentReport, IntentStub};
use crate::simulate::{apply_simulation, simulate_environment, SimOutcome, SimStub};
use crate::train::{evaluate, train, TrainHistory};

/// Builds the configured encoder.
pub fn make_encoder(cfg: &RunConfig) -> Result<Arc<dyn TextEncoder>> {
    let spec = cfg.encoder_spec();
    Ok(match cfg.encoder {
        EncoderKind::HashStub => Arc::new(HashStubEncoder::new(spec)?),
        EncoderKind::PretrainedLm => {
            let path = cfg
                .encoder_states
                .as_ref()
                .ok_or_else(|| Error::Config("the lm encoder needs encoder_states".into()))?;
            Arc::new(LmEncoder::new(spec, PrecomputedStates::load(path)?))
        }
    })
}

pub fn make_embedder(cfg: &RunConfig, cache: Arc<EmbeddingCache>) -> Result<Embedder> {
    Ok(Embedder::new(make_encoder(cfg)?, cache))
}

/// Top-K environment of every target.
pub fn build_environments(
    targets: &Corpus,
    context: &Corpus,
    window_days: i64,
    k: usize,
    embedder: &Embedder,
) -> Result<Vec<ContextEnvironment>> {
    targets
        .items()
        .par_iter()
        .map(|t| {
            let pool = build_candidate_pool(t, context, window_days);
            select_environment(t, &pool, context, k, embedder)
        })
        .collect()
}

/// One graph per target, in target order.
pub fn build_graphs(
    targets: &Corpus,
    context: &Corpus,
    envs: &[ContextEnvironment],
    max_segments: usize,
    embedder: &Embedder,
) -> Result<Vec<OmissionGraph>> {
    targets
        .items()
        .par_iter()
        .zip(envs)
        .map(|(t, env)| build_graph(t, env, context, max_segments, embedder))
        .collect()
}

/// Target-only graphs, used as the base for simulated environments.
pub fn build_target_graphs(targets: &Corpus, max_segments: usize, embedder: &Embedder) -> Result<Vec<OmissionGraph>> {
    let empty = Corpus::from_items(Vec::new())?;
    targets
        .items()
        .par_iter()
        .map(|t| {
            let env = ContextEnvironment {
                target_id: t.id.clone(),
                ranked: Vec::new(),
                k: 0,
            };
            build_graph(t, &env, &empty, max_segments, embedder)
        })
        .collect()
}

fn remote(spec: &LlmClientSpec) -> Result<Option<Arc<dyn LlmBackend>>> {
    Ok(match spec.kind {
        ClientKind::Remote => Some(Arc::new(RemoteBackend::from_env()?)),
        ClientKind::Stub => None,
    })
}

/// Intent inference over every graph, then inter-edge construction.
pub fn relate_full(
    graphs: &mut [OmissionGraph],
    spec: &LlmClientSpec,
    cache: &ResponseCache,
    embedder: &Embedder,
) -> Result<Vec<IntentReport>> {
    let remote = remote(spec)?;
    let reports = infer_all(
        graphs,
        spec,
        |g| match &remote {
            Some(r) => r.clone(),
            None => Arc::new(IntentStub::for_graph(g)),
        },
        cache,
        RelationSource::Full.as_str(),
    )?;
    for (g, r) in graphs.iter_mut().zip(&reports) {
        apply_intents(g, r, embedder)?;
    }
    Ok(reports)
}

/// Simulated environments for target-only graphs.
pub fn relate_simulated(
    graphs: &mut [OmissionGraph],
    targets: &Corpus,
    mode: SimMode,
    spec: &LlmClientSpec,
    cache: &ResponseCache,
    embedder: &Embedder,
) -> Result<Vec<SimOutcome>> {
    let backend: Arc<dyn LlmBackend> = match remote(spec)? {
        Some(r) => r,
        None => Arc::new(SimStub),
    };
    let caller = LlmCaller {
        spec,
        backend: backend.as_ref(),
        cache,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.max_parallel.max(1))
        .build()
        .map_err(|e| Error::invalid(e.to_string()))?;
    let outcomes: Vec<SimOutcome> = pool.install(|| {
        graphs
            .par_iter()
            .map(|g| {
                let target = targets.require(&g.target_id)?;
                let segs: Vec<String> = g.target_node_ids.iter().map(|&i| g.nodes[i].text.clone()).collect();
                match simulate_environment(target, &segs, &caller, mode, mode.as_str()) {
                    Ok(o) => Ok(o),
                    Err(e @ Error::Llm { .. }) => {
                        log::warn!("simulation for `{}` failed: {e}", g.target_id);
                        Ok(SimOutcome::default())
                    }
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<_>>()
    })?;
    for (g, o) in graphs.iter_mut().zip(&outcomes) {
        apply_simulation(g, &o.segments, embedder)?;
    }
    Ok(outcomes)
}

/// Fills the embeddings a serialized graph does not carry.
pub fn hydrate_graphs(graphs: &mut [OmissionGraph], targets: &Corpus, embedder: &Embedder) -> Result<()> {
    graphs.par_iter_mut().try_for_each(|g| {
        let text = &targets.require(&g.target_id)?.text;
        g.hydrate(embedder, Some(text))
    })
}

#[derive(Clone, Debug, Default)]
pub struct SplitGraphs {
    pub train: Vec<OmissionGraph>,
    pub val: Vec<OmissionGraph>,
    pub test: Vec<OmissionGraph>,
}

pub fn split_graphs(graphs: &[OmissionGraph], targets: &Corpus) -> Result<SplitGraphs> {
    let mut s = SplitGraphs::default();
    for g in graphs {
        match targets.require(&g.target_id)?.split {
            Some(Split::Train) => s.train.push(g.clone()),
            Some(Split::Val) => s.val.push(g.clone()),
            Some(Split::Test) => s.test.push(g.clone()),
            None => {}
        }
    }
    Ok(s)
}

/// Every stage from environments to relation-attributed graphs.
pub fn prepare_graphs(
    cfg: &RunConfig,
    targets: &Corpus,
    context: &Corpus,
    embedder: &Embedder,
    cache: &ResponseCache,
) -> Result<Vec<OmissionGraph>> {
    let spec = cfg.client_spec();
    let mut graphs = match cfg.relations {
        RelationSource::Full => {
            let envs = build_environments(targets, context, cfg.window_days, cfg.top_k, embedder)?;
            let mut g = build_graphs(targets, context, &envs, cfg.max_segments, embedder)?;
            relate_full(&mut g, &spec, cache, embedder)?;
            g
        }
        RelationSource::SimZero | RelationSource::SimRule => {
            let mode = if cfg.relations == RelationSource::SimZero {
                SimMode::SimZero
            } else {
                SimMode::SimRule
            };
            let mut g = build_target_graphs(targets, cfg.max_segments, embedder)?;
            relate_simulated(&mut g, targets, mode, &spec, cache, embedder)?;
            g
        }
    };
    hydrate_graphs(&mut graphs, targets, embedder)?;
    Ok(graphs)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub history: TrainHistory,
    pub test: MetricsReport,
}

/// Trains one model per seed and scores it on the test split.
pub fn train_seeds(cfg: &RunConfig, kind: ModelKind, splits: &SplitGraphs) -> Result<Vec<(Model, SeedResult)>> {
    cfg.seeds
        .iter()
        .map(|&seed| {
            let mut model = Model::new(cfg.model_config(kind, seed))?;
            let history = train(&mut model, &splits.train, &splits.val, &cfg.train_config(seed))?;
            let test = evaluate(&model, &splits.test)?;
            Ok((model, SeedResult { seed, history, test }))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return MeanStd::default();
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub accuracy: MeanStd,
    pub f1_real: MeanStd,
    pub f1_fake: MeanStd,
    pub macro_f1: MeanStd,
}

impl MetricsSummary {
    pub fn of(reports: &[&MetricsReport]) -> Self {
        let col = |f: fn(&MetricsReport) -> f64| MeanStd::of(&reports.iter().map(|r| f(r)).collect::<Vec<_>>());
        MetricsSummary {
            accuracy: col(|r| r.accuracy),
            f1_real: col(|r| r.f1_real),
            f1_fake: col(|r| r.f1_fake),
            macro_f1: col(|r| r.macro_f1),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,mean,std\n");
        for (name, v) in [
            ("macro_f1", self.macro_f1),
            ("accuracy", self.accuracy),
            ("f1_real", self.f1_real),
            ("f1_fake", self.f1_fake),
        ] {
            s.push_str(&format!("{name},{},{}\n", v.mean, v.std));
        }
        s
    }
}
