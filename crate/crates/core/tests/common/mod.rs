//! Shared fixtures for integration tests: random graphs and a plain-loop
//! evaluator for the model's dense layers.

#![allow(dead_code)]

use std::sync::Arc;

use ndarray::Array2;
use omigraph::corpus::Label;
use omigraph::detector::{FusionMode, ModelConfig, ModelKind};
use omigraph::encoding::EmbeddingVector;
use omigraph::gnn::GnnConfig;
use omigraph::graph::{EdgeType, GraphEdge, GraphNode, OmissionGraph, SourceKind};
use omigraph::nn::{Activation, Linear, Mlp};
use omigraph::tape::ParamSet;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn emb(v: Vec<f64>) -> Option<Arc<EmbeddingVector>> {
    Some(Arc::new(EmbeddingVector::new(v).unwrap()))
}

/// A hydrated graph with `n_nodes` nodes (at least 2): one target item and
/// up to three context items, all intra pairs, and a few random inter pairs.
pub fn random_graph(rng: &mut ChaCha8Rng, id: &str, n_nodes: usize, enc_dim: usize) -> OmissionGraph {
    assert!(n_nodes >= 2);
    let n_target = rng.random_range(1..n_nodes.min(4));
    let n_items = rng.random_range(1..=3usize).min(n_nodes - n_target);
    let mut parent = vec!["target".to_string(); n_target];
    for i in 0..n_nodes - n_target {
        parent.push(format!("ctx{}", i % n_items));
    }
    let mut seg_index = std::collections::HashMap::<String, usize>::new();
    let nodes: Vec<GraphNode> = parent
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let idx = seg_index.entry(p.clone()).or_default();
            *idx += 1;
            GraphNode {
                node_id: i,
                source: if i < n_target { SourceKind::Target } else { SourceKind::Context },
                parent_id: p.clone(),
                segment_index: *idx - 1,
                text: format!("{id} segment {i}"),
                embedding: emb(random_vec(rng, enc_dim)),
            }
        })
        .collect();
    let mut edges = Vec::new();
    for a in 0..n_nodes {
        for b in 0..n_nodes {
            if a != b && parent[a] == parent[b] {
                edges.push(GraphEdge {
                    src: a,
                    dst: b,
                    etype: EdgeType::Intra,
                    intent_text: None,
                    intent_embedding: None,
                });
            }
        }
    }
    let n_pairs = rng.random_range(1..=3);
    for _ in 0..n_pairs {
        let t = rng.random_range(0..n_target);
        let c = rng.random_range(n_target..n_nodes);
        let intent = emb(random_vec(rng, enc_dim));
        for (src, dst) in [(t, c), (c, t)] {
            edges.push(GraphEdge {
                src,
                dst,
                etype: EdgeType::Inter,
                intent_text: Some("to hide".into()),
                intent_embedding: intent.clone(),
            });
        }
    }
    OmissionGraph {
        target_id: id.to_string(),
        label: Some(if rng.random_bool(0.5) { Label::Fake } else { Label::Real }),
        nodes,
        edges,
        target_node_ids: (0..n_target).collect(),
        degraded: false,
        item_embedding: emb(random_vec(rng, enc_dim)),
    }
}

pub fn small_gnn(d: usize, layers: usize) -> GnnConfig {
    GnnConfig {
        model_dim: d,
        edge_dim: d,
        hidden: vec![d + 1],
        layers,
        activation: Activation::Tanh,
        scale_attention: false,
    }
}

pub fn small_model(kind: ModelKind, fusion: FusionMode, enc: usize, d: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        kind,
        fusion,
        encoder_dim: enc,
        gnn: small_gnn(d, 2),
        seed,
    }
}

/// `x W + b` with explicit loops.
pub fn linear(params: &ParamSet, l: &Linear, x: &[f64]) -> Vec<f64> {
    let w = params.get(l.weight);
    let b = params.get(l.bias);
    assert_eq!(w.nrows(), x.len());
    (0..w.ncols())
        .map(|j| b[[0, j]] + (0..x.len()).map(|i| x[i] * w[[i, j]]).sum::<f64>())
        .collect()
}

pub fn mlp(params: &ParamSet, m: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (i, l) in m.layers.iter().enumerate() {
        h = linear(params, l, &h);
        if i + 1 < m.layers.len() {
            for v in &mut h {
                *v = match m.activation {
                    Activation::Relu => v.max(0.0),
                    Activation::Tanh => v.tanh(),
                };
            }
        }
    }
    h
}

pub fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn concat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

/// Softmax with compensated summation, used as a reference for the tape's
/// max-subtracted version.
pub fn softmax_ref(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for &e in &exps {
        let y = e - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    exps.iter().map(|e| e / sum).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub struct NaiveLayer {
    /// Attention per edge, in the graph's own edge order.
    pub alpha: Vec<f64>,
    pub gates: Vec<f64>,
    pub root: Vec<f64>,
    pub local: Vec<Vec<f64>>,
    pub out: Vec<Vec<f64>>,
}

pub struct NaiveOut {
    pub h0: Vec<Vec<f64>>,
    pub layers: Vec<NaiveLayer>,
    pub h_omi: Vec<f64>,
    pub y_hat: f64,
}

/// The whole detector on one graph, written with loops over nodes and edges.
pub fn naive_model(model: &omigraph::detector::Model, g: &OmissionGraph) -> NaiveOut {
    let p = &model.params;
    let parts = model.graph.as_ref().expect("graph model");
    let gnn = &parts.gnn;
    let cfg = &gnn.config;
    let n = g.nodes.len();
    let h0: Vec<Vec<f64>> = g
        .nodes
        .iter()
        .map(|nd| linear(p, &parts.node_proj, nd.embedding.as_ref().unwrap().values()))
        .collect();
    let attrs: Vec<Vec<f64>> = g
        .edges
        .iter()
        .map(|e| match e.etype {
            EdgeType::Intra => {
                let (a, b) = (&h0[e.dst], &h0[e.src]);
                let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect();
                mlp(p, &parts.intra.mlp, &concat(&[a, b, &diff]))
            }
            EdgeType::Inter => linear(p, &parts.intent_proj, e.intent_embedding.as_ref().unwrap().values()),
        })
        .collect();
    let mut h = h0.clone();
    let mut root = p.get(gnn.root_init).row(0).to_vec();
    let gate_w: Vec<f64> = p.get(gnn.gate_weight).column(0).to_vec();
    let gate_b = p.get(gnn.gate_bias)[[0, 0]];
    let mut layers = Vec::new();
    for layer in &gnn.layers {
        let enhanced: Vec<Vec<f64>> = g
            .edges
            .iter()
            .zip(&attrs)
            .map(|(e, a)| {
                let t = p.get(gnn.type_embedding(e.etype)).row(0).to_vec();
                mlp(p, &layer.edge_enhance, &concat(&[&t, a]))
            })
            .collect();
        let mut alpha = vec![0.0; g.edges.len()];
        let mut local = Vec::with_capacity(n);
        for i in 0..n {
            let incoming: Vec<usize> = (0..g.edges.len()).filter(|&k| g.edges[k].dst == i).collect();
            let logits: Vec<f64> = incoming
                .iter()
                .map(|&k| {
                    let e = &enhanced[k];
                    let s = dot(&add(&h[i], e), &add(&h[g.edges[k].src], e));
                    if cfg.scale_attention {
                        s / (cfg.model_dim as f64).sqrt()
                    } else {
                        s
                    }
                })
                .collect();
            let w = softmax_ref(&logits);
            let mut pre = h[i].clone();
            for (&k, &a) in incoming.iter().zip(&w) {
                alpha[k] = a;
                let m = mlp(p, &layer.message, &concat(&[&h[g.edges[k].src], &enhanced[k]]));
                for (x, v) in pre.iter_mut().zip(&m) {
                    *x += a * v;
                }
            }
            local.push(mlp(p, &layer.update, &pre));
        }
        let gate_logits: Vec<f64> = h.iter().map(|hi| dot(hi, &gate_w) + gate_b).collect();
        let gates = softmax_ref(&gate_logits);
        for (hi, gi) in h.iter().zip(&gates) {
            for (r, v) in root.iter_mut().zip(hi) {
                *r += gi * v;
            }
        }
        let shift: Vec<f64> = linear(p, &gnn.psi, &root).iter().map(|v| v.tanh()).collect();
        let out: Vec<Vec<f64>> = local.iter().map(|l| add(l, &shift)).collect();
        h = out.clone();
        layers.push(NaiveLayer {
            alpha,
            gates,
            root: root.clone(),
            local,
            out,
        });
    }
    let k = g.target_node_ids.len() as f64;
    let mut h_omi = vec![0.0; cfg.model_dim];
    for &t in &g.target_node_ids {
        for (o, v) in h_omi.iter_mut().zip(&h[t]) {
            *o += v / k;
        }
    }
    let item = g.item_embedding.as_ref().unwrap().values();
    let y_hat = match model.config.fusion {
        FusionMode::Prediction => {
            let z = linear(p, &model.probe, item)[0] + linear(p, parts.omi_head.as_ref().unwrap(), &h_omi)[0];
            (z.tanh() + 1.0) / 2.0
        }
        FusionMode::Representation => {
            let z = mlp(p, parts.fusion_mlp.as_ref().unwrap(), &concat(&[&h_omi, item]))[0];
            1.0 / (1.0 + (-z).exp())
        }
    };
    NaiveOut {
        h0,
        layers,
        h_omi,
        y_hat,
    }
}

/// Mean BCE of the model over `graphs` plus its analytic gradients.
pub fn loss_and_grads(
    model: &omigraph::detector::Model,
    graphs: &[OmissionGraph],
) -> (f64, omigraph::tape::Grads) {
    use omigraph::detector::{GraphBatch, BCE_EPS};
    let refs: Vec<&OmissionGraph> = graphs.iter().collect();
    let batch = GraphBatch::new(&refs, model.config.encoder_dim).unwrap();
    let mut t = omigraph::tape::Tape::new(&model.params);
    let f = model.forward(&mut t, &batch).unwrap();
    let loss = t.bce_mean(f.y_hat, batch.targets().unwrap(), BCE_EPS);
    let v = t.value(loss)[[0, 0]];
    (v, t.backward(loss))
}

pub fn loss_only(model: &omigraph::detector::Model, graphs: &[OmissionGraph]) -> f64 {
    use omigraph::detector::{GraphBatch, BCE_EPS};
    let refs: Vec<&OmissionGraph> = graphs.iter().collect();
    let batch = GraphBatch::new(&refs, model.config.encoder_dim).unwrap();
    let mut t = omigraph::tape::Tape::new(&model.params);
    let f = model.forward(&mut t, &batch).unwrap();
    let loss = t.bce_mean(f.y_hat, batch.targets().unwrap(), BCE_EPS);
    t.value(loss)[[0, 0]]
}

pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: String,
}

/// Central differences with step `h` on every scalar of every parameter.
/// Relative error is `|a − n| / max(|a|, |n|, floor)`.
pub fn finite_difference_check(
    model: &mut omigraph::detector::Model,
    graphs: &[OmissionGraph],
    h: f64,
    floor: f64,
) -> FdReport {
    let (_, grads) = loss_and_grads(model, graphs);
    let ids: Vec<_> = model.params.ids().collect();
    let mut report = FdReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: String::new(),
    };
    for id in ids {
        let shape = model.params.get(id).dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = model.params.get(id)[[r, c]];
                model.params.get_mut(id)[[r, c]] = orig + h;
                let up = loss_only(model, graphs);
                model.params.get_mut(id)[[r, c]] = orig - h;
                let down = loss_only(model, graphs);
                model.params.get_mut(id)[[r, c]] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.get(id).map_or(0.0, |g| g[[r, c]]);
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
                report.checked += 1;
                if err > report.max_rel_err {
                    report.max_rel_err = err;
                    report.worst = format!(
                        "{}[{r},{c}] analytic {analytic:e} numeric {numeric:e}",
                        model.params.name(id)
                    );
                }
            }
        }
    }
    report
}

/// Gives every zero-initialized parameter small random values so all paths
/// carry gradient.
pub fn randomize_zero_params(model: &mut omigraph::detector::Model, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let m = model.params.get_mut(id);
        if m.iter().all(|v| *v == 0.0) {
            m.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
    }
}

/// Runs the GNN alone on random node states and edge attributes.
pub fn run_gnn(
    gnn: &omigraph::gnn::GnnParams,
    params: &ParamSet,
    graphs: &[&OmissionGraph],
    rng: &mut ChaCha8Rng,
) -> (omigraph::gnn::BatchStructure, omigraph::gnn::NodeState, Vec<Array2<f64>>, Vec<Array2<f64>>) {
    use omigraph::gnn::{BatchStructure, NodeState};
    use omigraph::tape::Tape;
    let (s, _) = BatchStructure::from_graphs(graphs).unwrap();
    let d = gnn.config.model_dim;
    let de = gnn.config.edge_dim;
    let h0 = Array2::from_shape_fn((s.n_nodes, d), |_| rng.random_range(-1.0..1.0));
    let attrs = Array2::from_shape_fn((s.n_edges(), de), |_| rng.random_range(-1.0..1.0));
    let mut t = Tape::new(params);
    let h0 = t.constant(h0);
    let attrs = t.constant(attrs);
    let trace = gnn.forward(&mut t, h0, attrs, &s).unwrap();
    let state = NodeState::from_trace(&t, &trace);
    let alphas = trace.layers.iter().map(|l| t.value(l.attention).clone()).collect();
    let gates = trace.layers.iter().map(|l| t.value(l.gates).clone()).collect();
    (s, state, alphas, gates)
}

/// Sums of a column within each group.
pub fn group_sums(col: &Array2<f64>, group: &[usize], n_groups: usize) -> Vec<f64> {
    let mut s = vec![0.0; n_groups];
    for (k, &g) in group.iter().enumerate() {
        s[g] += col[[k, 0]];
    }
    s
}
