//! Target pooling, fusion with a base detector, and the full model forward.

use std::rc::Rc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{BatchStructure, GnnConfig, GnnParams};
use crate::graph::{EdgeType, OmissionGraph};
use crate::nn::{Linear, Mlp};
use crate::relations::IntraEdgeNet;
use crate::tape::{self, ParamSet, Tape, Var};

pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    Representation,
    #[default]
    Prediction,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "representation" => Ok(FusionMode::Representation),
            "prediction" => Ok(FusionMode::Prediction),
            other => Err(Error::invalid(format!("unknown fusion mode `{other}`"))),
        }
    }
}

/// `OmiGraph` is the full model; `TargetOnly` is the reference base
/// detector alone (a linear probe on the frozen item embedding).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    #[default]
    OmiGraph,
    TargetOnly,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "omigraph" => Ok(ModelKind::OmiGraph),
            "target-only" => Ok(ModelKind::TargetOnly),
            other => Err(Error::invalid(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseDetectorOutput {
    pub kind: FusionMode,
    pub h_com: Option<Vec<f64>>,
    pub score: Option<f64>,
}

impl BaseDetectorOutput {
    pub fn representation(h_com: Vec<f64>) -> Self {
        BaseDetectorOutput {
            kind: FusionMode::Representation,
            h_com: Some(h_com),
            score: None,
        }
    }

    pub fn prediction(score: f64) -> Self {
        BaseDetectorOutput {
            kind: FusionMode::Prediction,
            h_com: None,
            score: Some(score),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub fusion: FusionMode,
    /// Width of the frozen encoder's vectors.
    pub encoder_dim: usize,
    pub gnn: GnnConfig,
    pub seed: u64,
}

/// Parameters that only exist for the full model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphParts {
    pub node_proj: Linear,
    pub intent_proj: Linear,
    pub intra: IntraEdgeNet,
    pub gnn: GnnParams,
    /// Representation fusion: `MLP(h_omi ‖ h_com) → 1`.
    pub fusion_mlp: Option<Mlp>,
    /// Prediction fusion: zero-initialized `d → 1` head.
    pub omi_head: Option<Linear>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    /// Reference base detector: linear probe on the item embedding.
    pub probe: Linear,
    pub graph: Option<GraphParts>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let probe = Linear::new(&mut params, "base.probe", config.encoder_dim, 1, &mut rng);
        let graph = match config.kind {
            ModelKind::TargetOnly => None,
            ModelKind::OmiGraph => {
                let g = &config.gnn;
                let (d, de, enc) = (g.model_dim, g.edge_dim, config.encoder_dim);
                let node_proj = Linear::new(&mut params, "node_proj", enc, d, &mut rng);
                let intent_proj = Linear::new(&mut params, "intent_proj", enc, de, &mut rng);
                let intra = IntraEdgeNet::new(&mut params, d, de, &g.hidden, g.activation, &mut rng);
                let gnn = GnnParams::new(&mut params, g.clone(), &mut rng)?;
                let (fusion_mlp, omi_head) = match config.fusion {
                    FusionMode::Representation => (
                        Some(Mlp::new(&mut params, "fusion", d + enc, &g.hidden, 1, g.activation, &mut rng)),
                        None,
                    ),
                    FusionMode::Prediction => (None, Some(Linear::zeros(&mut params, "omi_head", d, 1))),
                };
                Some(GraphParts {
                    node_proj,
                    intent_proj,
                    intra,
                    gnn,
                    fusion_mlp,
                    omi_head,
                })
            }
        };
        Ok(Model {
            config,
            params,
            probe,
            graph,
        })
    }

    /// Freezes or unfreezes the base probe.
    pub fn set_base_trainable(&mut self, trainable: bool) {
        for id in self.probe.params() {
            self.params.set_trainable(id, trainable);
        }
    }

    /// The reference base detector's output for one item embedding.
    pub fn base_output(&self, item_embedding: &[f64]) -> Result<BaseDetectorOutput> {
        check_dim(self.config.encoder_dim, item_embedding.len())?;
        Ok(match self.config.fusion {
            FusionMode::Representation => BaseDetectorOutput::representation(item_embedding.to_vec()),
            FusionMode::Prediction => {
                let w = self.params.get(self.probe.weight);
                let b = self.params.get(self.probe.bias)[[0, 0]];
                let z: f64 = item_embedding.iter().zip(w.column(0)).map(|(x, w)| x * w).sum::<f64>() + b;
                BaseDetectorOutput::prediction(tape::sigmoid(z))
            }
        })
    }

    /// Fuses a pooled omission vector with a base detector's output.
    pub fn fuse_and_predict(&self, h_omi: &[f64], base: &BaseDetectorOutput) -> Result<f64> {
        let parts = self
            .graph
            .as_ref()
            .ok_or_else(|| Error::invalid("target-only model has no fusion head"))?;
        if base.kind != self.config.fusion {
            return Err(Error::invalid("base output kind does not match the fusion mode"));
        }
        check_dim(self.config.gnn.model_dim, h_omi.len())?;
        let mut t = Tape::new(&self.params);
        let h = t.constant(row(h_omi));
        let y = match base.kind {
            FusionMode::Representation => {
                let h_com = base
                    .h_com
                    .as_ref()
                    .ok_or_else(|| Error::invalid("representation output without h_com"))?;
                check_dim(self.config.encoder_dim, h_com.len())?;
                let c = t.constant(row(h_com));
                let x = t.concat_cols(&[h, c]);
                let z = parts.fusion_mlp.as_ref().unwrap().forward(&mut t, x);
                t.sigmoid(z)
            }
            FusionMode::Prediction => {
                let score = base
                    .score
                    .ok_or_else(|| Error::invalid("prediction output without score"))?;
                if !(score > 0.0 && score < 1.0) {
                    return Err(Error::invalid(format!("base score {score} is outside (0, 1)")));
                }
                let base_logit = t.constant(Array2::from_elem((1, 1), logit(score)));
                let z_omi = parts.omi_head.as_ref().unwrap().forward(&mut t, h);
                tanh_fuse(&mut t, base_logit, z_omi)
            }
        };
        Ok(t.value(y)[[0, 0]])
    }

    /// Full forward over a batch; returns the `G×1` column of `ŷ` and the
    /// pieces that produced it.
    pub fn forward(&self, t: &mut Tape<'_>, batch: &GraphBatch) -> Result<Forward> {
        let item = t.constant(batch.item_enc.clone());
        let Some(parts) = &self.graph else {
            let z = self.probe.forward(t, item);
            return Ok(Forward {
                y_hat: t.sigmoid(z),
                h_omi: None,
                nodes: None,
                base_logit: Some(z),
                omi_logit: None,
            });
        };
        let s = &batch.structure;
        let enc = t.constant(batch.node_enc.clone());
        let h0 = parts.node_proj.forward(t, enc);
        let intra_src: Rc<[usize]> = s.edge_src[..s.n_intra].into();
        let intra_dst: Rc<[usize]> = s.edge_dst[..s.n_intra].into();
        let hi = t.gather(h0, intra_dst);
        let hj = t.gather(h0, intra_src);
        let intra_attr = parts.intra.forward(t, hi, hj);
        let intents = t.constant(batch.intent_enc.clone());
        let inter_attr = parts.intent_proj.forward(t, intents);
        let attrs = t.concat_rows(&[intra_attr, inter_attr]);
        let trace = parts.gnn.forward(t, h0, attrs, s)?;
        let nodes = trace.output();
        let h_omi = pool(t, nodes, s);
        let (y_hat, base_logit, omi_logit) = match self.config.fusion {
            FusionMode::Representation => {
                let x = t.concat_cols(&[h_omi, item]);
                let z = parts.fusion_mlp.as_ref().unwrap().forward(t, x);
                (t.sigmoid(z), None, None)
            }
            FusionMode::Prediction => {
                let base = self.probe.forward(t, item);
                let z_omi = parts.omi_head.as_ref().unwrap().forward(t, h_omi);
                (tanh_fuse(t, base, z_omi), Some(base), Some(z_omi))
            }
        };
        Ok(Forward {
            y_hat,
            h_omi: Some(h_omi),
            nodes: Some(nodes),
            base_logit,
            omi_logit,
        })
    }

    /// Base-probe-only forward, used to pretrain a frozen base detector.
    pub fn forward_base(&self, t: &mut Tape<'_>, batch: &GraphBatch) -> Var {
        let item = t.constant(batch.item_enc.clone());
        let z = self.probe.forward(t, item);
        t.sigmoid(z)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub y_hat: Var,
    pub h_omi: Option<Var>,
    pub nodes: Option<Var>,
    pub base_logit: Option<Var>,
    pub omi_logit: Option<Var>,
}

/// `(tanh(base + z_omi) + 1) / 2`.
fn tanh_fuse(t: &mut Tape<'_>, base_logit: Var, z_omi: Var) -> Var {
    let z = t.add(base_logit, z_omi);
    let th = t.tanh(z);
    t.affine(th, 0.5, 0.5)
}

/// Mean of the target-node rows of `nodes`, one row per graph.
pub fn pool(t: &mut Tape<'_>, nodes: Var, s: &BatchStructure) -> Var {
    let targets = t.gather(nodes, s.target_nodes.clone());
    let weights: Rc<[f64]> = s.target_graph.iter().map(|&g| s.target_inv_count[g]).collect();
    let scaled = t.scale_rows(targets, weights);
    t.scatter_add(scaled, s.target_graph.clone(), s.n_graphs)
}

/// Mean of the final states of `graph`'s target nodes.
pub fn pool_target(states: &Array2<f64>, graph: &OmissionGraph) -> Result<Vec<f64>> {
    if graph.target_node_ids.is_empty() {
        return Err(Error::invalid(format!("graph `{}` has no target nodes", graph.target_id)));
    }
    if states.nrows() != graph.nodes.len() {
        return Err(Error::Dimension {
            expected: graph.nodes.len(),
            got: states.nrows(),
        });
    }
    let n = graph.target_node_ids.len() as f64;
    let mut out = vec![0.0; states.ncols()];
    for &i in &graph.target_node_ids {
        for (o, v) in out.iter_mut().zip(states.row(i)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Binary cross-entropy with `ŷ` clamped to `[ε, 1−ε]`.
pub fn bce_loss(y_hat: f64, y: f64) -> f64 {
    tape::bce(y_hat, y, BCE_EPS)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap()
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}

/// Dense inputs for a batch of hydrated graphs.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub structure: BatchStructure,
    pub ids: Vec<String>,
    pub labels: Vec<Option<f64>>,
    /// Encoder vectors for every node (`N×d_enc`).
    pub node_enc: Array2<f64>,
    /// Encoded intent for every inter edge, in batch edge order.
    pub intent_enc: Array2<f64>,
    /// Encoded full item text per graph (`G×d_enc`).
    pub item_enc: Array2<f64>,
}

impl GraphBatch {
    pub fn new(graphs: &[&OmissionGraph], encoder_dim: usize) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let (structure, origin) = BatchStructure::from_graphs(graphs)?;
        let mut node_enc = Array2::zeros((structure.n_nodes, encoder_dim));
        let mut r = 0;
        for g in graphs {
            for id in 0..g.nodes.len() {
                let v = g.node_embedding(id)?;
                check_dim(encoder_dim, v.dim())?;
                node_enc.row_mut(r).assign(&ndarray::ArrayView1::from(v.values()));
                r += 1;
            }
        }
        let inter = &origin[structure.n_intra..];
        let mut intent_enc = Array2::zeros((inter.len(), encoder_dim));
        for (r, &(gi, ei)) in inter.iter().enumerate() {
            let e = &graphs[gi].edges[ei];
            debug_assert_eq!(e.etype, EdgeType::Inter);
            let v = e.intent_embedding.as_ref().ok_or_else(|| {
                Error::invalid(format!("inter edge in `{}` has no intent embedding", graphs[gi].target_id))
            })?;
            check_dim(encoder_dim, v.dim())?;
            intent_enc.row_mut(r).assign(&ndarray::ArrayView1::from(v.values()));
        }
        let mut item_enc = Array2::zeros((graphs.len(), encoder_dim));
        for (r, g) in graphs.iter().enumerate() {
            let v = g.item_embedding.as_ref().ok_or_else(|| {
                Error::invalid(format!("graph `{}` has no item embedding", g.target_id))
            })?;
            check_dim(encoder_dim, v.dim())?;
            item_enc.row_mut(r).assign(&ndarray::ArrayView1::from(v.values()));
        }
        Ok(GraphBatch {
            structure,
            ids: graphs.iter().map(|g| g.target_id.clone()).collect(),
            labels: graphs.iter().map(|g| g.label.map(|l| l.as_f64())).collect(),
            node_enc,
            intent_enc,
            item_enc,
        })
    }

    pub fn targets(&self) -> Result<Rc<[f64]>> {
        self.labels
            .iter()
            .zip(&self.ids)
            .map(|(l, id)| l.ok_or_else(|| Error::MissingLabel(id.clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use rand::Rng;

    pub(crate) fn tiny_config(kind: ModelKind, fusion: FusionMode) -> ModelConfig {
        ModelConfig {
            kind,
            fusion,
            encoder_dim: 6,
            gnn: GnnConfig {
                model_dim: 4,
                edge_dim: 3,
                hidden: vec![5],
                layers: 1,
                activation: Activation::Relu,
                scale_attention: false,
            },
            seed: 3,
        }
    }

    #[test]
    fn neutral_prediction_fusion() {
        let m = Model::new(tiny_config(ModelKind::OmiGraph, FusionMode::Prediction)).unwrap();
        let y = m.fuse_and_predict(&[0.3; 4], &BaseDetectorOutput::prediction(0.5)).unwrap();
        assert_eq!(y, 0.5);
    }

    #[test]
    fn prediction_fusion_is_monotone_in_score() {
        let mut m = Model::new(tiny_config(ModelKind::OmiGraph, FusionMode::Prediction)).unwrap();
        let head = m.graph.as_ref().unwrap().omi_head.unwrap();
        m.params.get_mut(head.weight).fill(0.2);
        let mut prev = 0.0;
        for k in 1..100 {
            let s = k as f64 / 100.0;
            let y = m.fuse_and_predict(&[0.1, -0.4, 0.3, 0.9], &BaseDetectorOutput::prediction(s)).unwrap();
            assert!(y > prev);
            prev = y;
        }
    }

    #[test]
    fn prediction_fusion_rejects_bad_scores() {
        let m = Model::new(tiny_config(ModelKind::OmiGraph, FusionMode::Prediction)).unwrap();
        for s in [0.0, 1.0, -0.2, f64::NAN] {
            assert!(m.fuse_and_predict(&[0.0; 4], &BaseDetectorOutput::prediction(s)).is_err());
        }
    }

    #[test]
    fn representation_fusion_in_open_interval() {
        let m = Model::new(tiny_config(ModelKind::OmiGraph, FusionMode::Representation)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let h: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let c: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = m.fuse_and_predict(&h, &BaseDetectorOutput::representation(c)).unwrap();
            assert!(y > 0.0 && y < 1.0);
        }
    }

    #[test]
    fn bce_values() {
        assert!((bce_loss(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_loss(1.0 - 1e-12, 1.0) < 1e-6);
        assert!(bce_loss(1.0, 0.0).is_finite());
    }

    #[test]
    fn target_only_has_no_graph_parts() {
        let m = Model::new(tiny_config(ModelKind::TargetOnly, FusionMode::Prediction)).unwrap();
        assert!(m.graph.is_none());
        assert!(m.fuse_and_predict(&[0.0; 4], &BaseDetectorOutput::prediction(0.4)).is_err());
    }
}
