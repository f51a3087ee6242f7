//! Omission-guided message passing.
//!
//! Each layer enhances edge attributes with a learned type embedding, runs
//! attention-weighted message passing over in-neighbors, lets a super-root
//! node pool a gated summary of the previous layer's node states, and adds a
//! transformed copy of the root back onto every node.
//!
//! Everything runs on a [`Tape`] over a [`BatchStructure`], so one call can
//! process a disjoint union of many graphs.

use std::rc::Rc;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeType, OmissionGraph};
use crate::nn::{uniform, Activation, Linear, Mlp};
use crate::tape::{ParamId, ParamSet, Tape, Var};

pub const DEFAULT_MODEL_DIM: usize = 256;
pub const DEFAULT_HIDDEN: [usize; 2] = [128, 128];
pub const DEFAULT_LAYERS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnnConfig {
    /// Node state width `d`.
    pub model_dim: usize,
    /// Edge attribute width `d_e`.
    pub edge_dim: usize,
    pub hidden: Vec<usize>,
    pub layers: usize,
    pub activation: Activation,
    /// Divide attention logits by `sqrt(d)`. Off by default.
    pub scale_attention: bool,
}

impl Default for GnnConfig {
    fn default() -> Self {
        GnnConfig {
            model_dim: DEFAULT_MODEL_DIM,
            edge_dim: DEFAULT_MODEL_DIM,
            hidden: DEFAULT_HIDDEN.to_vec(),
            layers: DEFAULT_LAYERS,
            activation: Activation::Relu,
            scale_attention: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GnnLayer {
    /// `h_t ‖ e → ê` (input `d + d_e`, output `d`).
    pub edge_enhance: Mlp,
    /// `h_j ‖ ê → m_ij` (input `2d`, output `d`).
    pub message: Mlp,
    /// Applied to `h_i + Σ α_ij m_ij`.
    pub update: Mlp,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GnnParams {
    pub config: GnnConfig,
    pub layers: Vec<GnnLayer>,
    pub type_intra: ParamId,
    pub type_inter: ParamId,
    pub root_init: ParamId,
    /// Root gate `W` (`d×1`) and `b` (`1×1`).
    pub gate_weight: ParamId,
    pub gate_bias: ParamId,
    /// Affine part of the root transform; a tanh follows it.
    pub psi: Linear,
}

impl GnnParams {
    pub fn new(params: &mut ParamSet, config: GnnConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.layers == 0 {
            return Err(Error::invalid("at least one message-passing layer is required"));
        }
        let (d, de, act) = (config.model_dim, config.edge_dim, config.activation);
        let layers = (0..config.layers)
            .map(|l| GnnLayer {
                edge_enhance: Mlp::new(params, &format!("gnn.{l}.edge_enhance"), d + de, &config.hidden, d, act, rng),
                message: Mlp::new(params, &format!("gnn.{l}.message"), 2 * d, &config.hidden, d, act, rng),
                update: Mlp::new(params, &format!("gnn.{l}.update"), d, &config.hidden, d, act, rng),
            })
            .collect();
        let type_intra = params.add("gnn.type_intra", uniform(rng, 1, d, 0.02));
        let type_inter = params.add("gnn.type_inter", uniform(rng, 1, d, 0.02));
        let root_init = params.add("gnn.root_init", uniform(rng, 1, d, 0.02));
        let bound = 1.0 / (d as f64).sqrt();
        let gate_weight = params.add("gnn.gate.weight", uniform(rng, d, 1, bound));
        let gate_bias = params.add("gnn.gate.bias", uniform(rng, 1, 1, bound));
        let psi = Linear::new(params, "gnn.psi", d, d, rng);
        Ok(GnnParams {
            config,
            layers,
            type_intra,
            type_inter,
            root_init,
            gate_weight,
            gate_bias,
            psi,
        })
    }

    pub fn type_embedding(&self, etype: EdgeType) -> ParamId {
        match etype {
            EdgeType::Intra => self.type_intra,
            EdgeType::Inter => self.type_inter,
        }
    }
}

/// Index structure of a disjoint union of graphs. Edges run `src -> dst`
/// and are ordered with every intra edge before every inter edge.
#[derive(Clone, Debug)]
pub struct BatchStructure {
    pub n_nodes: usize,
    pub n_graphs: usize,
    pub node_graph: Rc<[usize]>,
    pub edge_src: Rc<[usize]>,
    pub edge_dst: Rc<[usize]>,
    /// 0 = intra, 1 = inter.
    pub edge_type: Rc<[usize]>,
    pub n_intra: usize,
    pub target_nodes: Rc<[usize]>,
    pub target_graph: Rc<[usize]>,
    /// `1 / (#target nodes)` per graph.
    pub target_inv_count: Rc<[f64]>,
}

impl BatchStructure {
    /// Builds the union structure; returns it along with, for every batch
    /// edge, the `(graph index, edge index)` it came from.
    pub fn from_graphs(graphs: &[&OmissionGraph]) -> Result<(Self, Vec<(usize, usize)>)> {
        let mut node_graph = Vec::new();
        let mut offsets = Vec::with_capacity(graphs.len());
        let mut target_nodes = Vec::new();
        let mut target_graph = Vec::new();
        let mut target_inv_count = Vec::new();
        for (gi, g) in graphs.iter().enumerate() {
            if g.target_node_ids.is_empty() {
                return Err(Error::invalid(format!("graph `{}` has no target nodes", g.target_id)));
            }
            offsets.push(node_graph.len());
            for &t in &g.target_node_ids {
                target_nodes.push(node_graph.len() + t);
                target_graph.push(gi);
            }
            target_inv_count.push(1.0 / g.target_node_ids.len() as f64);
            node_graph.extend(std::iter::repeat_n(gi, g.nodes.len()));
        }
        let mut origin = Vec::new();
        for want in [EdgeType::Intra, EdgeType::Inter] {
            for (gi, g) in graphs.iter().enumerate() {
                for (ei, e) in g.edges.iter().enumerate() {
                    if e.etype == want {
                        origin.push((gi, ei));
                    }
                }
            }
        }
        let edge = |f: &dyn Fn(usize, &crate::graph::GraphEdge) -> usize| -> Rc<[usize]> {
            origin.iter().map(|&(gi, ei)| f(gi, &graphs[gi].edges[ei])).collect()
        };
        let edge_src = edge(&|gi, e| offsets[gi] + e.src);
        let edge_dst = edge(&|gi, e| offsets[gi] + e.dst);
        let edge_type = edge(&|_, e| e.etype.index());
        let n_intra = edge_type.iter().filter(|&&t| t == 0).count();
        Ok((
            BatchStructure {
                n_nodes: node_graph.len(),
                n_graphs: graphs.len(),
                node_graph: node_graph.into(),
                edge_src,
                edge_dst,
                edge_type,
                n_intra,
                target_nodes: target_nodes.into(),
                target_graph: target_graph.into(),
                target_inv_count: target_inv_count.into(),
            },
            origin,
        ))
    }

    pub fn n_edges(&self) -> usize {
        self.edge_src.len()
    }
}

/// Intermediate values of one layer, for inspection and tests.
#[derive(Clone, Copy, Debug)]
pub struct LayerTrace {
    pub enhanced_edges: Var,
    pub attention: Var,
    pub local: Var,
    pub gates: Var,
    pub root: Var,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub input: Var,
    pub root_input: Var,
    pub layers: Vec<LayerTrace>,
}

impl ForwardTrace {
    pub fn output(&self) -> Var {
        self.layers.last().map_or(self.input, |l| l.output)
    }

    pub fn root(&self) -> Var {
        self.layers.last().map_or(self.root_input, |l| l.root)
    }
}

/// Node and root states for every layer `0..=l`.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeState {
    pub nodes: Vec<Array2<f64>>,
    pub roots: Vec<Array2<f64>>,
}

impl NodeState {
    pub fn from_trace(tape: &Tape<'_>, trace: &ForwardTrace) -> Self {
        let mut nodes = vec![tape.value(trace.input).clone()];
        let mut roots = vec![tape.value(trace.root_input).clone()];
        for l in &trace.layers {
            nodes.push(tape.value(l.output).clone());
            roots.push(tape.value(l.root).clone());
        }
        NodeState { nodes, roots }
    }

    pub fn last(&self) -> &Array2<f64> {
        self.nodes.last().unwrap()
    }
}

impl GnnParams {
    /// `ê = MLP(h_t ‖ e)` for every edge row; `type_rows` holds `h_t` per edge.
    pub fn enhance_edges(&self, tape: &mut Tape<'_>, layer: usize, type_rows: Var, attrs: Var) -> Var {
        let input = tape.concat_cols(&[type_rows, attrs]);
        self.layers[layer].edge_enhance.forward(tape, input)
    }

    /// Type embedding row for every edge of `s`.
    pub fn type_rows(&self, tape: &mut Tape<'_>, s: &BatchStructure) -> Var {
        let intra = tape.param(self.type_intra);
        let inter = tape.param(self.type_inter);
        let table = tape.concat_rows(&[intra, inter]);
        tape.gather(table, s.edge_type.clone())
    }

    /// `α_ij = softmax_j((h_i + ê_ij)·(h_j + ê_ij))` over the in-edges of
    /// each destination `i`; an `E×1` column.
    pub fn attention_weights(&self, tape: &mut Tape<'_>, h: Var, enhanced: Var, s: &BatchStructure) -> Var {
        let h_dst = tape.gather(h, s.edge_dst.clone());
        let h_src = tape.gather(h, s.edge_src.clone());
        let a = tape.add(h_dst, enhanced);
        let b = tape.add(h_src, enhanced);
        let mut logits = tape.row_dot(a, b);
        if self.config.scale_attention {
            logits = tape.affine(logits, 1.0 / (self.config.model_dim as f64).sqrt(), 0.0);
        }
        tape.segment_softmax(logits, s.edge_dst.clone(), s.n_nodes)
    }

    /// `h_i' = MLP(h_i + Σ_j α_ij · MLP(h_j ‖ ê_ij))`, all nodes read from the
    /// same previous-layer states. Returns `(h', α)`.
    pub fn local_update(&self, tape: &mut Tape<'_>, layer: usize, h: Var, enhanced: Var, s: &BatchStructure) -> (Var, Var) {
        let alpha = self.attention_weights(tape, h, enhanced, s);
        let h_src = tape.gather(h, s.edge_src.clone());
        let msg_in = tape.concat_cols(&[h_src, enhanced]);
        let messages = self.layers[layer].message.forward(tape, msg_in);
        let weighted = tape.mul_col(messages, alpha);
        let agg = tape.scatter_add(weighted, s.edge_dst.clone(), s.n_nodes);
        let pre = tape.add(h, agg);
        (self.layers[layer].update.forward(tape, pre), alpha)
    }

    /// `root' = root + Σ_i softmax_i(W h_i + b) h_i` per graph. Returns
    /// `(root', gates)`.
    pub fn root_update(&self, tape: &mut Tape<'_>, h: Var, root: Var, s: &BatchStructure) -> (Var, Var) {
        let w = tape.param(self.gate_weight);
        let b = tape.param(self.gate_bias);
        let logits = tape.matmul(h, w);
        let logits = tape.add_row(logits, b);
        let gates = tape.segment_softmax(logits, s.node_graph.clone(), s.n_graphs);
        let weighted = tape.mul_col(h, gates);
        let pooled = tape.scatter_add(weighted, s.node_graph.clone(), s.n_graphs);
        (tape.add(root, pooled), gates)
    }

    /// `h_i ← tanh(ψ(root)) + h_i` with the root of each node's graph.
    pub fn fuse_root(&self, tape: &mut Tape<'_>, h: Var, root: Var, s: &BatchStructure) -> Var {
        let shift = self.psi.forward(tape, root);
        let shift = tape.tanh(shift);
        let per_node = tape.gather(shift, s.node_graph.clone());
        tape.add(h, per_node)
    }

    /// Initial root state for every graph in the batch.
    pub fn initial_root(&self, tape: &mut Tape<'_>, s: &BatchStructure) -> Var {
        let init = tape.param(self.root_init);
        tape.gather(init, vec![0; s.n_graphs].into())
    }

    /// Runs every layer: local update, root update from the pre-layer
    /// states, then root fusion into the local output.
    pub fn forward(&self, tape: &mut Tape<'_>, h0: Var, edge_attrs: Var, s: &BatchStructure) -> Result<ForwardTrace> {
        let type_rows = self.type_rows(tape, s);
        let root_input = self.initial_root(tape, s);
        let (mut h, mut root) = (h0, root_input);
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let enhanced = self.enhance_edges(tape, l, type_rows, edge_attrs);
            let (local, attention) = self.local_update(tape, l, h, enhanced, s);
            check_finite(tape, local, l + 1)?;
            let (new_root, gates) = self.root_update(tape, h, root, s);
            let output = self.fuse_root(tape, local, new_root, s);
            check_finite(tape, output, l + 1)?;
            layers.push(LayerTrace {
                enhanced_edges: enhanced,
                attention,
                local,
                gates,
                root: new_root,
                output,
            });
            h = output;
            root = new_root;
        }
        Ok(ForwardTrace {
            input: h0,
            root_input,
            layers,
        })
    }
}

fn check_finite(tape: &Tape<'_>, v: Var, layer: usize) -> Result<()> {
    for (node, row) in tape.value(v).rows().into_iter().enumerate() {
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { node, layer });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn small_config() -> GnnConfig {
        GnnConfig {
            model_dim: 4,
            edge_dim: 3,
            hidden: vec![5],
            layers: 1,
            activation: Activation::Relu,
            scale_attention: false,
        }
    }

    fn structure(n: usize, edges: &[(usize, usize, usize)]) -> BatchStructure {
        BatchStructure {
            n_nodes: n,
            n_graphs: 1,
            node_graph: vec![0; n].into(),
            edge_src: edges.iter().map(|e| e.0).collect(),
            edge_dst: edges.iter().map(|e| e.1).collect(),
            edge_type: edges.iter().map(|e| e.2).collect(),
            n_intra: edges.iter().filter(|e| e.2 == 0).count(),
            target_nodes: vec![0].into(),
            target_graph: vec![0].into(),
            target_inv_count: vec![1.0].into(),
        }
    }

    fn setup() -> (ParamSet, GnnParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ParamSet::new();
        let g = GnnParams::new(&mut p, small_config(), &mut rng).unwrap();
        (p, g)
    }

    #[test]
    fn single_neighbor_gets_full_weight() {
        let (p, g) = setup();
        let s = structure(2, &[(1, 0, 0)]);
        let mut t = Tape::new(&p);
        let h = t.constant(Array2::from_elem((2, 4), 0.3));
        let e = t.constant(Array2::from_elem((1, 4), -0.1));
        let a = g.attention_weights(&mut t, h, e, &s);
        assert_eq!(t.value(a)[[0, 0]], 1.0);
    }

    #[test]
    fn equal_logits_split_evenly() {
        let (p, g) = setup();
        let s = structure(3, &[(1, 0, 0), (2, 0, 0)]);
        let mut t = Tape::new(&p);
        let h = t.constant(Array2::from_elem((3, 4), 0.2));
        let e = t.constant(Array2::from_elem((2, 4), 0.1));
        let a = g.attention_weights(&mut t, h, e, &s);
        assert!((t.value(a)[[0, 0]] - 0.5).abs() < 1e-15);
        assert!((t.value(a)[[1, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn edgeless_graph_maps_nodes_independently() {
        let (p, g) = setup();
        let s = structure(3, &[]);
        let mut t = Tape::new(&p);
        let h = t.constant(Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 * 0.1));
        let e = t.constant(Array2::zeros((0, 4)));
        let (out, _) = g.local_update(&mut t, 0, h, e, &s);
        let direct = g.layers[0].update.forward(&mut t, h);
        assert_eq!(t.value(out), t.value(direct));
    }

    #[test]
    fn type_embeddings_distinguish_edges() {
        let (p, g) = setup();
        let s = structure(2, &[(1, 0, 0), (0, 1, 1)]);
        let mut t = Tape::new(&p);
        let rows = g.type_rows(&mut t, &s);
        let attrs = t.constant(Array2::from_elem((2, 3), 0.4));
        let e = g.enhance_edges(&mut t, 0, rows, attrs);
        let v = t.value(e);
        assert_ne!(v.row(0), v.row(1));
    }

    #[test]
    fn singleton_root_gains_node_state() {
        let (p, g) = setup();
        let s = structure(1, &[]);
        let mut t = Tape::new(&p);
        let h = t.constant(Array2::from_shape_vec((1, 4), vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let r = t.constant(Array2::zeros((1, 4)));
        let (root, gates) = g.root_update(&mut t, h, r, &s);
        assert_eq!(t.value(gates)[[0, 0]], 1.0);
        assert_eq!(t.value(root), t.value(h));
    }

    #[test]
    fn identical_states_pool_to_common_state() {
        let (p, g) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let state: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        for n in [1, 3, 7] {
            let s = structure(n, &[]);
            let mut t = Tape::new(&p);
            let h = t.constant(Array2::from_shape_fn((n, 4), |(_, j)| state[j]));
            let r = t.constant(Array2::zeros((1, 4)));
            let (root, _) = g.root_update(&mut t, h, r, &s);
            for j in 0..4 {
                assert!((t.value(root)[[0, j]] - state[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn root_fusion_is_a_common_shift() {
        let (p, g) = setup();
        let s = structure(3, &[]);
        let mut t = Tape::new(&p);
        let h = t.constant(Array2::from_shape_fn((3, 4), |(i, j)| (i as f64) - (j as f64) * 0.3));
        let root = t.constant(Array2::from_elem((1, 4), 0.7));
        let fused = g.fuse_root(&mut t, h, root, &s);
        let (before, after) = (t.value(h), t.value(fused));
        for j in 0..4 {
            let d0 = before[[0, j]] - before[[2, j]];
            let d1 = after[[0, j]] - after[[2, j]];
            assert!((d0 - d1).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_psi_leaves_states_unchanged() {
        let (mut p, g) = setup();
        p.get_mut(g.psi.weight).fill(0.0);
        p.get_mut(g.psi.bias).fill(0.0);
        let s = structure(2, &[]);
        let mut t = Tape::new(&p);
        let h = t.constant(Array2::from_elem((2, 4), 1.5));
        let root = t.constant(Array2::from_elem((1, 4), 9.0));
        let fused = g.fuse_root(&mut t, h, root, &s);
        assert_eq!(t.value(fused), t.value(h));
    }

    #[test]
    fn rejects_zero_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::new();
        let cfg = GnnConfig {
            layers: 0,
            ..small_config()
        };
        assert!(GnnParams::new(&mut p, cfg, &mut rng).is_err());
    }

    #[test]
    fn non_finite_state_names_the_node() {
        let (p, g) = setup();
        let s = structure(2, &[(1, 0, 0)]);
        let mut t = Tape::new(&p);
        let mut h0 = Array2::zeros((2, 4));
        h0[[1, 2]] = f64::NAN;
        let h = t.constant(h0);
        let e = t.constant(Array2::zeros((1, 3)));
        match g.forward(&mut t, h, e, &s) {
            Err(Error::NonFinite { layer: 1, .. }) => {}
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }
}
