//! The omission-aware graph: segment nodes from the target and its contextual
//! environment, intra-source edges within each item, and inter-source edges
//! added once relation modeling has flagged omission pairs.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{segment_item, Corpus, Label, NewsItem};
use crate::encoding::{cosine, ContextEnvironment, Embedder, EmbeddingVector};
use crate::error::{Error, Result};

/// Intent text attached to fallback edges when nothing was flagged.
pub const NEUTRAL_INTENT: &str = "no omission detected";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Target,
    Context,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeType {
    Intra,
    Inter,
}

impl EdgeType {
    pub fn index(self) -> usize {
        match self {
            EdgeType::Intra => 0,
            EdgeType::Inter => 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphNode {
    pub node_id: usize,
    pub source: SourceKind,
    pub parent_id: String,
    pub segment_index: usize,
    pub text: String,
    /// Raw encoder embedding; the model owns the projection to its width.
    #[serde(skip)]
    pub embedding: Option<Arc<EmbeddingVector>>,
}

/// A directed edge `src -> dst`: messages from `src` update `dst`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphEdge {
    pub src: usize,
    pub dst: usize,
    pub etype: EdgeType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent_text: Option<String>,
    /// Encoder embedding of the intent text (inter edges only).
    #[serde(skip)]
    pub intent_embedding: Option<Arc<EmbeddingVector>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OmissionGraph {
    pub target_id: String,
    pub label: Option<Label>,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    pub target_node_ids: Vec<usize>,
    /// Set when relation modeling fell back to neutral edges after failures.
    #[serde(default)]
    pub degraded: bool,
    #[serde(skip)]
    pub item_embedding: Option<Arc<EmbeddingVector>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub node_count: usize,
    pub intra_count: usize,
    pub inter_count: usize,
    pub target_fraction: f64,
}

/// Builds nodes for the target's segments followed by every environment
/// item's segments (in ranked order), plus all ordered intra-source pairs.
pub fn build_graph(
    target: &NewsItem,
    env: &ContextEnvironment,
    context: &Corpus,
    max_segments: usize,
    embedder: &Embedder,
) -> Result<OmissionGraph> {
    let target_segments = segment_item(target, max_segments);
    if target_segments.is_empty() {
        return Err(Error::invalid(format!("target `{}` has no segments", target.id)));
    }
    let mut sources = vec![(SourceKind::Target, target_segments)];
    for id in env.ids() {
        let item = context.require(id)?;
        sources.push((SourceKind::Context, segment_item(item, max_segments)));
    }

    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    for (kind, segments) in sources {
        let first = nodes.len();
        for seg in segments {
            nodes.push(GraphNode {
                node_id: nodes.len(),
                source: kind,
                parent_id: seg.parent_id,
                segment_index: seg.index,
                text: seg.text,
                embedding: None,
            });
        }
        let last = nodes.len();
        for dst in first..last {
            for src in first..last {
                if src != dst {
                    edges.push(GraphEdge {
                        src,
                        dst,
                        etype: EdgeType::Intra,
                        intent_text: None,
                        intent_embedding: None,
                    });
                }
            }
        }
    }
    let target_node_ids = nodes
        .iter()
        .filter(|n| n.source == SourceKind::Target)
        .map(|n| n.node_id)
        .collect();
    let mut graph = OmissionGraph {
        target_id: target.id.clone(),
        label: target.label,
        nodes,
        edges,
        target_node_ids,
        degraded: false,
        item_embedding: None,
    };
    graph.item_embedding = Some(embedder.embed(&target.text)?);
    graph.hydrate(embedder, None)?;
    Ok(graph)
}

impl OmissionGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn stats(&self) -> GraphStats {
        graph_stats(self)
    }

    /// Node ids grouped by parent item, in node order.
    pub fn items(&self) -> Vec<(String, Vec<usize>)> {
        let mut order: Vec<String> = Vec::new();
        let mut groups: HashMap<&str, Vec<usize>> = HashMap::new();
        for n in &self.nodes {
            let entry = groups.entry(&n.parent_id).or_default();
            if entry.is_empty() {
                order.push(n.parent_id.clone());
            }
            entry.push(n.node_id);
        }
        order
            .into_iter()
            .map(|p| {
                let ids = groups.remove(p.as_str()).unwrap();
                (p, ids)
            })
            .collect()
    }

    /// Adds the two directed edges between a target node and a context node,
    /// both carrying `intent`.
    pub fn add_inter_pair(&mut self, target_node: usize, context_node: usize, intent: &str, intent_embedding: Option<Arc<EmbeddingVector>>) -> Result<()> {
        let (t, c) = (&self.nodes[target_node], &self.nodes[context_node]);
        if t.source != SourceKind::Target || c.source != SourceKind::Context {
            return Err(Error::invalid(format!(
                "inter edge must join a target and a context node, got {target_node} -> {context_node}"
            )));
        }
        for (src, dst) in [(context_node, target_node), (target_node, context_node)] {
            self.edges.push(GraphEdge {
                src,
                dst,
                etype: EdgeType::Inter,
                intent_text: Some(intent.to_string()),
                intent_embedding: intent_embedding.clone(),
            });
        }
        Ok(())
    }

    /// Links each target segment to its most cosine-similar context segment
    /// with the neutral intent. No-op without context nodes.
    pub fn add_fallback_edges(&mut self, embedder: &Embedder) -> Result<usize> {
        let context: Vec<usize> = self
            .nodes
            .iter()
            .filter(|n| n.source == SourceKind::Context)
            .map(|n| n.node_id)
            .collect();
        if context.is_empty() {
            return Ok(0);
        }
        let neutral = embedder.embed(NEUTRAL_INTENT)?;
        let mut added = 0;
        for t in self.target_node_ids.clone() {
            let tv = self.node_embedding(t)?;
            let mut best = (f64::NEG_INFINITY, context[0]);
            for &c in &context {
                let cv = self.node_embedding(c)?;
                let sim = cosine(&tv, &cv)?;
                if sim > best.0 {
                    best = (sim, c);
                }
            }
            self.add_inter_pair(t, best.1, NEUTRAL_INTENT, Some(neutral.clone()))?;
            added += 1;
        }
        Ok(added)
    }

    pub fn node_embedding(&self, id: usize) -> Result<Arc<EmbeddingVector>> {
        self.nodes[id]
            .embedding
            .clone()
            .ok_or_else(|| Error::invalid(format!("node {id} has no embedding; hydrate the graph first")))
    }

    /// Fills node, intent and item embeddings from `embedder` (a cache hit
    /// for graphs built in the same workspace).
    pub fn hydrate(&mut self, embedder: &Embedder, item_text: Option<&str>) -> Result<()> {
        for n in &mut self.nodes {
            if n.embedding.is_none() {
                n.embedding = Some(embedder.embed(&n.text)?);
            }
        }
        for e in &mut self.edges {
            if let (Some(text), None) = (&e.intent_text, &e.intent_embedding) {
                e.intent_embedding = Some(embedder.embed(text)?);
            }
        }
        if let Some(text) = item_text {
            self.item_embedding = Some(embedder.embed(text)?);
        }
        Ok(())
    }

    /// Checks every structural invariant of the graph.
    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.node_id != i {
                return Err(Error::invalid(format!("node ids not dense at {i}")));
            }
        }
        if self.target_node_ids.is_empty() {
            return Err(Error::invalid("graph has no target nodes"));
        }
        let targets: Vec<usize> = self
            .nodes
            .iter()
            .filter(|x| x.source == SourceKind::Target)
            .map(|x| x.node_id)
            .collect();
        if targets != self.target_node_ids {
            return Err(Error::invalid("target_node_ids disagree with node sources"));
        }
        for e in &self.edges {
            if e.src >= n || e.dst >= n {
                return Err(Error::invalid(format!("edge {} -> {} out of range", e.src, e.dst)));
            }
            if e.src == e.dst {
                return Err(Error::invalid(format!("self-loop at {}", e.src)));
            }
            let (a, b) = (&self.nodes[e.src], &self.nodes[e.dst]);
            match e.etype {
                EdgeType::Intra if a.parent_id != b.parent_id => {
                    return Err(Error::invalid(format!("intra edge {} -> {} crosses items", e.src, e.dst)))
                }
                EdgeType::Inter if a.source == b.source => {
                    return Err(Error::invalid(format!("inter edge {} -> {} is not bipartite", e.src, e.dst)))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Relabels nodes so old node `i` becomes `perm[i]`; edges are remapped
    /// and re-sorted, target nodes listed in their new order.
    pub fn permuted(&self, perm: &[usize]) -> OmissionGraph {
        assert_eq!(perm.len(), self.nodes.len());
        let mut nodes: Vec<GraphNode> = self.nodes.clone();
        for (old, node) in self.nodes.iter().enumerate() {
            let mut moved = node.clone();
            moved.node_id = perm[old];
            nodes[perm[old]] = moved;
        }
        let mut edges: Vec<GraphEdge> = self
            .edges
            .iter()
            .map(|e| GraphEdge {
                src: perm[e.src],
                dst: perm[e.dst],
                ..e.clone()
            })
            .collect();
        edges.sort_by_key(|e| (e.dst, e.src, e.etype.index()));
        let target_node_ids = nodes
            .iter()
            .filter(|n| n.source == SourceKind::Target)
            .map(|n| n.node_id)
            .collect();
        OmissionGraph {
            nodes,
            edges,
            target_node_ids,
            ..self.clone()
        }
    }
}

pub fn graph_stats(g: &OmissionGraph) -> GraphStats {
    let intra_count = g.edges.iter().filter(|e| e.etype == EdgeType::Intra).count();
    GraphStats {
        node_count: g.nodes.len(),
        intra_count,
        inter_count: g.edges.len() - intra_count,
        target_fraction: if g.nodes.is_empty() {
            0.0
        } else {
            g.target_node_ids.len() as f64 / g.nodes.len() as f64
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{EncoderSpec, HashStubEncoder};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn item(id: &str, text: &str) -> NewsItem {
        NewsItem {
            id: id.into(),
            text: text.into(),
            timestamp: 0,
            label: None,
            split: None,
            language: "en".into(),
        }
    }

    fn embedder() -> Embedder {
        Embedder::uncached(Arc::new(HashStubEncoder::new(EncoderSpec::hash_stub(32)).unwrap()))
    }

    fn env(ids: &[&str]) -> ContextEnvironment {
        ContextEnvironment {
            target_id: "t".into(),
            ranked: ids.iter().map(|i| (i.to_string(), 0.5)).collect(),
            k: 32,
        }
    }

    #[test]
    fn target_only_graph() {
        let g = build_graph(&item("t", "One. Two."), &env(&[]), &Corpus::default(), 32, &embedder()).unwrap();
        let s = g.stats();
        assert_eq!((s.node_count, s.intra_count, s.inter_count), (2, 2, 0));
        assert_eq!(s.target_fraction, 1.0);
        g.validate().unwrap();
    }

    #[test]
    fn intra_counts_per_item() {
        let ctx = Corpus::from_items(vec![item("c", "Alpha. Beta.")]).unwrap();
        let g = build_graph(&item("t", "One. Two. Three."), &env(&["c"]), &ctx, 32, &embedder()).unwrap();
        let s = g.stats();
        assert_eq!(s.node_count, 5);
        assert_eq!(s.intra_count, 3 * 2 + 2);
        assert_eq!(s.inter_count, 0);
    }

    #[test]
    fn empty_target_is_rejected() {
        assert!(build_graph(&item("t", "   "), &env(&[]), &Corpus::default(), 32, &embedder()).is_err());
    }

    #[test]
    fn fallback_edges_link_every_target_segment() {
        let ctx = Corpus::from_items(vec![item("c", "The river flooded. Crops failed.")]).unwrap();
        let e = embedder();
        let mut g = build_graph(&item("t", "The river rose. Prices fell."), &env(&["c"]), &ctx, 32, &e).unwrap();
        assert_eq!(g.add_fallback_edges(&e).unwrap(), 2);
        let s = g.stats();
        assert_eq!(s.inter_count, 4);
        g.validate().unwrap();
        assert!(g.edges.iter().filter(|x| x.etype == EdgeType::Inter).all(|x| x.intent_text.as_deref() == Some(NEUTRAL_INTENT)));
    }

    #[test]
    fn random_graphs_keep_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let e = embedder();
        for trial in 0..30 {
            let n_ctx = rng.random_range(0..5);
            let mk = |rng: &mut ChaCha8Rng, id: &str| {
                let n = rng.random_range(1..6);
                let text: String = (0..n).map(|k| format!("w{} s{k}. ", rng.random_range(0..50))).collect();
                item(id, &text)
            };
            let ctx_items: Vec<_> = (0..n_ctx).map(|i| mk(&mut rng, &format!("c{i}"))).collect();
            let ids: Vec<String> = ctx_items.iter().map(|c| c.id.clone()).collect();
            let ctx = Corpus::from_items(ctx_items.clone()).unwrap();
            let target = mk(&mut rng, "t");
            let id_refs: Vec<&str> = ids.iter().map(|s| s.as_str()).collect();
            let mut g = build_graph(&target, &env(&id_refs), &ctx, 32, &e).unwrap();
            g.add_fallback_edges(&e).unwrap();
            g.validate().unwrap();
            // Recount oracle.
            let mut per_parent: HashMap<&str, usize> = HashMap::new();
            for n in &g.nodes {
                *per_parent.entry(n.parent_id.as_str()).or_default() += 1;
            }
            let expected_intra: usize = per_parent.values().map(|s| s * (s - 1)).sum();
            let s = g.stats();
            assert_eq!(s.intra_count, expected_intra, "trial {trial}");
            assert_eq!(s.node_count, g.nodes.len());
            assert_eq!(s.intra_count + s.inter_count, g.edges.len());
            for edge in g.edges.iter().filter(|x| x.etype == EdgeType::Intra) {
                assert_eq!(g.nodes[edge.src].parent_id, g.nodes[edge.dst].parent_id);
            }
        }
    }

    #[test]
    fn serialization_round_trip_rehydrates() {
        let ctx = Corpus::from_items(vec![item("c", "Alpha. Beta.")]).unwrap();
        let e = embedder();
        let mut g = build_graph(&item("t", "One. Two."), &env(&["c"]), &ctx, 32, &e).unwrap();
        g.add_fallback_edges(&e).unwrap();
        let json = serde_json::to_string(&g).unwrap();
        let mut back: OmissionGraph = serde_json::from_str(&json).unwrap();
        assert!(back.nodes[0].embedding.is_none());
        back.hydrate(&e, Some("One. Two.")).unwrap();
        assert_eq!(back.nodes[3].embedding, g.nodes[3].embedding);
        assert_eq!(back.edges.len(), g.edges.len());
        assert_eq!(back.item_embedding, g.item_embedding);
    }
}
