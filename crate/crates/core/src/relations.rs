//! Omission-oriented relation modeling.
//!
//! Intra-source edges get learned attributes from an MLP over
//! `h_i ‖ h_j ‖ |h_i − h_j|`. Inter-source edges come from an annotator LLM
//! that compares target segments with one environment item at a time and
//! explains each omission it finds; the explanation text is later encoded as
//! the edge attribute.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::encoding::Embedder;
use crate::error::{Error, Result};
use crate::graph::{OmissionGraph, SourceKind};
use crate::llm::{CallRecord, LlmBackend, LlmCaller, LlmClientSpec, LlmRequest, LlmResponse, ResponseCache};
use crate::nn::{Activation, Linear, Mlp};
use crate::prompts::{quote_segments, render_intent_prompt};
use crate::tape::{ParamSet, Tape, Var};
use crate::text::{content_tokens, jaccard};

/// Minimum token Jaccard for matching a drifted quote back to a segment.
pub const MATCH_THRESHOLD: f64 = 0.5;

/// MLP producing intra-source edge attributes from `h_i ‖ h_j ‖ |h_i − h_j|`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IntraEdgeNet {
    pub mlp: Mlp,
    pub node_dim: usize,
}

impl IntraEdgeNet {
    pub fn new(
        params: &mut ParamSet,
        node_dim: usize,
        edge_dim: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        IntraEdgeNet {
            mlp: Mlp::new(params, "intra_edge", 3 * node_dim, hidden, edge_dim, activation, rng),
            node_dim,
        }
    }

    pub fn edge_dim(&self) -> usize {
        self.mlp.output()
    }

    /// Row-wise attributes for edges whose endpoint states are the rows of
    /// `h_i` and `h_j`.
    pub fn forward(&self, tape: &mut Tape<'_>, h_i: Var, h_j: Var) -> Var {
        let input = self.input(tape, h_i, h_j);
        self.mlp.forward(tape, input)
    }

    /// The concatenated network input `h_i ‖ h_j ‖ |h_i − h_j|`.
    pub fn input(&self, tape: &mut Tape<'_>, h_i: Var, h_j: Var) -> Var {
        let diff = tape.sub(h_i, h_j);
        let diff = tape.abs(diff);
        tape.concat_cols(&[h_i, h_j, diff])
    }

    pub fn attr(&self, params: &ParamSet, h_i: &[f64], h_j: &[f64]) -> Result<Vec<f64>> {
        for h in [h_i, h_j] {
            if h.len() != self.node_dim {
                return Err(Error::Dimension {
                    expected: self.node_dim,
                    got: h.len(),
                });
            }
        }
        let mut tape = Tape::new(params);
        let a = tape.constant(row(h_i));
        let b = tape.constant(row(h_j));
        let out = self.forward(&mut tape, a, b);
        Ok(tape.value(out).row(0).to_vec())
    }
}

pub(crate) fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap()
}

/// Projects an encoded intent into the edge-attribute space.
pub fn encode_intent(
    intent_text: &str,
    embedder: &Embedder,
    projection: &Linear,
    params: &ParamSet,
) -> Result<Vec<f64>> {
    if intent_text.trim().is_empty() {
        return Err(Error::invalid("flagged pair has an empty intent"));
    }
    let v = embedder.embed(intent_text)?;
    if v.dim() != projection.input {
        return Err(Error::Dimension {
            expected: projection.input,
            got: v.dim(),
        });
    }
    let mut tape = Tape::new(params);
    let x = tape.constant(row(v.values()));
    let y = projection.forward(&mut tape, x);
    Ok(tape.value(y).row(0).to_vec())
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SegmentRef {
    pub parent_id: String,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentAnnotation {
    pub target_seg: SegmentRef,
    pub context_seg: SegmentRef,
    pub flagged: bool,
    pub intent_text: String,
    pub raw_response_id: String,
}

/// The three bracketed fields of one `{[...], [...], [...]}` triple.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawTriple {
    pub first: String,
    pub intent: String,
    pub third: String,
}

fn triple_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?s)\[\s*([^\[\]]*?)\s*\]\s*,\s*\[\s*([^\[\]]*?)\s*\]\s*,\s*\[\s*([^\[\]]*?)\s*\]")
            .unwrap()
    })
}

/// Extracts every bracketed triple, tolerating line breaks, extra
/// whitespace, and braces around single triples or whole lists.
pub fn parse_triples(raw: &str) -> Vec<RawTriple> {
    triple_regex()
        .captures_iter(raw)
        .map(|c| RawTriple {
            first: c[1].trim().to_string(),
            intent: collapse_ws(&c[2]),
            third: c[3].trim().to_string(),
        })
        .collect()
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn unquote(s: &str) -> String {
    let t = s.trim();
    let t = t.strip_prefix(['"', '“', '\'']).unwrap_or(t);
    let t = t.strip_suffix(['"', '”', '\'']).unwrap_or(t);
    collapse_ws(t)
}

/// Index of the segment `quoted` refers to: exact match first, then the best
/// token-Jaccard match at or above [`MATCH_THRESHOLD`] (lowest index wins ties).
pub fn match_segment<S: AsRef<str>>(quoted: &str, segments: &[S]) -> Option<usize> {
    let q = unquote(quoted);
    if let Some(i) = segments.iter().position(|s| collapse_ws(s.as_ref()) == q) {
        return Some(i);
    }
    let mut best: Option<(f64, usize)> = None;
    for (i, s) in segments.iter().enumerate() {
        let score = jaccard(&q, s.as_ref());
        if score >= MATCH_THRESHOLD && best.is_none_or(|(b, _)| score > b) {
            best = Some((score, i));
        }
    }
    best.map(|(_, i)| i)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParseOutcome {
    pub annotations: Vec<IntentAnnotation>,
    pub dropped: usize,
    /// Non-empty reply with no parseable triple.
    pub warning: bool,
}

/// Turns an intent-inference reply into flagged annotations.
///
/// Triples are read as `{[environment], [intent], [target]}`; a triple that
/// only matches with the two segment fields swapped is accepted swapped.
pub fn parse_intent_response<S: AsRef<str>>(
    raw: &str,
    target: (&str, &[S]),
    env: (&str, &[S]),
    raw_response_id: &str,
) -> ParseOutcome {
    let triples = parse_triples(raw);
    let mut out = ParseOutcome {
        warning: triples.is_empty() && !raw.trim().is_empty(),
        ..Default::default()
    };
    for t in triples {
        let matched = match (match_segment(&t.first, env.1), match_segment(&t.third, target.1)) {
            (Some(e), Some(g)) => Some((e, g)),
            _ => match (match_segment(&t.third, env.1), match_segment(&t.first, target.1)) {
                (Some(e), Some(g)) => Some((e, g)),
                _ => None,
            },
        };
        match matched {
            Some((e, g)) if !t.intent.is_empty() => out.annotations.push(IntentAnnotation {
                target_seg: SegmentRef {
                    parent_id: target.0.to_string(),
                    index: g,
                },
                context_seg: SegmentRef {
                    parent_id: env.0.to_string(),
                    index: e,
                },
                flagged: true,
                intent_text: t.intent,
                raw_response_id: raw_response_id.to_string(),
            }),
            _ => out.dropped += 1,
        }
    }
    if out.dropped > 0 {
        log::warn!("dropped {} unmatched triple(s) for `{}` vs `{}`", out.dropped, target.0, env.0);
    }
    out
}

/// Writes flagged annotations in the reply format, one triple per line.
pub fn serialize_annotations<S: AsRef<str>>(
    annotations: &[IntentAnnotation],
    target_segments: &[S],
    env_segments: &[S],
) -> String {
    annotations
        .iter()
        .filter(|a| a.flagged)
        .map(|a| {
            format!(
                "{{[\"{}\"], [{}], [\"{}\"]}}",
                env_segments[a.context_seg.index].as_ref(),
                a.intent_text,
                target_segments[a.target_seg.index].as_ref()
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Offline annotator with a fixed rule. An environment segment is flagged
/// when it holds a content token that also appears in another environment
/// item but in no target segment; the intent names the smallest such token
/// and the pair uses the most token-similar target segment.
pub struct IntentStub {
    target_segments: Vec<String>,
    env_items: Vec<(String, Vec<String>)>,
}

impl IntentStub {
    pub fn new(target_segments: Vec<String>, env_items: Vec<(String, Vec<String>)>) -> Self {
        IntentStub {
            target_segments,
            env_items,
        }
    }

    pub fn for_graph(graph: &OmissionGraph) -> Self {
        let mut target = Vec::new();
        let mut env = Vec::new();
        for (parent, ids) in graph.items() {
            let texts: Vec<String> = ids.iter().map(|&i| graph.nodes[i].text.clone()).collect();
            if graph.nodes[ids[0]].source == SourceKind::Target {
                target = texts;
            } else {
                env.push((parent, texts));
            }
        }
        Self::new(target, env)
    }

    /// The stub's reply for one environment item.
    pub fn answer(&self, env_index: usize) -> String {
        let target_tokens: BTreeSet<String> =
            self.target_segments.iter().flat_map(|s| content_tokens(s)).collect();
        let item_tokens: Vec<BTreeSet<String>> = self
            .env_items
            .iter()
            .map(|(_, segs)| segs.iter().flat_map(|s| content_tokens(s)).collect())
            .collect();
        let mut lines = Vec::new();
        for seg in &self.env_items[env_index].1 {
            let omitted = content_tokens(seg).into_iter().find(|tok| {
                !target_tokens.contains(tok)
                    && item_tokens
                        .iter()
                        .enumerate()
                        .any(|(k, toks)| k != env_index && toks.contains(tok))
            });
            let Some(tok) = omitted else { continue };
            let mut best = (f64::NEG_INFINITY, 0);
            for (i, t) in self.target_segments.iter().enumerate() {
                let score = jaccard(seg, t);
                if score > best.0 {
                    best = (score, i);
                }
            }
            lines.push(format!(
                "{{[\"{seg}\"], [omits shared context token: {tok}], [\"{}\"]}}",
                self.target_segments[best.1]
            ));
        }
        if lines.is_empty() {
            "No omissions found.".to_string()
        } else {
            lines.join("\n")
        }
    }
}

impl LlmBackend for IntentStub {
    fn complete(&self, req: &LlmRequest) -> Result<LlmResponse> {
        let block = req
            .context
            .split("[The Start of Environment]\n")
            .nth(1)
            .and_then(|rest| rest.split("\n[The End of Environment]").next())
            .ok_or_else(|| Error::invalid("stub: prompt has no environment block"))?;
        let env_index = self
            .env_items
            .iter()
            .position(|(_, segs)| quote_segments(segs) == block)
            .ok_or_else(|| Error::invalid("stub: environment block matches no known item"))?;
        Ok(LlmResponse::approximate(req, self.answer(env_index)))
    }
}

/// Relation-modeling output for one target item.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct IntentReport {
    pub target_id: String,
    pub annotations: Vec<IntentAnnotation>,
    pub calls: Vec<CallRecord>,
    pub dropped: usize,
    pub parse_warnings: usize,
    pub degraded: bool,
}

/// Issues one intent prompt per environment item of `graph`.
pub fn infer_intents(
    graph: &OmissionGraph,
    spec: &LlmClientSpec,
    backend: &dyn LlmBackend,
    cache: &ResponseCache,
    method: &str,
) -> IntentReport {
    let caller = LlmCaller {
        spec,
        backend,
        cache,
    };
    let mut report = IntentReport {
        target_id: graph.target_id.clone(),
        ..Default::default()
    };
    let items = graph.items();
    let Some(target_texts) = items
        .iter()
        .find(|(_, ids)| graph.nodes[ids[0]].source == SourceKind::Target)
        .map(|(_, ids)| ids.iter().map(|&i| graph.nodes[i].text.clone()).collect::<Vec<_>>())
    else {
        return report;
    };
    for (parent, ids) in &items {
        if graph.nodes[ids[0]].source != SourceKind::Context {
            continue;
        }
        let env_texts: Vec<String> = ids.iter().map(|&i| graph.nodes[i].text.clone()).collect();
        let prompt = match render_intent_prompt(&target_texts, &env_texts) {
            Ok(p) => p,
            Err(_) => continue,
        };
        let req = LlmRequest::new(prompt, &spec.model_name);
        match caller.call(&req, &graph.target_id, method) {
            Ok((resp, rec)) => {
                let parsed = parse_intent_response(
                    &resp.text,
                    (&graph.target_id, &target_texts),
                    (parent, &env_texts),
                    &rec.key,
                );
                report.dropped += parsed.dropped;
                report.parse_warnings += usize::from(parsed.warning);
                report.annotations.extend(parsed.annotations);
                report.calls.push(rec);
            }
            Err(e) => {
                log::warn!("target `{}` degraded: {e}", graph.target_id);
                report.degraded = true;
            }
        }
    }
    report
}

/// Runs [`infer_intents`] over many graphs with at most `spec.max_parallel`
/// concurrent calls. `backend_for` supplies the backend per graph.
pub fn infer_all<F>(
    graphs: &[OmissionGraph],
    spec: &LlmClientSpec,
    backend_for: F,
    cache: &ResponseCache,
    method: &str,
) -> Result<Vec<IntentReport>>
where
    F: Fn(&OmissionGraph) -> Arc<dyn LlmBackend> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.max_parallel.max(1))
        .build()
        .map_err(|e| Error::invalid(e.to_string()))?;
    Ok(pool.install(|| {
        graphs
            .par_iter()
            .map(|g| infer_intents(g, spec, backend_for(g).as_ref(), cache, method))
            .collect()
    }))
}

/// Adds inter edges for the flagged pairs of `report` (first intent wins
/// for duplicate pairs). Without any flagged pair the graph gets neutral
/// fallback edges instead. Returns the number of pairs linked.
pub fn apply_intents(graph: &mut OmissionGraph, report: &IntentReport, embedder: &Embedder) -> Result<usize> {
    let index: HashMap<(&str, usize), usize> = graph
        .nodes
        .iter()
        .map(|n| ((n.parent_id.as_str(), n.segment_index), n.node_id))
        .collect();
    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    for a in report.annotations.iter().filter(|a| a.flagged) {
        let t = index.get(&(a.target_seg.parent_id.as_str(), a.target_seg.index));
        let c = index.get(&(a.context_seg.parent_id.as_str(), a.context_seg.index));
        let (Some(&t), Some(&c)) = (t, c) else {
            return Err(Error::invalid(format!(
                "annotation references unknown segment for target `{}`",
                graph.target_id
            )));
        };
        if seen.insert((t, c)) {
            pairs.push((t, c, a.intent_text.clone()));
        }
    }
    graph.degraded = report.degraded;
    if pairs.is_empty() {
        return graph.add_fallback_edges(embedder);
    }
    for (t, c, intent) in &pairs {
        let v = embedder.embed(intent)?;
        graph.add_inter_pair(*t, *c, intent, Some(v))?;
    }
    Ok(pairs.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{EncoderSpec, HashStubEncoder};
    use rand::SeedableRng;

    fn segs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn diff_block_is_zero_for_equal_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::new();
        let net = IntraEdgeNet::new(&mut p, 4, 3, &[5], Activation::Relu, &mut rng);
        let mut t = Tape::new(&p);
        let h = t.constant(row(&[0.1, -0.2, 0.3, 0.4]));
        let input = net.input(&mut t, h, h);
        let v = t.value(input);
        assert_eq!(v.ncols(), 12);
        assert!(v.row(0).iter().skip(8).all(|&x| x == 0.0));
    }

    #[test]
    fn swapping_endpoints_keeps_diff_changes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::new();
        let net = IntraEdgeNet::new(&mut p, 3, 2, &[4], Activation::Relu, &mut rng);
        let (a, b) = ([0.5, -1.0, 0.2], [0.1, 0.7, -0.3]);
        let mut t = Tape::new(&p);
        let (va, vb) = (t.constant(row(&a)), t.constant(row(&b)));
        let ab = net.input(&mut t, va, vb);
        let ba = net.input(&mut t, vb, va);
        let (ab, ba) = (t.value(ab).clone(), t.value(ba).clone());
        for k in 6..9 {
            assert_eq!(ab[[0, k]], ba[[0, k]]);
        }
        assert_ne!(net.attr(&p, &a, &b).unwrap(), net.attr(&p, &b, &a).unwrap());
        assert!(matches!(net.attr(&p, &a, &[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn parses_single_triple() {
        let out = parse_intent_response(
            "{[\"e1\"], [to hide context], [\"t1\"]}",
            ("t", &segs(&["t1"])),
            ("e", &segs(&["e1"])),
            "k",
        );
        assert_eq!(out.annotations.len(), 1);
        assert_eq!(out.annotations[0].intent_text, "to hide context");
        assert_eq!(out.annotations[0].context_seg.index, 0);
        assert!(!out.warning);
    }

    #[test]
    fn no_triples_sets_warning() {
        let out = parse_intent_response("no omissions found", ("t", &segs(&["t1"])), ("e", &segs(&["e1"])), "k");
        assert!(out.annotations.is_empty());
        assert!(out.warning);
        let out = parse_intent_response("", ("t", &segs(&["t1"])), ("e", &segs(&["e1"])), "k");
        assert!(!out.warning);
    }

    #[test]
    fn unmatched_quote_is_dropped() {
        let target = segs(&["The mayor opened the bridge.", "Traffic resumed quickly."]);
        let env = segs(&["The bridge failed inspection twice.", "Engineers warned of cracks.", "Funding was cut."]);
        let raw = "{[\"The bridge failed inspection twice.\"], [to hide safety issues], [\"The mayor opened the bridge.\"]}\n\
                   {[\"engineers warned of cracks\"], [to downplay risk], [\"Traffic resumed quickly.\"]}\n\
                   {[\"Completely unrelated sentence here.\"], [noise], [\"Traffic resumed quickly.\"]}";
        let out = parse_intent_response(raw, ("t", &target), ("e", &env), "k");
        assert_eq!(out.annotations.len(), 2);
        assert_eq!(out.dropped, 1);
        assert_eq!(out.annotations[1].context_seg.index, 1);
        assert_eq!(out.annotations[1].target_seg.index, 1);
    }

    #[test]
    fn swapped_fields_are_recovered() {
        // The worked example in the prompt lists the target segment first.
        let out = parse_intent_response(
            "{[\"t1 alpha\"], [to mislead], [\"e1 beta\"]}",
            ("t", &segs(&["t1 alpha"])),
            ("e", &segs(&["e1 beta"])),
            "k",
        );
        assert_eq!(out.annotations.len(), 1);
    }

    #[test]
    fn braces_around_list_and_curly_quotes() {
        let raw = "{[“e1 one”], [intent a], [“t1 one”]\n[“e2 two”], [intent b], [“t1 one”]}";
        let out = parse_intent_response(raw, ("t", &segs(&["t1 one"])), ("e", &segs(&["e1 one", "e2 two"])), "k");
        assert_eq!(out.annotations.len(), 2);
    }

    #[test]
    fn stub_flags_planted_token() {
        let stub = IntentStub::new(
            segs(&["Officials opened the dam."]),
            vec![
                ("c1".into(), segs(&["Officials opened the dam.", "Heavy rainfall preceded zorvex warnings."])),
                ("c2".into(), segs(&["Zorvex levels rose upstream."])),
            ],
        );
        let reply = stub.answer(0);
        assert!(reply.contains("omits shared context token: zorvex"), "{reply}");
        assert_eq!(reply.lines().count(), 1);
    }

    #[test]
    fn encode_intent_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParamSet::new();
        let proj = Linear::new(&mut p, "intent_proj", 16, 5, &mut rng);
        let e = Embedder::uncached(Arc::new(HashStubEncoder::new(EncoderSpec::hash_stub(16)).unwrap()));
        let a = encode_intent("to hide costs", &e, &proj, &p).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, encode_intent("to hide costs", &e, &proj, &p).unwrap());
        assert!(encode_intent("  ", &e, &proj, &p).is_err());
    }
}
