//! Simulated news environments and the omission-type analysis.
//!
//! Simulation asks an LLM to invent the information a target leaves out.
//! The simulated segments join the target's graph as one synthetic context
//! item named `sim:<target id>`, so the rest of the pipeline is unchanged.

use std::collections::{BTreeMap, BTreeSet};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{Label, NewsItem};
use crate::encoding::Embedder;
use crate::error::{Error, Result};
use crate::graph::{EdgeType, GraphEdge, GraphNode, OmissionGraph, SourceKind};
use crate::llm::{CallRecord, LlmBackend, LlmCaller, LlmRequest, LlmResponse};
use crate::prompts::{
    render_sim_prompt, render_type_batch_prompt, render_type_final_prompt, IntentSample, SimMode, TYPE_BATCH_SYSTEM,
    TYPE_FINAL_SYSTEM,
};
use crate::relations::{match_segment, parse_triples, unquote};

pub const TYPE_BATCH_SIZE: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OmissionType {
    Contextual,
    Complexity,
    Comparative,
    Impact,
    Accountability,
    Severity,
    Stakeholder,
    PoliticalContext,
}

impl OmissionType {
    pub const ALL: [OmissionType; 8] = [
        OmissionType::Contextual,
        OmissionType::Complexity,
        OmissionType::Comparative,
        OmissionType::Impact,
        OmissionType::Accountability,
        OmissionType::Severity,
        OmissionType::Stakeholder,
        OmissionType::PoliticalContext,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OmissionType::Contextual => "Contextual Omission",
            OmissionType::Complexity => "Complexity Omission",
            OmissionType::Comparative => "Comparative Omission",
            OmissionType::Impact => "Impact Omission",
            OmissionType::Accountability => "Accountability Omission",
            OmissionType::Severity => "Severity Omission",
            OmissionType::Stakeholder => "Stakeholder Omission",
            OmissionType::PoliticalContext => "Political Context Omission",
        }
    }

    pub fn definition(self) -> &'static str {
        match self {
            OmissionType::Contextual => "omitting background information",
            OmissionType::Complexity => "simplifying complex issues",
            OmissionType::Comparative => "excluding comparative data",
            OmissionType::Impact => "omitting potential consequences",
            OmissionType::Accountability => "ignoring responsibility issues",
            OmissionType::Severity => "minimizing perceived risks",
            OmissionType::Stakeholder => "excluding diverse viewpoints",
            OmissionType::PoliticalContext => "downplaying political motivations",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        let n = name.trim().to_lowercase();
        Self::ALL.into_iter().find(|t| t.name().to_lowercase() == n)
    }

    /// Keyword stems used to assign an intent text to a type.
    fn keywords(self) -> &'static [&'static str] {
        match self {
            OmissionType::Contextual => &["background", "context", "history", "histor"],
            OmissionType::Complexity => &["simplif", "complex", "nuance", "complicat"],
            OmissionType::Comparative => &["compar", "statistic", "baseline", "figure", "previous"],
            OmissionType::Impact => &["consequence", "impact", "effect", "outcome"],
            OmissionType::Accountability => &["responsib", "accountab", "blame", "liabil"],
            OmissionType::Severity => &["risk", "sever", "danger", "minimi", "harm"],
            OmissionType::Stakeholder => &["viewpoint", "perspective", "stakeholder", "opinion", "voice"],
            OmissionType::PoliticalContext => &["politic", "government", "party", "election"],
        }
    }
}

/// Assigns the type whose keyword stems occur most often in `intent`;
/// ties go to the earlier canonical type. `None` when nothing matches.
pub fn assign_type(intent: &str) -> Option<OmissionType> {
    let text = intent.to_lowercase();
    let mut best: Option<(usize, OmissionType)> = None;
    for t in OmissionType::ALL {
        let hits: usize = t.keywords().iter().map(|k| text.matches(k).count()).sum();
        if hits > 0 && best.is_none_or(|(b, _)| hits > b) {
            best = Some((hits, t));
        }
    }
    best.map(|(_, t)| t)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulatedSegment {
    pub target_id: String,
    pub target_segment: usize,
    pub omitted_text: String,
    pub intent_text: String,
    pub mode: SimMode,
    pub raw_response_id: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SimOutcome {
    pub segments: Vec<SimulatedSegment>,
    pub calls: Vec<CallRecord>,
    pub dropped: usize,
}

/// One simulation call for `target`. Triples are read as
/// `{[omitted], [intent], [target segment]}`; unusable replies give an
/// empty simulation.
pub fn simulate_environment(
    target: &NewsItem,
    target_segments: &[String],
    caller: &LlmCaller<'_>,
    mode: SimMode,
    method: &str,
) -> Result<SimOutcome> {
    let prompt = render_sim_prompt(target_segments, mode)?;
    let req = LlmRequest::new(prompt, &caller.spec.model_name);
    let (resp, rec) = caller.call(&req, &target.id, method)?;
    let mut out = SimOutcome {
        calls: vec![rec.clone()],
        ..Default::default()
    };
    for t in parse_triples(&resp.text) {
        let omitted = unquote(&t.first);
        let intent = t.intent.trim().to_string();
        match match_segment(&t.third, target_segments) {
            Some(i) if !omitted.is_empty() && !intent.is_empty() => out.segments.push(SimulatedSegment {
                target_id: target.id.clone(),
                target_segment: i,
                omitted_text: omitted,
                intent_text: intent,
                mode,
                raw_response_id: rec.key.clone(),
            }),
            _ => out.dropped += 1,
        }
    }
    if out.segments.is_empty() {
        log::warn!("simulation for `{}` produced no usable triple", target.id);
    }
    Ok(out)
}

pub fn sim_item_id(target_id: &str) -> String {
    format!("sim:{target_id}")
}

/// Adds simulated segments to a target-only graph: one context node per
/// distinct omitted text, intra edges among them, and an inter pair per
/// simulated segment.
pub fn apply_simulation(graph: &mut OmissionGraph, sims: &[SimulatedSegment], embedder: &Embedder) -> Result<usize> {
    let parent = sim_item_id(&graph.target_id);
    let first = graph.nodes.len();
    let mut by_text: BTreeMap<&str, usize> = BTreeMap::new();
    for s in sims {
        if by_text.contains_key(s.omitted_text.as_str()) {
            continue;
        }
        let id = graph.nodes.len();
        by_text.insert(&s.omitted_text, id);
        graph.nodes.push(GraphNode {
            node_id: id,
            source: SourceKind::Context,
            parent_id: parent.clone(),
            segment_index: id - first,
            text: s.omitted_text.clone(),
            embedding: Some(embedder.embed(&s.omitted_text)?),
        });
    }
    let last = graph.nodes.len();
    for dst in first..last {
        for src in first..last {
            if src != dst {
                graph.edges.push(GraphEdge {
                    src,
                    dst,
                    etype: EdgeType::Intra,
                    intent_text: None,
                    intent_embedding: None,
                });
            }
        }
    }
    let mut seen = BTreeSet::new();
    for s in sims {
        let t = *graph
            .target_node_ids
            .get(s.target_segment)
            .ok_or_else(|| Error::invalid(format!("simulated segment points past target `{}`", graph.target_id)))?;
        let c = by_text[s.omitted_text.as_str()];
        if seen.insert((t, c)) {
            let v = embedder.embed(&s.intent_text)?;
            graph.add_inter_pair(t, c, &s.intent_text, Some(v))?;
        }
    }
    Ok(seen.len())
}

/// Offline simulator. Replies with one fixed triple on the first target
/// segment; under rule guidance it adds a comparative-omission triple on
/// the last segment.
pub struct SimStub;

pub const SIM_STUB_OMITTED: &str = "Background on how the reported situation developed was left out.";
pub const SIM_STUB_INTENT: &str = "to keep readers from weighing the background of the claim";
pub const SIM_STUB_RULE_OMITTED: &str = "Comparable figures from earlier periods were not mentioned.";
pub const SIM_STUB_RULE_INTENT: &str = "to exaggerate the claim by excluding comparative data";

impl LlmBackend for SimStub {
    fn complete(&self, req: &LlmRequest) -> Result<LlmResponse> {
        let block = req
            .context
            .split("[The Start of Target Segments]\n")
            .nth(1)
            .and_then(|r| r.split("\n[The End of Target Segments]").next())
            .ok_or_else(|| Error::invalid("sim stub: prompt has no target block"))?;
        let segs: Vec<&str> = Regex::new(r#""([^"]*)""#)
            .unwrap()
            .captures_iter(block)
            .map(|c| c.get(1).unwrap().as_str())
            .collect();
        let (first, last) = match (segs.first(), segs.last()) {
            (Some(f), Some(l)) => (*f, *l),
            _ => return Ok(LlmResponse::approximate(req, "No segments.".into())),
        };
        let mut text = format!("{{[\"{SIM_STUB_OMITTED}\"], [{SIM_STUB_INTENT}], [\"{first}\"]}}");
        if req.system.contains("[Contextual Omission]") {
            text.push_str(&format!(
                "\n{{[\"{SIM_STUB_RULE_OMITTED}\"], [{SIM_STUB_RULE_INTENT}], [\"{last}\"]}}"
            ));
        }
        Ok(LlmResponse::approximate(req, text))
    }
}

/// Offline annotator for the type-analysis prompts: every call returns the
/// eight canonical types as `[Name, definition]` lines.
pub struct TypeStub;

impl LlmBackend for TypeStub {
    fn complete(&self, req: &LlmRequest) -> Result<LlmResponse> {
        if req.system != TYPE_BATCH_SYSTEM && req.system != TYPE_FINAL_SYSTEM {
            return Err(Error::invalid("type stub: unexpected prompt"));
        }
        let text = OmissionType::ALL
            .iter()
            .map(|t| format!("[{}, {}]", t.name(), t.definition()))
            .collect::<Vec<_>>()
            .join("\n");
        Ok(LlmResponse::approximate(req, text))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeEntry {
    pub name: String,
    pub description: String,
}

/// Reads `[Type, Description]` lines; anything else is ignored.
pub fn parse_type_lines(raw: &str) -> Vec<TypeEntry> {
    let re = Regex::new(r"^\s*\[\s*([^,\]\[]+?)\s*,\s*(.+?)\s*\]\s*$").unwrap();
    raw.lines()
        .filter_map(|l| re.captures(l))
        .map(|c| TypeEntry {
            name: c[1].to_string(),
            description: c[2].to_string(),
        })
        .collect()
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct BatchTypes {
    pub lists: Vec<Vec<TypeEntry>>,
    pub calls: Vec<CallRecord>,
    pub skipped: usize,
}

/// One type-summary call per batch of `batch_size` samples.
pub fn categorize_batch(samples: &[IntentSample], batch_size: usize, caller: &LlmCaller<'_>) -> Result<BatchTypes> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut out = BatchTypes::default();
    for (b, chunk) in samples.chunks(batch_size).enumerate() {
        let req = LlmRequest::new(render_type_batch_prompt(chunk), &caller.spec.model_name);
        let (resp, rec) = caller.call(&req, &format!("batch-{b}"), "analyze-types")?;
        out.calls.push(rec);
        let parsed = parse_type_lines(&resp.text);
        if parsed.is_empty() {
            log::warn!("type batch {b} produced no parsable line; skipped");
            out.skipped += 1;
        } else {
            out.lists.push(parsed);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinalTypes {
    pub types: Vec<TypeEntry>,
    /// Set when the reply held fewer than 5 or more than 8 types.
    pub out_of_range: bool,
    pub call: CallRecord,
}

/// One consolidation call over all batch lists; duplicate names in the
/// reply are dropped.
pub fn consolidate_types(batch_lists: &[Vec<TypeEntry>], caller: &LlmCaller<'_>) -> Result<FinalTypes> {
    if batch_lists.is_empty() {
        return Err(Error::invalid("consolidation needs at least one batch list"));
    }
    let summaries: Vec<String> = batch_lists
        .iter()
        .map(|l| {
            l.iter()
                .map(|t| format!("[{}, {}]", t.name, t.description))
                .collect::<Vec<_>>()
                .join("\n")
        })
        .collect();
    let req = LlmRequest::new(render_type_final_prompt(&summaries), &caller.spec.model_name);
    let (resp, call) = caller.call(&req, "final", "analyze-types")?;
    let mut seen = BTreeSet::new();
    let types: Vec<TypeEntry> = parse_type_lines(&resp.text)
        .into_iter()
        .filter(|t| seen.insert(t.name.to_lowercase()))
        .collect();
    let out_of_range = !(5..=8).contains(&types.len());
    if out_of_range {
        log::warn!("consolidation returned {} types; expected 5 to 8", types.len());
    }
    Ok(FinalTypes {
        types,
        out_of_range,
        call,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZAxis {
    /// Standardize each class's rates across the types.
    #[default]
    AcrossTypes,
    /// Standardize each type's rates across the classes.
    AcrossClasses,
}

impl std::str::FromStr for ZAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "across-types" => Ok(ZAxis::AcrossTypes),
            "across-classes" => Ok(ZAxis::AcrossClasses),
            other => Err(Error::invalid(format!("unknown z-score axis `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeCell {
    pub class: Label,
    pub type_name: String,
    pub count: usize,
    pub rate: f64,
    pub z_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeDistribution {
    pub axis: ZAxis,
    pub cells: Vec<TypeCell>,
    /// Set when some standardized group had zero variance (its z are 0).
    pub zero_variance: bool,
}

impl TypeDistribution {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,type,count,rate,z_score\n");
        for c in &self.cells {
            let class = match c.class {
                Label::Real => "real",
                Label::Fake => "fake",
            };
            s.push_str(&format!("{class},{},{},{},{}\n", c.type_name, c.count, c.rate, c.z_score));
        }
        s
    }
}

/// Rates per `(class, type)` and their z-scores along `axis` (population
/// standard deviation). Classes are those present in `assignments`.
pub fn type_distribution(assignments: &[(Label, String)], types: &[String], axis: ZAxis) -> Result<TypeDistribution> {
    if types.len() < 2 {
        return Err(Error::invalid("type distribution needs at least two types"));
    }
    let classes: BTreeSet<Label> = assignments.iter().map(|(c, _)| *c).collect();
    let mut cells = Vec::new();
    for &class in &classes {
        let total = assignments.iter().filter(|(c, _)| *c == class).count();
        for t in types {
            let count = assignments.iter().filter(|(c, n)| *c == class && n == t).count();
            cells.push(TypeCell {
                class,
                type_name: t.clone(),
                count,
                rate: count as f64 / total as f64,
                z_score: 0.0,
            });
        }
    }
    let groups: Vec<Vec<usize>> = match axis {
        ZAxis::AcrossTypes => (0..classes.len())
            .map(|c| (0..types.len()).map(|t| c * types.len() + t).collect())
            .collect(),
        ZAxis::AcrossClasses => (0..types.len())
            .map(|t| (0..classes.len()).map(|c| c * types.len() + t).collect())
            .collect(),
    };
    let mut zero_variance = false;
    for g in groups {
        let n = g.len() as f64;
        let mean = g.iter().map(|&i| cells[i].rate).sum::<f64>() / n;
        let var = g.iter().map(|&i| (cells[i].rate - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        if sd <= f64::EPSILON * mean.abs().max(1.0) {
            zero_variance = true;
            continue;
        }
        for i in g {
            cells[i].z_score = (cells[i].rate - mean) / sd;
        }
    }
    Ok(TypeDistribution {
        axis,
        cells,
        zero_variance,
    })
}
