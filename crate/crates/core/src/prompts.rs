//! Prompt templates for veracity judgment, omission-intent inference,
//! omission-type analysis and environment simulation.
//!
//! Every renderer returns a `(system, context)` pair of plain strings; the
//! same inputs always render to the same bytes.

use crate::error::{Error, Result};

pub const PROMPT_VERSION: &str = "omission-prompts-v1";

pub const VERACITY_SYSTEM: &str = "Given the following news piece, predict the veracity of this news piece. If the news piece is more likely to be fake, return 1; otherwise, return 0. Please refrain from providing ambiguous assessments, such as undetermined.";

pub const INTENT_SYSTEM: &str = "You are an AI annotator. You will be provided with two sets of news segments: [Target] and [Environment]. Your task is to detect potential omissions in the [Target] news content by comparing it against the contextual information provided in [Environment]. These omissions reflect intentional selective exclusion of information to better support the narrative.
For each such pair, also analyze its omission intent (e.g., \"to prevent readers from thinking of the unreasonableness behind the overly high statistics\"). Output in this format: {[Environment segment], [omission intent], [Target segment]}

Example:
[The Start of Target] \"t1\" \"t2\" [The End of Target]
[The Start of Environment] \"e2\" \"e2\" [The End of Environment]
Your Answer:
{[\"t1\"], [omission intent], [\"e1\"]
[\"t2\"], [omission intent], [\"e2\"]}";

pub const TYPE_BATCH_SYSTEM: &str = "You need to analyze the following omission intent analysis samples and summarize common omission types.
Example output format:
[Numerical Comparison Omission, Omitting relevant comparative data to exaggerate or downplay the importance of certain statistics]
[Background Information Omission, Deliberately omitting event background to prevent readers from understanding the complete situation]";

pub const TYPE_FINAL_SYSTEM: &str =
    "Please remove duplicates, merge similar patterns, and output the final omission type summary.";

pub const SIM_SYSTEM: &str = "You are an AI annotator. Given a set of news segments grouped by [Target], generate omitted information that reflects intentional omission to support specific narratives, and analyze omission intent for each pair.";

/// Taxonomy guidance inserted only in rule-guided simulation.
pub const SIM_RULE_GUIDANCE: &str = "(e.g., [Contextual Omission] omitting background information, [Complexity Omission] simplifying complex issues, [Comparative Omission] excluding comparative data, [Impact Omission] omitting potential consequences, [Accountability Omission] ignoring responsibility issues, [Severity Omission] minimizing perceived risks, [Stakeholder Omission] excluding diverse viewpoints, and [Political Context Omission] downplaying political motivations)";

pub const SIM_OUTPUT_FORMAT: &str =
    "Output format: {[Potential omitted information], [omission intent], [Target segment]}";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimMode {
    SimZero,
    SimRule,
}

impl std::str::FromStr for SimMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sim-zero" => Ok(SimMode::SimZero),
            "sim-rule" => Ok(SimMode::SimRule),
            other => Err(Error::invalid(format!("unknown simulation mode `{other}`"))),
        }
    }
}

impl SimMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SimMode::SimZero => "sim-zero",
            SimMode::SimRule => "sim-rule",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RenderedPrompt {
    pub system: String,
    pub context: String,
}

pub fn quote_segments<S: AsRef<str>>(segments: &[S]) -> String {
    segments
        .iter()
        .map(|s| format!("\"{}\"", s.as_ref()))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn render_veracity_prompt(news: &str) -> RenderedPrompt {
    RenderedPrompt {
        system: VERACITY_SYSTEM.to_string(),
        context: format!("News: [{news}]. The answer (Arabic numerals) is:"),
    }
}

/// Reads a `0`/`1` verdict from a veracity reply; `None` if neither appears.
pub fn parse_veracity_answer(raw: &str) -> Option<u8> {
    raw.chars().find_map(|c| match c {
        '0' => Some(0),
        '1' => Some(1),
        _ => None,
    })
}

pub fn render_intent_prompt<S: AsRef<str>>(target_segments: &[S], env_segments: &[S]) -> Result<RenderedPrompt> {
    if target_segments.is_empty() || env_segments.is_empty() {
        return Err(Error::invalid("intent prompt needs target and environment segments"));
    }
    Ok(RenderedPrompt {
        system: INTENT_SYSTEM.to_string(),
        context: format!(
            "[The Start of Target]\n{}\n[The End of Target]\n[The Start of Environment]\n{}\n[The End of Environment]\nYour Answer:",
            quote_segments(target_segments),
            quote_segments(env_segments)
        ),
    })
}

/// One sample of the omission-type analysis: the target segment with the
/// omission, its intent, and the omitted context text.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct IntentSample {
    pub segment: String,
    pub intent: String,
    pub omitted: String,
}

pub fn render_type_batch_prompt(samples: &[IntentSample]) -> RenderedPrompt {
    let body = samples
        .iter()
        .map(|s| format!("[{}, {}, {}]", s.segment, s.intent, s.omitted))
        .collect::<Vec<_>>()
        .join("\n");
    RenderedPrompt {
        system: TYPE_BATCH_SYSTEM.to_string(),
        context: format!(
            "Based on the following omission intent analysis samples, summarize the omission types that appear in this batch. Each sample contains: [segment with omission, omission intent, omitted information]\nPlease analyze these samples and output in the format: [Omission Type, Typical Intent Description].\nFocus on identifying 3-8 distinct patterns in this batch:\n{body}"
        ),
    }
}

pub fn render_type_final_prompt(batch_summaries: &[String]) -> RenderedPrompt {
    RenderedPrompt {
        system: TYPE_FINAL_SYSTEM.to_string(),
        context: format!(
            "Based on the following omission patterns summarized from different batches, merge similar types and extract the final 5-8 core omission patterns:\n{}\n",
            batch_summaries.join("\n")
        ),
    }
}

pub fn render_sim_prompt<S: AsRef<str>>(target_segments: &[S], mode: SimMode) -> Result<RenderedPrompt> {
    if target_segments.is_empty() {
        return Err(Error::invalid("simulation prompt needs target segments"));
    }
    let system = match mode {
        SimMode::SimZero => format!("{SIM_SYSTEM}\n{SIM_OUTPUT_FORMAT}"),
        SimMode::SimRule => format!("{SIM_SYSTEM}\n{SIM_RULE_GUIDANCE}\n{SIM_OUTPUT_FORMAT}"),
    };
    Ok(RenderedPrompt {
        system,
        context: format!(
            "[The Start of Target Segments]\n{}\n[The End of Target Segments]\nYour Answer:",
            quote_segments(target_segments)
        ),
    })
}
