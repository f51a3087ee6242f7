//! Seeded synthetic corpora with a controlled omission signal.
//!
//! Every event has a few context items that all mention the event's topic
//! and causal tokens, plus noise private to each item. Real targets repeat
//! the causal tokens; fake targets swap some of them for fresh noise.
//! Events are a week apart so a target's window only sees its own event.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Label, NewsItem, Split, SECONDS_PER_DAY};
use crate::error::{Error, Result};

pub const EVENT_SPACING_DAYS: i64 = 7;
pub const TOPIC_TOKENS: usize = 2;
pub const CAUSAL_TOKENS: usize = 3;
const NOISE_PER_SENTENCE: usize = 2;
const BASE_TIME: i64 = 1_700_000_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelRule {
    /// Fake targets omit causal tokens; real targets keep them.
    #[default]
    Omission,
    /// Labels are drawn independently of the text (a no-signal control).
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_events: usize,
    pub items_per_event: usize,
    /// Size of the pseudo-word vocabulary all tokens are drawn from.
    pub fact_vocab: usize,
    /// Share of causal tokens a fake target drops (at least one).
    pub omission_rate: f64,
    pub label_rule: LabelRule,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_events: 100,
            items_per_event: 4,
            fact_vocab: 600,
            omission_rate: 1.0,
            label_rule: LabelRule::Omission,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    fn tokens_per_event(&self) -> usize {
        TOPIC_TOKENS + 2 * CAUSAL_TOKENS + (self.items_per_event + 1) * 3 * NOISE_PER_SENTENCE
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_events < 2 || self.items_per_event < 2 {
            return Err(Error::Config("need at least 2 events and 2 context items per event".into()));
        }
        if !(self.omission_rate > 0.0 && self.omission_rate <= 1.0) {
            return Err(Error::Config("omission_rate must be in (0, 1]".into()));
        }
        if self.fact_vocab < self.tokens_per_event() {
            return Err(Error::Config(format!(
                "fact_vocab must be at least {} for this spec",
                self.tokens_per_event()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub targets: Corpus,
    pub context: Corpus,
    /// Causal tokens per event, in target order.
    pub causal: Vec<Vec<String>>,
}

fn pseudo_words(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let mut seen = BTreeSet::new();
    while seen.len() < n {
        let w: String = (0..3)
            .flat_map(|_| [C[rng.random_range(0..C.len())] as char, V[rng.random_range(0..V.len())] as char])
            .collect();
        seen.insert(w);
    }
    let mut out: Vec<String> = seen.into_iter().collect();
    out.shuffle(rng);
    out
}

fn sentence(words: &[&str]) -> String {
    let mut s = words.join(" ");
    if let Some(first) = s.get(..1) {
        s = first.to_uppercase() + &s[1..];
    }
    s + "."
}

/// Generates both corpora. Pure in `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vocab = pseudo_words(spec.fact_vocab, &mut rng);

    let mut labels: Vec<Label> = (0..spec.n_events)
        .map(|e| if e % 2 == 0 { Label::Real } else { Label::Fake })
        .collect();
    labels.shuffle(&mut rng);
    let fakes_omit = |label: Label, rng: &mut ChaCha8Rng| match spec.label_rule {
        LabelRule::Omission => label == Label::Fake,
        LabelRule::Random => rng.random_bool(0.5),
    };

    let mut targets = Vec::new();
    let mut context = Vec::new();
    let mut causal_all = Vec::new();
    for (e, &label) in labels.iter().enumerate() {
        let mut picks: Vec<&str> = vocab
            .choose_multiple(&mut rng, spec.tokens_per_event())
            .map(String::as_str)
            .collect();
        let topic: Vec<&str> = picks.drain(..TOPIC_TOKENS).collect();
        let causal: Vec<&str> = picks.drain(..CAUSAL_TOKENS).collect();
        let fresh: Vec<&str> = picks.drain(..CAUSAL_TOKENS).collect();
        let mut noise = picks.into_iter();
        let mut next_noise = || -> Vec<&str> { noise.by_ref().take(NOISE_PER_SENTENCE).collect() };
        let base = BASE_TIME + e as i64 * EVENT_SPACING_DAYS * SECONDS_PER_DAY;

        for i in 0..spec.items_per_event {
            let s1 = [topic.clone(), next_noise()].concat();
            let s2 = [causal.clone(), next_noise()].concat();
            let s3 = [next_noise(), vec![topic[0]]].concat();
            context.push(NewsItem {
                id: format!("ctx-{e:04}-{i}"),
                text: [sentence(&s1), sentence(&s2), sentence(&s3)].join(" "),
                timestamp: base + i as i64 * 600,
                label: None,
                split: None,
                language: "en".into(),
            });
        }

        let omit = fakes_omit(label, &mut rng);
        let n_drop = ((spec.omission_rate * CAUSAL_TOKENS as f64).ceil() as usize).clamp(1, CAUSAL_TOKENS);
        let body: Vec<&str> = causal
            .iter()
            .enumerate()
            .map(|(k, &c)| if omit && k < n_drop { fresh[k] } else { c })
            .collect();
        let s1 = [topic.clone(), next_noise()].concat();
        let s2 = [body, next_noise()].concat();
        let s3 = [next_noise(), vec![topic[1]]].concat();
        targets.push(NewsItem {
            id: format!("tgt-{e:04}"),
            text: [sentence(&s1), sentence(&s2), sentence(&s3)].join(" "),
            timestamp: base + SECONDS_PER_DAY,
            label: Some(label),
            split: None,
            language: "en".into(),
        });
        causal_all.push(causal.iter().map(|s| s.to_string()).collect());
    }
    assign_splits(&mut targets, &mut rng);
    Ok(SyntheticCorpus {
        targets: Corpus::from_items(targets)?,
        context: Corpus::from_items(context)?,
        causal: causal_all,
    })
}

/// 60/20/20 split, stratified by label.
fn assign_splits(targets: &mut [NewsItem], rng: &mut ChaCha8Rng) {
    for label in [Label::Real, Label::Fake] {
        let mut idx: Vec<usize> = (0..targets.len()).filter(|&i| targets[i].label == Some(label)).collect();
        idx.shuffle(rng);
        let n = idx.len();
        let n_train = (n * 3).div_ceil(5);
        let n_val = (n - n_train) / 2;
        for (r, &i) in idx.iter().enumerate() {
            targets[i].split = Some(if r < n_train {
                Split::Train
            } else if r < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_balance() {
        let spec = SyntheticSpec {
            n_events: 10,
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic(&spec).unwrap();
        assert_eq!(c.targets.len(), 10);
        assert_eq!(c.context.len(), 40);
        let fakes = c.targets.items().iter().filter(|t| t.label == Some(Label::Fake)).count();
        assert_eq!(fakes, 5);
    }

    #[test]
    fn rejects_small_vocab() {
        let spec = SyntheticSpec {
            fact_vocab: 10,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic(&spec).is_err());
    }
}
