//! News items, sentence segmentation and time-windowed candidate pools.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SECONDS_PER_DAY: i64 = 86_400;
pub const DEFAULT_MAX_SEGMENTS: usize = 32;
pub const DEFAULT_WINDOW_DAYS: i64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Real = 0,
    Fake = 1,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        self as u8 as f64
    }

    pub fn from_prob(p: f64) -> Self {
        if p >= 0.5 {
            Label::Fake
        } else {
            Label::Real
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Label::Real),
            1 => Ok(Label::Fake),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

fn default_language() -> String {
    "en".to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NewsItem {
    pub id: String,
    pub text: String,
    /// Publication time, epoch seconds.
    pub timestamp: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default = "default_language")]
    pub language: String,
}

/// A sentence-level unit of a news item. `span` is a char range into the
/// parent text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub parent_id: String,
    pub index: usize,
    pub text: String,
    pub span: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schema {
    Target,
    Context,
}

/// An immutable collection of news items with unique ids.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    items: Vec<NewsItem>,
    by_id: HashMap<String, usize>,
    /// Item indices ordered by (timestamp, id).
    by_time: Vec<usize>,
}

impl Corpus {
    pub fn from_items(items: Vec<NewsItem>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if item.text.trim().is_empty() {
                return Err(Error::EmptyText(item.id.clone()));
            }
            if by_id.insert(item.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(item.id.clone()));
            }
        }
        let mut by_time: Vec<usize> = (0..items.len()).collect();
        by_time.sort_by(|&a, &b| {
            (items[a].timestamp, &items[a].id).cmp(&(items[b].timestamp, &items[b].id))
        });
        Ok(Corpus {
            items,
            by_id,
            by_time,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[NewsItem] {
        &self.items
    }

    pub fn get(&self, id: &str) -> Option<&NewsItem> {
        self.by_id.get(id).map(|&i| &self.items[i])
    }

    pub fn require(&self, id: &str) -> Result<&NewsItem> {
        self.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &NewsItem> {
        self.items.iter().filter(move |it| it.split == Some(split))
    }

    /// Items with `start <= timestamp < end`, in (timestamp, id) order.
    pub fn published_between(&self, start: i64, end: i64) -> impl Iterator<Item = &NewsItem> {
        let lo = self
            .by_time
            .partition_point(|&i| self.items[i].timestamp < start);
        let hi = self.by_time.partition_point(|&i| self.items[i].timestamp < end);
        self.by_time[lo..hi.max(lo)].iter().map(|&i| &self.items[i])
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(File::create(path)?);
        for item in &self.items {
            serde_json::to_writer(&mut w, item)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a line-delimited corpus file. Blank lines are skipped.
pub fn ingest_corpus(path: &Path, schema: Schema) -> Result<Corpus> {
    let reader = BufReader::new(File::open(path)?);
    let mut items = Vec::new();
    let mut seen = HashMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let mut item: NewsItem =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if item.text.trim().is_empty() {
            return Err(parse_err(format!("empty text for `{}`", item.id)));
        }
        if let Some(first) = seen.insert(item.id.clone(), lineno) {
            log::debug!("`{}` first seen at line {first}", item.id);
            return Err(Error::DuplicateId(item.id));
        }
        match schema {
            Schema::Target => {
                if item.split.is_some() && item.label.is_none() {
                    return Err(Error::MissingLabel(item.id));
                }
            }
            Schema::Context => {
                // Context items are used unlabeled.
                item.label = None;
                item.split = None;
            }
        }
        items.push(item);
    }
    log::info!("ingested {} items from {}", items.len(), path.display());
    Corpus::from_items(items)
}

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | '。' | '！' | '？')
}

fn is_cjk_terminal(c: char) -> bool {
    matches!(c, '。' | '！' | '？')
}

/// Splits `item.text` into at most `max_segments` sentence segments.
///
/// Boundaries fall after a run of terminal marks (`. ! ? 。 ！ ？`) and at
/// newlines. Latin marks only end a sentence when followed by whitespace or
/// end of text, so decimals like `3.5` stay intact.
pub fn segment_item(item: &NewsItem, max_segments: usize) -> Vec<Segment> {
    let chars: Vec<char> = item.text.chars().collect();
    let mut pieces: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' || c == '\r' {
            pieces.push((start, i));
            start = i + 1;
        } else if is_terminal(c) {
            let mut j = i;
            let mut cjk = false;
            while j < chars.len() && is_terminal(chars[j]) {
                cjk |= is_cjk_terminal(chars[j]);
                j += 1;
            }
            // Closing quotes and brackets belong to the sentence they end.
            while j < chars.len() && matches!(chars[j], '"' | '\'' | ')' | '”' | '’' | '」' | '』')
            {
                j += 1;
            }
            if cjk || j == chars.len() || chars[j].is_whitespace() {
                pieces.push((start, j));
                start = j;
            }
            i = j;
            continue;
        }
        i += 1;
    }
    pieces.push((start, chars.len()));

    let mut segments = Vec::new();
    for (s, e) in pieces {
        let (mut a, mut b) = (s, e);
        while a < b && chars[a].is_whitespace() {
            a += 1;
        }
        while b > a && chars[b - 1].is_whitespace() {
            b -= 1;
        }
        if a == b {
            continue;
        }
        if segments.len() == max_segments.max(1) {
            break;
        }
        segments.push(Segment {
            parent_id: item.id.clone(),
            index: segments.len(),
            text: chars[a..b].iter().collect(),
            span: (a, b),
        });
    }
    segments
}

/// Items published in the `window_days` days strictly before the target.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub target_id: String,
    pub window_days: i64,
    pub member_ids: Vec<String>,
}

/// Collects context items with `T_tgt - window_days * 86400 <= t < T_tgt`.
pub fn build_candidate_pool(target: &NewsItem, context: &Corpus, window_days: i64) -> CandidatePool {
    let start = target.timestamp.saturating_sub(window_days.saturating_mul(SECONDS_PER_DAY));
    let member_ids = context
        .published_between(start, target.timestamp)
        .filter(|it| it.id != target.id)
        .map(|it| it.id.clone())
        .collect();
    CandidatePool {
        target_id: target.id.clone(),
        window_days,
        member_ids,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn item(id: &str, text: &str, ts: i64) -> NewsItem {
        NewsItem {
            id: id.into(),
            text: text.into(),
            timestamp: ts,
            label: None,
            split: None,
            language: "en".into(),
        }
    }

    fn write(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn ingest_counts_records() {
        let f = write(&[
            r#"{"id":"a","text":"x.","timestamp":1}"#,
            r#"{"id":"b","text":"y.","timestamp":2}"#,
            r#"{"id":"c","text":"z.","timestamp":3}"#,
        ]);
        let c = ingest_corpus(f.path(), Schema::Context).unwrap();
        assert_eq!(c.len(), 3);
    }

    #[test]
    fn ingest_rejects_duplicate_id() {
        let f = write(&[
            r#"{"id":"a","text":"x.","timestamp":1}"#,
            r#"{"id":"a","text":"y.","timestamp":2}"#,
        ]);
        match ingest_corpus(f.path(), Schema::Context) {
            Err(Error::DuplicateId(id)) => assert_eq!(id, "a"),
            other => panic!("expected duplicate id error, got {other:?}"),
        }
    }

    #[test]
    fn ingest_reports_line_of_bad_timestamp() {
        let f = write(&[
            r#"{"id":"a","text":"x.","timestamp":1}"#,
            r#"{"id":"b","text":"y.","timestamp":"2020-12-16"}"#,
        ]);
        match ingest_corpus(f.path(), Schema::Context) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ingest_requires_labels_in_labeled_split() {
        let f = write(&[r#"{"id":"a","text":"x.","timestamp":1,"split":"train"}"#]);
        assert!(matches!(
            ingest_corpus(f.path(), Schema::Target),
            Err(Error::MissingLabel(_))
        ));
        let f = write(&[r#"{"id":"a","text":"x.","timestamp":1,"split":"train","label":1}"#]);
        let c = ingest_corpus(f.path(), Schema::Target).unwrap();
        assert_eq!(c.items()[0].label, Some(Label::Fake));
    }

    #[test]
    fn segments_on_terminal_marks() {
        let segs = segment_item(&item("t", "A. B! C?", 0), 10);
        let texts: Vec<_> = segs.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(texts, vec!["A.", "B!", "C?"]);
    }

    #[test]
    fn no_punctuation_is_one_segment() {
        let segs = segment_item(&item("t", "  no punctuation here ", 0), 10);
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].text, "no punctuation here");
    }

    #[test]
    fn cap_keeps_head() {
        let text: String = (0..40).map(|i| format!("Sentence {i}. ")).collect();
        let segs = segment_item(&item("t", &text, 0), 32);
        assert_eq!(segs.len(), 32);
        assert_eq!(segs[31].text, "Sentence 31.");
    }

    #[test]
    fn cjk_and_newlines() {
        let segs = segment_item(&item("t", "第一句。第二句！\nline three\nfour 3.5 units", 0), 10);
        let texts: Vec<_> = segs.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(texts, vec!["第一句。", "第二句！", "line three", "four 3.5 units"]);
    }

    #[test]
    fn pool_half_open_window() {
        let day = SECONDS_PER_DAY;
        let target = item("t", "x", 10 * day);
        let ctx = Corpus::from_items(vec![
            item("d7", "x", 7 * day),
            item("d8", "x", 8 * day),
            item("d10", "x", 10 * day),
            item("d12", "x", 12 * day),
        ])
        .unwrap();
        let pool = build_candidate_pool(&target, &ctx, 3);
        assert_eq!(pool.member_ids, vec!["d7", "d8"]);
        let empty = build_candidate_pool(&target, &Corpus::default(), 3);
        assert!(empty.member_ids.is_empty());
    }

    #[test]
    fn pool_matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let items: Vec<_> = (0..1000)
            .map(|i| item(&format!("n{i}"), "x", rng.random_range(0..30 * SECONDS_PER_DAY)))
            .collect();
        let ctx = Corpus::from_items(items.clone()).unwrap();
        for _ in 0..50 {
            let t = rng.random_range(0..30 * SECONDS_PER_DAY);
            let w = rng.random_range(1..6);
            let target = item("target", "x", t);
            let pool = build_candidate_pool(&target, &ctx, w);
            let mut got = pool.member_ids.clone();
            got.sort();
            let mut want: Vec<String> = items
                .iter()
                .filter(|it| it.timestamp >= t - w * SECONDS_PER_DAY && it.timestamp < t)
                .map(|it| it.id.clone())
                .collect();
            want.sort();
            assert_eq!(got, want);
        }
    }

    proptest! {
        #[test]
        fn segmentation_is_pure_and_span_faithful(text in "[a-zA-Z .!?\n。]{1,120}") {
            let it = item("p", &text, 0);
            let a = segment_item(&it, 64);
            let b = segment_item(&it, 64);
            prop_assert_eq!(&a, &b);
            let chars: Vec<char> = text.chars().collect();
            let mut last_end = 0;
            for (k, s) in a.iter().enumerate() {
                prop_assert_eq!(s.index, k);
                prop_assert!(s.span.0 >= last_end && s.span.0 < s.span.1);
                let sub: String = chars[s.span.0..s.span.1].iter().collect();
                prop_assert_eq!(sub.trim(), s.text.as_str());
                prop_assert!(!s.text.is_empty());
                last_end = s.span.1;
            }
            let nonblank = text.chars().any(|c| !c.is_whitespace());
            prop_assert_eq!(a.is_empty(), !nonblank);
        }
    }
}
