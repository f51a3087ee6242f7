//! Text encoders, cosine similarity, an on-disk embedding cache, and top-K
//! contextual-environment selection.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CandidatePool, Corpus, NewsItem};
use crate::error::{Error, Result};
use crate::text::{fnv1a, sha256_hex, tokenize};

pub const DEFAULT_TOP_K: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    norm: f64,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("embedding component {i} is not finite")));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(EmbeddingVector { values, norm })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    if a.norm == 0.0 || b.norm == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (a.norm * b.norm)).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Mean-pooled final-layer token states of a pretrained language model.
    #[serde(alias = "lm")]
    PretrainedLm,
    /// Signed feature hashing of unigrams and bigrams; fully offline.
    HashStub,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lm" | "pretrained-lm" => Ok(EncoderKind::PretrainedLm),
            "hash-stub" | "stub" => Ok(EncoderKind::HashStub),
            other => Err(Error::invalid(format!("unknown encoder kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub dimension: usize,
    pub version: String,
}

impl EncoderSpec {
    pub fn hash_stub(dimension: usize) -> Self {
        EncoderSpec {
            kind: EncoderKind::HashStub,
            dimension,
            version: "hash-stub-v1".into(),
        }
    }
}

pub trait TextEncoder: Send + Sync {
    fn spec(&self) -> &EncoderSpec;

    fn encode(&self, text: &str) -> Result<EmbeddingVector>;
}

/// Deterministic offline encoder: each unigram (weight 1) and bigram
/// (weight 0.5) lands in a signed bucket of a `dimension`-dim vector, which is
/// then L2-normalized.
#[derive(Clone, Debug)]
pub struct HashStubEncoder {
    spec: EncoderSpec,
}

impl HashStubEncoder {
    pub fn new(spec: EncoderSpec) -> Result<Self> {
        if spec.dimension == 0 {
            return Err(Error::invalid("encoder dimension must be positive"));
        }
        Ok(HashStubEncoder { spec })
    }

    fn features(text: &str) -> Vec<(String, f64)> {
        let mut toks = tokenize(text);
        if toks.is_empty() {
            toks.push(text.trim().to_string());
        }
        let mut feats: Vec<(String, f64)> = toks.iter().map(|t| (format!("u:{t}"), 1.0)).collect();
        feats.extend(toks.windows(2).map(|w| (format!("b:{} {}", w[0], w[1]), 0.5)));
        feats
    }

    fn bucket(&self, feature: &str) -> (usize, f64) {
        let h = fnv1a(self.spec.version.as_bytes(), feature.as_bytes());
        let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
        ((h % self.spec.dimension as u64) as usize, sign)
    }

    /// Buckets touched by `text`; disjoint bucket sets give orthogonal vectors.
    pub fn buckets(&self, text: &str) -> BTreeSet<usize> {
        Self::features(text)
            .iter()
            .map(|(f, _)| self.bucket(f).0)
            .collect()
    }
}

impl TextEncoder for HashStubEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn encode(&self, text: &str) -> Result<EmbeddingVector> {
        if text.trim().is_empty() {
            return Err(Error::EmptyText(text.to_string()));
        }
        let mut v = vec![0.0; self.spec.dimension];
        for (feat, w) in Self::features(text) {
            let (b, sign) = self.bucket(&feat);
            v[b] += sign * w;
        }
        let mut norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // Every feature cancelled out; fall back to a whole-text bucket.
            let (b, _) = self.bucket(&format!("t:{}", text.trim()));
            v[b] = 1.0;
            norm = 1.0;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        EmbeddingVector::new(v)
    }
}

/// Supplies final-layer token states (one row per token) for a text.
pub trait TokenStateSource: Send + Sync {
    fn token_states(&self, text: &str) -> Result<Vec<Vec<f64>>>;
}

/// Language-model adapter: the item embedding is the mean over token states.
pub struct LmEncoder<S> {
    spec: EncoderSpec,
    source: S,
}

impl<S: TokenStateSource> LmEncoder<S> {
    pub fn new(spec: EncoderSpec, source: S) -> Self {
        LmEncoder { spec, source }
    }
}

impl<S: TokenStateSource> TextEncoder for LmEncoder<S> {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn encode(&self, text: &str) -> Result<EmbeddingVector> {
        if text.trim().is_empty() {
            return Err(Error::EmptyText(text.to_string()));
        }
        let states = self.source.token_states(text)?;
        if states.is_empty() {
            return Err(Error::invalid("language model returned no token states"));
        }
        let mut mean = vec![0.0; self.spec.dimension];
        for row in &states {
            if row.len() != self.spec.dimension {
                return Err(Error::Dimension {
                    expected: self.spec.dimension,
                    got: row.len(),
                });
            }
            mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
        }
        let n = states.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        EmbeddingVector::new(mean)
    }
}

#[derive(Deserialize)]
struct StatesRecord {
    sha256: String,
    states: Vec<Vec<f64>>,
}

/// Token states exported offline from a language model, one JSON record per
/// line: `{"sha256": <hex of text>, "states": [[...], ...]}`.
pub struct PrecomputedStates {
    by_hash: HashMap<String, Vec<Vec<f64>>>,
}

impl PrecomputedStates {
    pub fn load(path: &Path) -> Result<Self> {
        let mut by_hash = HashMap::new();
        for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: StatesRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            by_hash.insert(rec.sha256, rec.states);
        }
        Ok(PrecomputedStates { by_hash })
    }
}

impl TokenStateSource for PrecomputedStates {
    fn token_states(&self, text: &str) -> Result<Vec<Vec<f64>>> {
        let key = sha256_hex(&[text]);
        self.by_hash
            .get(&key)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("no precomputed token states for text {key}")))
    }
}

pub fn encode_text(text: &str, encoder: &dyn TextEncoder) -> Result<EmbeddingVector> {
    encoder.encode(text)
}

#[derive(Serialize, Deserialize)]
struct CacheManifest {
    version: String,
    dimension: usize,
    entries: usize,
}

/// Content-addressed embedding store keyed by `(sha256(text), version)`.
///
/// Reads are shared; inserts and file writes are serialized.
pub struct EmbeddingCache {
    dir: Option<PathBuf>,
    map: RwLock<HashMap<(String, String), Arc<EmbeddingVector>>>,
    write_lock: Mutex<()>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        EmbeddingCache {
            dir: None,
            map: RwLock::new(HashMap::new()),
            write_lock: Mutex::new(()),
        }
    }

    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(EmbeddingCache {
            dir: Some(dir.to_path_buf()),
            ..Self::in_memory()
        })
    }

    fn version_dir(&self, version: &str) -> Option<PathBuf> {
        let safe: String = version
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
            .collect();
        self.dir.as_ref().map(|d| d.join(safe))
    }

    pub fn get(&self, text: &str, version: &str) -> Option<Arc<EmbeddingVector>> {
        let key = (sha256_hex(&[text]), version.to_string());
        if let Some(v) = self.map.read().unwrap().get(&key) {
            return Some(v.clone());
        }
        let path = self.version_dir(version)?.join(format!("{}.bin", key.0));
        let bytes = fs::read(path).ok()?;
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let v = Arc::new(EmbeddingVector::new(values).ok()?);
        self.map.write().unwrap().insert(key, v.clone());
        Some(v)
    }

    pub fn insert(&self, text: &str, version: &str, v: EmbeddingVector) -> Result<Arc<EmbeddingVector>> {
        let key = (sha256_hex(&[text]), version.to_string());
        let _guard = self.write_lock.lock().unwrap();
        if let Some(dir) = self.version_dir(version) {
            fs::create_dir_all(&dir)?;
            let bytes: Vec<u8> = v.values.iter().flat_map(|x| x.to_le_bytes()).collect();
            fs::write(dir.join(format!("{}.bin", key.0)), bytes)?;
        }
        let v = Arc::new(v);
        self.map.write().unwrap().insert(key, v.clone());
        Ok(v)
    }

    /// Writes a manifest next to the vector files of `version`.
    pub fn write_manifest(&self, version: &str, dimension: usize) -> Result<()> {
        let Some(dir) = self.version_dir(version) else {
            return Ok(());
        };
        fs::create_dir_all(&dir)?;
        let entries = fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "bin"))
            .count();
        let manifest = CacheManifest {
            version: version.to_string(),
            dimension,
            entries,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }
}

/// An encoder fronted by an embedding cache.
#[derive(Clone)]
pub struct Embedder {
    encoder: Arc<dyn TextEncoder>,
    cache: Arc<EmbeddingCache>,
}

impl Embedder {
    pub fn new(encoder: Arc<dyn TextEncoder>, cache: Arc<EmbeddingCache>) -> Self {
        Embedder { encoder, cache }
    }

    pub fn uncached(encoder: Arc<dyn TextEncoder>) -> Self {
        Self::new(encoder, Arc::new(EmbeddingCache::in_memory()))
    }

    pub fn spec(&self) -> &EncoderSpec {
        self.encoder.spec()
    }

    pub fn dim(&self) -> usize {
        self.encoder.spec().dimension
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    pub fn embed(&self, text: &str) -> Result<Arc<EmbeddingVector>> {
        let version = &self.encoder.spec().version;
        if let Some(v) = self.cache.get(text, version) {
            return Ok(v);
        }
        let v = self.encoder.encode(text)?;
        self.cache.insert(text, version, v)
    }

    /// Embeds many texts with bounded data parallelism; order is preserved.
    pub fn embed_all(&self, texts: &[&str]) -> Result<Vec<Arc<EmbeddingVector>>> {
        texts.par_iter().map(|t| self.embed(t)).collect()
    }

    pub fn flush_manifest(&self) -> Result<()> {
        let spec = self.encoder.spec();
        self.cache.write_manifest(&spec.version, spec.dimension)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextEnvironment {
    pub target_id: String,
    /// `(news_id, similarity)`, similarity descending, ties by ascending id.
    pub ranked: Vec<(String, f64)>,
    pub k: usize,
}

impl ContextEnvironment {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.ranked.iter().map(|(id, _)| id.as_str())
    }
}

/// Exact top-`k` of `candidates` by cosine to `query`.
pub fn rank_top_k(
    query: &EmbeddingVector,
    candidates: &[(String, Arc<EmbeddingVector>)],
    k: usize,
) -> Result<Vec<(String, f64)>> {
    let mut scored = candidates
        .iter()
        .map(|(id, v)| Ok((id.clone(), cosine(query, v)?)))
        .collect::<Result<Vec<_>>>()?;
    let order = |a: &(String, f64), b: &(String, f64)| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0));
    if k < scored.len() {
        scored.select_nth_unstable_by(k, order);
        scored.truncate(k);
    }
    scored.sort_by(order);
    Ok(scored)
}

/// Picks the `k` pool members most similar to the target.
pub fn select_environment(
    target: &NewsItem,
    pool: &CandidatePool,
    context: &Corpus,
    k: usize,
    embedder: &Embedder,
) -> Result<ContextEnvironment> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let query = embedder.embed(&target.text)?;
    let members = pool
        .member_ids
        .iter()
        .map(|id| context.require(id))
        .collect::<Result<Vec<_>>>()?;
    let texts: Vec<&str> = members.iter().map(|m| m.text.as_str()).collect();
    let vecs = embedder.embed_all(&texts)?;
    let candidates: Vec<_> = members.iter().map(|m| m.id.clone()).zip(vecs).collect();
    Ok(ContextEnvironment {
        target_id: target.id.clone(),
        ranked: rank_top_k(&query, &candidates, k)?,
        k,
    })
}
