//! Shared text helpers: tokenization, content-token filtering, hashing.

use std::collections::BTreeSet;

use sha2::{Digest, Sha256};

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "but", "by", "for", "from", "had", "has", "have",
    "he", "her", "his", "in", "is", "it", "its", "not", "of", "on", "or", "she", "that", "the",
    "their", "they", "this", "to", "was", "were", "which", "will", "with",
];

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF | 0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF | 0xAC00..=0xD7AF)
}

/// Lowercased alphanumeric tokens; every CJK ideograph is its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if is_cjk(c) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(c.to_string());
        } else if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn is_content_token(tok: &str) -> bool {
    let single_cjk = tok.chars().count() == 1 && tok.chars().all(is_cjk);
    (single_cjk || tok.chars().count() >= 2) && !STOPWORDS.contains(&tok)
}

pub fn content_tokens(text: &str) -> BTreeSet<String> {
    tokenize(text).into_iter().filter(|t| is_content_token(t)).collect()
}

pub fn token_set(text: &str) -> BTreeSet<String> {
    tokenize(text).into_iter().collect()
}

/// Jaccard overlap of the token sets; 0 when both are empty.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let (sa, sb) = (token_set(a), token_set(b));
    let union = sa.union(&sb).count();
    if union == 0 {
        return 0.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Offline token-count approximation: whitespace pieces with punctuation
/// split off as standalone tokens.
pub fn approx_token_count(text: &str) -> u64 {
    let mut n = 0u64;
    for piece in text.split_whitespace() {
        let mut in_word = false;
        for c in piece.chars() {
            if c.is_alphanumeric() {
                if !in_word {
                    n += 1;
                    in_word = true;
                }
            } else {
                n += 1;
                in_word = false;
            }
        }
    }
    n
}

pub fn sha256_hex(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

/// 64-bit FNV-1a; stable across platforms and toolchains.
pub fn fnv1a(seed: &[u8], data: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in seed.iter().chain([0xffu8].iter()).chain(data) {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
