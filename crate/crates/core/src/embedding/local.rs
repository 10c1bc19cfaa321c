//! Deterministic feature-hashing sentence embedder.
//!
//! The text is normalized (NFC, trimmed, whitespace collapsed), lowercased
//! and split on every non-alphanumeric character. Each token contributes a
//! unigram feature `w:<tok>`, each adjacent token pair a bigram feature
//! `b:<tok1> <tok2>`, and each token padded as `<tok>` contributes its
//! character trigrams `c:<abc>`.
//!
//! A feature string is hashed with seeded 64-bit FNV-1a followed by the
//! splitmix64 finalizer. The bucket is `hash % dim` and the sign is `-1` when
//! the top bit of the hash is set. The accumulated vector is L2-normalized.

use super::{normalize_text, EmbeddingVector};

pub const MIN_LOCAL_DIM: usize = 16;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn feature_hash(feature: &str, seed: u64) -> u64 {
    let mut h = FNV_OFFSET ^ mix64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    for &b in feature.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    mix64(h)
}

pub fn tokenize(text: &str) -> Vec<String> {
    normalize_text(text)
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Every hashed feature of `text`, in a fixed order.
pub fn features(text: &str) -> Vec<String> {
    let tokens = tokenize(text);
    let mut out = Vec::with_capacity(tokens.len() * 6);
    for tok in &tokens {
        out.push(format!("w:{tok}"));
    }
    for pair in tokens.windows(2) {
        out.push(format!("b:{} {}", pair[0], pair[1]));
    }
    for tok in &tokens {
        let padded: Vec<char> = std::iter::once('<')
            .chain(tok.chars())
            .chain(std::iter::once('>'))
            .collect();
        for tri in padded.windows(3) {
            let mut f = String::from("c:");
            f.extend(tri);
            out.push(f);
        }
    }
    out
}

/// Embeds `text` into a `dim`-dimensional unit vector, or the zero vector if
/// the text has no alphanumeric tokens.
///
/// # Panics
///
/// If `dim < 16`; [`super::ProviderConfig`] validation rejects such
/// configurations before they get here.
pub fn local_embed(text: &str, dim: usize, seed: u64) -> EmbeddingVector {
    assert!(dim >= MIN_LOCAL_DIM, "local embedding dim must be >= {MIN_LOCAL_DIM}");
    let mut acc = vec![0.0f64; dim];
    for f in features(text) {
        let h = feature_hash(&f, seed);
        let bucket = (h % dim as u64) as usize;
        acc[bucket] += if h >> 63 == 1 { -1.0 } else { 1.0 };
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut acc {
            *v /= norm;
        }
    }
    EmbeddingVector::new(acc)
}
