//! MinHash signatures over word shingles.

use serde::{Deserialize, Serialize};

use crate::text::{fnv1a64, mix64, normalize_text};

pub const DEFAULT_K: usize = 128;
pub const DEFAULT_SHINGLE_W: usize = 5;
pub const DEFAULT_SEED: u64 = 0x5EED;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinHashSignature {
    pub mins: Vec<u64>,
    pub shingle_w: usize,
}

impl MinHashSignature {
    pub fn len(&self) -> usize {
        self.mins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mins.is_empty()
    }
}

/// Fraction of positions where the two signatures agree.
pub fn estimate_jaccard(a: &MinHashSignature, b: &MinHashSignature) -> f64 {
    if a.mins.len() != b.mins.len() || a.mins.is_empty() {
        return 0.0;
    }
    let eq = a.mins.iter().zip(&b.mins).filter(|(x, y)| x == y).count();
    eq as f64 / a.mins.len() as f64
}

/// Word shingles of width `w` over the normalized text. Texts shorter than `w`
/// words yield one shingle holding the whole normalized text.
pub fn shingles(text: &str, w: usize) -> Vec<String> {
    let norm = normalize_text(text);
    let words: Vec<&str> = norm.split_whitespace().collect();
    if words.len() < w {
        return vec![norm];
    }
    words.windows(w).map(|win| win.join(" ")).collect()
}

/// `k` seeded hash functions `h_i(x) = mix(x ^ s_i)`; the signature keeps the
/// minimum of each over the shingle set.
#[derive(Debug, Clone)]
pub struct MinHasher {
    seeds: Vec<u64>,
    shingle_w: usize,
}

impl MinHasher {
    pub fn new(k: usize, shingle_w: usize, seed: u64) -> Self {
        assert!(k >= 1 && shingle_w >= 1, "k and w must be positive");
        let seeds = (0..k as u64).map(|i| mix64(seed ^ mix64(i.wrapping_add(1)))).collect();
        Self { seeds, shingle_w }
    }

    pub fn k(&self) -> usize {
        self.seeds.len()
    }

    pub fn signature(&self, text: &str) -> MinHashSignature {
        let hashes: Vec<u64> = shingles(text, self.shingle_w).iter().map(|s| fnv1a64(s.as_bytes())).collect();
        let mins = self
            .seeds
            .iter()
            .map(|&s| hashes.iter().map(|&h| mix64(h ^ s)).min().unwrap_or(u64::MAX))
            .collect();
        MinHashSignature {
            mins,
            shingle_w: self.shingle_w,
        }
    }
}

pub fn minhash_signature(text: &str, k: usize, w: usize, seed: u64) -> MinHashSignature {
    MinHasher::new(k, w, seed).signature(text)
}
