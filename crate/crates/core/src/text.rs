//! Tokenization and normalization shared by filters, dedup, matching and metrics.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Token segmentation used for length thresholds and metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenizer {
    /// Maximal runs of Unicode alphanumerics; punctuation and whitespace separate.
    #[default]
    Words,
    /// Whitespace-separated chunks.
    Whitespace,
}

impl Tokenizer {
    pub fn tokens<'a>(&self, text: &'a str) -> Vec<&'a str> {
        match self {
            Tokenizer::Words => word_runs(text).collect(),
            Tokenizer::Whitespace => text.split_whitespace().collect(),
        }
    }

    pub fn count(&self, text: &str) -> usize {
        match self {
            Tokenizer::Words => word_runs(text).count(),
            Tokenizer::Whitespace => text.split_whitespace().count(),
        }
    }
}

fn word_runs(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty())
}

/// Token count under the default tokenizer.
pub fn count_tokens(text: &str) -> usize {
    Tokenizer::Words.count(text)
}

/// Lowercased word tokens, the form every metric and overlap scorer works on.
pub fn metric_tokens(text: &str) -> Vec<String> {
    word_runs(text).map(str::to_lowercase).collect()
}

fn punctuation() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\p{P}").expect("static regex"))
}

/// Lowercase, drop Unicode punctuation, collapse whitespace, trim.
pub fn normalize_text(s: &str) -> String {
    let lower = s.to_lowercase();
    let stripped = punctuation().replace_all(&lower, "");
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// 64-bit FNV-1a. Stable across platforms and releases, unlike `DefaultHasher`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counts_match_examples() {
        assert_eq!(count_tokens(""), 0);
        // chest | x | ray | PA | view
        assert_eq!(count_tokens("chest x-ray, PA view"), 5);
        let s = vec!["a"; 1024].join(" ");
        assert_eq!(count_tokens(&s), 1024);
    }

    #[test]
    fn whitespace_tokenizer() {
        assert_eq!(Tokenizer::Whitespace.count("chest x-ray, PA view"), 4);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_text("What is shown?"), "what is shown");
        assert_eq!(normalize_text("  A\tB  "), "a b");
        assert_eq!(normalize_text("¿Qué—es «esto»?"), "quées esto");
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once);
        }

        #[test]
        fn count_is_additive(a in "[a-z0-9 ]{0,30}", b in "[a-z0-9 ]{0,30}") {
            let joined = format!("{a} {b}");
            prop_assert_eq!(count_tokens(&joined), count_tokens(&a) + count_tokens(&b));
        }
    }
}
