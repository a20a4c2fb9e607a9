//! Multiple-choice answer extraction.
//!
//! Stage 1 tries fixed rule patterns in order; stage 2 falls back to token
//! overlap with each option. The pattern list is frozen in `docs/matching.md`.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::text::{metric_tokens, normalize_text};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchStage {
    Rule,
    Similarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqMatch {
    pub index: usize,
    pub stage: MatchStage,
}

struct Patterns {
    answer_is: Regex,
    paren: Regex,
    leading: Regex,
    trailing: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        answer_is: Regex::new(r"(?i:answer)(?:\s+(?i:is))?\s*:?\s*\(?([A-Z])\b").expect("valid regex"),
        paren: Regex::new(r"\(([A-Z])\)").expect("valid regex"),
        leading: Regex::new(r"^\(?([A-Z])[.):]").expect("valid regex"),
        trailing: Regex::new(r"\b([A-Z])[.)]?\s*$").expect("valid regex"),
    })
}

fn letter_index(c: &str, n: usize) -> Option<usize> {
    let b = c.as_bytes().first()?.to_ascii_uppercase();
    let i = b.checked_sub(b'A')? as usize;
    (i < n).then_some(i)
}

/// Stage 1: returns the first rule that fires with an in-range letter.
pub fn rule_match(prediction: &str, options: &[String]) -> Option<usize> {
    let n = options.len();
    let pred = prediction.trim();
    let norm = normalize_text(pred);

    if let Some(i) = options.iter().position(|o| !norm.is_empty() && normalize_text(o) == norm) {
        return Some(i);
    }
    let p = patterns();
    if let Some(i) = p.answer_is.captures_iter(pred).find_map(|c| letter_index(&c[1], n)) {
        return Some(i);
    }
    if let Some(i) = p.paren.captures_iter(pred).find_map(|c| letter_index(&c[1], n)) {
        return Some(i);
    }
    if norm.chars().count() == 1 {
        if let Some(i) = letter_index(&norm, n).filter(|_| norm.chars().all(|c| c.is_ascii_alphabetic())) {
            return Some(i);
        }
    }
    if let Some(i) = p.leading.captures(pred).and_then(|c| letter_index(&c[1], n)) {
        return Some(i);
    }
    p.trailing.captures(pred).and_then(|c| letter_index(&c[1], n))
}

/// Multiset intersection size between two token lists.
pub fn token_overlap(a: &[String], b: &[String]) -> usize {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in a {
        *counts.entry(t).or_default() += 1;
    }
    let mut hits = 0;
    for t in b {
        if let Some(c) = counts.get_mut(t.as_str()).filter(|c| **c > 0) {
            *c -= 1;
            hits += 1;
        }
    }
    hits
}

/// Stage 2: the option sharing the most tokens with the prediction; ties go
/// to the lowest index.
pub fn similarity_match(prediction: &str, options: &[String]) -> usize {
    let pred = metric_tokens(prediction);
    let mut best = (0, 0usize);
    for (i, o) in options.iter().enumerate() {
        let score = token_overlap(&pred, &metric_tokens(o));
        if score > best.1 {
            best = (i, score);
        }
    }
    best.0
}

/// Total: every prediction maps to some option index.
pub fn extract_mcq_answer(prediction: &str, options: &[String]) -> McqMatch {
    assert!(!options.is_empty(), "extract_mcq_answer needs options");
    match rule_match(prediction, options) {
        Some(index) => McqMatch {
            index,
            stage: MatchStage::Rule,
        },
        None => McqMatch {
            index: similarity_match(prediction, options),
            stage: MatchStage::Similarity,
        },
    }
}
