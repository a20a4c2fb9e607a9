//! RL subset: capped binary questions, short-answer MCQs posed open-ended,
//! and a bounded MCQ/open ratio.

use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetManifest, Sample, TaskKind};
use crate::error::{Error, Result};
use crate::text::{count_tokens, mix64, normalize_text};

use super::sample_indices;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    /// Upper bound on the share of yes/no questions.
    pub target_binary_frac: f64,
    /// Allowed MCQ share of the non-binary-capped output, inclusive.
    pub mcq_share_min: f64,
    pub mcq_share_max: f64,
    /// MCQ answers of at most this many tokens are reposed as open questions.
    pub max_answer_tokens: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            target_binary_frac: 0.05,
            mcq_share_min: 0.4,
            mcq_share_max: 0.6,
            max_answer_tokens: 3,
        }
    }
}

pub fn is_binary(s: &Sample) -> bool {
    s.answer
        .as_deref()
        .is_some_and(|a| matches!(normalize_text(a).as_str(), "yes" | "no"))
}

fn is_mcq(s: &Sample) -> bool {
    s.task_kind == TaskKind::VqaMcq
}

/// Drop the options of a word/phrase-answer MCQ. Anything else is returned as is.
pub fn mcq_to_open(s: &Sample, max_answer_tokens: usize) -> Sample {
    let qualifies = is_mcq(s)
        && s.answer
            .as_deref()
            .is_some_and(|a| (1..=max_answer_tokens).contains(&count_tokens(a)));
    let mut out = s.clone();
    if qualifies {
        out.task_kind = TaskKind::VqaOpen;
        out.options = None;
    }
    out
}

/// Largest binary count `b` with `b <= frac * (b + rest)`.
fn binary_cap(rest: usize, frac: f64) -> usize {
    if frac >= 1.0 {
        return usize::MAX;
    }
    if frac <= 0.0 {
        return 0;
    }
    let mut b = (frac * rest as f64 / (1.0 - frac)).floor() as usize;
    while b > 0 && b as f64 > frac * (b + rest) as f64 {
        b -= 1;
    }
    while (b + 1) as f64 <= frac * (b + 1 + rest) as f64 {
        b += 1;
    }
    b
}

/// Keep `k` of the listed positions, seeded, clearing the rest in `keep`.
fn thin(keep: &mut [bool], members: &[usize], k: usize, seed: u64) {
    if members.len() <= k {
        return;
    }
    let chosen = sample_indices(members.len(), k, seed);
    let mut c = chosen.iter().peekable();
    for (pos, &j) in members.iter().enumerate() {
        if c.peek() == Some(&&pos) {
            c.next();
        } else {
            keep[j] = false;
        }
    }
}

pub fn build_rl_dataset(manifests: &[DatasetManifest], cfg: &RlConfig, seed: u64) -> Result<DatasetManifest> {
    let samples: Vec<Sample> = manifests
        .iter()
        .flat_map(|m| &m.samples)
        .filter(|s| s.answer.is_some())
        .map(|s| mcq_to_open(s, cfg.max_answer_tokens))
        .collect();
    if samples.is_empty() {
        return Err(Error::EmptyInput("no answerable samples for the RL dataset"));
    }
    if !(cfg.mcq_share_min <= cfg.mcq_share_max && (0.0..=1.0).contains(&cfg.mcq_share_min) && cfg.mcq_share_max <= 1.0) {
        return Err(Error::Config("MCQ share band must satisfy 0 <= min <= max <= 1".into()));
    }
    let mut keep = vec![true; samples.len()];
    let live =
        |keep: &[bool], f: &dyn Fn(&Sample) -> bool| -> Vec<usize> { (0..samples.len()).filter(|&j| keep[j] && f(&samples[j])).collect() };

    // Each round can only shrink the kept set, so this terminates.
    for round in 0u64.. {
        let before = keep.iter().filter(|k| **k).count();
        let round_seed = |tag: u64| mix64(seed ^ mix64(round * 4 + tag));

        let mcq = live(&keep, &|s| is_mcq(s));
        let open = live(&keep, &|s| !is_mcq(s) && !is_binary(s));
        let (m, o) = (mcq.len() as f64, open.len() as f64);
        if m > 0.0 && o > 0.0 {
            let share = m / (m + o);
            if share > cfg.mcq_share_max {
                let k = (cfg.mcq_share_max * o / (1.0 - cfg.mcq_share_max)).floor() as usize;
                thin(&mut keep, &mcq, k.max(1), round_seed(1));
            } else if share < cfg.mcq_share_min && cfg.mcq_share_min > 0.0 {
                let k = ((1.0 - cfg.mcq_share_min) * m / cfg.mcq_share_min).floor() as usize;
                thin(&mut keep, &open, k.max(1), round_seed(2));
            }
        }

        let binary = live(&keep, &is_binary);
        let rest = keep.iter().filter(|k| **k).count() - binary.len();
        thin(&mut keep, &binary, binary_cap(rest, cfg.target_binary_frac), round_seed(3));

        if keep.iter().filter(|k| **k).count() == before {
            break;
        }
    }

    let names: Vec<&str> = manifests.iter().map(|m| m.name.as_str()).collect();
    let out = samples.into_iter().zip(keep).filter(|(_, k)| *k).map(|(s, _)| s).collect();
    Ok(DatasetManifest::new(format!("rl_{}", names.join("+")), out))
}
