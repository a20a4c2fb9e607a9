//! Rule-based rewards: a strict format check plus answer accuracy.

use serde::{Deserialize, Serialize};

use crate::corpus::Sample;
use crate::eval::extract_mcq_answer;
use crate::num::Scalar;
use crate::text::normalize_text;

/// Delimiters of the reasoning and final-answer blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FormatSpec {
    pub think_open: String,
    pub think_close: String,
    pub answer_open: String,
    pub answer_close: String,
}

impl Default for FormatSpec {
    fn default() -> Self {
        Self {
            think_open: "<think>".into(),
            think_close: "</think>".into(),
            answer_open: "<answer>".into(),
            answer_close: "</answer>".into(),
        }
    }
}

impl FormatSpec {
    /// Content of the last answer block, if one is closed.
    pub fn answer_block<'a>(&self, response: &'a str) -> Option<&'a str> {
        let start = response.rfind(&self.answer_open)? + self.answer_open.len();
        let len = response[start..].find(&self.answer_close)?;
        Some(response[start..start + len].trim())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig<T> {
    pub format_weight: T,
    pub accuracy_weight: T,
}

impl<T: Scalar> Default for RewardConfig<T> {
    fn default() -> Self {
        Self {
            format_weight: T::of(0.5),
            accuracy_weight: T::of(1.0),
        }
    }
}

/// True iff the response is exactly one reasoning block followed by one
/// answer block, with nothing but whitespace around or between them.
pub fn format_reward(response: &str, spec: &FormatSpec) -> bool {
    let tags = [&spec.think_open, &spec.think_close, &spec.answer_open, &spec.answer_close];
    if tags.iter().any(|t| response.matches(t.as_str()).count() != 1) {
        return false;
    }
    let r = response.trim();
    let Some(rest) = r.strip_prefix(spec.think_open.as_str()) else {
        return false;
    };
    let Some(close) = rest.find(&spec.think_close) else {
        return false;
    };
    let after = rest[close + spec.think_close.len()..].trim_start();
    let Some(body) = after.strip_prefix(spec.answer_open.as_str()) else {
        return false;
    };
    body.ends_with(spec.answer_close.as_str())
}

/// Multiple-choice references are matched through MCQ extraction, open ones
/// by normalized equality.
pub fn accuracy_reward(response: &str, gt: &Sample, spec: &FormatSpec) -> bool {
    let Some(answer) = spec.answer_block(response) else {
        return false;
    };
    let Some(truth) = gt.answer.as_deref() else {
        return false;
    };
    match (gt.options.as_deref(), gt.answer_index()) {
        (Some(options), Some(i)) if !options.is_empty() => extract_mcq_answer(answer, options).index == i,
        _ => normalize_text(answer) == normalize_text(truth),
    }
}

pub fn total_reward<T: Scalar>(response: &str, gt: &Sample, cfg: &RewardConfig<T>, spec: &FormatSpec) -> T {
    let f = if format_reward(response, spec) { T::one() } else { T::zero() };
    let a = if accuracy_reward(response, gt, spec) { T::one() } else { T::zero() };
    cfg.format_weight * f + cfg.accuracy_weight * a
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TaskKind;

    fn open(answer: &str) -> Sample {
        let mut s = Sample::new("g", "d", TaskKind::VqaOpen);
        s.answer = Some(answer.into());
        s
    }

    #[test]
    fn strict_format() {
        let f = FormatSpec::default();
        assert!(format_reward("<think>look</think><answer>B</answer>", &f));
        assert!(format_reward("  <think>a</think>\n<answer>B</answer>\n", &f));
        assert!(!format_reward("<think>look</think>", &f));
        assert!(!format_reward("<think>a</think><think>b</think><answer>B</answer>", &f));
        assert!(!format_reward("<answer>B</answer><think>a</think>", &f));
        assert!(!format_reward("preamble <think>a</think><answer>B</answer>", &f));
    }

    #[test]
    fn accuracy_examples() {
        let f = FormatSpec::default();
        assert!(accuracy_reward("<answer>B</answer>", &open("B"), &f));
        assert!(accuracy_reward("<answer>b.</answer>", &open("B"), &f));
        assert!(!accuracy_reward("<answer>pneumonia</answer>", &open("pneumothorax"), &f));
        let mut mcq = Sample::new("m", "d", TaskKind::VqaMcq);
        mcq.options = Some(vec!["CT".into(), "MRI".into()]);
        mcq.answer = Some("MRI".into());
        assert!(accuracy_reward("<answer>B</answer>", &mcq, &f));
        assert!(accuracy_reward("<answer>mri</answer>", &mcq, &f));
        assert!(!accuracy_reward("<answer>A</answer>", &mcq, &f));
    }

    #[test]
    fn reward_grid() {
        let f = FormatSpec::default();
        let cfg = RewardConfig::<f64>::default();
        let gt = open("pneumothorax");
        let grid = [
            ("<think>r</think><answer>pneumothorax</answer>", 1.5),
            ("<think>r</think><answer>effusion</answer>", 0.5),
            ("<answer>pneumothorax</answer>", 1.0),
            ("no tags at all", 0.0),
        ];
        for (resp, want) in grid {
            assert_eq!(total_reward(resp, &gt, &cfg, &f), want, "{resp}");
        }
        assert_eq!(total_reward::<f32>(grid[0].0, &gt, &RewardConfig::default(), &f), 1.5f32);
    }
}
