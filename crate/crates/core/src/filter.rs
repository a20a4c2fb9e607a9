//! Rule-based sample filters and model-based dialogue cleaning.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{map_bounded, ChatClient, ChatRequest};
use crate::corpus::{DatasetManifest, Sample, TaskKind};
use crate::error::{Error, Result};
use crate::prompts;
use crate::text::Tokenizer;

pub const RULE_IMAGE_SIZE: &str = "image_size";
pub const RULE_CAPTION_LENGTH: &str = "caption_length";
pub const RULE_DIALOGUE_CLEAN: &str = "dialogue_clean";

const REVISED_PREFIX: &str = "Revised response:";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Removal {
    pub id: String,
    pub rule: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input_count: usize,
    pub kept_count: usize,
    pub removed_count: usize,
    pub removals: Vec<Removal>,
}

impl FilterReport {
    pub fn identity(n: usize) -> Self {
        Self {
            input_count: n,
            kept_count: n,
            removed_count: 0,
            removals: Vec::new(),
        }
    }

    /// Append the report of a stage that consumed this report's output.
    pub fn then(mut self, next: FilterReport) -> Self {
        debug_assert_eq!(self.kept_count, next.input_count);
        self.kept_count = next.kept_count;
        self.removed_count += next.removed_count;
        self.removals.extend(next.removals);
        self
    }

    pub fn balanced(&self) -> bool {
        self.input_count == self.kept_count + self.removed_count && self.removals.len() == self.removed_count
    }
}

/// Split `m` by a fallible predicate. Evaluation runs in parallel; order is kept.
pub fn partition<F>(m: &DatasetManifest, rule: &str, keep: F) -> Result<(DatasetManifest, FilterReport)>
where
    F: Fn(&Sample) -> Result<bool> + Sync,
{
    let decisions: Vec<bool> = m.samples.par_iter().map(&keep).collect::<Result<_>>()?;
    let mut kept = Vec::with_capacity(m.len());
    let mut removals = Vec::new();
    for (s, keep) in m.samples.iter().zip(decisions) {
        if keep {
            kept.push(s.clone());
        } else {
            removals.push(Removal {
                id: s.id.clone(),
                rule: rule.to_string(),
            });
        }
    }
    let report = FilterReport {
        input_count: m.len(),
        kept_count: kept.len(),
        removed_count: removals.len(),
        removals,
    };
    Ok((m.with_samples(kept), report))
}

/// Drop samples with any image whose shorter side is below `min_dim`.
pub fn filter_image_size(m: &DatasetManifest, min_dim: u32) -> Result<(DatasetManifest, FilterReport)> {
    partition(m, RULE_IMAGE_SIZE, |s| image_size_ok(s, min_dim))
}

fn image_size_ok(s: &Sample, min_dim: u32) -> Result<bool> {
    for img in &s.images {
        let (w, h) = match (img.width_px, img.height_px) {
            (Some(w), Some(h)) => (w, h),
            _ => {
                return Err(Error::MissingDimension {
                    id: s.id.clone(),
                    uri: img.uri.clone(),
                })
            }
        };
        if w.min(h) < min_dim {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Keep captions whose token count lies in `[min_tok, max_tok]`. Non-caption
/// samples pass untouched.
pub fn filter_caption_length(
    m: &DatasetManifest,
    min_tok: usize,
    max_tok: usize,
    tokenizer: Tokenizer,
) -> Result<(DatasetManifest, FilterReport)> {
    partition(m, RULE_CAPTION_LENGTH, |s| {
        if s.task_kind != TaskKind::Caption {
            return Ok(true);
        }
        let n = tokenizer.count(s.answer.as_deref().unwrap_or(""));
        Ok((min_tok..=max_tok).contains(&n))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum FilterStage {
    ImageSize {
        #[serde(default = "default_min_dim")]
        min_dim: u32,
    },
    CaptionLength {
        #[serde(default = "default_min_tok")]
        min_tok: usize,
        #[serde(default = "default_max_tok")]
        max_tok: usize,
        #[serde(default)]
        tokenizer: Tokenizer,
    },
}

fn default_min_dim() -> u32 {
    64
}
fn default_min_tok() -> usize {
    10
}
fn default_max_tok() -> usize {
    1024
}

/// Thresholds used when stages are named rather than spelled out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterParams {
    pub min_dim: u32,
    pub min_tok: usize,
    pub max_tok: usize,
    pub tokenizer: Tokenizer,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            min_dim: default_min_dim(),
            min_tok: default_min_tok(),
            max_tok: default_max_tok(),
            tokenizer: Tokenizer::Words,
        }
    }
}

impl FilterStage {
    pub fn from_name(name: &str, p: &FilterParams) -> Result<Self> {
        match name.trim() {
            RULE_IMAGE_SIZE => Ok(FilterStage::ImageSize { min_dim: p.min_dim }),
            RULE_CAPTION_LENGTH => Ok(FilterStage::CaptionLength {
                min_tok: p.min_tok,
                max_tok: p.max_tok,
                tokenizer: p.tokenizer,
            }),
            other => Err(Error::UnknownStage(other.to_string())),
        }
    }

    /// Parse a comma-separated stage list. Every name is checked before any is returned.
    pub fn parse_list(list: &str, p: &FilterParams) -> Result<Vec<Self>> {
        list.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| Self::from_name(s, p))
            .collect()
    }

    pub fn apply(&self, m: &DatasetManifest) -> Result<(DatasetManifest, FilterReport)> {
        match *self {
            FilterStage::ImageSize { min_dim } => filter_image_size(m, min_dim),
            FilterStage::CaptionLength {
                min_tok,
                max_tok,
                tokenizer,
            } => filter_caption_length(m, min_tok, max_tok, tokenizer),
        }
    }
}

pub fn run_pipeline(m: &DatasetManifest, stages: &[FilterStage]) -> Result<(DatasetManifest, FilterReport)> {
    let mut current = m.clone();
    let mut report = FilterReport::identity(m.len());
    for stage in stages {
        let (next, r) = stage.apply(&current)?;
        report = report.then(r);
        current = next;
    }
    Ok((current, report))
}

/// Rewrite a dialogue answer through the cleaning prompt. The input sample is
/// left untouched.
pub fn clean_dialogue_response(s: &Sample, client: &dyn ChatClient) -> Result<Sample> {
    let answer = s
        .answer
        .as_deref()
        .ok_or_else(|| Error::invalid(&s.id, "answer", "dialogue sample has no response"))?;
    let prompt = prompts::fill(prompts::DIALOGUE_CLEANING, &[("response", answer)]);
    let raw = client.complete(&ChatRequest::user(prompt))?;
    let revised = raw.trim_start().strip_prefix(REVISED_PREFIX).ok_or_else(|| Error::Format {
        context: "dialogue cleaning",
        message: format!("missing `{REVISED_PREFIX}` prefix"),
    })?;
    let mut out = s.clone();
    out.answer = Some(revised.trim().to_string());
    Ok(out)
}

/// Clean every dialogue sample. Failures drop the sample (fail-closed) and are
/// reported under `dialogue_clean`; other task kinds pass through.
pub fn clean_dialogues(m: &DatasetManifest, client: &dyn ChatClient) -> (DatasetManifest, FilterReport) {
    let results = map_bounded(&m.samples, client.concurrency_bound(), |s| {
        if s.task_kind == TaskKind::Dialogue {
            clean_dialogue_response(s, client)
        } else {
            Ok(s.clone())
        }
    });
    let mut kept = Vec::new();
    let mut removals = Vec::new();
    for (s, r) in m.samples.iter().zip(results) {
        match r {
            Ok(cleaned) => kept.push(cleaned),
            Err(e) => {
                tracing::warn!(id = %s.id, error = %e, "dialogue cleaning failed, dropping sample");
                removals.push(Removal {
                    id: s.id.clone(),
                    rule: RULE_DIALOGUE_CLEAN.into(),
                });
            }
        }
    }
    let report = FilterReport {
        input_count: m.len(),
        kept_count: kept.len(),
        removed_count: removals.len(),
        removals,
    };
    (m.with_samples(kept), report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::StubClient;
    use crate::corpus::ImageRef;
    use proptest::prelude::*;

    fn with_image(id: &str, w: u32, h: u32) -> Sample {
        let mut s = Sample::new(id, "d", TaskKind::VqaOpen);
        s.images.push(ImageRef::new(format!("{id}.png")).with_dims(w, h));
        s.answer = Some("yes".into());
        s
    }

    fn caption_with_tokens(id: &str, n: usize) -> Sample {
        let mut s = with_image(id, 128, 128);
        s.task_kind = TaskKind::Caption;
        s.answer = Some(vec!["word"; n].join(" "));
        s
    }

    fn kept_ids(m: &DatasetManifest) -> Vec<&str> {
        m.samples.iter().map(|s| s.id.as_str()).collect()
    }

    #[test]
    fn image_size_boundaries() {
        let m = DatasetManifest::new(
            "t",
            vec![
                with_image("small", 63, 100),
                with_image("edge", 64, 64),
                Sample::new("text", "d", TaskKind::TextQa),
            ],
        );
        let (out, rep) = filter_image_size(&m, 64).unwrap();
        assert_eq!(kept_ids(&out), ["edge", "text"]);
        assert_eq!(
            rep.removals,
            vec![Removal {
                id: "small".into(),
                rule: "image_size".into()
            }]
        );
        assert!(rep.balanced());
    }

    #[test]
    fn any_failing_image_removes_sample() {
        let mut s = with_image("multi", 200, 200);
        s.images.push(ImageRef::new("thin.png").with_dims(500, 20));
        let (out, _) = filter_image_size(&DatasetManifest::new("t", vec![s]), 64).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn missing_dimensions_error() {
        let mut s = Sample::new("x", "d", TaskKind::VqaOpen);
        s.images.push(ImageRef::new("x.png"));
        assert!(matches!(
            filter_image_size(&DatasetManifest::new("t", vec![s]), 64),
            Err(Error::MissingDimension { .. })
        ));
    }

    #[test]
    fn caption_length_boundaries() {
        let mut mcq = Sample::new("mcq", "d", TaskKind::VqaMcq);
        mcq.options = Some(vec!["left lung".into(), "heart".into()]);
        mcq.answer = Some("left lung".into());
        let m = DatasetManifest::new(
            "t",
            vec![
                caption_with_tokens("c9", 9),
                caption_with_tokens("c10", 10),
                caption_with_tokens("c1024", 1024),
                caption_with_tokens("c1025", 1025),
                mcq,
            ],
        );
        let (out, rep) = filter_caption_length(&m, 10, 1024, Tokenizer::Words).unwrap();
        assert_eq!(kept_ids(&out), ["c10", "c1024", "mcq"]);
        assert_eq!(rep.removed_count, 2);
    }

    #[test]
    fn pipeline_composition_and_identity() {
        let m = DatasetManifest::new(
            "t",
            vec![
                with_image("tiny", 32, 32),
                caption_with_tokens("short", 5),
                caption_with_tokens("fine", 20),
            ],
        );
        let (same, rep) = run_pipeline(&m, &[]).unwrap();
        assert_eq!(same, m);
        assert_eq!(rep, FilterReport::identity(3));

        let stages = FilterStage::parse_list("image_size,caption_length", &FilterParams::default()).unwrap();
        let (out, rep) = run_pipeline(&m, &stages).unwrap();
        assert_eq!(kept_ids(&out), ["fine"]);
        assert_eq!(
            rep.removals,
            vec![
                Removal {
                    id: "tiny".into(),
                    rule: "image_size".into()
                },
                Removal {
                    id: "short".into(),
                    rule: "caption_length".into()
                },
            ]
        );
        assert!(rep.balanced());
    }

    #[test]
    fn unknown_stage_rejected() {
        assert!(matches!(
            FilterStage::parse_list("image_size,blur", &FilterParams::default()),
            Err(Error::UnknownStage(s)) if s == "blur"
        ));
    }

    #[test]
    fn dialogue_cleaning_strips_prefix_and_substitutes_response() {
        let mut s = Sample::new("d1", "icliniq", TaskKind::Dialogue);
        s.question = Some("My chest hurts".into());
        s.answer = Some("Take aspirin, Dr. Smith here.".into());
        let stub = StubClient::fixed("Revised response: see a cardiologist");
        let out = clean_dialogue_response(&s, &stub).unwrap();
        assert_eq!(out.answer.as_deref(), Some("see a cardiologist"));
        assert_eq!(s.answer.as_deref(), Some("Take aspirin, Dr. Smith here."));
        let prompt = &stub.prompts()[0];
        assert!(prompt.starts_with("Response to patient:\nTake aspirin, Dr. Smith here.\n\nRevise the above response"));
    }

    #[test]
    fn dialogue_cleaning_requires_prefix() {
        let mut s = Sample::new("d1", "icliniq", TaskKind::Dialogue);
        s.answer = Some("x".into());
        let stub = StubClient::fixed("see a cardiologist");
        assert!(matches!(clean_dialogue_response(&s, &stub), Err(Error::Format { .. })));
    }

    #[test]
    fn dialogue_batch_is_fail_closed() {
        let mut d = Sample::new("d1", "icliniq", TaskKind::Dialogue);
        d.answer = Some("x".into());
        let other = Sample::new("t1", "medqa", TaskKind::TextQa);
        let m = DatasetManifest::new("t", vec![d, other]);
        let (out, rep) = clean_dialogues(&m, &StubClient::failing("down"));
        assert_eq!(kept_ids(&out), ["t1"]);
        assert_eq!(rep.removals[0].rule, RULE_DIALOGUE_CLEAN);
        assert!(rep.balanced());
    }

    fn arb_corpus() -> impl Strategy<Value = DatasetManifest> {
        proptest::collection::vec((1u32..140, 1u32..140, 0usize..1100, any::<bool>()), 0..30).prop_map(|rows| {
            let samples = rows
                .into_iter()
                .enumerate()
                .map(|(i, (w, h, n, cap))| {
                    let mut s = with_image(&format!("s{i}"), w, h);
                    if cap {
                        s.task_kind = TaskKind::Caption;
                        s.answer = Some(vec!["t"; n].join(" "));
                    }
                    s
                })
                .collect();
            DatasetManifest::new("p", samples)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn filters_commute_and_are_idempotent(m in arb_corpus()) {
            let p = FilterParams::default();
            let fwd = FilterStage::parse_list("image_size,caption_length", &p).unwrap();
            let rev = FilterStage::parse_list("caption_length,image_size", &p).unwrap();
            let (a, ra) = run_pipeline(&m, &fwd).unwrap();
            let (b, rb) = run_pipeline(&m, &rev).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(ra.balanced() && rb.balanced());
            let (again, _) = run_pipeline(&a, &fwd).unwrap();
            prop_assert_eq!(&again, &a);
            // Brute-force: each removed id listed exactly once.
            let mut ids: Vec<_> = ra.removals.iter().map(|r| r.id.clone()).collect();
            ids.sort();
            ids.dedup();
            prop_assert_eq!(ids.len(), ra.removed_count);
            for s in &a.samples {
                for img in &s.images {
                    prop_assert!(img.width_px.unwrap().min(img.height_px.unwrap()) >= 64);
                }
            }
        }
    }
}
