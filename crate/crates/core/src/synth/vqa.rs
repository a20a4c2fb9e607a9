//! Multiple-choice VQA generation: label templates and few-shot self-instruct.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::client::{map_bounded, ChatClient, ChatRequest};
use crate::corpus::{ImageRef, ModalityTag, Sample, TaskKind};
use crate::error::{Error, Result};
use crate::prompts;
use crate::text::normalize_text;

use super::caption::{stage1_short_caption, CaptionRule};
use super::{extract_json_object, item_seed, SynthReport};

pub const MISMATCH_SENTINEL: &str = "Error: the input description does not match the input image.";
pub const MAX_WRONG_ANSWERS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Anatomy,
    Abnormality,
    Modality,
}

impl LabelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LabelKind::Anatomy => "anatomy",
            LabelKind::Abnormality => "abnormality",
            LabelKind::Modality => "modality",
        }
    }
}

/// Question template over one label space. `question_text` may carry `{key}`
/// slots filled from the record's metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaTemplate {
    pub label_kind: LabelKind,
    pub question_text: String,
    pub distractor_pool: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledRecord {
    pub id: String,
    pub source_dataset: String,
    pub image: ImageRef,
    #[serde(default)]
    pub modality: Option<ModalityTag>,
    pub label_kind: LabelKind,
    pub label: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

fn dedup_pool(pool: &[String]) -> Vec<&String> {
    let mut seen = std::collections::BTreeSet::new();
    pool.iter().filter(|l| seen.insert(l.as_str())).collect()
}

/// One MCQ sample per (record, template of the record's label kind).
/// Distractors come from the template pool; options are shuffled with a
/// per-sample RNG so output does not depend on record order.
pub fn template_vqa(records: &[LabeledRecord], templates: &[QaTemplate], n_options: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for rec in records {
        for (ti, t) in templates.iter().enumerate().filter(|(_, t)| t.label_kind == rec.label_kind) {
            let pool = dedup_pool(&t.distractor_pool);
            if pool.len() < n_options || n_options < 2 {
                return Err(Error::PoolTooSmall {
                    pool: pool.len(),
                    needed: n_options.max(2),
                });
            }
            if !pool.iter().any(|l| **l == rec.label) {
                return Err(Error::LabelNotInPool { label: rec.label.clone() });
            }
            let id = format!("{}-{}-{ti}", rec.id, rec.label_kind.as_str());
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, &id));
            let others: Vec<&String> = pool.iter().copied().filter(|l| **l != rec.label).collect();
            let mut options: Vec<String> = others.choose_multiple(&mut rng, n_options - 1).map(|l| (*l).clone()).collect();
            options.push(rec.label.clone());
            options.shuffle(&mut rng);

            let rule = CaptionRule::new(&rec.source_dataset, &t.question_text)?;
            let mut s = Sample::new(id, &rec.source_dataset, TaskKind::VqaMcq);
            s.images.push(rec.image.clone());
            s.question = Some(stage1_short_caption(&rec.meta, &rule)?);
            s.options = Some(options);
            s.answer = Some(rec.label.clone());
            s.modality = rec.modality;
            s.validate()?;
            out.push(s);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CaptionedImage {
    pub id: String,
    pub source_dataset: String,
    pub image: ImageRef,
    pub image_bytes: Vec<u8>,
    pub modality: Option<ModalityTag>,
    pub caption: String,
}

fn parse_generated(reply: &str) -> std::result::Result<(String, String, Vec<String>), String> {
    if reply.contains(MISMATCH_SENTINEL) {
        return Err("annotator reported caption/image mismatch".into());
    }
    let obj = extract_json_object(reply).ok_or("no JSON object in reply")?;
    let field = |k: &str| {
        obj.get(k)
            .and_then(|v| v.as_str())
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(str::to_string)
            .ok_or(format!("missing `{k}`"))
    };
    let question = field("question")?;
    let answer = field("answer")?;
    let wrong: Vec<String> = obj
        .get("wrong answers")
        .and_then(|v| v.as_array())
        .ok_or("missing `wrong answers` list")?
        .iter()
        .map(|v| v.as_str().map(|s| s.trim().to_string()).ok_or("non-string wrong answer"))
        .collect::<std::result::Result<_, _>>()?;
    if wrong.is_empty() || wrong.len() > MAX_WRONG_ANSWERS {
        return Err(format!("{} wrong answers, expected 1 to {MAX_WRONG_ANSWERS}", wrong.len()));
    }
    let mut seen = std::collections::BTreeSet::from([normalize_text(&answer)]);
    for w in &wrong {
        if w.is_empty() || !seen.insert(normalize_text(w)) {
            return Err("wrong answers must be non-empty and distinct from each other and the answer".into());
        }
    }
    Ok((question, answer, wrong))
}

/// Few-shot MCQ generation from captioned images. `seed_examples` fills the
/// two example slots of the prompt; `seed` drives option shuffling.
pub fn self_instruct_vqa(
    items: &[CaptionedImage],
    seed_examples: [&str; 2],
    client: &dyn ChatClient,
    seed: u64,
) -> (Vec<Sample>, SynthReport) {
    let replies = map_bounded(items, client.concurrency_bound(), |it| {
        let prompt = prompts::fill(
            prompts::SELF_INSTRUCT_VQA,
            &[
                ("seed_example_1", seed_examples[0]),
                ("seed_example_2", seed_examples[1]),
                ("caption", it.caption.as_str()),
            ],
        );
        client.complete(&ChatRequest::user(prompt).with_png(&it.image_bytes))
    });
    let mut report = SynthReport {
        attempted: items.len(),
        ..Default::default()
    };
    let mut out = Vec::new();
    for (it, reply) in items.iter().zip(replies) {
        let parsed = reply.map_err(|e| e.to_string()).and_then(|r| parse_generated(&r));
        let (question, answer, wrong) = match parsed {
            Ok(p) => p,
            Err(reason) => {
                report.drop(&it.id, reason);
                continue;
            }
        };
        let mut options = wrong;
        options.push(answer.clone());
        options.shuffle(&mut ChaCha8Rng::seed_from_u64(item_seed(seed, &it.id)));
        let mut s = Sample::new(&it.id, &it.source_dataset, TaskKind::VqaMcq);
        s.images.push(it.image.clone());
        s.question = Some(question);
        s.options = Some(options);
        s.answer = Some(answer);
        s.modality = it.modality;
        match s.validate() {
            Ok(()) => out.push(s),
            Err(e) => report.drop(&it.id, e),
        }
    }
    report.emitted = out.len();
    (out, report)
}
