//! Chain-of-thought distillation with a reasoning/answer consistency check.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::client::{map_bounded, ChatClient, ChatRequest};
use crate::corpus::{Sample, TaskKind};
use crate::error::{Error, Result};
use crate::prompts;
use crate::text::normalize_text;

use super::{extract_json_object, letter_options, option_letter, SynthReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CotVerdict {
    Keep,
    Drop,
}

fn format_err(context: &'static str, message: impl Into<String>) -> Error {
    Error::Format {
        context,
        message: message.into(),
    }
}

fn is_mcq(s: &Sample) -> bool {
    s.task_kind == TaskKind::VqaMcq || s.options.as_ref().is_some_and(|o| !o.is_empty())
}

/// Read a sample's images relative to `image_root`.
pub fn load_images(s: &Sample, image_root: &Path) -> Result<Vec<Vec<u8>>> {
    s.images
        .iter()
        .map(|i| {
            let p = i.resolve(image_root);
            std::fs::read(&p).map_err(|e| Error::io(&p, e))
        })
        .collect()
}

pub fn cot_prompt(s: &Sample) -> Result<String> {
    let question = s.question.as_deref().unwrap_or("");
    let answer = s
        .answer
        .as_deref()
        .ok_or_else(|| Error::invalid(&s.id, "answer", "distillation needs a ground-truth answer"))?;
    Ok(if is_mcq(s) {
        let options = letter_options(s.options.as_deref().unwrap_or(&[]));
        prompts::fill(
            prompts::COT_MCQ,
            &[("question", question), ("options", &options), ("answer", answer)],
        )
    } else {
        prompts::fill(prompts::COT_OPEN, &[("question", question), ("answer", answer)])
    })
}

/// Whether the annotator's copied answer is the ground truth. Multiple-choice
/// replies may also give the letter, alone or as `B. text`.
fn answer_matches(s: &Sample, got: &str, truth: &str) -> bool {
    let got_n = normalize_text(got);
    if got_n == normalize_text(truth) {
        return true;
    }
    match s.answer_index() {
        Some(i) => {
            let letter = option_letter(i).to_ascii_lowercase().to_string();
            got_n == letter || got_n == normalize_text(&format!("{}. {truth}", option_letter(i)))
        }
        None => false,
    }
}

/// Ask for a reasoning path toward the known answer. The rationale is the
/// reply's `reasoning`; the ground truth is copied back unchanged.
pub fn distill_cot(s: &Sample, images: &[Vec<u8>], client: &dyn ChatClient) -> Result<Sample> {
    let mut req = ChatRequest::user(cot_prompt(s)?);
    for img in images {
        req = req.with_png(img);
    }
    let reply = client.complete(&req)?;
    let obj = extract_json_object(&reply).ok_or_else(|| format_err("cot distillation", "no JSON object"))?;
    let reasoning = obj.get("reasoning").and_then(|v| v.as_str()).map(str::trim).unwrap_or("");
    if reasoning.is_empty() {
        return Err(format_err("cot distillation", "empty reasoning"));
    }
    let truth = s.answer.as_deref().unwrap_or_default();
    let got = obj.get("answer").and_then(|v| v.as_str()).unwrap_or("");
    if !answer_matches(s, got, truth) {
        return Err(format_err("cot distillation", format!("answer `{got}` differs from ground truth")));
    }
    let mut out = s.clone();
    out.rationale = Some(reasoning.to_string());
    Ok(out)
}

/// Consistency gate over a distilled sample. Anything other than a reply
/// starting with "Consistent" or "Inconsistent" is a format error.
pub fn validate_cot(s: &Sample, client: &dyn ChatClient) -> Result<CotVerdict> {
    let reasoning = s
        .rationale
        .as_deref()
        .ok_or_else(|| Error::invalid(&s.id, "rationale", "validation needs a rationale"))?;
    let prompt = prompts::fill(
        prompts::COT_CHECK,
        &[
            ("question", s.question.as_deref().unwrap_or("")),
            ("reasoning", reasoning),
            ("answer", s.answer.as_deref().unwrap_or("")),
        ],
    );
    let reply = client.complete(&ChatRequest::user(prompt))?;
    let head = reply.trim_start_matches(|c: char| c.is_whitespace() || c == '"' || c == '*');
    if head.starts_with("Inconsistent") {
        Ok(CotVerdict::Drop)
    } else if head.starts_with("Consistent") {
        Ok(CotVerdict::Keep)
    } else {
        Err(format_err(
            "cot validation",
            format!("unexpected verdict `{}`", head.chars().take(40).collect::<String>()),
        ))
    }
}

/// Distill then validate each sample. Only samples passing both gates are
/// emitted; every other outcome is a report entry.
pub fn distill_and_validate(
    samples: &[Sample],
    image_root: Option<&Path>,
    distiller: &dyn ChatClient,
    checker: &dyn ChatClient,
) -> (Vec<Sample>, SynthReport) {
    let bound = distiller.concurrency_bound().min(checker.concurrency_bound()).max(1);
    let results = map_bounded(samples, bound, |s| -> Result<Option<Sample>> {
        let images = match image_root {
            Some(root) => load_images(s, root)?,
            None => Vec::new(),
        };
        let distilled = distill_cot(s, &images, distiller)?;
        Ok(match validate_cot(&distilled, checker)? {
            CotVerdict::Keep => Some(distilled),
            CotVerdict::Drop => None,
        })
    });
    let mut report = SynthReport {
        attempted: samples.len(),
        ..Default::default()
    };
    let mut out = Vec::new();
    for (s, r) in samples.iter().zip(results) {
        match r {
            Ok(Some(d)) => out.push(d),
            Ok(None) => report.drop(&s.id, "reasoning inconsistent with ground truth"),
            Err(e) => report.drop(&s.id, e),
        }
    }
    report.emitted = out.len();
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::StubClient;

    fn open() -> Sample {
        let mut s = Sample::new("o1", "slake", TaskKind::VqaOpen);
        s.question = Some("Which organ is abnormal?".into());
        s.answer = Some("Liver".into());
        s
    }

    fn mcq() -> Sample {
        let mut s = Sample::new("m1", "pmc", TaskKind::VqaMcq);
        s.question = Some("Which organ is abnormal?".into());
        s.options = Some(vec!["Spleen".into(), "Liver".into()]);
        s.answer = Some("Liver".into());
        s
    }

    #[test]
    fn rationale_attached() {
        let stub = StubClient::fixed("{\"reasoning\": \"r\", \"answer\": \"Liver\"}");
        let out = distill_cot(&open(), &[], &stub).unwrap();
        assert_eq!(out.rationale.as_deref(), Some("r"));
        assert_eq!(out.answer.as_deref(), Some("Liver"));
    }

    #[test]
    fn wrong_answer_or_empty_reasoning_rejected() {
        assert!(distill_cot(&open(), &[], &StubClient::fixed("{\"reasoning\": \"r\", \"answer\": \"Spleen\"}")).is_err());
        assert!(distill_cot(&open(), &[], &StubClient::fixed("{\"reasoning\": \"  \", \"answer\": \"Liver\"}")).is_err());
    }

    #[test]
    fn mcq_routes_to_mcq_prompt() {
        let stub = StubClient::fixed("{\"reasoning\": \"r\", \"answer\": \"B\"}");
        distill_cot(&mcq(), &[], &stub).unwrap();
        let p = &stub.prompts()[0];
        assert!(p.contains("Evaluate each answer option logically"));
        assert!(p.contains("Options:\nA. Spleen\nB. Liver\n"));
        let stub = StubClient::fixed("{\"reasoning\": \"r\", \"answer\": \"Liver\"}");
        distill_cot(&open(), &[], &stub).unwrap();
        assert!(!stub.prompts()[0].contains("Evaluate each answer option"));
    }

    #[test]
    fn verdicts() {
        let s = distill_cot(&open(), &[], &StubClient::fixed("{\"reasoning\": \"r\", \"answer\": \"Liver\"}")).unwrap();
        assert_eq!(
            validate_cot(&s, &StubClient::fixed("Consistent. The reasoning concludes X.")).unwrap(),
            CotVerdict::Keep
        );
        assert_eq!(
            validate_cot(&s, &StubClient::fixed("Inconsistent. Predicted Y.")).unwrap(),
            CotVerdict::Drop
        );
        assert!(validate_cot(&s, &StubClient::fixed("maybe")).is_err());
    }

    #[test]
    fn batch_is_fail_closed() {
        let distiller = StubClient::fixed("{\"reasoning\": \"r\", \"answer\": \"Liver\"}");
        let checker = StubClient::from_fn(|req| {
            Ok(if req.text().contains("Question: q1") {
                "Inconsistent. no".into()
            } else if req.text().contains("Question: q2") {
                "unsure".into()
            } else {
                "Consistent. ok".into()
            })
        });
        let samples: Vec<_> = (0..4)
            .map(|i| {
                let mut s = open();
                s.id = format!("s{i}");
                s.question = Some(format!("q{i}"));
                s
            })
            .collect();
        let (out, rep) = distill_and_validate(&samples, None, &distiller, &checker);
        assert_eq!(out.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), ["s0", "s3"]);
        assert_eq!(rep.dropped.len(), 2);
        assert!(rep.balanced());
    }
}
