//! OCR instruction data: text questions rendered to images, kept only when a
//! reasoner reproduces the ground-truth answer.

use std::io::Cursor;
use std::path::Path;
use std::sync::OnceLock;

use font8x8::{UnicodeFonts, BASIC_FONTS, LATIN_FONTS};
use image::{GrayImage, ImageFormat, Luma};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::client::{map_bounded, ChatClient, ChatRequest};
use crate::corpus::{ImageRef, ModalityTag, Sample, TaskKind};
use crate::error::{Error, Result};
use crate::text::normalize_text;

use super::{letter_options, SynthReport};

const GLYPH: u32 = 8;

pub const OCR_INSTRUCTION: &str = "Explain the question in the photograph";

pub const REASONER_PROMPT: &str = "Solve the following question. Think it through step by step, \
then finish with a final line of the form \"The correct answer is X\".\n\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Characters per line.
    pub columns: u32,
    pub scale: u32,
    pub margin: u32,
    pub line_gap: u32,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            columns: 48,
            scale: 2,
            margin: 8,
            line_gap: 4,
        }
    }
}

/// Greedy word wrap at `columns` characters; explicit newlines are kept and
/// words longer than a line are split.
pub fn wrap(text: &str, columns: usize) -> Vec<String> {
    let columns = columns.max(1);
    let mut lines = Vec::new();
    for para in text.split('\n') {
        let mut line = String::new();
        let mut len = 0usize;
        for word in para.split_whitespace() {
            let mut chars: Vec<char> = word.chars().collect();
            while chars.len() > columns {
                if len > 0 {
                    lines.push(std::mem::take(&mut line));
                    len = 0;
                }
                lines.push(chars.drain(..columns).collect());
            }
            let wlen = chars.len();
            if len > 0 && len + 1 + wlen > columns {
                lines.push(std::mem::take(&mut line));
                len = 0;
            }
            if len > 0 {
                line.push(' ');
                len += 1;
            }
            line.extend(chars);
            len += wlen;
        }
        lines.push(line);
    }
    lines
}

fn glyph(c: char) -> [u8; 8] {
    BASIC_FONTS
        .get(c)
        .or_else(|| LATIN_FONTS.get(c))
        .or_else(|| BASIC_FONTS.get('?'))
        .expect("basic font has '?'")
}

/// Rasterize text in a fixed 8x8 monospace face, black on white, grayscale PNG.
pub fn render_question_image(text: &str, cfg: &RenderConfig) -> Vec<u8> {
    let lines = wrap(text, cfg.columns as usize);
    let cell = GLYPH * cfg.scale.max(1);
    let width = 2 * cfg.margin + cfg.columns * cell;
    let rows = lines.len() as u32;
    let height = 2 * cfg.margin + rows * cell + rows.saturating_sub(1) * cfg.line_gap;
    let mut img = GrayImage::from_pixel(width, height, Luma([255]));
    for (row, line) in lines.iter().enumerate() {
        let y0 = cfg.margin + row as u32 * (cell + cfg.line_gap);
        for (col, c) in line.chars().enumerate() {
            let x0 = cfg.margin + col as u32 * cell;
            for (gy, bits) in glyph(c).iter().enumerate() {
                for gx in 0..GLYPH {
                    if bits >> gx & 1 == 1 {
                        for dy in 0..cell / GLYPH {
                            for dx in 0..cell / GLYPH {
                                img.put_pixel(x0 + gx * cfg.scale + dx, y0 + gy as u32 * cfg.scale + dy, Luma([0]));
                            }
                        }
                    }
                }
            }
        }
    }
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .expect("png encoding to memory cannot fail");
    buf.into_inner()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcrQuestion {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    /// Ground truth. For multiple choice this is the option letter.
    pub answer: String,
}

impl OcrQuestion {
    /// Stem followed by one option per line.
    pub fn display_text(&self) -> String {
        match &self.options {
            Some(o) if !o.is_empty() => format!("{}\n{}", self.question, letter_options(o)),
            _ => self.question.clone(),
        }
    }
}

/// Final answer from a reasoner reply: the rest of the line after the last
/// "answer is" or "answer:".
pub fn extract_final_answer(reply: &str) -> Option<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?i)answer is|answer:").expect("valid regex"));
    let last = re.find_iter(reply).last()?;
    let line = reply[last.end()..].lines().next().unwrap_or("");
    let cleaned = line
        .trim()
        .trim_start_matches(':')
        .trim()
        .trim_end_matches('.')
        .trim_matches(|c: char| c == '*' || c == '(' || c == ')' || c.is_whitespace());
    (!cleaned.is_empty()).then(|| cleaned.to_string())
}

fn ocr_one(q: &OcrQuestion, client: &dyn ChatClient) -> Result<Option<String>> {
    let reply = client.complete(&ChatRequest::user(format!("{REASONER_PROMPT}{}", q.display_text())))?;
    let got = extract_final_answer(&reply).ok_or_else(|| Error::Format {
        context: "ocr reasoner",
        message: "no final answer".into(),
    })?;
    Ok((normalize_text(&got) == normalize_text(&q.answer)).then(|| reply.trim().to_string()))
}

/// Render each question, ask the reasoner, keep exact matches. Images are
/// written to `image_dir/<id>.png`.
pub fn synthesize_ocr_samples(
    questions: &[OcrQuestion],
    client: &dyn ChatClient,
    cfg: &RenderConfig,
    image_dir: &Path,
    source_dataset: &str,
) -> Result<(Vec<Sample>, SynthReport)> {
    let replies = map_bounded(questions, client.concurrency_bound(), |q| ocr_one(q, client));
    let mut report = SynthReport {
        attempted: questions.len(),
        ..Default::default()
    };
    let mut out = Vec::new();
    for (q, r) in questions.iter().zip(replies) {
        let response = match r {
            Ok(Some(resp)) => resp,
            Ok(None) => {
                report.drop(&q.id, "answer does not match ground truth");
                continue;
            }
            Err(e) => {
                report.drop(&q.id, e);
                continue;
            }
        };
        let png = render_question_image(&q.display_text(), cfg);
        let (w, h) = image::load_from_memory(&png)
            .map(|i| (i.width(), i.height()))
            .map_err(|e| Error::Image(e.to_string()))?;
        let name = format!("{}.png", q.id);
        let path = image_dir.join(&name);
        std::fs::write(&path, &png).map_err(|e| Error::io(&path, e))?;
        let mut s = Sample::new(&q.id, source_dataset, TaskKind::Reasoning);
        s.images.push(ImageRef::new(name).with_dims(w, h));
        s.question = Some(OCR_INSTRUCTION.to_string());
        s.answer = Some(response);
        s.modality = Some(ModalityTag::PureText);
        s.meta.insert("ground_truth".into(), q.answer.clone());
        out.push(s);
    }
    report.emitted = out.len();
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::StubClient;

    fn dims(png: &[u8]) -> (u32, u32) {
        let i = image::load_from_memory(png).unwrap();
        (i.width(), i.height())
    }

    #[test]
    fn rendering_is_deterministic_and_wraps() {
        let cfg = RenderConfig::default();
        let a = render_question_image("Which vitamin deficiency causes scurvy?", &cfg);
        assert_eq!(a, render_question_image("Which vitamin deficiency causes scurvy?", &cfg));
        let long = render_question_image(&"Which vitamin deficiency causes scurvy? ".repeat(6), &cfg);
        assert_eq!(dims(&a).0, dims(&long).0);
        assert!(dims(&long).1 > dims(&a).1);
    }

    #[test]
    fn options_on_separate_lines() {
        let q = OcrQuestion {
            id: "q".into(),
            question: "Pick one.".into(),
            options: Some(vec!["EeFfGg".into(), "Hh".into(), "Ii".into(), "Jj".into()]),
            answer: "A".into(),
        };
        assert_eq!(wrap(&q.display_text(), 48), ["Pick one.", "A. EeFfGg", "B. Hh", "C. Ii", "D. Jj"]);
    }

    #[test]
    fn wrap_respects_width() {
        let lines = wrap(&"abcdefghij ".repeat(20), 16);
        assert!(lines.iter().all(|l| l.chars().count() <= 16));
        assert_eq!(wrap("x".repeat(20).as_str(), 8), ["xxxxxxxx", "xxxxxxxx", "xxxx"]);
    }

    #[test]
    fn final_answer_extraction() {
        assert_eq!(extract_final_answer("Step 1...\nThe correct answer is D.").as_deref(), Some("D"));
        assert_eq!(extract_final_answer("so the answer is (B)").as_deref(), Some("B"));
        assert_eq!(extract_final_answer("Answer: **vitamin C**").as_deref(), Some("vitamin C"));
        assert_eq!(extract_final_answer("no idea"), None);
    }

    fn questions(n: usize) -> Vec<OcrQuestion> {
        (0..n)
            .map(|i| OcrQuestion {
                id: format!("q{i}"),
                question: format!("Question number {i}?"),
                options: Some(vec!["a".into(), "b".into(), "c".into(), "d".into()]),
                answer: "D".into(),
            })
            .collect()
    }

    #[test]
    fn only_matching_answers_kept() {
        let dir = tempfile::tempdir().unwrap();
        let stub = StubClient::from_fn(|req| {
            let t = req.text();
            let n: usize = t.split("number ").nth(1).unwrap().split('?').next().unwrap().parse().unwrap();
            Ok(if n < 7 {
                "The correct answer is D".into()
            } else {
                "The correct answer is C".into()
            })
        });
        let (out, rep) = synthesize_ocr_samples(&questions(10), &stub, &RenderConfig::default(), dir.path(), "ocr").unwrap();
        assert_eq!(out.len(), 7);
        assert!(rep.balanced());
        for s in &out {
            s.validate().unwrap();
            let bytes = std::fs::read(dir.path().join(&s.images[0].uri)).unwrap();
            let q = questions(10).into_iter().find(|q| q.id == s.id).unwrap();
            assert_eq!(bytes, render_question_image(&q.display_text(), &RenderConfig::default()));
        }
    }

    #[test]
    fn client_failure_drops() {
        let dir = tempfile::tempdir().unwrap();
        let (out, rep) = synthesize_ocr_samples(
            &questions(2),
            &StubClient::failing("x"),
            &RenderConfig::default(),
            dir.path(),
            "ocr",
        )
        .unwrap();
        assert!(out.is_empty());
        assert_eq!(rep.dropped.len(), 2);
    }
}
