//! Synthesis pipelines: long-form captions, OCR instruction images, VQA
//! generation (template and self-instruct) and CoT distillation with a
//! consistency gate. Every client-backed gate is fail-closed.

pub mod caption;
pub mod cot;
pub mod ocr;
pub mod roi;
pub mod vqa;

use serde::{Deserialize, Serialize};

pub use caption::{caption_pipeline, stage1_short_caption, CaptionInput, CaptionRule};
pub use cot::{distill_and_validate, distill_cot, validate_cot, CotVerdict};
pub use ocr::{render_question_image, synthesize_ocr_samples, OcrQuestion, RenderConfig};
pub use roi::{mask_to_bbox, render_bbox, slice_volume, BBox, Mask, Roi, RoiKind, Volume};
pub use vqa::{self_instruct_vqa, template_vqa, CaptionedImage, LabelKind, LabeledRecord, QaTemplate};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dropped {
    pub id: String,
    pub reason: String,
}

/// Yield accounting for a synthesis run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthReport {
    pub attempted: usize,
    pub emitted: usize,
    pub dropped: Vec<Dropped>,
}

impl SynthReport {
    pub(crate) fn drop(&mut self, id: &str, reason: impl ToString) {
        self.dropped.push(Dropped {
            id: id.to_string(),
            reason: reason.to_string(),
        });
    }

    pub fn balanced(&self) -> bool {
        self.attempted == self.emitted + self.dropped.len()
    }
}

/// First balanced `{...}` in `text` that parses as a JSON object. Annotators
/// often wrap their payload in prose or code fences.
pub fn extract_json_object(text: &str) -> Option<serde_json::Map<String, serde_json::Value>> {
    let bytes = text.as_bytes();
    for start in bytes.iter().enumerate().filter(|(_, &b)| b == b'{').map(|(i, _)| i) {
        let mut depth = 0usize;
        let mut in_str = false;
        let mut escaped = false;
        for (off, &b) in bytes[start..].iter().enumerate() {
            if in_str {
                match b {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_str = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_str = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        let candidate = &text[start..start + off + 1];
                        if let Ok(serde_json::Value::Object(map)) = serde_json::from_str(candidate) {
                            return Some(map);
                        }
                        break;
                    }
                }
                _ => {}
            }
        }
    }
    None
}

/// Lettered option block: `A. first\nB. second`.
pub fn letter_options(options: &[String]) -> String {
    options
        .iter()
        .enumerate()
        .map(|(i, o)| format!("{}. {o}", option_letter(i)))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn option_letter(i: usize) -> char {
    (b'A' + (i % 26) as u8) as char
}

/// Per-item RNG seed: independent of processing order.
pub(crate) fn item_seed(seed: u64, id: &str) -> u64 {
    crate::text::mix64(seed ^ crate::text::fnv1a64(id.as_bytes()))
}
