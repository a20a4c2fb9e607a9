//! Long-form caption synthesis.
//!
//! Stage 1 fills a per-dataset rule from metadata, stage 2 overlays RoIs,
//! stage 3 asks for a context-grounded description, stage 4 for a
//! family-specific one, and stage 5 merges the two with stage 3 taking
//! precedence.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::client::{map_bounded, ChatClient, ChatRequest};
use crate::corpus::{ImageRef, ModalityTag, Sample, TaskKind};
use crate::error::{Error, Result};
use crate::prompts::{self, ImageFamily};

use super::roi::{render_bbox, Roi};
use super::{extract_json_object, SynthReport};

/// Metadata keys that describe the patient rather than the image.
pub const EXCLUDED_KEYS: &[&str] = &[
    "age",
    "patient_age",
    "name",
    "patient_name",
    "patient_id",
    "identity",
    "birth_date",
    "race",
    "ethnicity",
];

fn slot_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([^{}]+)\}").expect("valid regex"))
}

/// A dataset's stage-1 caption rule: a template with `{key}` slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRule {
    pub dataset: String,
    pub template: String,
}

impl CaptionRule {
    /// Registers a rule. Templates that reference non-visual patient
    /// metadata are rejected here rather than at fill time.
    pub fn new(dataset: impl Into<String>, template: impl Into<String>) -> Result<Self> {
        let rule = Self {
            dataset: dataset.into(),
            template: template.into(),
        };
        if let Some(bad) = rule.slots().into_iter().find(|s| EXCLUDED_KEYS.contains(&s.as_str())) {
            return Err(Error::ExcludedSlot(bad));
        }
        Ok(rule)
    }

    pub fn slots(&self) -> Vec<String> {
        slot_re().captures_iter(&self.template).map(|c| c[1].to_string()).collect()
    }
}

/// Rule for the UV-damage whole-slide dataset.
pub fn cpd_rule() -> CaptionRule {
    CaptionRule::new(
        "cpd",
        "A WSI image of carcinogenic DNA damage caused by ultraviolet (UV) radiation. \
         The image is stained for {staining}. \
         The relative amount of damaged nuclei (bounded in [0,1]) is {nuclei score}.",
    )
    .expect("built-in rule is valid")
}

pub fn stage1_short_caption(meta: &BTreeMap<String, String>, rule: &CaptionRule) -> Result<String> {
    let mut missing = None;
    let out = slot_re().replace_all(&rule.template, |c: &regex::Captures| match meta.get(&c[1]) {
        Some(v) => v.clone(),
        None => {
            missing.get_or_insert_with(|| c[1].to_string());
            String::new()
        }
    });
    match missing {
        Some(slot) => Err(Error::MissingSlot(slot)),
        None => Ok(out.into_owned()),
    }
}

/// Everything the caption stages need for one image.
#[derive(Debug, Clone)]
pub struct CaptionInput {
    pub id: String,
    pub source_dataset: String,
    pub image: ImageRef,
    pub image_bytes: Vec<u8>,
    pub modality: ModalityTag,
    pub knee: bool,
    pub disease_or_organ: String,
    pub knowledge: String,
    /// Stage-1 output.
    pub coarse_caption: String,
    pub rois: Vec<Roi>,
}

impl CaptionInput {
    fn context(&self) -> String {
        format!(
            "Disease or organ: {}\nKnowledge: {}\nCoarse Caption: {}\nModality: {}",
            self.disease_or_organ,
            self.knowledge,
            self.coarse_caption,
            self.modality.as_str()
        )
    }
}

fn caption_text(reply: &str) -> String {
    extract_json_object(reply)
        .and_then(|m| m.get("caption").and_then(|v| v.as_str()).map(str::to_string))
        .unwrap_or_else(|| reply.trim().to_string())
}

fn caption_one(input: &CaptionInput, client: &dyn ChatClient) -> Result<Sample> {
    let family = ImageFamily::route(input.modality, input.knee);
    let context = input.context();

    let stage3_image = if input.rois.is_empty() {
        input.image_bytes.clone()
    } else {
        render_bbox(&input.image_bytes, &input.rois)?
    };
    let stage3 =
        client.complete(&ChatRequest::user(format!("{}\n\n{context}", prompts::body(prompts::CAPTION_STAGE3))).with_png(&stage3_image))?;
    let stage3 = caption_text(&stage3);

    let stage4 = client.complete(&ChatRequest::user(family.doctor_instruction()).with_png(&input.image_bytes))?;
    let stage4 = caption_text(&stage4);

    let summary_prompt = format!(
        "{}\n\n{context}\nDetailed Captions:\nCaption 0: {stage4}\nCaption 1: {stage3}",
        prompts::fill(
            prompts::CAPTION_STAGE5,
            &[("doctor_preferred_features", family.preferred_features())]
        )
    );
    let stage5 = client.complete(&ChatRequest::user(summary_prompt).with_png(&input.image_bytes))?;
    let caption = caption_text(&stage5);
    if caption.is_empty() {
        return Err(Error::Format {
            context: "caption summary",
            message: "empty caption".into(),
        });
    }

    let mut s = Sample::new(&input.id, &input.source_dataset, TaskKind::Caption);
    s.images.push(input.image.clone());
    s.answer = Some(caption);
    s.modality = Some(input.modality);
    Ok(s)
}

/// Run stages 3 to 5 for every input. Failures skip the item and are reported.
pub fn caption_pipeline(inputs: &[CaptionInput], client: &dyn ChatClient) -> (Vec<Sample>, SynthReport) {
    let results = map_bounded(inputs, client.concurrency_bound(), |i| caption_one(i, client));
    let mut report = SynthReport {
        attempted: inputs.len(),
        ..Default::default()
    };
    let mut out = Vec::new();
    for (input, r) in inputs.iter().zip(results) {
        match r {
            Ok(s) => out.push(s),
            Err(e) => report.drop(&input.id, e),
        }
    }
    report.emitted = out.len();
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::StubClient;
    use crate::synth::roi::{encode_png, BBox};
    use image::{Rgb, RgbImage};

    #[test]
    fn cpd_example() {
        let meta = BTreeMap::from([
            ("staining".to_string(), "H&E".to_string()),
            ("nuclei score".to_string(), "0.35".to_string()),
        ]);
        assert_eq!(
            stage1_short_caption(&meta, &cpd_rule()).unwrap(),
            "A WSI image of carcinogenic DNA damage caused by ultraviolet (UV) radiation. The image is stained for H&E. The relative amount of damaged nuclei (bounded in [0,1]) is 0.35."
        );
    }

    #[test]
    fn constant_template_and_missing_slot() {
        let r = CaptionRule::new("x", "A chest radiograph.").unwrap();
        assert_eq!(stage1_short_caption(&BTreeMap::new(), &r).unwrap(), "A chest radiograph.");
        let r = CaptionRule::new("x", "Stained for {stain}.").unwrap();
        assert!(matches!(stage1_short_caption(&BTreeMap::new(), &r), Err(Error::MissingSlot(s)) if s == "stain"));
    }

    #[test]
    fn excluded_keys_rejected_at_registration() {
        assert!(matches!(CaptionRule::new("x", "Patient aged {age}."), Err(Error::ExcludedSlot(k)) if k == "age"));
    }

    fn input(rois: Vec<Roi>) -> CaptionInput {
        let img = RgbImage::from_pixel(32, 32, Rgb([40, 40, 40]));
        CaptionInput {
            id: "c1".into(),
            source_dataset: "kvasir".into(),
            image: ImageRef::new("c1.png").with_dims(32, 32),
            image_bytes: encode_png(&img),
            modality: ModalityTag::Endoscopy,
            knee: false,
            disease_or_organ: "polyp".into(),
            knowledge: "Polyps are growths on the colon lining.".into(),
            coarse_caption: "An endoscopy image showing a polyp.".into(),
            rois,
        }
    }

    fn staged_stub() -> StubClient {
        StubClient::from_fn(|req| {
            let t = req.text();
            Ok(if t.starts_with(prompts::body(prompts::CAPTION_STAGE3).lines().next().unwrap()) {
                "{\"caption\": \"S3\"}".into()
            } else if t.contains("Detailed Captions:\nCaption 0") {
                "{\"caption\": \"FINAL\"}".into()
            } else {
                "S4 text".into()
            })
        })
    }

    #[test]
    fn orchestration_and_prompts() {
        let stub = staged_stub();
        let (out, rep) = caption_pipeline(&[input(vec![])], &stub);
        assert_eq!(out[0].answer.as_deref(), Some("FINAL"));
        assert!(out[0].validate().is_ok());
        assert!(rep.balanced());
        let reqs = stub.requests();
        assert_eq!(reqs.len(), 3);
        assert!(reqs[0].text().contains("Coarse Caption: An endoscopy image showing a polyp."));
        assert_eq!(reqs[1].text(), ImageFamily::Gastrointestinal.doctor_instruction());
        let summary = reqs[2].text();
        assert!(summary.contains(ImageFamily::Gastrointestinal.preferred_features()));
        assert!(summary.contains("Caption 0: S4 text\nCaption 1: S3"));
        assert!(!summary.contains("{doctor_preferred_features}"));
        // No RoIs: stage 3 sees the original image.
        assert_eq!(reqs[0].image_urls(), reqs[1].image_urls());
    }

    #[test]
    fn rois_change_stage3_image_only() {
        let stub = staged_stub();
        caption_pipeline(&[input(vec![Roi::from_bbox(BBox::new(4, 4, 20, 20))])], &stub);
        let reqs = stub.requests();
        assert_ne!(reqs[0].image_urls(), reqs[1].image_urls());
        assert_eq!(reqs[1].image_urls(), reqs[2].image_urls());
    }

    #[test]
    fn client_failure_skips_with_report() {
        let (out, rep) = caption_pipeline(&[input(vec![])], &StubClient::failing("down"));
        assert!(out.is_empty());
        assert_eq!(rep.dropped.len(), 1);
        assert!(rep.balanced());
    }
}
