//! Prompt assets shipped with the toolkit.
//!
//! Each asset lives verbatim under `prompts/` and is compiled in. Slots are
//! written `{name}` and filled by [`fill`], which only touches the slots it is
//! given, so literal braces in a prompt (JSON examples) survive untouched.

use crate::corpus::ModalityTag;

macro_rules! asset {
    ($file:literal) => {
        include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/prompts/", $file))
    };
}

pub const DIALOGUE_CLEANING: &str = asset!("dialogue_cleaning.txt");
pub const SELF_INSTRUCT_VQA: &str = asset!("self_instruct_vqa.txt");
pub const COT_OPEN: &str = asset!("cot_open.txt");
pub const COT_MCQ: &str = asset!("cot_mcq.txt");
pub const COT_CHECK: &str = asset!("cot_check.txt");
pub const CAPTION_STAGE3: &str = asset!("caption_stage3.txt");
pub const CAPTION_STAGE5: &str = asset!("caption_stage5.txt");
pub const JUDGE: &str = asset!("judge.txt");

/// Every shipped asset with its file name, for golden checks and `version`.
pub const ASSETS: &[(&str, &str)] = &[
    ("dialogue_cleaning.txt", DIALOGUE_CLEANING),
    ("self_instruct_vqa.txt", SELF_INSTRUCT_VQA),
    ("cot_open.txt", COT_OPEN),
    ("cot_mcq.txt", COT_MCQ),
    ("cot_check.txt", COT_CHECK),
    ("caption_stage3.txt", CAPTION_STAGE3),
    ("stage4_mri.txt", asset!("stage4_mri.txt")),
    ("stage4_xray.txt", asset!("stage4_xray.txt")),
    ("stage4_ct.txt", asset!("stage4_ct.txt")),
    ("stage4_histopathology.txt", asset!("stage4_histopathology.txt")),
    ("stage4_skin.txt", asset!("stage4_skin.txt")),
    ("stage4_knee_xray.txt", asset!("stage4_knee_xray.txt")),
    ("stage4_gastrointestinal.txt", asset!("stage4_gastrointestinal.txt")),
    ("stage4_fundus.txt", asset!("stage4_fundus.txt")),
    ("stage4_ultrasound.txt", asset!("stage4_ultrasound.txt")),
    ("caption_stage5.txt", CAPTION_STAGE5),
    ("features_mri.txt", asset!("features_mri.txt")),
    ("features_xray.txt", asset!("features_xray.txt")),
    ("features_ct.txt", asset!("features_ct.txt")),
    ("features_histopathology.txt", asset!("features_histopathology.txt")),
    ("features_skin.txt", asset!("features_skin.txt")),
    ("features_knee_xray.txt", asset!("features_knee_xray.txt")),
    ("features_gastrointestinal.txt", asset!("features_gastrointestinal.txt")),
    ("features_fundus.txt", asset!("features_fundus.txt")),
    ("features_ultrasound.txt", asset!("features_ultrasound.txt")),
    ("judge.txt", JUDGE),
];

/// Asset text without the file's trailing newline.
pub fn body(asset: &str) -> &str {
    asset.strip_suffix('\n').unwrap_or(asset)
}

/// Substitute `{name}` slots. Unknown braces are left alone.
pub fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = body(template).to_string();
    for (name, value) in slots {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    out
}

/// Image family used to pick the doctor-preference instruction and feature list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFamily {
    Mri,
    Xray,
    KneeXray,
    Ct,
    Histopathology,
    Skin,
    Gastrointestinal,
    Fundus,
    Ultrasound,
    Generic,
}

impl ImageFamily {
    /// Route a modality to its family. Knee radiographs are flagged by the
    /// caller because the modality tag alone cannot tell them apart.
    pub fn route(modality: ModalityTag, knee: bool) -> Self {
        match modality {
            ModalityTag::Xray if knee => ImageFamily::KneeXray,
            ModalityTag::Xray => ImageFamily::Xray,
            ModalityTag::Mri => ImageFamily::Mri,
            ModalityTag::Ct => ImageFamily::Ct,
            ModalityTag::Histopathology => ImageFamily::Histopathology,
            ModalityTag::Dermoscopy => ImageFamily::Skin,
            ModalityTag::Endoscopy => ImageFamily::Gastrointestinal,
            ModalityTag::Fundus => ImageFamily::Fundus,
            ModalityTag::Ultrasound => ImageFamily::Ultrasound,
            _ => ImageFamily::Generic,
        }
    }

    pub fn doctor_instruction(&self) -> &'static str {
        let name = match self {
            ImageFamily::Generic => return GENERIC_INSTRUCTION,
            other => other.asset_suffix(),
        };
        lookup(&format!("stage4_{name}.txt"))
    }

    pub fn preferred_features(&self) -> &'static str {
        let name = match self {
            ImageFamily::Generic => return GENERIC_FEATURES,
            other => other.asset_suffix(),
        };
        lookup(&format!("features_{name}.txt"))
    }

    fn asset_suffix(&self) -> &'static str {
        match self {
            ImageFamily::Mri => "mri",
            ImageFamily::Xray => "xray",
            ImageFamily::KneeXray => "knee_xray",
            ImageFamily::Ct => "ct",
            ImageFamily::Histopathology => "histopathology",
            ImageFamily::Skin => "skin",
            ImageFamily::Gastrointestinal => "gastrointestinal",
            ImageFamily::Fundus => "fundus",
            ImageFamily::Ultrasound => "ultrasound",
            ImageFamily::Generic => "generic",
        }
    }
}

fn lookup(name: &str) -> &'static str {
    body(
        ASSETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, a)| *a)
            .expect("asset table covers every image family"),
    )
}

/// Fallback for modalities without a dedicated instruction set.
pub const GENERIC_INSTRUCTION: &str = "Write a description of the medical image to include the following information, if these information are visually discernible from the image:
1. The imaging modality and the plane or view of the image.
2. The anatomical structures visible and their normal or abnormal appearance.
3. Any abnormal findings, including their location, size, shape, and potential effects on surrounding structures.
4. Any medical devices, annotations, or textual data visible in the image.";

pub const GENERIC_FEATURES: &str = "1. The imaging modality and view; 2. Anatomical structures visible and their appearance; 3. Any abnormal findings including their location, size and shape; 4. Visible devices or textual data";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_only_touches_named_slots() {
        let out = fill(COT_OPEN, &[("question", "Q?"), ("answer", "A")]);
        assert!(out.ends_with("Question: Q?\nGroundtruth answer: A"));
        assert!(out.contains("{\n\t\"reasoning\""));
    }

    #[test]
    fn every_family_resolves() {
        for m in ModalityTag::ALL {
            let fam = ImageFamily::route(m, false);
            assert!(!fam.doctor_instruction().is_empty());
            assert!(!fam.preferred_features().is_empty());
        }
        assert!(ImageFamily::KneeXray.doctor_instruction().contains("knee X-ray"));
        assert_eq!(ImageFamily::route(ModalityTag::Oct, false), ImageFamily::Generic);
    }
}
