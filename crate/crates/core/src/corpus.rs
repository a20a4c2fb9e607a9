//! Sample records and line-delimited manifest I/O.
//!
//! A manifest file holds one JSON record per line. Every record carries a
//! `schema_version` next to the sample fields; the manifest name is the file
//! stem. See `docs/manifest.md` for the full field list.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Caption,
    VqaOpen,
    VqaMcq,
    Report,
    Dialogue,
    TextQa,
    Reasoning,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Caption => "caption",
            TaskKind::VqaOpen => "vqa_open",
            TaskKind::VqaMcq => "vqa_mcq",
            TaskKind::Report => "report",
            TaskKind::Dialogue => "dialogue",
            TaskKind::TextQa => "text_qa",
            TaskKind::Reasoning => "reasoning",
        }
    }
}

/// Imaging modality. Closed set; anything unrecognised becomes `Other`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModalityTag {
    Xray,
    Ct,
    Mri,
    Ultrasound,
    Dermoscopy,
    Fundus,
    Histopathology,
    Microscopy,
    Oct,
    Endoscopy,
    Chart,
    PureText,
    Other,
}

impl ModalityTag {
    pub const ALL: [ModalityTag; 13] = [
        ModalityTag::Xray,
        ModalityTag::Ct,
        ModalityTag::Mri,
        ModalityTag::Ultrasound,
        ModalityTag::Dermoscopy,
        ModalityTag::Fundus,
        ModalityTag::Histopathology,
        ModalityTag::Microscopy,
        ModalityTag::Oct,
        ModalityTag::Endoscopy,
        ModalityTag::Chart,
        ModalityTag::PureText,
        ModalityTag::Other,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModalityTag::Xray => "xray",
            ModalityTag::Ct => "ct",
            ModalityTag::Mri => "mri",
            ModalityTag::Ultrasound => "ultrasound",
            ModalityTag::Dermoscopy => "dermoscopy",
            ModalityTag::Fundus => "fundus",
            ModalityTag::Histopathology => "histopathology",
            ModalityTag::Microscopy => "microscopy",
            ModalityTag::Oct => "oct",
            ModalityTag::Endoscopy => "endoscopy",
            ModalityTag::Chart => "chart",
            ModalityTag::PureText => "pure_text",
            ModalityTag::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Self {
        let key = s.trim().to_ascii_lowercase();
        Self::ALL.into_iter().find(|m| m.as_str() == key).unwrap_or(ModalityTag::Other)
    }
}

impl fmt::Display for ModalityTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for ModalityTag {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for ModalityTag {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(ModalityTag::parse(&s))
    }
}

/// 64-bit difference hash of an image. Serialized as 16 lowercase hex digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PerceptualHash(pub u64);

impl fmt::Display for PerceptualHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl Serialize for PerceptualHash {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PerceptualHash {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let digits = s.strip_prefix("0x").unwrap_or(&s);
        if digits.len() != 16 {
            return Err(serde::de::Error::custom("phash must be 16 hex digits"));
        }
        u64::from_str_radix(digits, 16)
            .map(PerceptualHash)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width_px: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height_px: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phash: Option<PerceptualHash>,
}

impl ImageRef {
    pub fn new(uri: impl Into<String>) -> Self {
        Self {
            uri: uri.into(),
            width_px: None,
            height_px: None,
            phash: None,
        }
    }

    pub fn with_dims(mut self, width: u32, height: u32) -> Self {
        self.width_px = Some(width);
        self.height_px = Some(height);
        self
    }

    /// Resolve `uri` against an image root. Absolute URIs are returned unchanged.
    pub fn resolve(&self, image_root: &Path) -> PathBuf {
        let p = Path::new(&self.uri);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            image_root.join(p)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub source_dataset: String,
    #[serde(default)]
    pub source_priority: i64,
    pub task_kind: TaskKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<ImageRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<ModalityTag>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl Sample {
    /// Bare sample with no images or text; callers fill in the rest.
    pub fn new(id: impl Into<String>, source_dataset: impl Into<String>, task_kind: TaskKind) -> Self {
        Self {
            id: id.into(),
            source_dataset: source_dataset.into(),
            source_priority: 0,
            task_kind,
            images: Vec::new(),
            question: None,
            options: None,
            answer: None,
            rationale: None,
            modality: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let id = self.id.as_str();
        if id.is_empty() {
            return Err(Error::invalid(id, "id", "must be non-empty"));
        }
        for img in &self.images {
            if img.uri.is_empty() {
                return Err(Error::invalid(id, "images", "image uri must be non-empty"));
            }
            if img.width_px == Some(0) {
                return Err(Error::invalid(id, "width_px", "must be >= 1"));
            }
            if img.height_px == Some(0) {
                return Err(Error::invalid(id, "height_px", "must be >= 1"));
            }
        }
        match self.task_kind {
            TaskKind::VqaMcq => {
                let options = match &self.options {
                    Some(o) if !o.is_empty() => o,
                    _ => return Err(Error::invalid(id, "options", "multiple-choice sample needs options")),
                };
                let answer = self
                    .answer
                    .as_deref()
                    .ok_or_else(|| Error::invalid(id, "answer", "multiple-choice sample needs an answer"))?;
                let hits = options.iter().filter(|o| o.as_str() == answer).count();
                if hits != 1 {
                    return Err(Error::invalid(
                        id,
                        "answer",
                        format!("must match exactly one option, matched {hits}"),
                    ));
                }
            }
            TaskKind::Caption => {
                if self.images.is_empty() {
                    return Err(Error::invalid(id, "images", "caption sample needs an image"));
                }
                if self.answer.is_none() {
                    return Err(Error::invalid(id, "answer", "caption sample needs caption text"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Index of the option equal to the answer, for multiple-choice samples.
    pub fn answer_index(&self) -> Option<usize> {
        let answer = self.answer.as_deref()?;
        self.options.as_ref()?.iter().position(|o| o == answer)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub schema_version: u32,
    pub samples: Vec<Sample>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, samples: Vec<Sample>) -> Self {
        Self {
            name: name.into(),
            schema_version: SCHEMA_VERSION,
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Same name and schema, different samples.
    pub fn with_samples(&self, samples: Vec<Sample>) -> Self {
        Self {
            name: self.name.clone(),
            schema_version: self.schema_version,
            samples,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::UnsupportedSchema(self.schema_version));
        }
        let mut seen = HashSet::with_capacity(self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            s.validate()?;
            if !seen.insert(s.id.as_str()) {
                return Err(Error::DuplicateId {
                    id: s.id.clone(),
                    line: i + 1,
                });
            }
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct RecordOut<'a> {
    schema_version: u32,
    #[serde(flatten)]
    sample: &'a Sample,
}

#[derive(Deserialize)]
struct RecordIn {
    schema_version: u32,
    #[serde(flatten)]
    sample: Sample,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    read_manifest(BufReader::new(file), name, path)
}

fn read_manifest<R: BufRead>(reader: R, name: String, path: &Path) -> Result<DatasetManifest> {
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordIn = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if rec.schema_version != SCHEMA_VERSION {
            return Err(Error::Parse {
                line: line_no,
                message: format!("unsupported schema_version {}", rec.schema_version),
            });
        }
        rec.sample.validate()?;
        if !seen.insert(rec.sample.id.clone()) {
            return Err(Error::DuplicateId {
                id: rec.sample.id,
                line: line_no,
            });
        }
        samples.push(rec.sample);
    }
    Ok(DatasetManifest {
        name,
        schema_version: SCHEMA_VERSION,
        samples,
    })
}

pub fn write_manifest(m: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    m.validate()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in &m.samples {
        let rec = RecordOut {
            schema_version: m.schema_version,
            sample: s,
        };
        let line = serde_json::to_string(&rec).expect("sample serialization is infallible");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
