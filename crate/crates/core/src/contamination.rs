//! Benchmark index and training-corpus decontamination.
//!
//! Matching is exact: an image collides when its perceptual hash is in the
//! index, a text when the 64-bit key of its normalized form is. QA samples are
//! keyed on the question; text-only samples without a question on the answer.
//! Answers of QA samples are never keys.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::{DatasetManifest, PerceptualHash, Sample};
use crate::error::{Error, Result};
use crate::filter::{partition, FilterReport};
use crate::text::{fnv1a64, normalize_text};

pub const RULE_CONTAMINATION: &str = "contamination";
pub const INDEX_MAGIC: &[u8; 5] = b"MFIX1";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BenchmarkIndex {
    pub image_hashes: BTreeSet<PerceptualHash>,
    pub text_keys: BTreeSet<u64>,
    pub benchmark_names: Vec<String>,
}

pub fn text_key(s: &str) -> u64 {
    fnv1a64(normalize_text(s).as_bytes())
}

/// The text a sample is matched on, if any.
pub fn match_text(s: &Sample) -> Option<&str> {
    match (&s.question, &s.answer) {
        (Some(q), _) if !q.trim().is_empty() => Some(q),
        (_, Some(a)) if s.images.is_empty() && !a.trim().is_empty() => Some(a),
        _ => None,
    }
}

pub fn build_index(benchmarks: &[DatasetManifest]) -> Result<BenchmarkIndex> {
    let mut idx = BenchmarkIndex::default();
    for b in benchmarks {
        idx.benchmark_names.push(b.name.clone());
        for s in &b.samples {
            for img in &s.images {
                let h = img.phash.ok_or_else(|| Error::MissingHash {
                    id: s.id.clone(),
                    uri: img.uri.clone(),
                })?;
                idx.image_hashes.insert(h);
            }
            if let Some(t) = match_text(s) {
                idx.text_keys.insert(text_key(t));
            }
        }
    }
    Ok(idx)
}

impl BenchmarkIndex {
    pub fn is_empty(&self) -> bool {
        self.image_hashes.is_empty() && self.text_keys.is_empty()
    }

    pub fn contaminates(&self, s: &Sample) -> bool {
        s.images.iter().any(|img| img.phash.is_some_and(|h| self.image_hashes.contains(&h)))
            || match_text(s).is_some_and(|t| self.text_keys.contains(&text_key(t)))
    }

    /// `MFIX1` | u32 name count | (u32 len, utf-8 bytes)* | u64 image count |
    /// u64* | u64 text-key count | u64*. Little-endian, sets in ascending order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + 4 + 16 + 8 * (self.image_hashes.len() + self.text_keys.len()));
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&(self.benchmark_names.len() as u32).to_le_bytes());
        for n in &self.benchmark_names {
            out.extend_from_slice(&(n.len() as u32).to_le_bytes());
            out.extend_from_slice(n.as_bytes());
        }
        out.extend_from_slice(&(self.image_hashes.len() as u64).to_le_bytes());
        for h in &self.image_hashes {
            out.extend_from_slice(&h.0.to_le_bytes());
        }
        out.extend_from_slice(&(self.text_keys.len() as u64).to_le_bytes());
        for k in &self.text_keys {
            out.extend_from_slice(&k.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(5)? != INDEX_MAGIC {
            return Err(Error::Index("bad magic header".into()));
        }
        let n_names = r.u32()? as usize;
        let mut benchmark_names = Vec::with_capacity(n_names.min(1024));
        for _ in 0..n_names {
            let len = r.u32()? as usize;
            let raw = r.take(len)?;
            benchmark_names.push(String::from_utf8(raw.to_vec()).map_err(|_| Error::Index("benchmark name is not utf-8".into()))?);
        }
        let n_img = r.u64()?;
        let image_hashes = (0..n_img).map(|_| r.u64().map(PerceptualHash)).collect::<Result<_>>()?;
        let n_txt = r.u64()?;
        let text_keys = (0..n_txt).map(|_| r.u64()).collect::<Result<_>>()?;
        if r.pos != bytes.len() {
            return Err(Error::Index("trailing bytes".into()));
        }
        Ok(Self {
            image_hashes,
            text_keys,
            benchmark_names,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Index("truncated index".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Remove every sample that overlaps the index.
pub fn scrub(m: &DatasetManifest, idx: &BenchmarkIndex) -> (DatasetManifest, FilterReport) {
    partition(m, RULE_CONTAMINATION, |s| Ok(!idx.contaminates(s))).expect("scrub predicate is infallible")
}

/// Image hashes and text keys of a corpus, for post-scrub emptiness checks.
pub fn corpus_keys(m: &DatasetManifest) -> (BTreeSet<PerceptualHash>, BTreeSet<u64>) {
    let images = m
        .samples
        .par_iter()
        .flat_map_iter(|s| s.images.iter().filter_map(|i| i.phash))
        .collect();
    let texts = m.samples.par_iter().filter_map(|s| match_text(s).map(text_key)).collect();
    (images, texts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ImageRef, TaskKind};
    use proptest::prelude::*;

    fn vqa(id: &str, hash: u64, q: &str) -> Sample {
        let mut s = Sample::new(id, "d", TaskKind::VqaOpen);
        let mut img = ImageRef::new(format!("{id}.png")).with_dims(100, 100);
        img.phash = Some(PerceptualHash(hash));
        s.images.push(img);
        s.question = Some(q.into());
        s.answer = Some("yes".into());
        s
    }

    fn bench() -> DatasetManifest {
        DatasetManifest::new(
            "vqa_rad",
            vec![
                vqa("b1", 0xaa, "Is there a pleural effusion?"),
                vqa("b2", 0xbb, "What organ is enlarged?"),
                vqa("b3", 0xaa, "Is the heart enlarged?"),
            ],
        )
    }

    #[test]
    fn empty_benchmark_list_gives_empty_index() {
        let idx = build_index(&[]).unwrap();
        assert!(idx.is_empty());
        assert!(idx.benchmark_names.is_empty());
    }

    #[test]
    fn identical_images_collapse_in_index() {
        let idx = build_index(&[bench()]).unwrap();
        assert_eq!(idx.image_hashes.len(), 2);
        assert_eq!(idx.text_keys.len(), 3);
    }

    #[test]
    fn index_serialization_is_deterministic() {
        let a = build_index(&[bench()]).unwrap().to_bytes();
        let b = build_index(&[bench()]).unwrap().to_bytes();
        assert_eq!(a, b);
        assert_eq!(&a[..5], b"MFIX1");
        assert_eq!(BenchmarkIndex::from_bytes(&a).unwrap(), build_index(&[bench()]).unwrap());
    }

    #[test]
    fn corrupt_index_rejected() {
        assert!(BenchmarkIndex::from_bytes(b"MFIX2").is_err());
        let mut good = build_index(&[bench()]).unwrap().to_bytes();
        good.pop();
        assert!(BenchmarkIndex::from_bytes(&good).is_err());
    }

    #[test]
    fn scrub_examples() {
        let idx = build_index(&[bench()]).unwrap();
        let m = DatasetManifest::new(
            "train",
            vec![
                vqa("reused_image", 0xbb, "Describe the lesion in detail."),
                vqa("novel", 0x1234, "Which lobe contains the nodule?"),
                vqa("case_punct", 0x5678, "IS THERE A PLEURAL EFFUSION"),
            ],
        );
        let (out, rep) = scrub(&m, &idx);
        assert_eq!(out.samples.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), ["novel"]);
        assert!(rep.removals.iter().all(|r| r.rule == RULE_CONTAMINATION));
        assert_eq!(rep.removed_count, 2);
    }

    #[test]
    fn answers_alone_do_not_trigger() {
        let idx = build_index(&[bench()]).unwrap();
        let mut s = vqa("a", 0x99, "Some unrelated new question?");
        s.answer = Some("Is there a pleural effusion?".into());
        assert!(!idx.contaminates(&s));
    }

    #[test]
    fn text_only_sample_keys_on_full_text() {
        let mut t = Sample::new("t", "pubmed", TaskKind::TextQa);
        t.answer = Some("Metformin is first-line therapy.".into());
        let idx = build_index(&[DatasetManifest::new("b", vec![t.clone()])]).unwrap();
        let mut probe = Sample::new("p", "train", TaskKind::TextQa);
        probe.answer = Some("metformin is FIRST LINE therapy".into());
        // Hyphen is stripped, not spaced: "firstline" vs "first line" differ.
        assert!(!idx.contaminates(&probe));
        probe.answer = Some("Metformin is first-line therapy!".into());
        assert!(idx.contaminates(&probe));
    }

    proptest! {
        #[test]
        fn scrub_leaves_no_overlap_and_is_idempotent(
            rows in proptest::collection::vec((0u64..30, 0usize..30), 0..40)
        ) {
            let idx = build_index(&[bench()]).unwrap();
            let qs = ["Is there a pleural effusion?", "what organ is enlarged", "Where is the mass?"];
            let m = DatasetManifest::new("p", rows.iter().enumerate().map(|(i, (h, q))| {
                let q = qs.get(*q).copied().map(String::from).unwrap_or_else(|| format!("novel question {q}"));
                vqa(&format!("s{i}"), 0xa0 + h, &q)
            }).collect());
            let (out, rep) = scrub(&m, &idx);
            prop_assert!(rep.balanced());
            let (imgs, texts) = corpus_keys(&out);
            prop_assert!(imgs.is_disjoint(&idx.image_hashes));
            prop_assert!(texts.is_disjoint(&idx.text_keys));
            let (again, rep2) = scrub(&out, &idx);
            prop_assert_eq!(again, out);
            prop_assert_eq!(rep2.removed_count, 0);
        }
    }
}
