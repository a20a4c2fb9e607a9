//! Exact image deduplication by perceptual hash and near-duplicate text
//! deduplication by MinHash LSH. Each duplicate class keeps the member with the
//! highest `source_priority` (ties: smallest id).

pub mod minhash;
pub mod phash;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetManifest, Sample};
use crate::error::{Error, Result};
use crate::text::fnv1a64;

pub use minhash::{estimate_jaccard, minhash_signature, MinHashSignature, MinHasher};
pub use phash::{attach_image_info, compute_phash, hamming};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateClass {
    pub class_id: usize,
    pub retained_id: String,
    pub member_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DedupScope {
    /// Only samples from the same `source_dataset` can collide.
    WithinDataset,
    CrossDataset,
}

/// Disjoint-set forest with path halving and union by size.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }

    /// Groups with two or more members, each in ascending index order,
    /// ordered by their smallest index.
    pub fn groups(&mut self) -> Vec<Vec<usize>> {
        let n = self.parent.len();
        let mut by_root: HashMap<usize, Vec<usize>> = HashMap::new();
        for i in 0..n {
            let r = self.find(i);
            by_root.entry(r).or_default().push(i);
        }
        let mut groups: Vec<Vec<usize>> = by_root.into_values().filter(|g| g.len() > 1).collect();
        groups.sort_by_key(|g| g[0]);
        groups
    }
}

/// Retention order: higher priority wins, then the lexicographically smaller id.
fn better(a: &Sample, b: &Sample) -> bool {
    a.source_priority > b.source_priority || (a.source_priority == b.source_priority && a.id < b.id)
}

/// Turn union-find groups over `samples` into classes plus the set of dropped indices.
fn resolve_classes(groups: Vec<Vec<usize>>, samples: &[&Sample]) -> (Vec<DuplicateClass>, Vec<bool>) {
    let mut drop = vec![false; samples.len()];
    let classes = groups
        .into_iter()
        .enumerate()
        .map(|(class_id, members)| {
            let keep = members
                .iter()
                .copied()
                .reduce(|best, i| if better(samples[i], samples[best]) { i } else { best })
                .expect("groups are non-empty");
            for &i in &members {
                drop[i] = i != keep;
            }
            DuplicateClass {
                class_id,
                retained_id: samples[keep].id.clone(),
                member_ids: members.iter().map(|&i| samples[i].id.clone()).collect(),
            }
        })
        .collect();
    (classes, drop)
}

/// Group samples sharing an identical image hash (Hamming distance 0).
///
/// Samples are indexed `chunk_size` at a time: each chunk builds a partial
/// hash index in parallel, which is then merged into the running index in
/// input order. The result does not depend on `chunk_size`.
pub fn dedup_images(m: &DatasetManifest, scope: DedupScope, chunk_size: usize) -> Result<(DatasetManifest, Vec<DuplicateClass>)> {
    let n = m.len();
    let mut uf = UnionFind::new(n);
    let mut index: HashMap<(Option<&str>, u64), usize> = HashMap::new();
    let chunk = chunk_size.max(1);
    for (c, part) in m.samples.chunks(chunk).enumerate() {
        let base = c * chunk;
        let keys: Vec<Vec<(Option<&str>, u64)>> = part
            .par_iter()
            .map(|s| {
                s.images
                    .iter()
                    .map(|img| {
                        let h = img.phash.ok_or_else(|| Error::MissingHash {
                            id: s.id.clone(),
                            uri: img.uri.clone(),
                        })?;
                        let ds = match scope {
                            DedupScope::WithinDataset => Some(s.source_dataset.as_str()),
                            DedupScope::CrossDataset => None,
                        };
                        Ok((ds, h.0))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        for (off, sample_keys) in keys.into_iter().enumerate() {
            let i = base + off;
            for key in sample_keys {
                match index.get(&key) {
                    Some(&j) => {
                        uf.union(i, j);
                    }
                    None => {
                        index.insert(key, i);
                    }
                }
            }
        }
    }
    let refs: Vec<&Sample> = m.samples.iter().collect();
    let (classes, drop) = resolve_classes(uf.groups(), &refs);
    let kept = m.samples.iter().zip(&drop).filter(|(_, d)| !**d).map(|(s, _)| s.clone()).collect();
    Ok((m.with_samples(kept), classes))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextDedupConfig {
    pub k: usize,
    pub shingle_w: usize,
    pub bands: usize,
    pub rows: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for TextDedupConfig {
    fn default() -> Self {
        Self {
            k: minhash::DEFAULT_K,
            shingle_w: minhash::DEFAULT_SHINGLE_W,
            bands: 16,
            rows: 8,
            threshold: 0.8,
            seed: minhash::DEFAULT_SEED,
        }
    }
}

/// Text a sample contributes to near-duplicate detection.
pub fn dedup_text(s: &Sample) -> String {
    let mut parts: Vec<&str> = Vec::new();
    if let Some(q) = &s.question {
        parts.push(q);
    }
    if let Some(opts) = &s.options {
        parts.extend(opts.iter().map(String::as_str));
    }
    if let Some(a) = &s.answer {
        parts.push(a);
    }
    parts.join(" ")
}

/// Near-duplicate removal across several manifests. Candidate pairs come from
/// LSH band collisions; a candidate is merged when its estimated Jaccard is at
/// least `threshold`. Samples with no text never participate.
pub fn dedup_texts(manifests: &[DatasetManifest], cfg: &TextDedupConfig) -> Result<(Vec<DatasetManifest>, Vec<DuplicateClass>)> {
    if cfg.bands == 0 || cfg.rows == 0 || cfg.bands * cfg.rows != cfg.k {
        return Err(Error::LshShape {
            bands: cfg.bands,
            rows: cfg.rows,
            k: cfg.k,
        });
    }
    let flat: Vec<&Sample> = manifests.iter().flat_map(|m| m.samples.iter()).collect();
    let hasher = MinHasher::new(cfg.k, cfg.shingle_w, cfg.seed);
    let sigs: Vec<Option<MinHashSignature>> = flat
        .par_iter()
        .map(|s| {
            let t = dedup_text(s);
            (!t.trim().is_empty()).then(|| hasher.signature(&t))
        })
        .collect();

    let mut uf = UnionFind::new(flat.len());
    for band in 0..cfg.bands {
        let mut buckets: HashMap<u64, Vec<usize>> = HashMap::new();
        for (i, sig) in sigs.iter().enumerate() {
            let Some(sig) = sig else { continue };
            let rows = &sig.mins[band * cfg.rows..(band + 1) * cfg.rows];
            let mut bytes = Vec::with_capacity(8 * (cfg.rows + 1));
            bytes.extend_from_slice(&(band as u64).to_le_bytes());
            for r in rows {
                bytes.extend_from_slice(&r.to_le_bytes());
            }
            buckets.entry(fnv1a64(&bytes)).or_default().push(i);
        }
        for members in buckets.values().filter(|b| b.len() > 1) {
            for (a, &i) in members.iter().enumerate() {
                for &j in &members[a + 1..] {
                    if uf.find(i) == uf.find(j) {
                        continue;
                    }
                    let (si, sj) = (sigs[i].as_ref().unwrap(), sigs[j].as_ref().unwrap());
                    if estimate_jaccard(si, sj) >= cfg.threshold {
                        uf.union(i, j);
                    }
                }
            }
        }
    }

    let (classes, drop) = resolve_classes(uf.groups(), &flat);
    let mut offset = 0;
    let out = manifests
        .iter()
        .map(|m| {
            let kept = m
                .samples
                .iter()
                .enumerate()
                .filter(|(i, _)| !drop[offset + i])
                .map(|(_, s)| s.clone())
                .collect();
            offset += m.len();
            m.with_samples(kept)
        })
        .collect();
    Ok((out, classes))
}

/// Write one JSON object per class: `class_id`, `retained_id`, `member_ids`.
pub fn write_classes(classes: &[DuplicateClass], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for c in classes {
        let line = serde_json::to_string(c).expect("class serialization is infallible");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
