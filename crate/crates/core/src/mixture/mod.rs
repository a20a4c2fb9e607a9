//! Stage-wise training mixtures, the RL subset, and verifiable rewards.

pub mod reward;
pub mod rl;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{load_manifest, DatasetManifest, ModalityTag, Sample};
use crate::error::{Error, Result};
use crate::text::mix64;

pub use reward::{accuracy_reward, format_reward, total_reward, FormatSpec, RewardConfig};
pub use rl::{build_rl_dataset, is_binary, mcq_to_open, RlConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixtureStage {
    ShallowAlign,
    DeepAlign,
    Instruction,
    Rl,
}

/// One source manifest. `cap` takes at most that many samples; `weight` takes
/// that fraction of the manifest. With neither, everything is taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureEntry {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub stage: MixtureStage,
    pub entries: Vec<MixtureEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub modality_caps: BTreeMap<ModalityTag, usize>,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if e.cap == Some(0) {
                return Err(Error::Config(format!("{}: cap must be positive", e.path.display())));
            }
            if let Some(w) = e.weight {
                if !(w >= 0.0 && w.is_finite()) {
                    return Err(Error::Config(format!("{}: weight must be non-negative", e.path.display())));
                }
            }
            if e.cap.is_some() && e.weight.is_some() {
                return Err(Error::Config(format!("{}: give a cap or a weight, not both", e.path.display())));
            }
        }
        if let Some((m, _)) = self.modality_caps.iter().find(|(_, &c)| c == 0) {
            return Err(Error::Config(format!("modality cap for {} must be positive", m.as_str())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureReport {
    /// (available, taken) per entry, in spec order.
    pub per_entry: Vec<(usize, usize)>,
    pub modality_removed: usize,
    pub warnings: Vec<String>,
}

/// Keep a seeded random subset of `k` indices out of `n`, in ascending order.
pub(crate) fn sample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

fn entry_take(e: &MixtureEntry, available: usize, warnings: &mut Vec<String>) -> usize {
    match (e.cap, e.weight) {
        (Some(cap), _) => {
            if cap > available {
                let w = format!("{}: cap {cap} exceeds {available} available samples, taking all", e.path.display());
                tracing::warn!("{w}");
                warnings.push(w);
            }
            cap.min(available)
        }
        (None, Some(w)) => {
            if w > 1.0 {
                let msg = format!("{}: weight {w} exceeds 1, taking all", e.path.display());
                tracing::warn!("{msg}");
                warnings.push(msg);
            }
            ((w * available as f64).round() as usize).min(available)
        }
        (None, None) => available,
    }
}

/// Assemble a mixture from already-loaded manifests (one per spec entry).
pub fn build_mixture_from(spec: &MixtureSpec, manifests: &[DatasetManifest], seed: u64) -> Result<(DatasetManifest, MixtureReport)> {
    spec.validate()?;
    if manifests.len() != spec.entries.len() {
        return Err(Error::Config(format!(
            "{} manifests for {} mixture entries",
            manifests.len(),
            spec.entries.len()
        )));
    }
    let mut report = MixtureReport::default();
    let mut out: Vec<Sample> = Vec::new();
    for (i, (e, m)) in spec.entries.iter().zip(manifests).enumerate() {
        let take = entry_take(e, m.len(), &mut report.warnings);
        let idx = sample_indices(m.len(), take, mix64(seed ^ mix64(i as u64 + 1)));
        report.per_entry.push((m.len(), idx.len()));
        out.extend(idx.into_iter().map(|j| m.samples[j].clone()));
    }

    let mut seen = BTreeSet::new();
    for (line, s) in out.iter().enumerate() {
        if !seen.insert(s.id.as_str()) {
            return Err(Error::DuplicateId {
                id: s.id.clone(),
                line: line + 1,
            });
        }
    }

    let mut keep = vec![true; out.len()];
    for (mi, (modality, &cap)) in spec.modality_caps.iter().enumerate() {
        let members: Vec<usize> = (0..out.len()).filter(|&j| out[j].modality == Some(*modality)).collect();
        if members.len() <= cap {
            continue;
        }
        let chosen = sample_indices(members.len(), cap, mix64(seed ^ mix64(0x4D4F_4441 + mi as u64)));
        let chosen: BTreeSet<usize> = chosen.into_iter().map(|c| members[c]).collect();
        for j in members {
            if !chosen.contains(&j) {
                keep[j] = false;
                report.modality_removed += 1;
            }
        }
    }
    let samples = out.into_iter().zip(keep).filter(|(_, k)| *k).map(|(s, _)| s).collect();
    let name = format!(
        "mixture_{}",
        serde_json::to_value(spec.stage)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default()
    );
    Ok((DatasetManifest::new(name, samples), report))
}

/// Load every entry's manifest and assemble the mixture.
pub fn build_mixture(spec: &MixtureSpec, seed: u64) -> Result<(DatasetManifest, MixtureReport)> {
    spec.validate()?;
    let manifests = spec.entries.iter().map(|e| load_manifest(&e.path)).collect::<Result<Vec<_>>>()?;
    build_mixture_from(spec, &manifests, seed)
}
