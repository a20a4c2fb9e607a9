//! In-process text metrics over lowercased word tokens.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::text::metric_tokens;

use super::MetricParams;

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence-level ROUGE-L, balanced F.
pub fn rouge_l<T: Scalar>(candidate: &str, reference: &str) -> T {
    let (c, r) = (metric_tokens(candidate), metric_tokens(reference));
    let lcs = lcs_len(&c, &r);
    if lcs == 0 {
        return T::zero();
    }
    let p = T::of_usize(lcs) / T::of_usize(c.len());
    let rec = T::of_usize(lcs) / T::of_usize(r.len());
    T::of(2.0) * p * rec / (p + rec)
}

pub(crate) fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if n == 0 || tokens.len() < n {
        return m;
    }
    for w in tokens.windows(n) {
        *m.entry(w).or_default() += 1;
    }
    m
}

/// Sentence BLEU with clipped precisions up to `min(max_n, |candidate|)`,
/// epsilon smoothing for empty higher orders and the closest-length brevity
/// penalty.
pub fn bleu<T: Scalar>(candidate: &str, references: &[&str], params: &MetricParams) -> T {
    let c = metric_tokens(candidate);
    let refs: Vec<Vec<String>> = references.iter().map(|r| metric_tokens(r)).collect();
    if c.is_empty() || refs.is_empty() {
        return T::zero();
    }
    let order = params.bleu_max_n.min(c.len());
    let mut log_sum = T::zero();
    for n in 1..=order {
        let cand = ngram_counts(&c, n);
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in &refs {
            for (g, k) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_default();
                *e = (*e).max(k);
            }
        }
        let clipped: usize = cand.iter().map(|(g, k)| (*k).min(max_ref.get(g).copied().unwrap_or(0))).sum();
        let total = c.len() + 1 - n;
        let num = if clipped == 0 {
            if n == 1 {
                return T::zero();
            }
            T::of(params.bleu_epsilon)
        } else {
            T::of_usize(clipped)
        };
        log_sum = log_sum + (num / T::of_usize(total)).ln();
    }
    let r_len = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&l| (l.abs_diff(c.len()), l))
        .expect("references non-empty");
    let bp = if c.len() > r_len {
        T::one()
    } else {
        (T::one() - T::of_usize(r_len) / T::of_usize(c.len())).exp()
    };
    bp * (log_sum / T::of_usize(order)).exp()
}

const SUFFIXES: [&str; 4] = ["ing", "ed", "ly", "s"];

/// Crude suffix stemmer: strips one common suffix if a stem of 3+ chars remains.
pub fn stem(word: &str) -> &str {
    for s in SUFFIXES {
        if let Some(base) = word.strip_suffix(s) {
            if base.chars().count() >= 3 {
                return base;
            }
        }
    }
    word
}

/// Greedy unigram alignment: exact matches first, then stems; each
/// candidate token takes the leftmost free reference token. Returns the
/// reference index for each candidate token.
pub fn align(c: &[String], r: &[String]) -> Vec<Option<usize>> {
    let mut used = vec![false; r.len()];
    let mut out = vec![None; c.len()];
    for pass in 0..2 {
        for (i, tok) in c.iter().enumerate() {
            if out[i].is_some() {
                continue;
            }
            let hit = (0..r.len()).find(|&j| !used[j] && if pass == 0 { r[j] == *tok } else { stem(&r[j]) == stem(tok) });
            if let Some(j) = hit {
                used[j] = true;
                out[i] = Some(j);
            }
        }
    }
    out
}

/// METEOR without synonymy. Fragmentation is `(chunks - 1) / (matches - 1)`
/// so a single contiguous alignment carries no penalty.
pub fn meteor_lite<T: Scalar>(candidate: &str, reference: &str, params: &MetricParams) -> T {
    let (c, r) = (metric_tokens(candidate), metric_tokens(reference));
    if c.is_empty() || r.is_empty() {
        return T::zero();
    }
    let a = align(&c, &r);
    let matched: Vec<usize> = a.iter().flatten().copied().collect();
    let m = matched.len();
    if m == 0 {
        return T::zero();
    }
    let chunks = 1 + matched.windows(2).filter(|w| w[1] != w[0] + 1).count();
    let p = T::of_usize(m) / T::of_usize(c.len());
    let rec = T::of_usize(m) / T::of_usize(r.len());
    let alpha = T::of(params.meteor_alpha);
    let fmean = p * rec / (alpha * p + (T::one() - alpha) * rec);
    let frag = if m > 1 {
        T::of_usize(chunks - 1) / T::of_usize(m - 1)
    } else {
        T::zero()
    };
    let penalty = T::of(params.meteor_gamma) * frag.powf(T::of(params.meteor_beta));
    fmean * (T::one() - penalty)
}

/// CIDEr with document frequencies from a fixed reference corpus.
#[derive(Debug, Clone)]
pub struct CiderScorer {
    max_n: usize,
    n_docs: usize,
    /// Per n (index n-1): n-gram -> number of corpus items containing it.
    df: Vec<HashMap<Vec<String>, usize>>,
}

impl CiderScorer {
    /// `corpus` holds the reference set of every item.
    pub fn new(corpus: &[Vec<String>], params: &MetricParams) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyInput("CIDEr corpus"));
        }
        let max_n = params.cider_max_n;
        let mut df = vec![HashMap::new(); max_n];
        for refs in corpus {
            let toks: Vec<Vec<String>> = refs.iter().map(|r| metric_tokens(r)).collect();
            for n in 1..=max_n {
                let mut grams: Vec<&[String]> = toks.iter().flat_map(|t| ngram_counts(t, n).into_keys()).collect();
                grams.sort_unstable();
                grams.dedup();
                for g in grams {
                    *df[n - 1].entry(g.to_vec()).or_default() += 1;
                }
            }
        }
        Ok(Self {
            max_n,
            n_docs: corpus.len(),
            df,
        })
    }

    fn vector<T: Scalar>(&self, tokens: &[String], n: usize) -> HashMap<Vec<String>, T> {
        let log_n = T::of_usize(self.n_docs).ln();
        ngram_counts(tokens, n)
            .into_iter()
            .map(|(g, k)| {
                let df = self.df[n - 1].get(g).copied().unwrap_or(0).max(1);
                (g.to_vec(), T::of_usize(k) * (log_n - T::of_usize(df).ln()))
            })
            .collect()
    }

    /// Ten times the mean over n of the average TF-IDF cosine to each
    /// reference. Orders longer than the candidate are skipped.
    pub fn score<T: Scalar>(&self, candidate: &str, references: &[&str]) -> T {
        let c = metric_tokens(candidate);
        let order = self.max_n.min(c.len());
        if order == 0 || references.is_empty() {
            return T::zero();
        }
        let refs: Vec<Vec<String>> = references.iter().map(|r| metric_tokens(r)).collect();
        let mut total = T::zero();
        for n in 1..=order {
            let cv = self.vector::<T>(&c, n);
            let cnorm = cv.values().map(|v| *v * *v).sum::<T>().sqrt();
            let mut per_ref = T::zero();
            for r in &refs {
                let rv = self.vector::<T>(r, n);
                let rnorm = rv.values().map(|v| *v * *v).sum::<T>().sqrt();
                if cnorm > T::zero() && rnorm > T::zero() {
                    let dot: T = cv.iter().filter_map(|(g, x)| rv.get(g).map(|y| *x * *y)).sum();
                    per_ref = per_ref + dot / (cnorm * rnorm);
                }
            }
            total = total + per_ref / T::of_usize(refs.len());
        }
        T::of(10.0) * total / T::of_usize(order)
    }
}

pub fn radcliq_inverse<T: Scalar>(score: T) -> Result<T> {
    if score.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) || !score.is_finite() {
        return Err(Error::Domain(format!("RadCliQ score must be positive, got {score:?}")));
    }
    Ok(T::one() / score)
}
