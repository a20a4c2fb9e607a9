//! Report-generation metrics: native n-gram scores plus out-of-process
//! adapters for model-based metrics.

pub mod native;

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::client::ClientError;
use crate::error::{Error, Result};
use crate::num::Scalar;

pub use native::{bleu, meteor_lite, radcliq_inverse, rouge_l, CiderScorer};

/// Every tunable of the native metrics. Feeds the build fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricParams {
    pub bleu_max_n: usize,
    pub bleu_epsilon: f64,
    pub meteor_alpha: f64,
    pub meteor_beta: f64,
    pub meteor_gamma: f64,
    pub cider_max_n: usize,
}

impl Default for MetricParams {
    fn default() -> Self {
        Self {
            bleu_max_n: 4,
            bleu_epsilon: 1e-9,
            meteor_alpha: 0.9,
            meteor_beta: 3.0,
            meteor_gamma: 0.5,
            cider_max_n: 4,
        }
    }
}

pub const NATIVE_METRICS: &[&str] = &["rouge_l", "bleu", "meteor", "cider"];
pub const EXTERNAL_METRICS: &[&str] = &["sembscore", "ratescore", "radcliq", "bertscore", "radgraph_f1", "green"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport<T> {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bleu: Option<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meteor: Option<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cider: Option<T>,
    /// Only metrics whose adapter actually ran.
    #[serde(default)]
    pub external: BTreeMap<String, T>,
    #[serde(default)]
    pub scaled: bool,
}

impl<T> Default for MetricReport<T> {
    fn default() -> Self {
        Self {
            rouge_l: None,
            bleu: None,
            meteor: None,
            cider: None,
            external: BTreeMap::new(),
            scaled: false,
        }
    }
}

/// Multiply every value by 100. Refuses an already scaled report.
pub fn scale_report<T: Scalar>(r: &MetricReport<T>) -> Result<MetricReport<T>> {
    if r.scaled {
        return Err(Error::AlreadyScaled);
    }
    let k = T::of(100.0);
    Ok(MetricReport {
        rouge_l: r.rouge_l.map(|v| v * k),
        bleu: r.bleu.map(|v| v * k),
        meteor: r.meteor.map(|v| v * k),
        cider: r.cider.map(|v| v * k),
        external: r.external.iter().map(|(n, v)| (n.clone(), *v * k)).collect(),
        scaled: true,
    })
}

/// Out-of-process metric backend.
pub trait MetricAdapter: Send + Sync {
    fn score(&self, metric: &str, candidate: &str, references: &[&str]) -> Result<f64, ClientError>;
}

/// POSTs `{metric, candidate, references}` and reads `{value}`.
pub struct HttpMetricAdapter {
    endpoint: String,
    http: reqwest::blocking::Client,
}

impl HttpMetricAdapter {
    pub fn new(endpoint: impl Into<String>, timeout_secs: u64) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(timeout_secs))
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            http,
        })
    }
}

#[derive(Serialize)]
struct AdapterRequest<'a> {
    metric: &'a str,
    candidate: &'a str,
    references: &'a [&'a str],
}

#[derive(Deserialize)]
struct AdapterResponse {
    value: f64,
}

impl MetricAdapter for HttpMetricAdapter {
    fn score(&self, metric: &str, candidate: &str, references: &[&str]) -> Result<f64, ClientError> {
        let resp = self
            .http
            .post(&self.endpoint)
            .json(&AdapterRequest {
                metric,
                candidate,
                references,
            })
            .send()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(ClientError::Status {
                status: status.as_u16(),
                body: resp.text().unwrap_or_default(),
            });
        }
        resp.json::<AdapterResponse>()
            .map(|r| r.value)
            .map_err(|e| ClientError::Decode(e.to_string()))
    }
}

/// Fixed value per metric, for tests and offline runs.
#[derive(Debug, Clone, Default)]
pub struct StubMetricAdapter(pub BTreeMap<String, f64>);

impl MetricAdapter for StubMetricAdapter {
    fn score(&self, metric: &str, _: &str, _: &[&str]) -> Result<f64, ClientError> {
        self.0
            .get(metric)
            .copied()
            .ok_or_else(|| ClientError::Stub(format!("no stub value for {metric}")))
    }
}

/// Which metrics to compute and where external ones come from.
#[derive(Default)]
pub struct MetricPlan<'a> {
    pub native: Vec<String>,
    /// Metric name to adapter. Metrics without an adapter are omitted.
    pub adapters: BTreeMap<String, &'a dyn MetricAdapter>,
    pub params: MetricParams,
}

fn mean<T: Scalar>(xs: &[T]) -> T {
    xs.iter().copied().sum::<T>() / T::of_usize(xs.len())
}

/// Sentence metrics with several references keep the best one.
fn best_of<T: Scalar>(refs: &[&str], f: impl Fn(&str) -> T) -> T {
    refs.iter().map(|r| f(r)).fold(T::zero(), T::max)
}

/// Corpus-level report: each metric is the mean over items. RadCliQ is
/// averaged raw and then inverted.
pub fn score_corpus<T: Scalar>(candidates: &[String], references: &[Vec<String>], plan: &MetricPlan) -> Result<MetricReport<T>> {
    if candidates.len() != references.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::EmptyInput("no prediction/reference pairs"));
    }
    if let Some(bad) = plan.native.iter().find(|m| !NATIVE_METRICS.contains(&m.as_str())) {
        return Err(Error::Config(format!("unknown metric `{bad}`")));
    }
    if let Some(bad) = plan.adapters.keys().find(|m| !EXTERNAL_METRICS.contains(&m.as_str())) {
        return Err(Error::Config(format!("unknown external metric `{bad}`")));
    }
    let refs: Vec<Vec<&str>> = references.iter().map(|r| r.iter().map(String::as_str).collect()).collect();
    let wants = |m: &str| plan.native.iter().any(|n| n == m);
    let per_item = |f: &dyn Fn(&str, &[&str]) -> T| -> T {
        let v: Vec<T> = candidates.iter().zip(&refs).map(|(c, r)| f(c, r)).collect();
        mean(&v)
    };

    let mut report = MetricReport::default();
    if wants("rouge_l") {
        report.rouge_l = Some(per_item(&|c, r| best_of(r, |x| rouge_l::<T>(c, x))));
    }
    if wants("bleu") {
        report.bleu = Some(per_item(&|c, r| bleu::<T>(c, r, &plan.params)));
    }
    if wants("meteor") {
        report.meteor = Some(per_item(&|c, r| best_of(r, |x| meteor_lite::<T>(c, x, &plan.params))));
    }
    if wants("cider") {
        let scorer = CiderScorer::new(references, &plan.params)?;
        report.cider = Some(per_item(&|c, r| scorer.score::<T>(c, r)));
    }
    for (name, adapter) in &plan.adapters {
        let mut vals = Vec::with_capacity(candidates.len());
        for (c, r) in candidates.iter().zip(&refs) {
            vals.push(T::of(adapter.score(name, c, r)?));
        }
        let v = mean(&vals);
        let v = if name == "radcliq" { radcliq_inverse(v)? } else { v };
        report.external.insert(name.clone(), v);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaling_once() {
        let r = MetricReport {
            rouge_l: Some(0.31f64),
            external: BTreeMap::from([("sembscore".to_string(), 0.42)]),
            ..Default::default()
        };
        let s = scale_report(&r).unwrap();
        assert!((s.rouge_l.unwrap() - 31.0).abs() < 1e-12);
        assert!((s.external["sembscore"] - 42.0).abs() < 1e-12);
        assert!(matches!(scale_report(&s), Err(Error::AlreadyScaled)));
    }

    #[test]
    fn adapters_passthrough_and_omission() {
        let stub = StubMetricAdapter(BTreeMap::from([("sembscore".to_string(), 0.42), ("radcliq".to_string(), 2.0)]));
        let plan = MetricPlan {
            native: vec!["rouge_l".into()],
            adapters: BTreeMap::from([
                ("sembscore".to_string(), &stub as &dyn MetricAdapter),
                ("radcliq".to_string(), &stub as &dyn MetricAdapter),
            ]),
            params: MetricParams::default(),
        };
        let r: MetricReport<f64> = score_corpus(&["no effusion".into()], &[vec!["no effusion".into()]], &plan).unwrap();
        assert_eq!(r.external["sembscore"], 0.42);
        assert_eq!(r.external["radcliq"], 0.5);
        assert!(!r.external.contains_key("green"));
        assert_eq!(r.rouge_l, Some(1.0));
        assert_eq!(r.bleu, None);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json.get("bleu").is_none());
    }

    #[test]
    fn unknown_metric_rejected() {
        let plan = MetricPlan {
            native: vec!["spice".into()],
            ..Default::default()
        };
        assert!(score_corpus::<f64>(&["a".into()], &[vec!["a".into()]], &plan).is_err());
    }
}
