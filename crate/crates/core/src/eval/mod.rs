//! Benchmark harness: load, prompt, predict, extract, adjudicate, aggregate.
//!
//! Multiple-choice records are scored by rule/similarity matching, closed
//! (yes/no) records by normalized comparison, open records by a judge model.
//! Report records only collect predictions; they are scored by `metrics`.

pub mod judge;
pub mod matching;

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::client::{map_bounded, ChatClient, ChatRequest};
use crate::corpus::{DatasetManifest, Sample};
use crate::error::{Error, Result};
use crate::synth::letter_options;
use crate::text::normalize_text;

pub use judge::{judge_open_answer, judge_prompt, parse_judge, JudgeVerdict};
pub use matching::{extract_mcq_answer, MatchStage, McqMatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    Mcq,
    Closed,
    Open,
    Report,
}

impl QuestionType {
    pub fn as_str(&self) -> &'static str {
        match self {
            QuestionType::Mcq => "mcq",
            QuestionType::Closed => "closed",
            QuestionType::Open => "open",
            QuestionType::Report => "report",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchmarkKind {
    /// Question answering; each record is typed from its own fields.
    Qa,
    Report,
}

pub const BENCHMARKS: &[(&str, BenchmarkKind)] = &[
    ("vqa_rad", BenchmarkKind::Qa),
    ("slake", BenchmarkKind::Qa),
    ("pathvqa", BenchmarkKind::Qa),
    ("pmc_vqa", BenchmarkKind::Qa),
    ("omnimedvqa", BenchmarkKind::Qa),
    ("mmmu_med", BenchmarkKind::Qa),
    ("medxpertqa", BenchmarkKind::Qa),
    ("medqa", BenchmarkKind::Qa),
    ("medmcqa", BenchmarkKind::Qa),
    ("pubmedqa", BenchmarkKind::Qa),
    ("mimic_cxr", BenchmarkKind::Report),
    ("iu_xray", BenchmarkKind::Report),
    ("chexpert_plus", BenchmarkKind::Report),
];

pub fn benchmark_kind(name: &str) -> Result<BenchmarkKind> {
    BENCHMARKS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, k)| *k)
        .ok_or_else(|| Error::UnknownBenchmark(name.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    Incorrect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub benchmark: String,
    pub question_type: QuestionType,
    pub sample: Sample,
    #[serde(default)]
    pub prediction: Option<String>,
    #[serde(default)]
    pub verdict: Option<Verdict>,
    #[serde(default)]
    pub judge_think: Option<String>,
    #[serde(default)]
    pub error: Option<String>,
}

fn is_yes_no(s: &str) -> bool {
    matches!(normalize_text(s).as_str(), "yes" | "no")
}

fn question_type(s: &Sample) -> QuestionType {
    if s.options.as_ref().is_some_and(|o| !o.is_empty()) {
        QuestionType::Mcq
    } else if s.answer.as_deref().is_some_and(is_yes_no) {
        QuestionType::Closed
    } else {
        QuestionType::Open
    }
}

/// Reference report text: findings then impression.
pub fn report_reference(s: &Sample) -> String {
    let get = |k: &str| s.meta.get(k).map(|v| v.trim()).unwrap_or("");
    [get("findings"), get("impression")]
        .iter()
        .filter(|t| !t.is_empty())
        .copied()
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn load_benchmark(m: &DatasetManifest, name: &str) -> Result<Vec<EvalRecord>> {
    let kind = benchmark_kind(name)?;
    Ok(m.samples
        .iter()
        .filter(|s| kind == BenchmarkKind::Qa || !report_reference(s).is_empty())
        .map(|s| EvalRecord {
            benchmark: name.to_string(),
            question_type: match kind {
                BenchmarkKind::Report => QuestionType::Report,
                BenchmarkKind::Qa => question_type(s),
            },
            sample: s.clone(),
            prediction: None,
            verdict: None,
            judge_think: None,
            error: None,
        })
        .collect())
}

macro_rules! template {
    ($file:literal) => {
        include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/templates/", $file))
    };
}

/// Per-type prompt templates with `{question}` and `{options}` slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates(pub BTreeMap<QuestionType, String>);

impl Default for PromptTemplates {
    fn default() -> Self {
        Self(BTreeMap::from([
            (QuestionType::Mcq, template!("eval_mcq.txt").to_string()),
            (QuestionType::Closed, template!("eval_closed.txt").to_string()),
            (QuestionType::Open, template!("eval_open.txt").to_string()),
            (QuestionType::Report, template!("eval_report.txt").to_string()),
        ]))
    }
}

impl PromptTemplates {
    /// Defaults overridden by any `eval_<type>.txt` found in `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut t = Self::default();
        for q in [QuestionType::Mcq, QuestionType::Closed, QuestionType::Open, QuestionType::Report] {
            let p = dir.join(format!("eval_{}.txt", q.as_str()));
            if p.exists() {
                t.0.insert(q, std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?);
            }
        }
        Ok(t)
    }
}

pub fn format_prompt(r: &EvalRecord, templates: &PromptTemplates) -> Result<String> {
    let t = templates
        .0
        .get(&r.question_type)
        .ok_or_else(|| Error::MissingTemplate(r.question_type.as_str().to_string()))?;
    let options = letter_options(r.sample.options.as_deref().unwrap_or(&[]));
    let out = crate::prompts::fill(
        t,
        &[
            ("question", r.sample.question.as_deref().unwrap_or("").trim()),
            ("options", &options),
        ],
    );
    Ok(out.trim_start_matches('\n').to_string())
}

/// Stored `(id, prediction)` pairs so a run can be re-judged without the model.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PredictionCache(pub HashMap<String, String>);

#[derive(Serialize, Deserialize)]
struct CacheLine {
    id: String,
    prediction: String,
}

impl PredictionCache {
    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut map = HashMap::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let l: CacheLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            map.insert(l.id, l.prediction);
        }
        Ok(Self(map))
    }

    /// Writes predictions in record order.
    pub fn write(records: &[EvalRecord], path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in records {
            if let Some(p) = &r.prediction {
                let line = serde_json::to_string(&CacheLine {
                    id: r.sample.id.clone(),
                    prediction: p.clone(),
                })
                .expect("cache line serializes");
                out.extend_from_slice(line.as_bytes());
                out.push(b'\n');
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub templates: PromptTemplates,
    pub image_root: Option<PathBuf>,
    pub cache: Option<PredictionCache>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TypeSummary {
    pub total: usize,
    pub judged: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub benchmark: String,
    pub total: usize,
    pub judged: usize,
    pub correct: usize,
    pub unjudged: usize,
    pub errors: usize,
    /// `None` when nothing was judged.
    pub accuracy: Option<f64>,
    pub by_type: BTreeMap<QuestionType, TypeSummary>,
}

pub fn summarize(benchmark: &str, records: &[EvalRecord]) -> RunSummary {
    let mut by_type: BTreeMap<QuestionType, TypeSummary> = BTreeMap::new();
    let (mut judged, mut correct, mut unjudged, mut errors) = (0, 0, 0, 0);
    for r in records {
        let t = by_type.entry(r.question_type).or_default();
        t.total += 1;
        if r.error.is_some() {
            errors += 1;
        }
        if r.question_type == QuestionType::Report {
            continue;
        }
        match r.verdict {
            Some(v) => {
                judged += 1;
                t.judged += 1;
                if v == Verdict::Correct {
                    correct += 1;
                    t.correct += 1;
                }
            }
            None => unjudged += 1,
        }
    }
    RunSummary {
        benchmark: benchmark.to_string(),
        total: records.len(),
        judged,
        correct,
        unjudged,
        errors,
        accuracy: (judged > 0).then(|| correct as f64 / judged as f64),
        by_type,
    }
}

fn closed_correct(prediction: &str, answer: &str) -> bool {
    let p = normalize_text(prediction);
    let a = normalize_text(answer);
    p == a || p.split(' ').next() == Some(a.as_str())
}

fn predict(r: &EvalRecord, model: &dyn ChatClient, opts: &RunOptions) -> Result<String> {
    if let Some(p) = opts.cache.as_ref().and_then(|c| c.0.get(&r.sample.id)) {
        return Ok(p.clone());
    }
    let mut req = ChatRequest::user(format_prompt(r, &opts.templates)?);
    if let Some(root) = &opts.image_root {
        for img in &r.sample.images {
            let p = img.resolve(root);
            req = req.with_png(&std::fs::read(&p).map_err(|e| Error::io(&p, e))?);
        }
    }
    Ok(model.complete(&req)?)
}

fn evaluate(mut r: EvalRecord, model: &dyn ChatClient, judge: &dyn ChatClient, opts: &RunOptions) -> EvalRecord {
    let prediction = match predict(&r, model, opts) {
        Ok(p) => p,
        Err(e) => {
            r.error = Some(e.to_string());
            return r;
        }
    };
    let answer = r.sample.answer.clone().unwrap_or_default();
    let verdict = match r.question_type {
        QuestionType::Report => None,
        QuestionType::Mcq => {
            let options = r.sample.options.as_deref().unwrap_or(&[]);
            let hit = !options.is_empty() && Some(extract_mcq_answer(&prediction, options).index) == r.sample.answer_index();
            Some(hit)
        }
        QuestionType::Closed => Some(closed_correct(&prediction, &answer)),
        QuestionType::Open => {
            let q = r.sample.question.as_deref().unwrap_or("");
            match judge_open_answer(q, &answer, &prediction, judge) {
                Ok(v) => {
                    r.judge_think = Some(v.think.clone());
                    Some(v.is_correct())
                }
                Err(e) => {
                    r.error = Some(e.to_string());
                    None
                }
            }
        }
    };
    r.verdict = verdict.map(|ok| if ok { Verdict::Correct } else { Verdict::Incorrect });
    r.prediction = Some(prediction);
    r
}

/// Evaluate every record. Output keeps input order; client failures are
/// recorded on the record and counted, never dropped.
pub fn run_benchmark(
    records: &[EvalRecord],
    model: &dyn ChatClient,
    judge: &dyn ChatClient,
    opts: &RunOptions,
) -> (Vec<EvalRecord>, RunSummary) {
    let bound = model.concurrency_bound().max(1);
    let out = map_bounded(records, bound, |r| evaluate(r.clone(), model, judge, opts));
    let name = records.first().map(|r| r.benchmark.as_str()).unwrap_or("");
    let summary = summarize(name, &out);
    (out, summary)
}

#[derive(Serialize)]
struct VerdictLine<'a> {
    id: &'a str,
    benchmark: &'a str,
    question_type: QuestionType,
    prediction: Option<&'a str>,
    verdict: Option<Verdict>,
    judge_think: Option<&'a str>,
    error: Option<&'a str>,
}

/// One JSON line per record, in record order.
pub fn write_verdicts(records: &[EvalRecord], w: &mut impl Write) -> std::io::Result<()> {
    for r in records {
        let line = VerdictLine {
            id: &r.sample.id,
            benchmark: &r.benchmark,
            question_type: r.question_type,
            prediction: r.prediction.as_deref(),
            verdict: r.verdict,
            judge_think: r.judge_think.as_deref(),
            error: r.error.as_deref(),
        };
        serde_json::to_writer(&mut *w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::StubClient;
    use crate::corpus::TaskKind;

    fn mcq(id: &str, answer: usize) -> Sample {
        let mut s = Sample::new(id, "pmc_vqa", TaskKind::VqaMcq);
        s.question = Some(format!("Question {id}?"));
        let opts: Vec<String> = ["alpha", "beta", "gamma", "delta"].iter().map(|s| s.to_string()).collect();
        s.answer = Some(opts[answer].clone());
        s.options = Some(opts);
        s
    }

    fn open(id: &str) -> Sample {
        let mut s = Sample::new(id, "slake", TaskKind::VqaOpen);
        s.question = Some("Which organ?".into());
        s.answer = Some("liver".into());
        s
    }

    #[test]
    fn report_records_need_findings_or_impression() {
        let mut a = Sample::new("a", "mimic", TaskKind::Report);
        a.meta.insert("findings".into(), "No acute process.".into());
        let mut b = Sample::new("b", "mimic", TaskKind::Report);
        b.meta.insert("findings".into(), " ".into());
        let recs = load_benchmark(&DatasetManifest::new("m", vec![a, b]), "mimic_cxr").unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].question_type, QuestionType::Report);
    }

    #[test]
    fn typing_and_errors() {
        let m = DatasetManifest::new("m", vec![mcq("1", 0), open("2")]);
        let recs = load_benchmark(&m, "slake").unwrap();
        assert_eq!(
            recs.iter().map(|r| r.question_type).collect::<Vec<_>>(),
            [QuestionType::Mcq, QuestionType::Open]
        );
        assert!(load_benchmark(&DatasetManifest::new("e", vec![]), "slake").unwrap().is_empty());
        assert!(matches!(load_benchmark(&m, "nope"), Err(Error::UnknownBenchmark(_))));
    }

    #[test]
    fn prompts_are_lettered_and_stable() {
        let recs = load_benchmark(&DatasetManifest::new("m", vec![mcq("1", 0), open("2")]), "slake").unwrap();
        let t = PromptTemplates::default();
        let p = format_prompt(&recs[0], &t).unwrap();
        assert!(p.contains("A. alpha\nB. beta\nC. gamma\nD. delta"));
        assert_eq!(p, format_prompt(&recs[0], &t).unwrap());
        assert!(!format_prompt(&recs[1], &t).unwrap().contains("A. "));
        let empty = PromptTemplates(BTreeMap::new());
        assert!(matches!(format_prompt(&recs[0], &empty), Err(Error::MissingTemplate(_))));
    }

    #[test]
    fn accuracy_counts_and_judge_isolation() {
        let samples: Vec<_> = (0..4).map(|i| mcq(&i.to_string(), i % 4)).collect();
        let recs = load_benchmark(&DatasetManifest::new("m", samples), "pmc_vqa").unwrap();
        let model = StubClient::from_fn(|req| {
            let t = req.text();
            Ok(if t.contains("Question 3?") {
                "A".into()
            } else if t.contains("Question 1?") {
                "B".into()
            } else if t.contains("Question 2?") {
                "(C)".into()
            } else {
                "alpha".into()
            })
        });
        let judge = StubClient::fixed("<judge>0</judge>");
        let (out, sum) = run_benchmark(&recs, &model, &judge, &RunOptions::default());
        assert_eq!(sum.accuracy, Some(0.75));
        assert_eq!(judge.calls(), 0);
        assert_eq!(out.len(), 4);
    }

    #[test]
    fn nothing_judged_means_absent_accuracy() {
        let recs = load_benchmark(&DatasetManifest::new("m", vec![open("o")]), "slake").unwrap();
        let (out, sum) = run_benchmark(
            &recs,
            &StubClient::fixed("liver"),
            &StubClient::fixed("yes"),
            &RunOptions::default(),
        );
        assert_eq!(sum.accuracy, None);
        assert_eq!(sum.unjudged, 1);
        assert!(out[0].error.is_some());
    }

    #[test]
    fn closed_answers_rule_matched() {
        assert!(closed_correct("Yes, there is.", "yes"));
        assert!(!closed_correct("No.", "yes"));
    }

    #[test]
    fn cache_roundtrip_skips_model() {
        let dir = tempfile::tempdir().unwrap();
        let recs = load_benchmark(&DatasetManifest::new("m", vec![mcq("1", 1)]), "pmc_vqa").unwrap();
        let (out, _) = run_benchmark(&recs, &StubClient::fixed("B"), &StubClient::fixed(""), &RunOptions::default());
        let path = dir.path().join("cache.jsonl");
        PredictionCache::write(&out, &path).unwrap();
        let opts = RunOptions {
            cache: Some(PredictionCache::load(&path).unwrap()),
            ..Default::default()
        };
        let model = StubClient::failing("offline");
        let (_, sum) = run_benchmark(&recs, &model, &StubClient::fixed(""), &opts);
        assert_eq!(sum.accuracy, Some(1.0));
        assert_eq!(model.calls(), 0);
    }
}
