use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use medforge_core::client::{AnnotatorConfig, ChatClient, Provider};
use medforge_core::contamination::{build_index, scrub, BenchmarkIndex};
use medforge_core::dedup::{attach_image_info, dedup_images, dedup_texts, write_classes, DedupScope, DuplicateClass, TextDedupConfig};
use medforge_core::eval::{load_benchmark, run_benchmark, write_verdicts, PredictionCache, PromptTemplates, RunOptions};
use medforge_core::filter::{run_pipeline, FilterParams, FilterStage};
use medforge_core::metrics::{
    scale_report, score_corpus, HttpMetricAdapter, MetricAdapter, MetricPlan, StubMetricAdapter, EXTERNAL_METRICS, NATIVE_METRICS,
};
use medforge_core::mixture::{
    accuracy_reward, build_mixture, build_rl_dataset, format_reward, total_reward, FormatSpec, MixtureSpec, MixtureStage, RlConfig,
};
use medforge_core::synth::caption::CaptionInput;
use medforge_core::synth::{
    caption_pipeline, distill_and_validate, self_instruct_vqa, synthesize_ocr_samples, template_vqa, BBox, CaptionedImage, LabeledRecord,
    OcrQuestion, QaTemplate, RenderConfig, Roi, SynthReport,
};
use medforge_core::text::Tokenizer;
use medforge_core::{load_manifest, write_manifest, DatasetManifest, ImageRef, MetricReportF64, ModalityTag, RewardConfigF64, Sample};

use crate::failure::{config_err, Classify, CliResult};
use crate::pipeline::DedupMode;

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

/// Resolve a provider flag plus optional endpoint/model into a client.
pub fn client_for(provider: &Provider, endpoint: Option<&str>, model: Option<&str>, concurrency: usize) -> CliResult<Box<dyn ChatClient>> {
    let cfg = match (endpoint, model) {
        (Some(e), Some(m)) => {
            let mut c = AnnotatorConfig::new(e, m);
            c.concurrency_bound = concurrency.max(1);
            Some(c)
        }
        (None, None) => None,
        _ => return config_err("an endpoint and a model name must be given together"),
    };
    if *provider == Provider::Live && cfg.is_none() {
        return config_err("the live provider needs an endpoint and a model name");
    }
    provider.client(cfg.as_ref()).config()
}

fn load_with_info(path: &Path, image_root: Option<&Path>) -> CliResult<DatasetManifest> {
    let mut m = load_manifest(path).config()?;
    if let Some(root) = image_root {
        attach_image_info(&mut m, root).stage("image_info")?;
    }
    Ok(m)
}

// ---- filter ----

pub struct FilterArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    pub stages: String,
    pub image_root: Option<PathBuf>,
    pub min_dim: u32,
    pub min_tok: usize,
    pub max_tok: usize,
    pub tokenizer: Tokenizer,
    pub report: Option<PathBuf>,
}

pub fn filter(a: FilterArgs) -> CliResult<()> {
    let params = FilterParams {
        min_dim: a.min_dim,
        min_tok: a.min_tok,
        max_tok: a.max_tok,
        tokenizer: a.tokenizer,
    };
    let stages = FilterStage::parse_list(&a.stages, &params).config()?;
    if stages.is_empty() {
        return config_err("no filter stages given");
    }
    let m = load_with_info(&a.input, a.image_root.as_deref())?;
    let (out, report) = run_pipeline(&m, &stages).stage("filter")?;
    write_manifest(&out, &a.output).stage("filter")?;
    if let Some(p) = &a.report {
        write_json(&report, p).stage("filter")?;
    }
    eprintln!(
        "filter: {} in, {} kept, {} removed",
        report.input_count, report.kept_count, report.removed_count
    );
    Ok(())
}

// ---- dedup ----

pub struct DedupArgs {
    pub inputs: Vec<PathBuf>,
    pub output_dir: PathBuf,
    pub mode: DedupMode,
    pub scope: DedupScope,
    pub chunk_size: usize,
    pub threshold: f64,
    pub classes: Option<PathBuf>,
    pub image_root: Option<PathBuf>,
}

#[derive(Serialize)]
struct DedupSummary {
    input_count: usize,
    output_count: usize,
    image_classes: usize,
    text_classes: usize,
}

/// Image dedup over the concatenation of all inputs, split back afterwards.
fn dedup_images_multi(
    ms: &[DatasetManifest],
    scope: DedupScope,
    chunk: usize,
) -> anyhow::Result<(Vec<DatasetManifest>, Vec<DuplicateClass>)> {
    let flat: Vec<Sample> = ms.iter().flat_map(|m| m.samples.iter().cloned()).collect();
    let combined = DatasetManifest::new("combined", flat);
    let (kept, classes) = dedup_images(&combined, scope, chunk)?;
    // `kept` is an order-preserving subsequence of `combined`.
    let mut it = kept.samples.iter().peekable();
    let mut keep = Vec::with_capacity(combined.len());
    for s in &combined.samples {
        let hit = it.peek() == Some(&s);
        if hit {
            it.next();
        }
        keep.push(hit);
    }
    let mut off = 0;
    let out = ms
        .iter()
        .map(|m| {
            let samples = m
                .samples
                .iter()
                .enumerate()
                .filter(|(i, _)| keep[off + i])
                .map(|(_, s)| s.clone())
                .collect();
            off += m.len();
            m.with_samples(samples)
        })
        .collect();
    Ok((out, classes))
}

pub fn dedup(a: DedupArgs) -> CliResult<()> {
    if a.inputs.is_empty() {
        return config_err("no inputs");
    }
    if !a.output_dir.is_dir() {
        return config_err(format!("output directory {} does not exist", a.output_dir.display()));
    }
    let cfg = TextDedupConfig {
        threshold: a.threshold,
        ..Default::default()
    };
    let mut ms = Vec::new();
    for p in &a.inputs {
        ms.push(load_with_info(p, a.image_root.as_deref())?);
    }
    let mut names = std::collections::BTreeSet::new();
    if let Some(m) = ms.iter().find(|m| !names.insert(m.name.clone())) {
        return config_err(format!("two inputs share the name `{}`", m.name));
    }
    let input_count = ms.iter().map(|m| m.len()).sum();
    let mut classes = Vec::new();
    let (mut image_classes, mut text_classes) = (0, 0);
    if matches!(a.mode, DedupMode::Image | DedupMode::Both) {
        let (out, c) = dedup_images_multi(&ms, a.scope, a.chunk_size.max(1)).stage("dedup_images")?;
        image_classes = c.len();
        ms = out;
        classes.extend(c);
    }
    if matches!(a.mode, DedupMode::Text | DedupMode::Both) {
        let (out, c) = dedup_texts(&ms, &cfg).stage("dedup_texts")?;
        text_classes = c.len();
        ms = out;
        classes.extend(c);
    }
    for m in &ms {
        write_manifest(m, a.output_dir.join(format!("{}.jsonl", m.name))).stage("dedup")?;
    }
    if let Some(p) = &a.classes {
        write_classes(&classes, p).stage("dedup")?;
    }
    print_json(&DedupSummary {
        input_count,
        output_count: ms.iter().map(|m| m.len()).sum(),
        image_classes,
        text_classes,
    });
    Ok(())
}

// ---- index / scrub ----

pub fn index(benchmarks: &[PathBuf], output: &Path, image_root: Option<&Path>) -> CliResult<()> {
    if benchmarks.is_empty() {
        return config_err("no benchmark manifests given");
    }
    let mut ms = Vec::new();
    for p in benchmarks {
        ms.push(load_with_info(p, image_root)?);
    }
    let idx = build_index(&ms).stage("index")?;
    idx.save(output).stage("index")?;
    eprintln!("index: {} image hashes, {} text keys", idx.image_hashes.len(), idx.text_keys.len());
    Ok(())
}

pub fn scrub_cmd(input: &Path, index: &Path, output: &Path, image_root: Option<&Path>, report: Option<&Path>) -> CliResult<()> {
    let idx = BenchmarkIndex::load(index).config()?;
    let m = load_with_info(input, image_root)?;
    let (out, r) = scrub(&m, &idx);
    write_manifest(&out, output).stage("scrub")?;
    if let Some(p) = report {
        write_json(&r, p).stage("scrub")?;
    }
    eprintln!("scrub: {} in, {} kept, {} removed", r.input_count, r.kept_count, r.removed_count);
    Ok(())
}

// ---- synth ----

fn finish_synth(samples: Vec<Sample>, name: &str, report: &SynthReport, output: &Path, report_path: Option<&Path>) -> CliResult<()> {
    write_manifest(&DatasetManifest::new(name, samples), output).stage("synth")?;
    if let Some(p) = report_path {
        write_json(report, p).stage("synth")?;
    }
    eprintln!(
        "synth: {} attempted, {} emitted, {} dropped",
        report.attempted,
        report.emitted,
        report.dropped.len()
    );
    Ok(())
}

pub fn synth_ocr(
    questions: &Path,
    image_dir: &Path,
    dataset: &str,
    client: &dyn ChatClient,
    output: &Path,
    report: Option<&Path>,
) -> CliResult<()> {
    let qs: Vec<OcrQuestion> = read_jsonl(questions).config()?;
    std::fs::create_dir_all(image_dir).config()?;
    let (samples, r) = synthesize_ocr_samples(&qs, client, &RenderConfig::default(), image_dir, dataset).stage("ocr")?;
    finish_synth(samples, dataset, &r, output, report)
}

pub fn synth_template(records: &Path, templates: &Path, n_options: usize, seed: u64, output: &Path) -> CliResult<()> {
    let recs: Vec<LabeledRecord> = read_jsonl(records).config()?;
    let temps: Vec<QaTemplate> = read_json(templates).config()?;
    let samples = template_vqa(&recs, &temps, n_options, seed).stage("template_vqa")?;
    let r = SynthReport {
        attempted: samples.len(),
        emitted: samples.len(),
        dropped: Vec::new(),
    };
    finish_synth(samples, "template_vqa", &r, output, None)
}

fn read_image(uri: &ImageRef, root: &Path) -> anyhow::Result<Vec<u8>> {
    let p = uri.resolve(root);
    std::fs::read(&p).with_context(|| format!("reading {}", p.display()))
}

/// Caption samples (`answer` holds the caption) become self-instruct inputs.
pub fn synth_self_instruct(
    input: &Path,
    image_root: &Path,
    examples: &Path,
    seed: u64,
    client: &dyn ChatClient,
    output: &Path,
    report: Option<&Path>,
) -> CliResult<()> {
    let m = load_manifest(input).config()?;
    let ex: Vec<String> = read_json(examples).config()?;
    let [e1, e2] = <[String; 2]>::try_from(ex)
        .map_err(|_| anyhow!("{} must hold exactly two examples", examples.display()))
        .config()?;
    let mut items = Vec::new();
    for s in &m.samples {
        let (Some(img), Some(caption)) = (s.images.first(), s.answer.as_ref()) else {
            return config_err(format!("sample `{}` needs an image and a caption", s.id));
        };
        items.push(CaptionedImage {
            id: s.id.clone(),
            source_dataset: s.source_dataset.clone(),
            image: img.clone(),
            image_bytes: read_image(img, image_root).config()?,
            modality: s.modality,
            caption: caption.clone(),
        });
    }
    let (samples, r) = self_instruct_vqa(&items, [&e1, &e2], client, seed);
    finish_synth(samples, &m.name, &r, output, report)
}

pub fn synth_cot(
    input: &Path,
    image_root: Option<&Path>,
    distiller: &dyn ChatClient,
    checker: &dyn ChatClient,
    output: &Path,
    report: Option<&Path>,
) -> CliResult<()> {
    let m = load_manifest(input).config()?;
    let (samples, r) = distill_and_validate(&m.samples, image_root, distiller, checker);
    finish_synth(samples, &m.name, &r, output, report)
}

/// One caption job: the image, its metadata, and the stage-1 coarse caption.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionJob {
    pub id: String,
    pub source_dataset: String,
    pub image: String,
    pub modality: ModalityTag,
    #[serde(default)]
    pub knee: bool,
    pub disease_or_organ: String,
    #[serde(default)]
    pub knowledge: String,
    pub coarse_caption: String,
    #[serde(default)]
    pub bboxes: Vec<BBox>,
}

pub fn synth_caption(jobs: &Path, image_root: &Path, client: &dyn ChatClient, output: &Path, report: Option<&Path>) -> CliResult<()> {
    let jobs: Vec<CaptionJob> = read_jsonl(jobs).config()?;
    let mut inputs = Vec::new();
    for j in jobs {
        let image = ImageRef::new(&j.image);
        inputs.push(CaptionInput {
            image_bytes: read_image(&image, image_root).config()?,
            id: j.id,
            source_dataset: j.source_dataset,
            image,
            modality: j.modality,
            knee: j.knee,
            disease_or_organ: j.disease_or_organ,
            knowledge: j.knowledge,
            coarse_caption: j.coarse_caption,
            rois: j.bboxes.into_iter().map(Roi::from_bbox).collect(),
        });
    }
    let (samples, r) = caption_pipeline(&inputs, client);
    finish_synth(samples, "captions", &r, output, report)
}

// ---- mix ----

pub fn mix(spec_path: &Path, seed: u64, output: &Path, report: Option<&Path>, binary_frac: Option<f64>) -> CliResult<()> {
    let text = std::fs::read_to_string(spec_path)
        .with_context(|| format!("reading {}", spec_path.display()))
        .config()?;
    let mut spec: MixtureSpec = if spec_path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(anyhow::Error::from).config()?
    } else {
        toml::from_str(&text).map_err(anyhow::Error::from).config()?
    };
    let base = spec_path.parent().unwrap_or(Path::new("."));
    for e in &mut spec.entries {
        if e.path.is_relative() {
            e.path = base.join(&e.path);
        }
    }
    spec.validate().config()?;
    if let Some(missing) = spec.entries.iter().find(|e| !e.path.exists()) {
        return config_err(format!("mixture entry {} does not exist", missing.path.display()));
    }
    let (mut m, r) = build_mixture(&spec, seed).stage("mix")?;
    if spec.stage == MixtureStage::Rl {
        let mut cfg = RlConfig::default();
        if let Some(f) = binary_frac {
            cfg.target_binary_frac = f;
        }
        let name = m.name.clone();
        m = build_rl_dataset(std::slice::from_ref(&m), &cfg, seed).stage("rl")?;
        m.name = name;
    }
    write_manifest(&m, output).stage("mix")?;
    if let Some(p) = report {
        write_json(&r, p).stage("mix")?;
    }
    eprintln!("mix: {} samples", m.len());
    Ok(())
}

// ---- reward ----

#[derive(Deserialize)]
struct ResponseLine {
    id: String,
    response: String,
}

#[derive(Serialize)]
struct RewardLine<'a> {
    id: &'a str,
    format: bool,
    accuracy: bool,
    reward: f64,
}

pub fn reward(responses: &Path, refs: &Path, cfg: RewardConfigF64) -> CliResult<()> {
    let lines: Vec<ResponseLine> = read_jsonl(responses).config()?;
    let m = load_manifest(refs).config()?;
    let by_id: HashMap<&str, &Sample> = m.samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let spec = FormatSpec::default();
    let stdout = std::io::stdout();
    let mut w = BufWriter::new(stdout.lock());
    let mut sum = 0.0;
    for l in &lines {
        let Some(gt) = by_id.get(l.id.as_str()) else {
            return config_err(format!("no reference for response `{}`", l.id));
        };
        let r = total_reward(&l.response, gt, &cfg, &spec);
        sum += r;
        let line = RewardLine {
            id: &l.id,
            format: format_reward(&l.response, &spec),
            accuracy: accuracy_reward(&l.response, gt, &spec),
            reward: r,
        };
        writeln!(w, "{}", serde_json::to_string(&line).expect("serializes")).stage("reward")?;
    }
    let mean = if lines.is_empty() { 0.0 } else { sum / lines.len() as f64 };
    writeln!(w, "{}", serde_json::json!({"count": lines.len(), "mean_reward": mean})).stage("reward")?;
    Ok(())
}

// ---- eval ----

pub struct EvalArgs {
    pub benchmark: String,
    pub input: PathBuf,
    pub templates: Option<PathBuf>,
    pub image_root: Option<PathBuf>,
    pub predictions_cache: Option<PathBuf>,
    pub save_predictions: Option<PathBuf>,
    pub verdicts: PathBuf,
    pub summary: Option<PathBuf>,
}

pub fn eval(a: EvalArgs, model: &dyn ChatClient, judge: &dyn ChatClient) -> CliResult<()> {
    let m = load_manifest(&a.input).config()?;
    let records = load_benchmark(&m, &a.benchmark).config()?;
    let templates = match &a.templates {
        Some(d) => PromptTemplates::from_dir(d).config()?,
        None => PromptTemplates::default(),
    };
    let cache = a.predictions_cache.as_deref().map(PredictionCache::load).transpose().config()?;
    let opts = RunOptions {
        templates,
        image_root: a.image_root.clone(),
        cache,
    };
    let (out, summary) = run_benchmark(&records, model, judge, &opts);
    let f = File::create(&a.verdicts)
        .with_context(|| format!("creating {}", a.verdicts.display()))
        .stage("eval")?;
    let mut w = BufWriter::new(f);
    write_verdicts(&out, &mut w).and_then(|_| w.flush()).stage("eval")?;
    if let Some(p) = &a.save_predictions {
        PredictionCache::write(&out, p).stage("eval")?;
    }
    if let Some(p) = &a.summary {
        write_json(&summary, p).stage("eval")?;
    }
    print_json(&summary);
    Ok(())
}

// ---- metrics ----

#[derive(Deserialize)]
struct PredLine {
    id: String,
    prediction: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RefLine {
    id: String,
    #[serde(default)]
    reference: Option<String>,
    #[serde(default)]
    references: Option<Vec<String>>,
}

pub struct MetricsArgs {
    pub pred: PathBuf,
    pub refs: PathBuf,
    pub metrics: String,
    pub adapter_endpoint: Option<String>,
    pub adapter_stub: Option<PathBuf>,
    pub scale: bool,
    pub output: Option<PathBuf>,
}

pub fn metrics(a: MetricsArgs) -> CliResult<()> {
    let preds: Vec<PredLine> = read_jsonl(&a.pred).config()?;
    let ref_lines: Vec<RefLine> = read_jsonl(&a.refs).config()?;
    let mut refs: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for r in ref_lines {
        let mut all = r.references.unwrap_or_default();
        all.extend(r.reference);
        if all.is_empty() {
            return config_err(format!("reference line `{}` has no text", r.id));
        }
        refs.insert(r.id, all);
    }
    let mut cands = Vec::new();
    let mut grouped = Vec::new();
    for p in preds {
        let Some(r) = refs.get(&p.id) else {
            return config_err(format!("no reference for prediction `{}`", p.id));
        };
        cands.push(p.prediction);
        grouped.push(r.clone());
    }

    let names: Vec<String> = a
        .metrics
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    let (native, external): (Vec<String>, Vec<String>) = names.into_iter().partition(|n| NATIVE_METRICS.contains(&n.as_str()));
    if let Some(bad) = external.iter().find(|n| !EXTERNAL_METRICS.contains(&n.as_str())) {
        return config_err(format!("unknown metric `{bad}`"));
    }
    let http = a
        .adapter_endpoint
        .as_ref()
        .map(|e| HttpMetricAdapter::new(e.clone(), 120))
        .transpose()
        .config()?;
    let stub = a
        .adapter_stub
        .as_deref()
        .map(|p| read_json::<BTreeMap<String, f64>>(p).map(StubMetricAdapter))
        .transpose()
        .config()?;
    let adapter: Option<&dyn MetricAdapter> = match (&http, &stub) {
        (Some(h), _) => Some(h),
        (None, Some(s)) => Some(s),
        (None, None) => None,
    };
    let mut plan = MetricPlan {
        native,
        ..Default::default()
    };
    if let Some(ad) = adapter {
        for n in &external {
            plan.adapters.insert(n.clone(), ad);
        }
    } else if !external.is_empty() {
        tracing::warn!("no metric adapter configured; omitting {}", external.join(","));
    }
    let mut report: MetricReportF64 = score_corpus(&cands, &grouped, &plan).stage("metrics")?;
    if a.scale {
        report = scale_report(&report).stage("metrics")?;
    }
    if let Some(p) = &a.output {
        write_json(&report, p).stage("metrics")?;
    }
    print_json(&report);
    Ok(())
}
