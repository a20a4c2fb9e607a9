//! Declarative multi-stage recipes: a TOML config that is fully validated
//! before any stage runs, and a report whose counts balance stage by stage.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};

use medforge_core::client::{AnnotatorConfig, ChatClient, Provider};
use medforge_core::contamination::{build_index, scrub, BenchmarkIndex};
use medforge_core::dedup::{attach_image_info, dedup_images, dedup_texts, write_classes, DedupScope, TextDedupConfig};
use medforge_core::filter::{run_pipeline, FilterParams, FilterReport, FilterStage};
use medforge_core::mixture::{build_rl_dataset, RlConfig};
use medforge_core::synth::{distill_and_validate, SynthReport};
use medforge_core::text::Tokenizer;
use medforge_core::version::CONFIG_SCHEMA_VERSION;
use medforge_core::{load_manifest, write_manifest, DatasetManifest};

use crate::failure::{Classify, CliResult, Failure};

fn default_schema() -> u32 {
    CONFIG_SCHEMA_VERSION
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub input: PathBuf,
    pub output: PathBuf,
    #[serde(default)]
    pub image_root: Option<PathBuf>,
    #[serde(default)]
    pub report: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub providers: BTreeMap<String, ProviderConfig>,
    pub stages: Vec<StageConfig>,
}

/// A named annotator. `provider` is `live` or `stub:<fixture>`; live ones need
/// `endpoint` and `model`.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub provider: String,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub concurrency: Option<usize>,
    #[serde(default)]
    pub timeout_secs: Option<u64>,
}

impl ProviderConfig {
    pub fn annotator(&self) -> Option<AnnotatorConfig> {
        let mut cfg = AnnotatorConfig::new(self.endpoint.clone()?, self.model.clone()?);
        if let Some(c) = self.concurrency {
            cfg.concurrency_bound = c;
        }
        if let Some(t) = self.timeout_secs {
            cfg.timeout_secs = t;
        }
        Some(cfg)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DedupMode {
    Image,
    Text,
    #[default]
    Both,
}

fn default_chunk() -> usize {
    4096
}

fn default_scope() -> DedupScope {
    DedupScope::WithinDataset
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StageConfig {
    Filter {
        #[serde(default)]
        name: Option<String>,
        rules: Vec<String>,
        #[serde(default)]
        min_dim: Option<u32>,
        #[serde(default)]
        min_tok: Option<usize>,
        #[serde(default)]
        max_tok: Option<usize>,
        #[serde(default)]
        tokenizer: Option<Tokenizer>,
    },
    Dedup {
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        mode: DedupMode,
        #[serde(default = "default_scope")]
        scope: DedupScope,
        #[serde(default = "default_chunk")]
        chunk_size: usize,
        #[serde(default)]
        classes: Option<PathBuf>,
        #[serde(default)]
        text: Option<TextDedupConfig>,
    },
    Scrub {
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        index: Option<PathBuf>,
        #[serde(default)]
        benchmarks: Vec<PathBuf>,
    },
    Cot {
        #[serde(default)]
        name: Option<String>,
        distiller: String,
        checker: String,
    },
    Rl {
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        rl: RlConfig,
    },
}

impl StageConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            StageConfig::Filter { .. } => "filter",
            StageConfig::Dedup { .. } => "dedup",
            StageConfig::Scrub { .. } => "scrub",
            StageConfig::Cot { .. } => "cot",
            StageConfig::Rl { .. } => "rl",
        }
    }

    pub fn name(&self) -> String {
        let n = match self {
            StageConfig::Filter { name, .. }
            | StageConfig::Dedup { name, .. }
            | StageConfig::Scrub { name, .. }
            | StageConfig::Cot { name, .. }
            | StageConfig::Rl { name, .. } => name,
        };
        n.clone().unwrap_or_else(|| self.kind().to_string())
    }
}

/// Command-line values that win over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub image_root: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl PipelineConfig {
    pub fn parse(text: &str, base: &Path) -> anyhow::Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text)?;
        cfg.rebase(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).with_context(|| format!("parsing {}", path.display()))
    }

    /// Relative paths in the file are relative to the file itself.
    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.input);
        fix(&mut self.output);
        self.image_root.iter_mut().for_each(fix);
        self.report.iter_mut().for_each(fix);
        for p in self.providers.values_mut() {
            if let Some(rest) = p.provider.strip_prefix("stub:") {
                let path = Path::new(rest);
                if path.is_relative() {
                    p.provider = format!("stub:{}", base.join(path).display());
                }
            }
        }
        for s in &mut self.stages {
            match s {
                StageConfig::Dedup { classes, .. } => classes.iter_mut().for_each(fix),
                StageConfig::Scrub { index, benchmarks, .. } => {
                    index.iter_mut().for_each(fix);
                    benchmarks.iter_mut().for_each(fix);
                }
                _ => {}
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.input {
            self.input = v.clone();
        }
        if let Some(v) = &o.output {
            self.output = v.clone();
        }
        if let Some(v) = &o.image_root {
            self.image_root = Some(v.clone());
        }
        if let Some(v) = &o.report {
            self.report = Some(v.clone());
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
    }

    fn filter_params(min_dim: Option<u32>, min_tok: Option<usize>, max_tok: Option<usize>, tokenizer: Option<Tokenizer>) -> FilterParams {
        let d = FilterParams::default();
        FilterParams {
            min_dim: min_dim.unwrap_or(d.min_dim),
            min_tok: min_tok.unwrap_or(d.min_tok),
            max_tok: max_tok.unwrap_or(d.max_tok),
            tokenizer: tokenizer.unwrap_or(d.tokenizer),
        }
    }

    fn provider(&self, name: &str) -> anyhow::Result<(Provider, Option<AnnotatorConfig>)> {
        let p = self.providers.get(name).ok_or_else(|| anyhow!("unknown provider `{name}`"))?;
        let provider: Provider = p.provider.parse()?;
        let annotator = p.annotator();
        match &provider {
            Provider::Live if annotator.is_none() => bail!("live provider `{name}` needs `endpoint` and `model`"),
            Provider::Stub(path) if !path.exists() => bail!("provider `{name}`: fixture {} does not exist", path.display()),
            _ => Ok((provider, annotator)),
        }
    }

    /// Every check that can fail without running a stage.
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            bail!("unsupported config schema_version {}", self.schema_version);
        }
        if self.stages.is_empty() {
            bail!("no stages declared");
        }
        let exists = |p: &Path, what: &str| -> anyhow::Result<()> {
            if p.exists() {
                Ok(())
            } else {
                bail!("{what} {} does not exist", p.display())
            }
        };
        exists(&self.input, "input")?;
        if let Some(r) = &self.image_root {
            exists(r, "image_root")?;
        }
        let out_dir = self.output.parent().filter(|p| !p.as_os_str().is_empty());
        if let Some(d) = out_dir {
            exists(d, "output directory")?;
        }
        let mut names = std::collections::BTreeSet::new();
        for s in &self.stages {
            let name = s.name();
            if !names.insert(name.clone()) {
                bail!("duplicate stage name `{name}`");
            }
            let ctx = || format!("stage `{name}`");
            match s {
                StageConfig::Filter {
                    rules,
                    min_dim,
                    min_tok,
                    max_tok,
                    tokenizer,
                    ..
                } => {
                    if rules.is_empty() {
                        bail!("{}: no rules", ctx());
                    }
                    let p = Self::filter_params(*min_dim, *min_tok, *max_tok, *tokenizer);
                    FilterStage::parse_list(&rules.join(","), &p).with_context(ctx)?;
                    if p.min_tok > p.max_tok {
                        bail!("{}: min_tok exceeds max_tok", ctx());
                    }
                }
                StageConfig::Dedup { text, chunk_size, .. } => {
                    let t = text.unwrap_or_default();
                    if t.bands == 0 || t.rows == 0 || t.bands * t.rows != t.k {
                        bail!("{}: bands x rows must equal k", ctx());
                    }
                    if *chunk_size == 0 {
                        bail!("{}: chunk_size must be positive", ctx());
                    }
                }
                StageConfig::Scrub { index, benchmarks, .. } => {
                    if index.is_none() && benchmarks.is_empty() {
                        bail!("{}: needs `index` or `benchmarks`", ctx());
                    }
                    for p in index.iter().chain(benchmarks) {
                        exists(p, &ctx())?;
                    }
                }
                StageConfig::Cot { distiller, checker, .. } => {
                    self.provider(distiller).with_context(ctx)?;
                    self.provider(checker).with_context(ctx)?;
                }
                StageConfig::Rl { rl, .. } => {
                    if !(0.0..=1.0).contains(&rl.target_binary_frac) {
                        bail!("{}: target_binary_frac must lie in [0, 1]", ctx());
                    }
                    if !(0.0 <= rl.mcq_share_min && rl.mcq_share_min <= rl.mcq_share_max && rl.mcq_share_max <= 1.0) {
                        bail!("{}: MCQ share band must satisfy 0 <= min <= max <= 1", ctx());
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub kind: String,
    pub input_count: usize,
    pub output_count: usize,
    pub removed_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<FilterReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dedup_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesis: Option<SynthReport>,
    pub wall_ms: u64,
}

impl StageReport {
    pub fn balanced(&self) -> bool {
        let own = self.input_count == self.output_count + self.removed_count;
        let filter = self
            .filter
            .as_ref()
            .is_none_or(|f| f.balanced() && f.input_count == self.input_count && f.kept_count == self.output_count);
        let synth = self
            .synthesis
            .as_ref()
            .is_none_or(|s| s.balanced() && s.attempted == self.input_count && s.emitted == self.output_count);
        own && filter && synth
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub seed: u64,
    pub input_count: usize,
    pub output_count: usize,
    pub stages: Vec<StageReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
}

impl RunReport {
    /// Each stage balances, consecutive stages chain, and the ends match.
    pub fn balanced(&self) -> bool {
        let mut n = self.input_count;
        for s in &self.stages {
            if s.input_count != n || !s.balanced() {
                return false;
            }
            n = s.output_count;
        }
        self.failed_stage.is_some() || n == self.output_count
    }
}

fn stage_report(name: String, kind: &str, input: usize, output: usize) -> StageReport {
    StageReport {
        name,
        kind: kind.to_string(),
        input_count: input,
        output_count: output,
        removed_count: input - output,
        ..Default::default()
    }
}

fn make_client(cfg: &PipelineConfig, name: &str) -> anyhow::Result<Box<dyn ChatClient>> {
    let (provider, annotator) = cfg.provider(name)?;
    Ok(provider.client(annotator.as_ref())?)
}

fn run_stage(cfg: &PipelineConfig, stage: &StageConfig, m: DatasetManifest) -> anyhow::Result<(DatasetManifest, StageReport)> {
    let name = stage.name();
    let n = m.len();
    Ok(match stage {
        StageConfig::Filter {
            rules,
            min_dim,
            min_tok,
            max_tok,
            tokenizer,
            ..
        } => {
            let p = PipelineConfig::filter_params(*min_dim, *min_tok, *max_tok, *tokenizer);
            let stages = FilterStage::parse_list(&rules.join(","), &p)?;
            let (out, report) = run_pipeline(&m, &stages)?;
            let mut r = stage_report(name, "filter", n, out.len());
            r.filter = Some(report);
            (out, r)
        }
        StageConfig::Dedup {
            mode,
            scope,
            chunk_size,
            classes,
            text,
            ..
        } => {
            let mut all = Vec::new();
            let mut cur = m;
            if matches!(mode, DedupMode::Image | DedupMode::Both) {
                let (out, c) = dedup_images(&cur, *scope, *chunk_size)?;
                cur = out;
                all.extend(c);
            }
            if matches!(mode, DedupMode::Text | DedupMode::Both) {
                let (mut out, c) = dedup_texts(std::slice::from_ref(&cur), &text.unwrap_or_default())?;
                cur = out.pop().expect("one manifest in, one out");
                all.extend(c);
            }
            if let Some(path) = classes {
                write_classes(&all, path)?;
            }
            let mut r = stage_report(name, "dedup", n, cur.len());
            r.dedup_classes = Some(all.len());
            (cur, r)
        }
        StageConfig::Scrub { index, benchmarks, .. } => {
            let mut idx = match index {
                Some(p) => BenchmarkIndex::load(p)?,
                None => BenchmarkIndex::default(),
            };
            if !benchmarks.is_empty() {
                let ms = benchmarks.iter().map(load_manifest).collect::<Result<Vec<_>, _>>()?;
                let built = build_index(&ms)?;
                idx.image_hashes.extend(built.image_hashes);
                idx.text_keys.extend(built.text_keys);
                idx.benchmark_names.extend(built.benchmark_names);
            }
            let (out, report) = scrub(&m, &idx);
            let mut r = stage_report(name, "scrub", n, out.len());
            r.filter = Some(report);
            (out, r)
        }
        StageConfig::Cot { distiller, checker, .. } => {
            let d = make_client(cfg, distiller)?;
            let c = make_client(cfg, checker)?;
            let (samples, report) = distill_and_validate(&m.samples, cfg.image_root.as_deref(), d.as_ref(), c.as_ref());
            let out = m.with_samples(samples);
            let mut r = stage_report(name, "cot", n, out.len());
            r.synthesis = Some(report);
            (out, r)
        }
        StageConfig::Rl { rl, .. } => {
            let mut out = build_rl_dataset(std::slice::from_ref(&m), rl, cfg.seed)?;
            out.name = m.name.clone();
            let r = stage_report(name, "rl", n, out.len());
            (out, r)
        }
    })
}

/// Load, run every stage in order, write the output manifest and report.
/// The report is also written when a stage fails.
pub fn run(cfg: &PipelineConfig) -> CliResult<RunReport> {
    cfg.validate().config()?;
    let mut m = load_manifest(&cfg.input).config()?;
    if let Some(root) = &cfg.image_root {
        attach_image_info(&mut m, root).stage("image_info")?;
    }
    let mut report = RunReport {
        schema_version: cfg.schema_version,
        seed: cfg.seed,
        input_count: m.len(),
        ..Default::default()
    };
    for stage in &cfg.stages {
        let t = Instant::now();
        tracing::info!(stage = %stage.name(), input = m.len(), "running stage");
        match run_stage(cfg, stage, m.clone()) {
            Ok((out, mut r)) => {
                r.wall_ms = t.elapsed().as_millis() as u64;
                report.stages.push(r);
                m = out;
            }
            Err(e) => {
                report.failed_stage = Some(stage.name());
                write_report(cfg, &report).ok();
                return Err(Failure::Stage {
                    stage: stage.name(),
                    source: e,
                });
            }
        }
    }
    report.output_count = m.len();
    write_manifest(&m, &cfg.output).stage("write_output")?;
    write_report(cfg, &report).stage("write_report")?;
    Ok(report)
}

fn write_report(cfg: &PipelineConfig, report: &RunReport) -> anyhow::Result<()> {
    if let Some(path) = &cfg.report {
        let json = serde_json::to_string_pretty(report)?;
        std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
