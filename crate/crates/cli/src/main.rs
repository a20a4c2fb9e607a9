//! `medforge`: curation, synthesis, mixture and evaluation from one binary.
//!
//! Exit codes: 0 success, 2 configuration error (nothing was run),
//! 3 a stage failed.

mod commands;
mod failure;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use medforge_core::client::Provider;
use medforge_core::dedup::DedupScope;
use medforge_core::text::Tokenizer;
use medforge_core::version::version_info;
use medforge_core::RewardConfigF64;

use commands::*;
use failure::{Classify, CliResult};
use pipeline::{DedupMode, Overrides, PipelineConfig};

#[derive(Parser)]
#[command(name = "medforge", version, about = "Medical multimodal corpus curation and evaluation toolkit")]
struct Cli {
    /// Log filter, e.g. `info` or `medforge_core=debug`. Falls back to RUST_LOG.
    #[arg(long, global = true)]
    log: Option<String>,
    #[command(subcommand)]
    command: Command,
}

/// Annotator selection shared by every client-backed command.
#[derive(Args, Clone)]
struct ProviderArgs {
    /// `live` or `stub:<fixture.json>`.
    #[arg(long)]
    provider: Provider,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
}

impl ProviderArgs {
    fn client(&self) -> CliResult<Box<dyn medforge_core::client::ChatClient>> {
        client_for(&self.provider, self.endpoint.as_deref(), self.model.as_deref(), self.concurrency)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Within,
    Cross,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Image,
    Text,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum TokenizerArg {
    Words,
    Whitespace,
}

#[derive(Subcommand)]
enum Command {
    /// Apply rule filters to a manifest.
    Filter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Comma-separated: image_size, caption_length.
        #[arg(long, default_value = "image_size,caption_length")]
        stages: String,
        /// Read image dimensions from disk under this root.
        #[arg(long)]
        image_root: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        min_dim: u32,
        #[arg(long, default_value_t = 10)]
        min_tok: usize,
        #[arg(long, default_value_t = 1024)]
        max_tok: usize,
        #[arg(long, value_enum, default_value_t = TokenizerArg::Words)]
        tokenizer: TokenizerArg,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Collapse exact image duplicates and near-duplicate texts.
    Dedup {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        /// Each input is written here under its own name.
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Both)]
        mode: ModeArg,
        #[arg(long, value_enum, default_value_t = ScopeArg::Within)]
        scope: ScopeArg,
        #[arg(long, default_value_t = 4096)]
        chunk_size: usize,
        #[arg(long, default_value_t = 0.8)]
        threshold: f64,
        /// Write duplicate classes as JSON lines.
        #[arg(long)]
        classes: Option<PathBuf>,
        #[arg(long)]
        image_root: Option<PathBuf>,
    },
    /// Build a contamination index from benchmark manifests.
    Index {
        #[arg(long = "benchmark", required = true)]
        benchmarks: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        image_root: Option<PathBuf>,
    },
    /// Remove samples overlapping a contamination index.
    Scrub {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        image_root: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Synthesize new samples.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Assemble a training mixture from a spec file (TOML or JSON).
    Mix {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// RL stage only: upper bound on the yes/no share.
        #[arg(long)]
        binary_frac: Option<f64>,
    },
    /// Score responses with the format + accuracy reward.
    Reward {
        /// JSON lines of `{id, response}`.
        #[arg(long)]
        responses: PathBuf,
        /// Manifest holding the ground truth.
        #[arg(long)]
        refs: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        format_weight: f64,
        #[arg(long, default_value_t = 1.0)]
        accuracy_weight: f64,
    },
    /// Run a benchmark through a model and a judge.
    Eval(EvalCli),
    /// Corpus-level report-generation metrics.
    Metrics {
        /// JSON lines of `{id, prediction}`.
        #[arg(long)]
        pred: PathBuf,
        /// JSON lines of `{id, reference}` or `{id, references: [..]}`.
        #[arg(long = "ref")]
        refs: PathBuf,
        #[arg(long, default_value = "rouge_l,bleu,meteor,cider")]
        metrics: String,
        /// HTTP backend for model-based metrics.
        #[arg(long)]
        adapter_endpoint: Option<String>,
        /// JSON map of fixed metric values, for offline runs.
        #[arg(long, conflicts_with = "adapter_endpoint")]
        adapter_stub: Option<PathBuf>,
        /// Report values on a 0-100 scale.
        #[arg(long)]
        scale: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run a multi-stage recipe from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        image_root: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Validate the config and exit.
        #[arg(long)]
        check: bool,
    },
    /// Print toolkit, schema and metric-parameter versions.
    Version,
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Render questions as images and keep those a reasoner answers correctly.
    Ocr {
        /// JSON lines of `{id, question, options?, answer}`.
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        image_dir: PathBuf,
        #[arg(long, default_value = "ocr")]
        dataset: String,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        provider: ProviderArgs,
    },
    /// MCQs from labeled records and question templates.
    TemplateVqa {
        #[arg(long)]
        records: PathBuf,
        /// JSON array of templates.
        #[arg(long)]
        templates: PathBuf,
        #[arg(long, default_value_t = 4)]
        n_options: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Few-shot MCQ generation from captioned images.
    SelfInstruct {
        /// Caption manifest: one image per sample, caption in `answer`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        image_root: PathBuf,
        /// JSON array with exactly two example questions.
        #[arg(long)]
        examples: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        provider: ProviderArgs,
    },
    /// Distill reasoning chains and keep those a checker finds consistent.
    Cot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        image_root: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        provider: ProviderArgs,
        /// Defaults to the distilling provider.
        #[arg(long)]
        checker_provider: Option<Provider>,
    },
    /// Long-form captions from coarse captions and regions of interest.
    Caption {
        /// JSON lines of caption jobs.
        #[arg(long)]
        jobs: PathBuf,
        #[arg(long)]
        image_root: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        provider: ProviderArgs,
    },
}

#[derive(Args)]
struct EvalCli {
    #[arg(long)]
    benchmark: String,
    #[arg(long)]
    input: PathBuf,
    /// Model under test: `live` or `stub:<fixture.json>`.
    #[arg(long)]
    provider: Provider,
    #[arg(long)]
    model_endpoint: Option<String>,
    #[arg(long)]
    model_name: Option<String>,
    #[arg(long)]
    judge_provider: Provider,
    #[arg(long)]
    judge_endpoint: Option<String>,
    #[arg(long)]
    judge_model: Option<String>,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    /// Directory of `eval_<type>.txt` prompt overrides.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    image_root: Option<PathBuf>,
    /// Reuse stored predictions instead of calling the model.
    #[arg(long)]
    predictions_cache: Option<PathBuf>,
    #[arg(long)]
    save_predictions: Option<PathBuf>,
    #[arg(long)]
    verdicts: PathBuf,
    #[arg(long)]
    summary: Option<PathBuf>,
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Filter {
            input,
            output,
            stages,
            image_root,
            min_dim,
            min_tok,
            max_tok,
            tokenizer,
            report,
        } => filter(FilterArgs {
            input,
            output,
            stages,
            image_root,
            min_dim,
            min_tok,
            max_tok,
            tokenizer: match tokenizer {
                TokenizerArg::Words => Tokenizer::Words,
                TokenizerArg::Whitespace => Tokenizer::Whitespace,
            },
            report,
        }),
        Command::Dedup {
            inputs,
            output_dir,
            mode,
            scope,
            chunk_size,
            threshold,
            classes,
            image_root,
        } => dedup(DedupArgs {
            inputs,
            output_dir,
            mode: match mode {
                ModeArg::Image => DedupMode::Image,
                ModeArg::Text => DedupMode::Text,
                ModeArg::Both => DedupMode::Both,
            },
            scope: match scope {
                ScopeArg::Within => DedupScope::WithinDataset,
                ScopeArg::Cross => DedupScope::CrossDataset,
            },
            chunk_size,
            threshold,
            classes,
            image_root,
        }),
        Command::Index {
            benchmarks,
            output,
            image_root,
        } => index(&benchmarks, &output, image_root.as_deref()),
        Command::Scrub {
            input,
            index,
            output,
            image_root,
            report,
        } => scrub_cmd(&input, &index, &output, image_root.as_deref(), report.as_deref()),
        Command::Synth(s) => synth(s),
        Command::Mix {
            spec,
            seed,
            output,
            report,
            binary_frac,
        } => mix(&spec, seed, &output, report.as_deref(), binary_frac),
        Command::Reward {
            responses,
            refs,
            format_weight,
            accuracy_weight,
        } => reward(
            &responses,
            &refs,
            RewardConfigF64 {
                format_weight,
                accuracy_weight,
            },
        ),
        Command::Eval(e) => {
            let model = client_for(&e.provider, e.model_endpoint.as_deref(), e.model_name.as_deref(), e.concurrency)?;
            let judge = client_for(
                &e.judge_provider,
                e.judge_endpoint.as_deref(),
                e.judge_model.as_deref(),
                e.concurrency,
            )?;
            eval(
                EvalArgs {
                    benchmark: e.benchmark,
                    input: e.input,
                    templates: e.templates,
                    image_root: e.image_root,
                    predictions_cache: e.predictions_cache,
                    save_predictions: e.save_predictions,
                    verdicts: e.verdicts,
                    summary: e.summary,
                },
                model.as_ref(),
                judge.as_ref(),
            )
        }
        Command::Metrics {
            pred,
            refs,
            metrics: m,
            adapter_endpoint,
            adapter_stub,
            scale,
            output,
        } => metrics(MetricsArgs {
            pred,
            refs,
            metrics: m,
            adapter_endpoint,
            adapter_stub,
            scale,
            output,
        }),
        Command::Run {
            config,
            input,
            output,
            image_root,
            report,
            seed,
            check,
        } => {
            let mut cfg = PipelineConfig::load(&config).config()?;
            cfg.apply(&Overrides {
                input,
                output,
                image_root,
                report,
                seed,
            });
            if check {
                cfg.validate().config()?;
                eprintln!("config ok: {} stages", cfg.stages.len());
                return Ok(());
            }
            let report = pipeline::run(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            if !report.balanced() {
                tracing::error!("run report does not balance");
            }
            Ok(())
        }
        Command::Version => {
            println!("{}", version_info());
            Ok(())
        }
    }
}

fn synth(cmd: SynthCommand) -> CliResult<()> {
    match cmd {
        SynthCommand::Ocr {
            questions,
            image_dir,
            dataset,
            output,
            report,
            provider,
        } => synth_ocr(
            &questions,
            &image_dir,
            &dataset,
            provider.client()?.as_ref(),
            &output,
            report.as_deref(),
        ),
        SynthCommand::TemplateVqa {
            records,
            templates,
            n_options,
            seed,
            output,
        } => synth_template(&records, &templates, n_options, seed, &output),
        SynthCommand::SelfInstruct {
            input,
            image_root,
            examples,
            seed,
            output,
            report,
            provider,
        } => synth_self_instruct(
            &input,
            &image_root,
            &examples,
            seed,
            provider.client()?.as_ref(),
            &output,
            report.as_deref(),
        ),
        SynthCommand::Cot {
            input,
            image_root,
            output,
            report,
            provider,
            checker_provider,
        } => {
            let distiller = provider.client()?;
            let checker = match checker_provider {
                Some(p) => client_for(&p, provider.endpoint.as_deref(), provider.model.as_deref(), provider.concurrency)?,
                None => provider.client()?,
            };
            synth_cot(
                &input,
                image_root.as_deref(),
                distiller.as_ref(),
                checker.as_ref(),
                &output,
                report.as_deref(),
            )
        }
        SynthCommand::Caption {
            jobs,
            image_root,
            output,
            report,
            provider,
        } => synth_caption(&jobs, &image_root, provider.client()?.as_ref(), &output, report.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { failure::EXIT_CONFIG } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    let filter = cli
        .log
        .as_deref()
        .map(EnvFilter::new)
        .unwrap_or_else(|| EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();

    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("medforge: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
