//! `i2s` — run test-time reasoning pipelines and baselines against a live
//! chat-completions endpoint or a deterministic mock script, build retrieval
//! indexes, and score persisted runs.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use i2s_core::harness::{
    self, eval_run, report_run, run_benchmark, MethodConfig, ProviderConfig, RunConfig, RunReport,
    ScoringMode,
};
use i2s_core::llm::{HttpProvider, LlmClient, MockProvider, MockScript, RetryPolicy};
use i2s_core::model::Method;
use i2s_core::pipeline::{I2sConfig, StageCtx};
use i2s_core::prompts::TemplateRegistry;
use i2s_core::refine::RefineConfig;
use i2s_core::retrieval::{
    build_bank, context_stats, load_demos_jsonl, save_index, Embedder, HashEmbedder, HttpEmbedder,
};
use serde::Deserialize;
use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;

#[derive(Parser)]
#[command(name = "i2s", version, about = "Insight-to-Solve reasoning pipelines and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand)]
enum Commands {
    /// Demonstration index management
    Index {
        #[command(subcommand)]
        action: IndexAction,
    },
    /// Execute a method over a dataset and persist traces
    Run(Box<RunArgs>),
    /// Score a persisted run
    Eval {
        /// Run directory produced by `run`
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        scoring: ScoringArg,
        /// Mock script for the judge provider (live judge uses
        /// I2S_JUDGE_BASE_URL / I2S_JUDGE_API_KEY)
        #[arg(long)]
        judge_mock_script: Option<PathBuf>,
    },
    /// Print the report of a persisted run
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Context-length statistics over a demo bank and a dataset
    Stats {
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Emit JSON instead of the aligned table
        #[arg(long)]
        json: bool,
    },
}

#[derive(Subcommand)]
enum IndexAction {
    /// Embed a demonstration bank and persist it with its manifest
    Build {
        /// JSONL file of {id, question, cot_trace, answer, domain}
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// File of demonstration ids to exclude, one per line
        #[arg(long)]
        exclude: Option<PathBuf>,
        /// Use the live embedding endpoint instead of the hash embedder
        #[arg(long)]
        live_embedder: bool,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Direct,
    Fewshot,
    TwoStep,
    I2s,
    I2sPlus,
    Sr,
    Php,
    Maj,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Direct => Method::Direct,
            MethodArg::Fewshot => Method::FewshotK,
            MethodArg::TwoStep => Method::TwoStep,
            MethodArg::I2s => Method::I2s,
            MethodArg::I2sPlus => Method::I2sPlus,
            MethodArg::Sr => Method::SelfRefine,
            MethodArg::Php => Method::Php,
            MethodArg::Maj => Method::MajorityN,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProviderArg {
    Live,
    Mock,
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file mirroring these flags; explicit flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Shots for few-shot / two-step
    #[arg(long)]
    k: Option<usize>,
    /// Samples for majority voting
    #[arg(long)]
    n: Option<usize>,
    /// Refinement iterations for i2s-plus
    #[arg(long)]
    n_iter: Option<u32>,
    /// Independent repetitions (averaged in the report)
    #[arg(long)]
    runs: Option<u32>,
    #[arg(long, value_enum)]
    provider: Option<ProviderArg>,
    #[arg(long)]
    mock_script: Option<PathBuf>,
    /// Root directory for run artifacts
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Persisted index directory from `index build`
    #[arg(long)]
    index: Option<PathBuf>,
    /// Demo JSONL to embed on the fly (alternative to --index)
    #[arg(long)]
    demos: Option<PathBuf>,
    /// Pin the run directory name (enables resume)
    #[arg(long)]
    run_name: Option<String>,
    /// Distill demonstration traces before insight extraction
    #[arg(long)]
    use_distillation: bool,
}

/// Config-file twin of the run flags.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    dataset: Option<PathBuf>,
    method: Option<String>,
    k: Option<usize>,
    n: Option<usize>,
    n_iter: Option<u32>,
    runs: Option<u32>,
    provider: Option<String>,
    mock_script: Option<PathBuf>,
    out: Option<PathBuf>,
    workers: Option<usize>,
    index: Option<PathBuf>,
    demos: Option<PathBuf>,
    run_name: Option<String>,
    use_distillation: Option<bool>,
    sr_max_rounds: Option<u32>,
    php_max_retries: Option<u32>,
    n_suggestions: Option<u32>,
    demo_trace_budget: Option<u64>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Commands::Index { action } => match action {
            IndexAction::Build { demos, out, exclude, live_embedder } => {
                cmd_index_build(demos, out, exclude, live_embedder)
            }
        },
        Commands::Run(args) => cmd_run(*args),
        Commands::Eval { run, scoring, judge_mock_script } => {
            cmd_eval(run, scoring, judge_mock_script)
        }
        Commands::Report { run } => {
            let report = report_run(&run)?;
            print_report(&report);
            Ok(())
        }
        Commands::Stats { demos, dataset, json } => cmd_stats(demos, dataset, json),
    }
}

fn cmd_index_build(
    demos_path: PathBuf,
    out: PathBuf,
    exclude: Option<PathBuf>,
    live_embedder: bool,
) -> Result<()> {
    let demos = load_demos_jsonl(&demos_path)?;
    let exclude_ids: BTreeSet<String> = match exclude {
        Some(path) => std::fs::read_to_string(&path)
            .with_context(|| format!("reading exclude file {}", path.display()))?
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect(),
        None => BTreeSet::new(),
    };
    let embedder: Box<dyn Embedder> = if live_embedder {
        let base_url = std::env::var("I2S_BASE_URL").context("I2S_BASE_URL is not set")?;
        let api_key = std::env::var("I2S_API_KEY").ok();
        Box::new(HttpEmbedder::new(base_url, api_key, 768))
    } else {
        Box::new(HashEmbedder::default())
    };
    let bank = build_bank(&demos, &exclude_ids, embedder.as_ref())?;
    save_index(&out, &bank, &embedder.tag())?;
    println!(
        "indexed {} demonstrations ({} excluded) into {}",
        bank.len(),
        exclude_ids.len(),
        out.display()
    );
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let file: FileConfig = match &args.config {
        Some(path) => serde_json::from_str(
            &std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?,
        )
        .with_context(|| format!("parsing config {}", path.display()))?,
        None => FileConfig::default(),
    };

    let method: Method = match args.method {
        Some(m) => m.into(),
        None => match file.method.as_deref() {
            Some(s) => parse_method(s)?,
            None => bail!("--method is required (or set `method` in the config file)"),
        },
    };
    let dataset = args
        .dataset
        .or(file.dataset)
        .context("--dataset is required (or set `dataset` in the config file)")?;
    let out = args.out.or(file.out).unwrap_or_else(|| PathBuf::from("runs"));

    let provider = match args.provider {
        Some(ProviderArg::Live) => ProviderConfig::Live,
        Some(ProviderArg::Mock) => mock_provider_config(args.mock_script.or(file.mock_script))?,
        None => match file.provider.as_deref() {
            Some("live") => ProviderConfig::Live,
            Some("mock") => mock_provider_config(args.mock_script.or(file.mock_script))?,
            Some(other) => bail!("unknown provider {other:?} in config (expected live|mock)"),
            None => bail!("--provider is required (or set `provider` in the config file)"),
        },
    };

    let refine = RefineConfig {
        n_iter: args.n_iter.or(file.n_iter).unwrap_or(3),
        n_suggestions: file.n_suggestions.unwrap_or(3),
        ..RefineConfig::default()
    };
    let mut i2s = I2sConfig {
        use_distillation: args.use_distillation || file.use_distillation.unwrap_or(false),
        ..I2sConfig::default()
    };
    if let Some(budget) = file.demo_trace_budget {
        i2s.demo_trace_budget = budget;
    }

    let config = RunConfig {
        dataset,
        method: MethodConfig {
            method,
            k: args.k.or(file.k).unwrap_or(1),
            n: args.n.or(file.n).unwrap_or(3),
            refine,
            sr_max_rounds: file.sr_max_rounds.unwrap_or(4),
            php_max_retries: file.php_max_retries.unwrap_or(3),
        },
        runs: args.runs.or(file.runs).unwrap_or(5),
        provider,
        out_root: out,
        run_name: args.run_name.or(file.run_name),
        workers: args.workers.or(file.workers).unwrap_or(4),
        index_dir: args.index.or(file.index),
        demos: args.demos.or(file.demos),
        i2s,
    };

    let (report, paths) = run_benchmark(&config)?;
    println!("run directory: {}", paths.run_dir.display());
    print_report(&report);
    Ok(())
}

fn mock_provider_config(script: Option<PathBuf>) -> Result<ProviderConfig> {
    let script = script.context("--mock-script is required with --provider mock")?;
    Ok(ProviderConfig::Mock { script })
}

fn parse_method(s: &str) -> Result<Method> {
    Ok(match s {
        "direct" => Method::Direct,
        "fewshot" => Method::FewshotK,
        "two-step" => Method::TwoStep,
        "i2s" => Method::I2s,
        "i2s-plus" => Method::I2sPlus,
        "sr" => Method::SelfRefine,
        "php" => Method::Php,
        "maj" => Method::MajorityN,
        other => bail!("unknown method {other:?}"),
    })
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScoringArg {
    Exact,
    Judge,
}

fn cmd_eval(run: PathBuf, scoring: ScoringArg, judge_mock_script: Option<PathBuf>) -> Result<()> {
    let report = match scoring {
        ScoringArg::Exact => eval_run(&run, ScoringMode::Exact, None)?,
        ScoringArg::Judge => {
            let provider: Arc<dyn i2s_core::llm::Provider> = match judge_mock_script {
                Some(path) => Arc::new(MockProvider::new(MockScript::from_file(&path)?)?),
                None => Arc::new(HttpProvider::judge_from_env()?),
            };
            let client = LlmClient::new(provider, RetryPolicy::default());
            let registry = TemplateRegistry::builtin();
            let judge = StageCtx::new(&client, &registry, "judge");
            let cfg = I2sConfig::default();
            eval_run(&run, ScoringMode::Judge, Some((&judge, &cfg)))?
        }
    };
    print_report(&report);
    Ok(())
}

fn cmd_stats(demos: PathBuf, dataset: PathBuf, json: bool) -> Result<()> {
    let demos = load_demos_jsonl(&demos)?;
    let tasks = harness::load_tasks_jsonl(&dataset)?;
    let rows = context_stats(&demos, &tasks);
    if json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
    } else {
        let width = rows.iter().map(|r| r.component.len()).max().unwrap_or(0);
        println!("{:<width$}  {:>12}  {:>12}", "component", "avg_tokens", "max_tokens");
        for row in &rows {
            println!(
                "{:<width$}  {:>12.2}  {:>12}",
                row.component, row.avg_tokens, row.max_tokens
            );
        }
    }
    Ok(())
}

fn print_report(report: &RunReport) {
    println!(
        "method={} dataset={} runs={} accuracy_mean={:.2} per_run={:?}",
        report.method, report.dataset, report.n_runs, report.accuracy_mean, report.per_run_accuracy
    );
    println!(
        "calls={} question_conditioned={} tokens={}",
        report.total_calls, report.question_conditioned_calls, report.total_tokens
    );
}
