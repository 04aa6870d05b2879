//! Benchmark execution: config validation, bounded task parallelism, JSONL
//! run persistence with idempotent resume, and report generation.

use super::{aggregate, score_traces_exact, score_traces_judge, HarnessError, RunReport, Verdict};
use crate::baselines;
use crate::llm::{HttpProvider, LlmClient, MockProvider, MockScript, Provider, ResponseCache, RetryPolicy};
use crate::model::{Method, RunTrace, TaskItem};
use crate::pipeline::{self, I2sConfig, StageCtx};
use crate::prompts::TemplateRegistry;
use crate::refine::{self, RefineConfig};
use crate::retrieval::{self, DemoBank, Embedder, HashEmbedder};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc, Mutex};

pub const ENV_CACHE_DIR: &str = "I2S_CACHE_DIR";

/// Method plus its per-method knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: Method,
    /// Shots for few-shot and two-step inference.
    pub k: usize,
    /// Samples for majority voting.
    pub n: usize,
    pub refine: RefineConfig,
    pub sr_max_rounds: u32,
    pub php_max_retries: u32,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            method: Method::Direct,
            k: 1,
            n: 3,
            refine: RefineConfig::default(),
            sr_max_rounds: 4,
            php_max_retries: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub enum ProviderConfig {
    Mock { script: PathBuf },
    Live,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub method: MethodConfig,
    pub runs: u32,
    pub provider: ProviderConfig,
    pub out_root: PathBuf,
    /// Pins the run directory name; defaults to {dataset}-{method}-{timestamp}.
    pub run_name: Option<String>,
    pub workers: usize,
    pub index_dir: Option<PathBuf>,
    pub demos: Option<PathBuf>,
    pub i2s: I2sConfig,
}

impl RunConfig {
    pub fn new(dataset: impl Into<PathBuf>, method: Method, out_root: impl Into<PathBuf>) -> Self {
        RunConfig {
            dataset: dataset.into(),
            method: MethodConfig { method, ..Default::default() },
            runs: 5,
            provider: ProviderConfig::Live,
            out_root: out_root.into(),
            run_name: None,
            workers: 4,
            index_dir: None,
            demos: None,
            i2s: I2sConfig::default(),
        }
    }

    fn needs_bank(&self) -> bool {
        matches!(
            self.method.method,
            Method::FewshotK | Method::TwoStep | Method::I2s | Method::I2sPlus
        )
    }
}

/// Locations of a run's persisted artifacts.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub run_dir: PathBuf,
    pub traces: PathBuf,
    pub verdicts: PathBuf,
    pub report: PathBuf,
}

impl RunPaths {
    pub fn in_dir(run_dir: PathBuf) -> Self {
        RunPaths {
            traces: run_dir.join("traces.jsonl"),
            verdicts: run_dir.join("verdicts.jsonl"),
            report: run_dir.join("report.json"),
            run_dir,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct RunMeta {
    pub dataset: String,
    pub method: Method,
    pub k: usize,
    pub n: usize,
    pub n_iter: u32,
    pub runs: u32,
}

pub fn load_tasks_jsonl(path: &Path) -> Result<Vec<TaskItem>, HarnessError> {
    let io_err = |source| HarnessError::Io { path: path.display().to_string(), source };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut tasks = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let task: TaskItem = serde_json::from_str(&line).map_err(|e| {
            HarnessError::Config(format!("{} line {}: {e}", path.display(), i + 1))
        })?;
        task.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if !seen.insert(task.id.clone()) {
            return Err(HarnessError::Config(format!("duplicate task id {:?}", task.id)));
        }
        tasks.push(task);
    }
    if tasks.is_empty() {
        return Err(HarnessError::Config(format!("dataset {} is empty", path.display())));
    }
    Ok(tasks)
}

/// Runs the configured method over the dataset with bounded parallelism,
/// persisting traces (and, when gold answers exist, exact verdicts and a
/// report) under the run directory. Tasks whose traces already exist are
/// skipped, so rerunning an interrupted or completed run issues no further
/// provider calls for them.
pub fn run_benchmark(config: &RunConfig) -> Result<(RunReport, RunPaths), HarnessError> {
    let provider: Arc<dyn Provider> = match &config.provider {
        ProviderConfig::Mock { script } => {
            let script = MockScript::from_file(script)
                .map_err(|e| HarnessError::Config(e.to_string()))?;
            Arc::new(MockProvider::new(script).map_err(|e| HarnessError::Config(e.to_string()))?)
        }
        ProviderConfig::Live => Arc::new(
            HttpProvider::from_env().map_err(|e| HarnessError::Config(e.to_string()))?,
        ),
    };
    run_benchmark_with(config, provider)
}

/// As [`run_benchmark`] with an externally constructed provider (used by
/// tests to observe provider call counts).
pub fn run_benchmark_with(
    config: &RunConfig,
    provider: Arc<dyn Provider>,
) -> Result<(RunReport, RunPaths), HarnessError> {
    // fail fast: validate everything before the first provider call
    config.i2s.validate()?;
    config.method.refine.validate()?;
    if config.workers == 0 {
        return Err(HarnessError::Config("workers must be >= 1".into()));
    }
    if config.runs == 0 {
        return Err(HarnessError::Config("runs must be >= 1".into()));
    }
    if config.method.n == 0 || config.method.k == 0 {
        return Err(HarnessError::Config("k and n must be >= 1".into()));
    }
    if !(1..=4).contains(&config.method.sr_max_rounds) {
        return Err(HarnessError::Config("sr_max_rounds must be in 1..=4".into()));
    }
    if !(1..=3).contains(&config.method.php_max_retries) {
        return Err(HarnessError::Config("php_max_retries must be in 1..=3".into()));
    }
    let tasks = load_tasks_jsonl(&config.dataset)?;
    let embedder: Arc<dyn Embedder> = Arc::new(HashEmbedder::default());
    let bank = if config.needs_bank() {
        Some(Arc::new(load_bank(config, embedder.as_ref())?))
    } else {
        None
    };

    let dataset_stem = config
        .dataset
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "dataset".into());
    let run_dir = config.out_root.join(config.run_name.clone().unwrap_or_else(|| {
        let ts = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        format!("{dataset_stem}-{}-{ts}", config.method.method.as_str())
    }));
    let paths = RunPaths::in_dir(run_dir.clone());
    std::fs::create_dir_all(&run_dir)
        .map_err(|source| HarnessError::Io { path: run_dir.display().to_string(), source })?;

    let meta = RunMeta {
        dataset: dataset_stem.clone(),
        method: config.method.method,
        k: config.method.k,
        n: config.method.n,
        n_iter: config.method.refine.n_iter,
        runs: config.runs,
    };
    write_atomic(
        &run_dir.join("run_meta.json"),
        &serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )?;
    persist_tasks(&run_dir, &tasks)?;

    // resumed traces keep their original serialized bytes
    let mut existing: HashMap<(u32, String), String> = HashMap::new();
    if paths.traces.exists() {
        let file = std::fs::File::open(&paths.traces)
            .map_err(|source| HarnessError::Io { path: paths.traces.display().to_string(), source })?;
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|source| HarnessError::Io {
                path: paths.traces.display().to_string(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<RunTrace>(&line) {
                Ok(trace) => {
                    existing.insert((trace.run_index, trace.task_id.clone()), line);
                }
                Err(e) => log::warn!("ignoring unreadable trace line: {e}"),
            }
        }
    }

    let cache_dir = std::env::var(ENV_CACHE_DIR)
        .map(PathBuf::from)
        .unwrap_or_else(|_| run_dir.join("cache"));
    let cache = ResponseCache::new(&cache_dir)
        .map_err(|source| HarnessError::Io { path: cache_dir.display().to_string(), source })?;
    let client = Arc::new(LlmClient::new(provider, RetryPolicy::default()).with_cache(cache));
    let registry = Arc::new(TemplateRegistry::builtin());

    let mut jobs: VecDeque<(u32, TaskItem)> = VecDeque::new();
    for run in 0..config.runs {
        for task in &tasks {
            if !existing.contains_key(&(run, task.id.clone())) {
                jobs.push_back((run, task.clone()));
            }
        }
    }

    let produced = execute_jobs(config, jobs, client.clone(), registry.clone(), bank, embedder);
    for ((run, task_id), line) in produced {
        existing.insert((run, task_id), line);
    }

    // canonical order: run index outer, dataset order inner
    let mut out = String::new();
    for run in 0..config.runs {
        for task in &tasks {
            let key = (run, task.id.clone());
            let line = existing
                .get(&key)
                .ok_or_else(|| HarnessError::Config(format!("missing trace for {key:?}")))?;
            out.push_str(line);
            out.push('\n');
        }
    }
    write_atomic(&paths.traces, &out)?;

    let traces = read_traces(&paths.traces)?;
    let have_gold = tasks.iter().all(|t| t.gold_answer.is_some());
    let report = if have_gold {
        let verdicts = score_traces_exact(&traces, &tasks)?;
        persist_verdicts(&paths.verdicts, &verdicts)?;
        let task_ids: Vec<String> = tasks.iter().map(|t| t.id.clone()).collect();
        let report = aggregate(
            &verdicts,
            &traces,
            &task_ids,
            config.runs,
            config.method.method.as_str(),
            &dataset_stem,
        )?;
        write_atomic(&paths.report, &serde_json::to_string_pretty(&report).expect("report"))?;
        report
    } else {
        log::info!("dataset has tasks without gold answers; run `eval --scoring judge`");
        RunReport {
            method: config.method.method.as_str().to_string(),
            dataset: dataset_stem,
            n_runs: config.runs,
            accuracy_mean: 0.0,
            per_run_accuracy: Vec::new(),
            total_calls: traces.iter().map(|t| t.stages.len() as u64).sum(),
            question_conditioned_calls: traces
                .iter()
                .map(|t| t.question_conditioned_stages() as u64)
                .sum(),
            total_tokens: traces.iter().map(|t| t.total_tokens()).sum(),
        }
    };
    Ok((report, paths))
}

fn execute_jobs(
    config: &RunConfig,
    jobs: VecDeque<(u32, TaskItem)>,
    client: Arc<LlmClient>,
    registry: Arc<TemplateRegistry>,
    bank: Option<Arc<DemoBank>>,
    embedder: Arc<dyn Embedder>,
) -> Vec<((u32, String), String)> {
    let queue = Arc::new(Mutex::new(jobs));
    let (tx, rx) = mpsc::channel::<((u32, String), String)>();
    let workers = config.workers.max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let queue = queue.clone();
            let tx = tx.clone();
            let client = client.clone();
            let registry = registry.clone();
            let bank = bank.clone();
            let embedder = embedder.clone();
            let method = config.method.clone();
            let i2s = config.i2s.clone();
            scope.spawn(move || loop {
                let job = queue.lock().expect("job queue poisoned").pop_front();
                let Some((run, task)) = job else { break };
                let trace = run_one(
                    &method,
                    &i2s,
                    &client,
                    &registry,
                    bank.as_deref(),
                    embedder.as_ref(),
                    &task,
                    run,
                );
                let line = serde_json::to_string(&trace).expect("trace serializes");
                let _ = tx.send(((run, task.id), line));
            });
        }
        drop(tx);
        rx.into_iter().collect()
    })
}

/// Executes one method on one task; per-task failures are recorded as
/// error traces, never aborting the batch.
#[allow(clippy::too_many_arguments)]
fn run_one(
    method: &MethodConfig,
    i2s: &I2sConfig,
    client: &LlmClient,
    registry: &TemplateRegistry,
    bank: Option<&DemoBank>,
    embedder: &dyn Embedder,
    task: &TaskItem,
    run_index: u32,
) -> RunTrace {
    let ctx = StageCtx::new(client, registry, format!("run{run_index}/{}", task.id));
    let result = (|| -> Result<RunTrace, pipeline::PipelineError> {
        match method.method {
            Method::Direct => baselines::direct_inference(&ctx, i2s, task),
            Method::FewshotK => {
                baselines::fewshot_cot(&ctx, i2s, bank.expect("bank checked"), embedder, task, method.k)
            }
            Method::TwoStep => {
                let bank = bank.expect("bank checked");
                let k = method.k.min(bank.len()).max(1);
                let hits = retrieval::retrieve_text(bank, embedder, &task.question, k)?;
                let demos: Vec<_> = hits
                    .iter()
                    .map(|r| bank.get(&r.demo_id).expect("retrieved id exists").clone())
                    .collect();
                pipeline::run_two_step(&ctx, i2s, &demos, task, demos.len(), task.answer_kind)
            }
            Method::I2s => pipeline::run_i2s(bank.expect("bank checked"), embedder, task, i2s, &ctx),
            Method::I2sPlus => refine::run_i2s_plus(
                bank.expect("bank checked"),
                embedder,
                task,
                i2s,
                &method.refine,
                &ctx,
                true,
            ),
            Method::SelfRefine => baselines::self_refine(&ctx, i2s, task, method.sr_max_rounds),
            Method::Php => baselines::php(&ctx, i2s, task, method.php_max_retries),
            Method::MajorityN => baselines::run_majority_at_n(&ctx, i2s, task, method.n),
        }
    })();
    match result {
        Ok(mut trace) => {
            trace.run_index = run_index;
            trace
        }
        Err(e) => RunTrace {
            task_id: task.id.clone(),
            method: method.method,
            stages: Vec::new(),
            final_answer: String::new(),
            iterations_used: 0,
            run_index,
            iteration_answers: Vec::new(),
            error: Some(e.to_string()),
        },
    }
}

fn load_bank(config: &RunConfig, embedder: &dyn Embedder) -> Result<DemoBank, HarnessError> {
    if let Some(dir) = &config.index_dir {
        return retrieval::load_index(dir, embedder)
            .map_err(|e| HarnessError::Config(e.to_string()));
    }
    if let Some(demos_path) = &config.demos {
        let demos = retrieval::load_demos_jsonl(demos_path)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        return retrieval::build_bank(&demos, &BTreeSet::new(), embedder)
            .map_err(|e| HarnessError::Config(e.to_string()));
    }
    Err(HarnessError::Config(format!(
        "method {} needs --index or --demos",
        config.method.method.as_str()
    )))
}

fn persist_tasks(run_dir: &Path, tasks: &[TaskItem]) -> Result<(), HarnessError> {
    let path = run_dir.join("tasks.jsonl");
    if path.exists() {
        return Ok(());
    }
    let mut out = String::new();
    for task in tasks {
        out.push_str(&serde_json::to_string(task).expect("task serializes"));
        out.push('\n');
    }
    write_atomic(&path, &out)
}

fn persist_verdicts(path: &Path, verdicts: &[Verdict]) -> Result<(), HarnessError> {
    let mut out = String::new();
    for v in verdicts {
        out.push_str(&serde_json::to_string(v).expect("verdict serializes"));
        out.push('\n');
    }
    write_atomic(path, &out)
}

fn write_atomic(path: &Path, contents: &str) -> Result<(), HarnessError> {
    let io_err = |source| HarnessError::Io { path: path.display().to_string(), source };
    let tmp = path.with_extension("tmp");
    let mut file = std::fs::File::create(&tmp).map_err(io_err)?;
    file.write_all(contents.as_bytes()).map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)
}

pub(crate) fn read_traces(path: &Path) -> Result<Vec<RunTrace>, HarnessError> {
    let io_err = |source| HarnessError::Io { path: path.display().to_string(), source };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut traces = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        traces.push(
            serde_json::from_str(&line)
                .map_err(|e| HarnessError::Config(format!("bad trace line: {e}")))?,
        );
    }
    Ok(traces)
}

/// Re-scores a persisted run. Exact mode needs gold answers; judge mode
/// needs a judge context. Rewrites verdicts.jsonl and report.json.
pub fn eval_run(
    run_dir: &Path,
    scoring: super::ScoringMode,
    judge: Option<(&StageCtx, &I2sConfig)>,
) -> Result<RunReport, HarnessError> {
    let paths = RunPaths::in_dir(run_dir.to_path_buf());
    let meta: RunMeta = serde_json::from_str(
        &std::fs::read_to_string(run_dir.join("run_meta.json"))
            .map_err(|source| HarnessError::Io { path: run_dir.display().to_string(), source })?,
    )
    .map_err(|e| HarnessError::Config(format!("bad run_meta.json: {e}")))?;
    let tasks = load_tasks_jsonl(&run_dir.join("tasks.jsonl"))?;
    let traces = read_traces(&paths.traces)?;

    let verdicts = match scoring {
        super::ScoringMode::Exact => score_traces_exact(&traces, &tasks)?,
        super::ScoringMode::Judge => {
            let (judge_ctx, judge_cfg) =
                judge.ok_or_else(|| HarnessError::Config("judge scoring needs a judge provider".into()))?;
            score_traces_judge(judge_ctx, judge_cfg, &traces, &tasks)?
        }
    };
    persist_verdicts(&paths.verdicts, &verdicts)?;
    let task_ids: Vec<String> = tasks.iter().map(|t| t.id.clone()).collect();
    let report = aggregate(
        &verdicts,
        &traces,
        &task_ids,
        meta.runs,
        meta.method.as_str(),
        &meta.dataset,
    )?;
    write_atomic(&paths.report, &serde_json::to_string_pretty(&report).expect("report"))?;
    Ok(report)
}

/// Loads (or recomputes) the report for a persisted run.
pub fn report_run(run_dir: &Path) -> Result<RunReport, HarnessError> {
    let paths = RunPaths::in_dir(run_dir.to_path_buf());
    if paths.report.exists() {
        let text = std::fs::read_to_string(&paths.report)
            .map_err(|source| HarnessError::Io { path: paths.report.display().to_string(), source })?;
        return serde_json::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("bad report.json: {e}")));
    }
    eval_run(run_dir, super::ScoringMode::Exact, None)
}
