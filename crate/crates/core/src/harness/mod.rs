//! Evaluation and orchestration: exact-match scoring, the two-step
//! LLM-as-judge protocol, metric aggregation over repeated runs, compute
//! accounting, run persistence, and benchmark execution.

mod runner;

pub use runner::{
    eval_run, load_tasks_jsonl, report_run, run_benchmark, run_benchmark_with, MethodConfig,
    ProviderConfig, RunConfig, RunPaths,
};

use crate::model::{
    canonicalize_answer, extract_final_answer, strip_think, AnswerKind, RunTrace, StageName,
    StageRecord, TaskItem,
};
use crate::pipeline::{execute_stage, I2sConfig, PipelineError, StageCtx};
use crate::prompts::TemplateName;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("gold answer missing for task {0}")]
    MissingGold(String),
    #[error("run {run_index} is missing tasks: {missing:?}")]
    IncompleteRun { run_index: u32, missing: Vec<String> },
    #[error("stage {stage:?} question_conditioned flag disagrees with prompt scan")]
    FlagMismatch { stage: StageName },
    #[error("no extractable answer")]
    NoAnswer,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Scoring decision for one task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Verdict {
    pub task_id: String,
    pub method: String,
    pub correct: bool,
    pub mode: ScoringMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_raw: Option<String>,
    #[serde(default)]
    pub run_index: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    Exact,
    Judge,
}

/// Aggregated metrics over `n_runs` passes of one method on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub dataset: String,
    pub n_runs: u32,
    pub accuracy_mean: f64,
    pub per_run_accuracy: Vec<f64>,
    pub total_calls: u64,
    pub question_conditioned_calls: u64,
    pub total_tokens: u64,
}

const NUMERIC_TOLERANCE: f64 = 1e-9;

/// Canonicalize-and-compare; numeric answers additionally compare parsed
/// values within an absolute tolerance of 1e-9.
pub fn score_exact(pred: &str, gold: &str, kind: AnswerKind) -> bool {
    let p = canonicalize_answer(pred, kind);
    let g = canonicalize_answer(gold, kind);
    match (p, g) {
        (Ok(p), Ok(g)) => {
            if p == g {
                return true;
            }
            if kind == AnswerKind::Numeric {
                if let (Ok(pv), Ok(gv)) = (p.parse::<f64>(), g.parse::<f64>()) {
                    return (pv - gv).abs() <= NUMERIC_TOLERANCE;
                }
            }
            false
        }
        _ => pred.trim() == gold.trim(),
    }
}

/// Judge step 1: solve the question on the judge provider to obtain a
/// reference answer.
pub fn judge_reference(
    judge: &StageCtx,
    cfg: &I2sConfig,
    question: &str,
) -> Result<(StageRecord, String), HarnessError> {
    let (record, answer) = judge_reference_inner(judge, cfg, question)?;
    match answer {
        Some(answer) => Ok((record, answer)),
        None => Err(HarnessError::NoAnswer),
    }
}

fn judge_reference_inner(
    judge: &StageCtx,
    cfg: &I2sConfig,
    question: &str,
) -> Result<(StageRecord, Option<String>), HarnessError> {
    let prompt = judge
        .templates
        .render(TemplateName::Generation, &[("question", question)])
        .map_err(PipelineError::from)?;
    let mut outcome = execute_stage(
        judge,
        cfg,
        StageName::JudgeReference,
        prompt,
        "judge/reference",
        true,
        false,
    )
    .map_err(PipelineError::from)?;
    let answer = extract_final_answer(&outcome.visible, AnswerKind::FreeForm);
    if let Some(answer) = &answer {
        outcome.record.parsed_output = answer.clone();
    } else {
        outcome.record.flags.push("no_answer".to_string());
    }
    Ok((outcome.record, answer))
}

/// Judge step 2: reduce a raw model output (which may carry reasoning and
/// think tags) to a canonical answer. Think spans are stripped locally and
/// never reach the judge prompt.
pub fn judge_extract(
    judge: &StageCtx,
    cfg: &I2sConfig,
    model_output: &str,
) -> Result<(Option<StageRecord>, String), HarnessError> {
    let (_, visible) = strip_think(model_output);
    let visible = visible.trim();
    if visible.is_empty() {
        return Err(HarnessError::NoAnswer);
    }
    let prompt = format!(
        "You are a knowledgeable problem solver.\n\
         Extract the final answer from the following response and provide only the final answer in the format:\n\
         Final Answer: <your final answer>\n\nResponse:\n{visible}"
    );
    let mut outcome =
        execute_stage(judge, cfg, StageName::JudgeExtract, prompt, "judge/extract", false, false)
            .map_err(PipelineError::from)?;
    let answer = match extract_final_answer(&outcome.visible, AnswerKind::FreeForm) {
        Some(a) => a,
        None => outcome.visible.trim().to_string(),
    };
    if answer.is_empty() {
        return Err(HarnessError::NoAnswer);
    }
    outcome.record.parsed_output = answer.clone();
    Ok((Some(outcome.record), answer))
}

/// Judge step 3: strict equivalence verdict. Accepts both "Answer:
/// True/False" and "Final Decision: True/False" forms, last occurrence wins;
/// an unparseable verdict is retried once, then recorded incorrect and
/// flagged unjudgeable.
pub fn judge_verify(
    judge: &StageCtx,
    cfg: &I2sConfig,
    question: &str,
    reference: &str,
    candidate: &str,
    task_id: &str,
    method: &str,
) -> Result<(Vec<StageRecord>, Verdict), HarnessError> {
    assert!(!reference.is_empty() && !candidate.is_empty(), "reference and candidate required");
    let prompt = judge
        .templates
        .render(
            TemplateName::Verification,
            &[
                ("question", question),
                ("model_answer", reference),
                ("generated_answer", candidate),
            ],
        )
        .map_err(PipelineError::from)?;
    let mut records = Vec::new();
    let mut flags = Vec::new();
    let mut decision = None;
    for attempt in 0..2 {
        let seed = if attempt == 0 { "judge/verify".to_string() } else { "judge/verify/retry".into() };
        let mut outcome = execute_stage(
            judge,
            cfg,
            StageName::JudgeVerify,
            prompt.clone(),
            &seed,
            true,
            false,
        )
        .map_err(PipelineError::from)?;
        decision = parse_verdict(&outcome.visible);
        if let Some(d) = decision {
            outcome.record.parsed_output = d.to_string();
            records.push(outcome.record);
            break;
        }
        outcome.record.flags.push("verdict_unparseable".to_string());
        records.push(outcome.record);
    }
    if decision.is_none() {
        flags.push("unjudgeable".to_string());
    }
    let judge_raw = records.last().map(|r| r.raw_output.clone());
    Ok((
        records,
        Verdict {
            task_id: task_id.to_string(),
            method: method.to_string(),
            correct: decision.unwrap_or(false),
            mode: ScoringMode::Judge,
            judge_raw,
            run_index: 0,
            flags,
        },
    ))
}

/// Last True/False decision in the text, matching either verdict marker.
pub fn parse_verdict(text: &str) -> Option<bool> {
    let mut best: Option<(usize, bool)> = None;
    for marker in ["Answer:", "Final Decision:"] {
        let mut from = 0;
        while let Some(rel) = text[from..].find(marker) {
            let pos = from + rel;
            let rest = text[pos + marker.len()..].trim_start();
            let lowered = rest.to_ascii_lowercase();
            let value = if lowered.starts_with("true") {
                Some(true)
            } else if lowered.starts_with("false") {
                Some(false)
            } else {
                None
            };
            if let Some(v) = value {
                if best.is_none_or(|(p, _)| pos > p) {
                    best = Some((pos, v));
                }
            }
            from = pos + marker.len();
        }
    }
    best.map(|(_, v)| v)
}

/// Question-conditioned stages of a trace, with the flag cross-checked
/// against a prompt scan for the task question.
pub fn count_question_conditioned_calls(
    trace: &RunTrace,
    question: &str,
) -> Result<usize, HarnessError> {
    let mut count = 0;
    for stage in &trace.stages {
        let scanned = stage.prompt.contains(question);
        if scanned != stage.question_conditioned {
            return Err(HarnessError::FlagMismatch { stage: stage.stage_name });
        }
        if stage.question_conditioned {
            count += 1;
        }
    }
    Ok(count)
}

/// True when the prompt shares any window of at least `min_len` bytes with
/// the demonstration trace; used to assert the decoupling invariant.
pub fn contains_long_overlap(prompt: &str, demo_trace: &str, min_len: usize) -> bool {
    if demo_trace.len() < min_len || prompt.len() < min_len {
        return false;
    }
    let windows: std::collections::HashSet<&[u8]> =
        prompt.as_bytes().windows(min_len).collect();
    demo_trace.as_bytes().windows(min_len).any(|w| windows.contains(w))
}

/// Per-run accuracy over complete passes, mean to 2 decimals, and compute
/// totals summed from traces.
pub fn aggregate(
    verdicts: &[Verdict],
    traces: &[RunTrace],
    task_ids: &[String],
    n_runs: u32,
    method: &str,
    dataset: &str,
) -> Result<RunReport, HarnessError> {
    let mut per_run_accuracy = Vec::with_capacity(n_runs as usize);
    for run in 0..n_runs {
        let run_verdicts: Vec<&Verdict> =
            verdicts.iter().filter(|v| v.run_index == run).collect();
        let missing: Vec<String> = task_ids
            .iter()
            .filter(|id| !run_verdicts.iter().any(|v| &v.task_id == *id))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(HarnessError::IncompleteRun { run_index: run, missing });
        }
        let correct = run_verdicts.iter().filter(|v| v.correct).count();
        let accuracy = 100.0 * correct as f64 / task_ids.len() as f64;
        per_run_accuracy.push(round2(accuracy));
    }
    let accuracy_mean =
        round2(per_run_accuracy.iter().sum::<f64>() / per_run_accuracy.len().max(1) as f64);
    let total_calls = traces.iter().map(|t| t.stages.len() as u64).sum();
    let question_conditioned_calls =
        traces.iter().map(|t| t.question_conditioned_stages() as u64).sum();
    let total_tokens = traces.iter().map(|t| t.total_tokens()).sum();
    Ok(RunReport {
        method: method.to_string(),
        dataset: dataset.to_string(),
        n_runs,
        accuracy_mean,
        per_run_accuracy,
        total_calls,
        question_conditioned_calls,
        total_tokens,
    })
}

pub(crate) fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Dataset accuracy per round index for methods that record per-round
/// answers (self-refine, progressive hinting). A trace with fewer rounds
/// than the maximum carries its last answer forward.
pub fn per_round_accuracies(
    traces: &[RunTrace],
    tasks: &[TaskItem],
) -> Result<Vec<f64>, HarnessError> {
    let rounds = traces.iter().map(|t| t.iteration_answers.len()).max().unwrap_or(0);
    let mut out = Vec::with_capacity(rounds);
    for round in 0..rounds {
        let mut correct = 0usize;
        for trace in traces {
            let task = tasks
                .iter()
                .find(|t| t.id == trace.task_id)
                .ok_or_else(|| HarnessError::Config(format!("unknown task {}", trace.task_id)))?;
            let gold = task
                .gold_answer
                .as_ref()
                .ok_or_else(|| HarnessError::MissingGold(task.id.clone()))?;
            let answer = trace
                .iteration_answers
                .get(round)
                .or_else(|| trace.iteration_answers.last())
                .cloned()
                .unwrap_or_default();
            if !answer.is_empty() && score_exact(&answer, gold, task.answer_kind) {
                correct += 1;
            }
        }
        out.push(round2(100.0 * correct as f64 / traces.len().max(1) as f64));
    }
    Ok(out)
}

/// Best per-round score; ties pick the earliest round. Returns
/// (round_index, accuracy).
pub fn best_round_accuracy(per_round: &[f64]) -> Option<(usize, f64)> {
    per_round
        .iter()
        .copied()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
}

/// Scores every trace against gold answers.
pub fn score_traces_exact(
    traces: &[RunTrace],
    tasks: &[TaskItem],
) -> Result<Vec<Verdict>, HarnessError> {
    let task_by_id = |id: &str| tasks.iter().find(|t| t.id == id);
    traces
        .iter()
        .map(|trace| {
            let task = task_by_id(&trace.task_id)
                .ok_or_else(|| HarnessError::Config(format!("unknown task {}", trace.task_id)))?;
            let gold = task
                .gold_answer
                .as_ref()
                .ok_or_else(|| HarnessError::MissingGold(task.id.clone()))?;
            let mut flags = Vec::new();
            if let Some(err) = &trace.error {
                flags.push(format!("task_error: {err}"));
            }
            let correct = trace.error.is_none()
                && !trace.final_answer.is_empty()
                && score_exact(&trace.final_answer, gold, task.answer_kind);
            Ok(Verdict {
                task_id: trace.task_id.clone(),
                method: trace.method.as_str().to_string(),
                correct,
                mode: ScoringMode::Exact,
                judge_raw: None,
                run_index: trace.run_index,
                flags,
            })
        })
        .collect()
}

/// Scores every trace with the two-step judge pipeline: reference
/// generation, answer extraction, verification.
pub fn score_traces_judge(
    judge: &StageCtx,
    cfg: &I2sConfig,
    traces: &[RunTrace],
    tasks: &[TaskItem],
) -> Result<Vec<Verdict>, HarnessError> {
    let task_by_id = |id: &str| tasks.iter().find(|t| t.id == id);
    let mut verdicts = Vec::with_capacity(traces.len());
    for trace in traces {
        let task = task_by_id(&trace.task_id)
            .ok_or_else(|| HarnessError::Config(format!("unknown task {}", trace.task_id)))?;
        // every judge-mode verdict carries judge_raw for audit, even when a
        // step short-circuited before reaching verification
        let unjudgeable = |flag: &str, judge_raw: String| Verdict {
            task_id: trace.task_id.clone(),
            method: trace.method.as_str().to_string(),
            correct: false,
            mode: ScoringMode::Judge,
            judge_raw: Some(judge_raw),
            run_index: trace.run_index,
            flags: vec![flag.to_string()],
        };
        if trace.error.is_some() || trace.final_answer.is_empty() {
            verdicts.push(unjudgeable("task_error_or_empty_answer", String::new()));
            continue;
        }
        let reference = match judge_reference_inner(judge, cfg, &task.question)? {
            (_, Some(r)) => r,
            (record, None) => {
                verdicts.push(unjudgeable("unjudgeable_no_reference", record.raw_output));
                continue;
            }
        };
        // judge the raw output of the stage that produced the final answer
        // when it is identifiable, otherwise the final answer itself
        let model_output = trace
            .stages
            .iter()
            .rev()
            .find(|s| !trace.final_answer.is_empty() && s.parsed_output == trace.final_answer)
            .map(|s| s.raw_output.clone())
            .unwrap_or_else(|| trace.final_answer.clone());
        let candidate = match judge_extract(judge, cfg, &model_output) {
            Ok((_, c)) => c,
            Err(HarnessError::NoAnswer) => {
                verdicts.push(unjudgeable("unjudgeable_no_extraction", String::new()));
                continue;
            }
            Err(e) => return Err(e),
        };
        let (_, mut verdict) = judge_verify(
            judge,
            cfg,
            &task.question,
            &reference,
            &candidate,
            &trace.task_id,
            trace.method.as_str(),
        )?;
        verdict.run_index = trace.run_index;
        verdicts.push(verdict);
    }
    Ok(verdicts)
}
