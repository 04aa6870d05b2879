//! The I2S core: comparison generation, optional trace distillation, insight
//! extraction, and decoupled solution generation, plus standalone two-step
//! inference and the direct-answer fallback.

use crate::llm::{GenerationRequest, GenerationResponse, LlmClient, LlmError};
use crate::model::{
    canonical_or_raw, extract_final_answer, has_think_tag, strip_think, truncate_middle,
    AnswerKind, Method, RunTrace, StageName, StageRecord, TaskItem,
};
use crate::prompts::{self, TemplateName, TemplateRegistry};
use crate::retrieval::{retrieve_text, DemoBank, Embedder, RetrievalError};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Template(#[from] crate::prompts::TemplateError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("no extractable answer from the answer stage or the fallback call")]
    FallbackFailed,
    #[error("no extractable answer")]
    NoAnswer,
}

/// Stage-level decoding configuration.
#[derive(Debug, Clone)]
pub struct I2sConfig {
    /// Distill the demonstration trace before insight extraction. Off by
    /// default: the base pipeline conditions on the raw trace.
    pub use_distillation: bool,
    pub temperature_per_stage: BTreeMap<StageName, f64>,
    pub max_tokens_per_stage: BTreeMap<StageName, u32>,
    pub demo_trace_budget: u64,
}

impl Default for I2sConfig {
    fn default() -> Self {
        I2sConfig {
            use_distillation: false,
            temperature_per_stage: BTreeMap::new(),
            max_tokens_per_stage: BTreeMap::new(),
            demo_trace_budget: 12_288,
        }
    }
}

impl I2sConfig {
    pub fn temperature(&self, stage: StageName) -> f64 {
        self.temperature_per_stage.get(&stage).copied().unwrap_or(crate::llm::DEFAULT_TEMPERATURE)
    }

    pub fn max_tokens(&self, stage: StageName) -> u32 {
        self.max_tokens_per_stage.get(&stage).copied().unwrap_or(crate::llm::DEFAULT_MAX_TOKENS)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        for (stage, t) in &self.temperature_per_stage {
            if !(0.0..=2.0).contains(t) {
                return Err(PipelineError::Llm(LlmError::InvalidRequest(format!(
                    "temperature {t} for stage {stage:?} outside [0, 2]"
                ))));
            }
        }
        if self.demo_trace_budget < 16 {
            return Err(PipelineError::Llm(LlmError::InvalidRequest(
                "demo_trace_budget must be >= 16".into(),
            )));
        }
        Ok(())
    }
}

/// Shared handles for executing stages of one task run. Seed labels are
/// namespaced by `seed_prefix` so reruns and samples stay distinguishable.
pub struct StageCtx<'a> {
    pub client: &'a LlmClient,
    pub templates: &'a TemplateRegistry,
    pub seed_prefix: String,
}

impl<'a> StageCtx<'a> {
    pub fn new(client: &'a LlmClient, templates: &'a TemplateRegistry, seed_prefix: impl Into<String>) -> Self {
        StageCtx { client, templates, seed_prefix: seed_prefix.into() }
    }

    fn call(
        &self,
        prompt: &str,
        temperature: f64,
        max_tokens: u32,
        seed: &str,
    ) -> Result<GenerationResponse, LlmError> {
        let req = GenerationRequest::user(prompt)
            .temperature(temperature)
            .max_tokens(max_tokens)
            .seed_label(format!("{}/{}", self.seed_prefix, seed));
        self.client.generate(&req)
    }
}

/// Product of one executed stage before parsing specialization.
pub(crate) struct StageOutcome {
    pub record: StageRecord,
    pub think: String,
    pub visible: String,
}

/// Runs one generation call as a stage. When `retry_on_empty` is set an
/// empty visible output triggers exactly one retry; the retry folds into the
/// same record (token usage summed, last attempt kept).
pub(crate) fn execute_stage(
    ctx: &StageCtx,
    cfg: &I2sConfig,
    stage_name: StageName,
    prompt: String,
    seed: &str,
    question_conditioned: bool,
    retry_on_empty: bool,
) -> Result<StageOutcome, LlmError> {
    let temperature = cfg.temperature(stage_name);
    let max_tokens = cfg.max_tokens(stage_name);
    execute_stage_at(ctx, stage_name, prompt, temperature, max_tokens, seed, question_conditioned, retry_on_empty)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn execute_stage_at(
    ctx: &StageCtx,
    stage_name: StageName,
    prompt: String,
    temperature: f64,
    max_tokens: u32,
    seed: &str,
    question_conditioned: bool,
    retry_on_empty: bool,
) -> Result<StageOutcome, LlmError> {
    let resp = ctx.call(&prompt, temperature, max_tokens, seed)?;
    let mut prompt_tokens = resp.prompt_tokens;
    let mut completion_tokens = resp.completion_tokens;
    let mut raw = resp.text;
    let mut flags = Vec::new();
    if retry_on_empty && strip_think(&raw).1.trim().is_empty() {
        flags.push("retried".to_string());
        let retry = ctx.call(&prompt, temperature, max_tokens, &format!("{seed}/retry"))?;
        prompt_tokens += retry.prompt_tokens;
        completion_tokens += retry.completion_tokens;
        raw = retry.text;
        if strip_think(&raw).1.trim().is_empty() {
            flags.push("empty_stage".to_string());
        }
    }
    let (think, visible) = strip_think(&raw);
    let (think, visible) = (think.to_string(), visible.to_string());
    Ok(StageOutcome {
        record: StageRecord {
            stage_name,
            prompt,
            parsed_output: visible.clone(),
            raw_output: raw,
            question_conditioned,
            temperature,
            prompt_tokens,
            completion_tokens,
            flags,
        },
        think,
        visible,
    })
}

/// Structured comparison of the demonstration question against the target.
pub fn run_comparison(
    ctx: &StageCtx,
    cfg: &I2sConfig,
    example_question: &str,
    current_question: &str,
) -> Result<(StageRecord, String), PipelineError> {
    let prompt = ctx.templates.render(
        TemplateName::Comparison,
        &[("example_question", example_question), ("current_question", current_question)],
    )?;
    let mut outcome =
        execute_stage(ctx, cfg, StageName::Comparison, prompt, "comparison", true, true)?;
    if !outcome.visible.trim().is_empty()
        && !outcome.visible.trim_start().starts_with("Comparison:")
    {
        outcome.record.flags.push("format_miss".to_string());
    }
    Ok((outcome.record, outcome.visible))
}

/// Compresses a demonstration trace to its essential steps. The target
/// question never appears here, so the stage is not question-conditioned.
pub fn distill_cot(
    ctx: &StageCtx,
    cfg: &I2sConfig,
    example_question: &str,
    example_cot: &str,
) -> Result<(StageRecord, String), PipelineError> {
    let budgeted = truncate_middle(example_cot, cfg.demo_trace_budget);
    let prompt = ctx.templates.render(
        TemplateName::CotDistill,
        &[("example_question", example_question), ("example_cot", budgeted.as_str())],
    )?;
    let outcome = execute_stage(ctx, cfg, StageName::Distill, prompt, "distill", false, true)?;
    Ok((outcome.record, outcome.visible))
}

/// Extracts transferable strategies from the demonstration solution.
pub fn run_insights(
    ctx: &StageCtx,
    cfg: &I2sConfig,
    example_question: &str,
    example_cot: &str,
    current_question: &str,
    comparison: &str,
) -> Result<(StageRecord, String), PipelineError> {
    let prompt = ctx.templates.render(
        TemplateName::TeacherInsights,
        &[
            ("example_question", example_question),
            ("example_cot", example_cot),
            ("current_question", current_question),
            ("comparison", comparison),
        ],
    )?;
    let mut outcome = execute_stage(ctx, cfg, StageName::Insights, prompt, "insights", true, true)?;
    if !outcome.visible.trim().is_empty() && !outcome.visible.trim_start().starts_with("Insights:") {
        outcome.record.flags.push("format_miss".to_string());
    }
    Ok((outcome.record, outcome.visible))
}

pub(crate) struct SolutionOutcome {
    pub records: Vec<StageRecord>,
    pub reasoning: String,
    pub visible: String,
    pub answer: String,
}

/// Decoupled solution generation: the demonstration trace is withheld so the
/// model derives the answer from the target question and insights alone.
pub fn run_solution(
    ctx: &StageCtx,
    cfg: &I2sConfig,
    question: &str,
    example_question: &str,
    comparison: &str,
    insights: &str,
    answer_kind: AnswerKind,
) -> Result<(Vec<StageRecord>, String, String), PipelineError> {
    let outcome =
        run_solution_inner(ctx, cfg, question, example_question, comparison, insights, answer_kind)?;
    Ok((outcome.records, outcome.reasoning, outcome.answer))
}

/// Closing instruction for non-letter answers; the template's own conclusion
/// line covers multiple choice only.
pub const NUMERIC_CONCLUSION: &str = "Conclude with: 'Final Answer: <value>'\n";

pub(crate) fn run_solution_inner(
    ctx: &StageCtx,
    cfg: &I2sConfig,
    question: &str,
    example_question: &str,
    comparison: &str,
    insights: &str,
    answer_kind: AnswerKind,
) -> Result<SolutionOutcome, PipelineError> {
    let mut prompt = ctx.templates.render(
        TemplateName::AnswerConstruction,
        &[
            ("example_question", example_question),
            ("comparison", comparison),
            ("analyze", insights),
            ("question", question),
        ],
    )?;
    if answer_kind != AnswerKind::MultipleChoice {
        prompt.push_str(NUMERIC_CONCLUSION);
    }
    let mut outcome =
        execute_stage(ctx, cfg, StageName::Solution, prompt, "solution", true, false)?;
    match extract_final_answer(&outcome.visible, answer_kind) {
        Some(answer) => {
            let canonical = canonical_or_raw(&answer, answer_kind);
            outcome.record.parsed_output = canonical.clone();
            Ok(SolutionOutcome {
                records: vec![outcome.record],
                reasoning: outcome.think,
                visible: outcome.visible,
                answer: canonical,
            })
        }
        None => {
            outcome.record.flags.push("no_answer".to_string());
            outcome.record.parsed_output = String::new();
            let (fallback_record, answer) = fallback_direct(ctx, cfg, question, answer_kind)?;
            Ok(SolutionOutcome {
                records: vec![outcome.record, fallback_record],
                reasoning: outcome.think,
                visible: outcome.visible,
                answer,
            })
        }
    }
}

/// Direct final-answer callback for format misses. Counted as a
/// question-conditioned stage only when actually invoked.
pub fn fallback_direct(
    ctx: &StageCtx,
    cfg: &I2sConfig,
    question: &str,
    answer_kind: AnswerKind,
) -> Result<(StageRecord, String), PipelineError> {
    let prompt = ctx.templates.render(TemplateName::FallbackDirect, &[("question", question)])?;
    let mut outcome =
        execute_stage(ctx, cfg, StageName::Fallback, prompt, "fallback", true, false)?;
    match extract_final_answer(&outcome.visible, answer_kind) {
        Some(answer) => {
            let canonical = canonical_or_raw(&answer, answer_kind);
            outcome.record.parsed_output = canonical.clone();
            Ok((outcome.record, canonical))
        }
        None => Err(PipelineError::FallbackFailed),
    }
}

/// Full I2S run on one task: retrieve the nearest demonstration, then
/// comparison -> (optional distillation) -> insights -> decoupled solution.
pub fn run_i2s(
    bank: &DemoBank,
    embedder: &dyn Embedder,
    task: &TaskItem,
    cfg: &I2sConfig,
    ctx: &StageCtx,
) -> Result<RunTrace, PipelineError> {
    run_i2s_inner(bank, embedder, task, cfg, ctx).map(|(trace, _)| trace)
}

/// As [`run_i2s`], additionally returning the reasoning trace that seeds the
/// refinement loop.
pub(crate) fn run_i2s_inner(
    bank: &DemoBank,
    embedder: &dyn Embedder,
    task: &TaskItem,
    cfg: &I2sConfig,
    ctx: &StageCtx,
) -> Result<(RunTrace, String), PipelineError> {
    let top = retrieve_text(bank, embedder, &task.question, 1)?;
    let demo = bank.get(&top[0].demo_id).expect("retrieved id exists in bank").clone();

    let mut stages = Vec::new();
    let (record, comparison) = run_comparison(ctx, cfg, &demo.question, &task.question)?;
    stages.push(record);

    let trace_for_insights = if cfg.use_distillation {
        let (record, distilled) = distill_cot(ctx, cfg, &demo.question, &demo.cot_trace)?;
        stages.push(record);
        distilled
    } else {
        truncate_middle(&demo.cot_trace, cfg.demo_trace_budget)
    };

    let (record, insights) = run_insights(
        ctx,
        cfg,
        &demo.question,
        &trace_for_insights,
        &task.question,
        &comparison,
    )?;
    stages.push(record);

    let solution = run_solution_inner(
        ctx,
        cfg,
        &task.question,
        &demo.question,
        &comparison,
        &insights,
        task.answer_kind,
    )?;
    stages.extend(solution.records);

    // seed for refinement: the model's own reasoning, falling back to the
    // visible solution text, then to the answer itself
    let z0 = if !solution.reasoning.trim().is_empty() {
        solution.reasoning
    } else if !solution.visible.trim().is_empty() {
        solution.visible
    } else {
        solution.answer.clone()
    };

    let trace = RunTrace {
        task_id: task.id.clone(),
        method: Method::I2s,
        stages,
        final_answer: solution.answer,
        iterations_used: 0,
        run_index: 0,
        iteration_answers: Vec::new(),
        error: None,
    };
    Ok((trace, z0))
}

/// Decoupled re-answer from (question, trace) only. Optionally falls back to
/// the direct callback on extraction miss; without fallback the caller sees
/// `None` and decides.
pub(crate) fn answer_from_trace(
    ctx: &StageCtx,
    cfg: &I2sConfig,
    question: &str,
    trace_text: &str,
    answer_kind: AnswerKind,
    seed: &str,
    with_fallback: bool,
) -> Result<(Vec<StageRecord>, Option<String>), PipelineError> {
    let prompt = prompts::two_step_answer_prompt(question, trace_text);
    let mut outcome =
        execute_stage(ctx, cfg, StageName::TwoStepAnswer, prompt, seed, true, false)?;
    match extract_final_answer(&outcome.visible, answer_kind) {
        Some(answer) => {
            let canonical = canonical_or_raw(&answer, answer_kind);
            outcome.record.parsed_output = canonical.clone();
            Ok((vec![outcome.record], Some(canonical)))
        }
        None => {
            outcome.record.flags.push("no_answer".to_string());
            outcome.record.parsed_output = String::new();
            if !with_fallback {
                return Ok((vec![outcome.record], None));
            }
            match fallback_direct(ctx, cfg, question, answer_kind) {
                Ok((record, answer)) => Ok((vec![outcome.record, record], Some(answer))),
                Err(PipelineError::FallbackFailed) => Ok((vec![outcome.record], None)),
                Err(e) => Err(e),
            }
        }
    }
}

/// Two-step inference: elicit a trace with demonstrations, then answer from
/// the question and trace only, shielding the answer stage from the demos.
pub fn run_two_step(
    ctx: &StageCtx,
    cfg: &I2sConfig,
    demos: &[crate::model::Demonstration],
    task: &TaskItem,
    k: usize,
    answer_kind: AnswerKind,
) -> Result<RunTrace, PipelineError> {
    let prompt = prompts::assemble_fewshot(
        ctx.templates,
        demos,
        &task.question,
        k,
        cfg.demo_trace_budget,
        prompts::DEFAULT_CONTEXT_BUDGET,
    )?;
    let mut outcome = execute_stage(ctx, cfg, StageName::Fewshot, prompt, "elicit", true, false)?;
    let raw = outcome.record.raw_output.clone();
    let trace_z = if has_think_tag(&raw) { outcome.think.clone() } else { raw };
    outcome.record.parsed_output = trace_z.clone();

    let mut stages = vec![outcome.record];
    let (records, answer) =
        answer_from_trace(ctx, cfg, &task.question, &trace_z, answer_kind, "answer", true)?;
    stages.extend(records);
    let answer = answer.ok_or(PipelineError::FallbackFailed)?;

    Ok(RunTrace {
        task_id: task.id.clone(),
        method: Method::TwoStep,
        stages,
        final_answer: answer,
        iterations_used: 0,
        run_index: 0,
        iteration_answers: Vec::new(),
        error: None,
    })
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::llm::{LlmClient, MockProvider, MockScript, RetryPolicy};
    use crate::model::{Demonstration, Domain};
    use std::sync::Arc;

    pub fn demo(id: &str, question: &str, trace: &str, answer: &str) -> Demonstration {
        Demonstration {
            id: id.into(),
            question: question.into(),
            cot_trace: trace.into(),
            answer: answer.into(),
            domain: Domain::Math,
        }
    }

    pub fn task(id: &str, question: &str, kind: AnswerKind) -> TaskItem {
        TaskItem { id: id.into(), question: question.into(), gold_answer: None, answer_kind: kind }
    }

    pub fn mock_client(script: MockScript) -> (LlmClient, Arc<MockProvider>) {
        let provider = Arc::new(MockProvider::new(script).unwrap());
        (LlmClient::new(provider.clone(), RetryPolicy::immediate(1)), provider)
    }
}
