//! Comparison methods: direct inference, k-shot CoT, Self-Refine,
//! Progressive-Hint Prompting, and majority voting.

use crate::model::{
    canonical_or_raw, extract_final_answer, AnswerKind, Method, RunTrace, StageName,
    StageRecord, TaskItem,
};
use crate::pipeline::{
    execute_stage, fallback_direct, I2sConfig, PipelineError, StageCtx,
};
use crate::prompts::{self, TemplateName};
use crate::retrieval::{retrieve_text, DemoBank, Embedder};
use std::collections::BTreeMap;

/// Canonical-answer vote counts with first-occurrence indices for
/// deterministic tie-breaking.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VoteTally {
    pub counts: BTreeMap<String, usize>,
    pub first_seen: BTreeMap<String, usize>,
}

impl VoteTally {
    pub fn tally(answers: &[String], kind: AnswerKind) -> Self {
        let mut out = VoteTally::default();
        for (index, answer) in answers.iter().enumerate() {
            if answer.trim().is_empty() {
                continue;
            }
            let canonical = canonical_or_raw(answer, kind);
            *out.counts.entry(canonical.clone()).or_insert(0) += 1;
            out.first_seen.entry(canonical).or_insert(index);
        }
        out
    }

    /// Most frequent canonical answer, earliest first-seen on ties; empty
    /// string when no votes survived.
    pub fn winner(&self) -> String {
        self.counts
            .iter()
            .map(|(answer, &count)| (answer, count, self.first_seen[answer]))
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.2.cmp(&a.2)))
            .map(|(answer, _, _)| answer.clone())
            .unwrap_or_default()
    }
}

/// Canonicalizes and tallies answers, returning the majority winner. Empty
/// or unextractable answers are excluded: a non-answer must not win a vote.
pub fn majority_vote(answers: &[String], kind: AnswerKind) -> String {
    VoteTally::tally(answers, kind).winner()
}

fn direct_stage(
    ctx: &StageCtx,
    cfg: &I2sConfig,
    question: &str,
    kind: AnswerKind,
    seed: &str,
) -> Result<(StageRecord, Option<String>, String), PipelineError> {
    let prompt = ctx.templates.render(TemplateName::Generation, &[("question", question)])?;
    let mut outcome = execute_stage(ctx, cfg, StageName::Direct, prompt, seed, true, false)?;
    let visible = outcome.visible.clone();
    let answer = extract_final_answer(&visible, kind).map(|a| canonical_or_raw(&a, kind));
    match &answer {
        Some(a) => outcome.record.parsed_output = a.clone(),
        None => {
            outcome.record.parsed_output = String::new();
            outcome.record.flags.push("no_answer".to_string());
        }
    }
    Ok((outcome.record, answer, visible))
}

/// Zero-shot direct answering; this IS the fallback prompt, so extraction
/// misses surface as `NoAnswer` rather than triggering another call.
pub fn direct_inference(
    ctx: &StageCtx,
    cfg: &I2sConfig,
    task: &TaskItem,
) -> Result<RunTrace, PipelineError> {
    let (record, answer, _) = direct_stage(ctx, cfg, &task.question, task.answer_kind, "direct")?;
    let answer = answer.ok_or(PipelineError::NoAnswer)?;
    Ok(trace(task, Method::Direct, vec![record], answer, Vec::new()))
}

/// Single-pass k-shot CoT over the top-k retrieved demonstrations.
pub fn fewshot_cot(
    ctx: &StageCtx,
    cfg: &I2sConfig,
    bank: &DemoBank,
    embedder: &dyn Embedder,
    task: &TaskItem,
    k: usize,
) -> Result<RunTrace, PipelineError> {
    let effective_k = k.min(bank.len()).max(1);
    let results = retrieve_text(bank, embedder, &task.question, effective_k)?;
    let demos: Vec<_> = results
        .iter()
        .map(|r| bank.get(&r.demo_id).expect("retrieved id exists").clone())
        .collect();
    let prompt = prompts::assemble_fewshot(
        ctx.templates,
        &demos,
        &task.question,
        effective_k,
        cfg.demo_trace_budget,
        prompts::DEFAULT_CONTEXT_BUDGET,
    )?;
    let mut outcome = execute_stage(ctx, cfg, StageName::Fewshot, prompt, "fewshot", true, false)?;
    if effective_k < k {
        outcome.record.flags.push("k_clamped_to_bank_size".to_string());
    }
    let mut stages = Vec::new();
    let answer = match extract_final_answer(&outcome.visible, task.answer_kind) {
        Some(a) => {
            let canonical = canonical_or_raw(&a, task.answer_kind);
            outcome.record.parsed_output = canonical.clone();
            stages.push(outcome.record);
            canonical
        }
        None => {
            outcome.record.parsed_output = String::new();
            outcome.record.flags.push("no_answer".to_string());
            stages.push(outcome.record);
            let (record, answer) = fallback_direct(ctx, cfg, &task.question, task.answer_kind)
                .map_err(|e| match e {
                    PipelineError::FallbackFailed => PipelineError::NoAnswer,
                    other => other,
                })?;
            stages.push(record);
            answer
        }
    };
    Ok(trace(task, Method::FewshotK, stages, answer, Vec::new()))
}

/// Iterative feedback/refinement: round 1 is direct inference, then each
/// round critiques the latest answer and revises it. Round prompts carry
/// only visible text from prior rounds, never think spans; all rounds run
/// (fixed budget), and the method reports the last round's answer.
pub fn self_refine(
    ctx: &StageCtx,
    cfg: &I2sConfig,
    task: &TaskItem,
    max_rounds: u32,
) -> Result<RunTrace, PipelineError> {
    assert!((1..=4).contains(&max_rounds), "max_rounds must be in 1..=4");
    let question = &task.question;
    let kind = task.answer_kind;

    let (record, answer, visible) = direct_stage(ctx, cfg, question, kind, "round1")?;
    let mut stages = vec![record];
    let mut answers = vec![answer.clone().unwrap_or_default()];
    let mut visibles = vec![visible];
    let mut current = answer.ok_or(PipelineError::NoAnswer)?;

    for round in 2..=max_rounds {
        let critiqued = round - 1;
        // feedback over the question plus every prior visible answer
        let mut feedback_prompt = format!("Question:\n{question}\n");
        for (i, v) in visibles.iter().enumerate() {
            feedback_prompt.push_str(&format!("\nRound {} Answer:\n{v}\n", i + 1));
        }
        feedback_prompt.push('\n');
        feedback_prompt.push_str(
            &ctx.templates
                .render(TemplateName::SrFeedback, &[("index", critiqued.to_string().as_str())])?,
        );
        let feedback = execute_stage(
            ctx,
            cfg,
            StageName::SrFeedback,
            feedback_prompt,
            &format!("round{round}/feedback"),
            true,
            false,
        )?;
        let feedback_visible = feedback.visible.clone();
        stages.push(feedback.record);

        let refine_prompt = format!(
            "Question:\n{question}\n\nRound {critiqued} Answer:\n{}\n\nFeedback:\n{feedback_visible}\n\n{}",
            visibles.last().expect("at least one round"),
            ctx.templates.render(TemplateName::SrRefine, &[])?,
        );
        let mut refined = execute_stage(
            ctx,
            cfg,
            StageName::SrRefine,
            refine_prompt,
            &format!("round{round}/refine"),
            true,
            false,
        )?;
        match extract_final_answer(&refined.visible, kind) {
            Some(a) => {
                let canonical = canonical_or_raw(&a, kind);
                refined.record.parsed_output = canonical.clone();
                current = canonical;
                visibles.push(refined.visible.clone());
            }
            None => {
                // round skipped: previous answer carried forward
                refined.record.parsed_output = String::new();
                refined.record.flags.push("no_answer_round_skipped".to_string());
            }
        }
        stages.push(refined.record);
        answers.push(current.clone());
    }
    Ok(trace(task, Method::SelfRefine, stages, current, answers))
}

/// Progressive-hint prompting: the direct attempt, then retries that replay
/// the question with a compact trail of previous visible attempts. The trail
/// omits think content; the budget is fixed at `max_retries` retries.
pub fn php(
    ctx: &StageCtx,
    cfg: &I2sConfig,
    task: &TaskItem,
    max_retries: u32,
) -> Result<RunTrace, PipelineError> {
    assert!((1..=3).contains(&max_retries), "max_retries must be in 1..=3");
    let question = &task.question;
    let kind = task.answer_kind;

    let (record, answer, visible) = direct_stage(ctx, cfg, question, kind, "attempt1")?;
    let mut stages = vec![record];
    let mut answers = vec![answer.clone().unwrap_or_default()];
    let mut visibles = vec![visible];
    let mut current = answer.ok_or(PipelineError::NoAnswer)?;

    let base_prompt = ctx.templates.render(TemplateName::Generation, &[("question", question)])?;
    for retry in 1..=max_retries {
        let attempts = visibles
            .iter()
            .enumerate()
            .map(|(i, v)| prompts::php_round_line(i + 1, v))
            .collect::<Vec<_>>()
            .join("\n");
        let trail =
            ctx.templates.render(TemplateName::PhpHeader, &[("attempts", attempts.as_str())])?;
        let prompt = format!("{base_prompt}\n\n{trail}");
        let mut outcome = execute_stage(
            ctx,
            cfg,
            StageName::PhpRetry,
            prompt,
            &format!("retry{retry}"),
            true,
            false,
        )?;
        match extract_final_answer(&outcome.visible, kind) {
            Some(a) => {
                let canonical = canonical_or_raw(&a, kind);
                outcome.record.parsed_output = canonical.clone();
                current = canonical;
                visibles.push(outcome.visible.clone());
            }
            None => {
                outcome.record.parsed_output = String::new();
                outcome.record.flags.push("no_answer_round_skipped".to_string());
            }
        }
        stages.push(outcome.record);
        answers.push(current.clone());
    }
    Ok(trace(task, Method::Php, stages, current, answers))
}

/// Parallel scaling: n independent direct samples with distinct seed labels,
/// aggregated by majority vote.
pub fn run_majority_at_n(
    ctx: &StageCtx,
    cfg: &I2sConfig,
    task: &TaskItem,
    n: usize,
) -> Result<RunTrace, PipelineError> {
    assert!(n >= 1, "n must be >= 1");
    let mut stages = Vec::with_capacity(n);
    let mut answers = Vec::with_capacity(n);
    for sample in 0..n {
        let (record, answer, _) =
            direct_stage(ctx, cfg, &task.question, task.answer_kind, &format!("sample{sample}"))?;
        stages.push(record);
        answers.push(answer.unwrap_or_default());
    }
    let winner = majority_vote(&answers, task.answer_kind);
    let mut trace = trace(task, Method::MajorityN, stages, winner, answers);
    trace.iterations_used = 0; // parallel samples, not refinement rounds
    Ok(trace)
}

fn trace(
    task: &TaskItem,
    method: Method,
    stages: Vec<StageRecord>,
    final_answer: String,
    iteration_answers: Vec<String>,
) -> RunTrace {
    RunTrace {
        task_id: task.id.clone(),
        method,
        stages,
        final_answer,
        iterations_used: iteration_answers.len().saturating_sub(1) as u32,
        run_index: 0,
        iteration_answers,
        error: None,
    }
}
