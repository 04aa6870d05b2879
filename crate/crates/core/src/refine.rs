//! The I2S+ iterative self-refinement loop: suggestion proposal,
//! multi-temperature review, refinement application, and loop control.

use crate::model::{
    extract_json_object, has_think_tag, strip_think, Method, RunTrace, StageName,
    StageRecord, TaskItem,
};
use crate::pipeline::{
    answer_from_trace, execute_stage_at, fallback_direct, run_i2s_inner, I2sConfig, PipelineError,
    StageCtx,
};
use crate::prompts::TemplateName;
use crate::retrieval::{DemoBank, Embedder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Loop-control and decoding parameters for the refinement phase.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineConfig {
    pub n_iter: u32,
    pub n_suggestions: u32,
    pub suggestion_temperature: f64,
    pub review_temperatures: Vec<f64>,
    pub refine_temperature: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            n_iter: 3,
            n_suggestions: 3,
            suggestion_temperature: 0.8,
            review_temperatures: vec![0.3, 0.9],
            refine_temperature: 0.5,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.n_suggestions < 1 {
            return Err(PipelineError::Llm(crate::llm::LlmError::InvalidRequest(
                "n_suggestions must be >= 1".into(),
            )));
        }
        if self.review_temperatures.is_empty() {
            return Err(PipelineError::Llm(crate::llm::LlmError::InvalidRequest(
                "at least one review temperature required".into(),
            )));
        }
        Ok(())
    }

    /// Ceiling on question-conditioned stages of one I2S+ run, for any
    /// provider behavior: the I2S phase, per-iteration proposal/review/
    /// refinement plus an answer snapshot, and the final re-answer with its
    /// fallback.
    pub fn call_bound(&self) -> u64 {
        3 + self.n_iter as u64
            * (self.n_suggestions as u64 + self.review_temperatures.len() as u64 + 2)
            + 2
    }
}

/// One completed refinement iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub suggestions: Vec<String>,
    pub chosen_check: String,
    pub refined_path: String,
    pub accepted: bool,
}

/// Loop state carried across iterations.
#[derive(Debug, Clone)]
pub struct RefinementState {
    pub iteration: u32,
    pub best_path: String,
    pub history: Vec<IterationRecord>,
}

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("every candidate suggestion was discarded")]
    AllSuggestionsInvalid,
    #[error("no review round produced a parseable check")]
    ReviewUnparseable,
}

const SUGGESTION_KEY: &str = "issue_and_sanity_check";
const REVIEW_KEY: &str = "the_best_check";

/// Outcome of the proposal phase; all candidate calls are recorded even when
/// their outputs are discarded.
pub struct SuggestionRound {
    pub records: Vec<StageRecord>,
    pub suggestions: Vec<String>,
}

impl SuggestionRound {
    /// Surviving suggestions, or the every-candidate-discarded error that
    /// makes the loop skip the iteration.
    pub fn valid(&self) -> Result<&[String], RefineError> {
        if self.suggestions.is_empty() {
            Err(RefineError::AllSuggestionsInvalid)
        } else {
            Ok(&self.suggestions)
        }
    }
}

/// Issues `n_suggestions` independent proposal calls and keeps the valid
/// candidates: parse failures, empty values, and exact duplicates are
/// discarded.
pub fn propose_suggestions(
    ctx: &StageCtx,
    i2s_cfg: &I2sConfig,
    refine_cfg: &RefineConfig,
    question: &str,
    best_path: &str,
    iteration: u32,
) -> Result<SuggestionRound, PipelineError> {
    let prompt = ctx.templates.render(
        TemplateName::Suggestion,
        &[("current_question", question), ("best_path", best_path)],
    )?;
    let mut records = Vec::new();
    let mut suggestions: Vec<String> = Vec::new();
    for s in 0..refine_cfg.n_suggestions {
        let seed = format!("iter{iteration}/suggest{s}");
        let record = match json_stage(
            ctx,
            i2s_cfg,
            StageName::Suggestion,
            prompt.clone(),
            refine_cfg.suggestion_temperature,
            &seed,
            SUGGESTION_KEY,
        ) {
            Ok((mut record, value)) => {
                record.parsed_output = String::new();
                match value {
                    Some(v) if v.trim().is_empty() => {
                        record.flags.push("discard_empty".to_string());
                    }
                    Some(v) if suggestions.contains(&v) => {
                        record.flags.push("discard_duplicate".to_string());
                    }
                    Some(v) => {
                        record.parsed_output = v.clone();
                        suggestions.push(v);
                    }
                    None => record.flags.push("discard_parse_failure".to_string()),
                }
                record
            }
            Err(PipelineError::Llm(e)) => failed_stage_record(
                StageName::Suggestion,
                prompt.clone(),
                refine_cfg.suggestion_temperature,
                &e,
            ),
            Err(e) => return Err(e),
        };
        records.push(record);
    }
    Ok(SuggestionRound { records, suggestions })
}

/// One generation call whose output is parsed as a compact JSON object. A
/// parse failure triggers exactly one retry folded into the record.
fn json_stage(
    ctx: &StageCtx,
    cfg: &I2sConfig,
    stage_name: StageName,
    prompt: String,
    temperature: f64,
    seed: &str,
    key: &str,
) -> Result<(StageRecord, Option<String>), PipelineError> {
    let max_tokens = cfg.max_tokens(stage_name);
    let outcome =
        execute_stage_at(ctx, stage_name, prompt.clone(), temperature, max_tokens, seed, true, false)?;
    let mut record = outcome.record;
    match extract_json_object(&outcome.visible, key) {
        Ok(value) => Ok((record, Some(value))),
        Err(_) => {
            record.flags.push("json_retry".to_string());
            let retry = execute_stage_at(
                ctx,
                stage_name,
                prompt,
                temperature,
                max_tokens,
                &format!("{seed}/retry"),
                true,
                false,
            )?;
            record.prompt_tokens += retry.record.prompt_tokens;
            record.completion_tokens += retry.record.completion_tokens;
            record.raw_output = retry.record.raw_output;
            record.parsed_output = retry.record.parsed_output;
            match extract_json_object(&retry.visible, key) {
                Ok(value) => Ok((record, Some(value))),
                Err(_) => Ok((record, None)),
            }
        }
    }
}

fn failed_stage_record(
    stage_name: StageName,
    prompt: String,
    temperature: f64,
    error: &crate::llm::LlmError,
) -> StageRecord {
    StageRecord {
        stage_name,
        prompt,
        raw_output: String::new(),
        parsed_output: String::new(),
        question_conditioned: true,
        temperature,
        prompt_tokens: 0,
        completion_tokens: 0,
        flags: vec![format!("call_failed: {error}")],
    }
}

/// Outcome of the review phase.
pub struct ReviewRound {
    pub records: Vec<StageRecord>,
    pub best_check: String,
    pub unparseable: bool,
}

impl ReviewRound {
    /// The selected check, or the all-rounds-unparseable error; `best_check`
    /// already holds the first-suggestion fallback in that case.
    pub fn outcome(&self) -> Result<&str, RefineError> {
        if self.unparseable {
            Err(RefineError::ReviewUnparseable)
        } else {
            Ok(&self.best_check)
        }
    }
}

/// Reviews the joint candidate list once per review temperature. Rounds that
/// agree (after whitespace collapse) decide the check; otherwise the lowest
/// temperature round wins. When every round fails to parse, the caller falls
/// back to the first suggestion.
pub fn review_suggestions(
    ctx: &StageCtx,
    i2s_cfg: &I2sConfig,
    refine_cfg: &RefineConfig,
    question: &str,
    best_path: &str,
    suggestions: &[String],
    iteration: u32,
) -> Result<ReviewRound, PipelineError> {
    assert!(!suggestions.is_empty(), "review requires at least one suggestion");
    let numbered: Vec<String> =
        suggestions.iter().enumerate().map(|(i, s)| format!("{}. {s}", i + 1)).collect();
    let suggestion_prompt = numbered.join("\n");
    let prompt = ctx.templates.render(
        TemplateName::Review,
        &[
            ("current_question", question),
            ("best_path", best_path),
            ("suggestion_prompt", suggestion_prompt.as_str()),
        ],
    )?;

    let mut records = Vec::new();
    let mut parsed: Vec<(f64, String)> = Vec::new();
    for (round, &temperature) in refine_cfg.review_temperatures.iter().enumerate() {
        let seed = format!("iter{iteration}/review{round}");
        match json_stage(ctx, i2s_cfg, StageName::Review, prompt.clone(), temperature, &seed, REVIEW_KEY)
        {
            Ok((mut record, value)) => {
                match value {
                    // an empty check cannot drive a refinement
                    Some(v) if !v.trim().is_empty() => {
                        record.parsed_output = v.clone();
                        parsed.push((temperature, v));
                    }
                    _ => record.flags.push("review_unparseable".to_string()),
                }
                records.push(record);
            }
            Err(PipelineError::Llm(e)) => {
                records.push(failed_stage_record(StageName::Review, prompt.clone(), temperature, &e));
            }
            Err(e) => return Err(e),
        }
    }

    if parsed.is_empty() {
        return Ok(ReviewRound {
            records,
            best_check: suggestions[0].clone(),
            unparseable: true,
        });
    }
    let collapse = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ");
    let all_agree = parsed.windows(2).all(|w| collapse(&w[0].1) == collapse(&w[1].1));
    let chosen = if all_agree {
        parsed[0].1.clone()
    } else {
        parsed
            .iter()
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .expect("parsed is non-empty")
            .1
            .clone()
    };
    Ok(ReviewRound { records, best_check: chosen, unparseable: false })
}

/// Outcome of one refinement application.
pub struct RefinementOutcome {
    pub record: StageRecord,
    pub refined_path: String,
    pub accepted: bool,
    /// The call itself failed (as opposed to a rejected revision); the loop
    /// skips such iterations instead of early-stopping.
    pub call_failed: bool,
}

/// Revises the reasoning trace against the chosen issue. An empty or
/// byte-identical revision is retried once, then rejected with the previous
/// path retained.
pub fn apply_refinement(
    ctx: &StageCtx,
    i2s_cfg: &I2sConfig,
    refine_cfg: &RefineConfig,
    question: &str,
    best_path: &str,
    issue: &str,
    iteration: u32,
) -> Result<RefinementOutcome, PipelineError> {
    assert!(!issue.is_empty(), "issue must be non-empty");
    let prompt = ctx.templates.render(
        TemplateName::Refinement,
        &[("current_question", question), ("best_path", best_path), ("issue", issue)],
    )?;
    let max_tokens = i2s_cfg.max_tokens(StageName::Refinement);
    let temperature = refine_cfg.refine_temperature;

    let refined_of = |raw: &str| -> String {
        if has_think_tag(raw) {
            strip_think(raw).0.to_string()
        } else {
            raw.to_string()
        }
    };
    let rejected = |path: &str| path.trim().is_empty() || path == best_path;

    let seed = format!("iter{iteration}/refine");
    let attempt = match execute_stage_at(
        ctx,
        StageName::Refinement,
        prompt.clone(),
        temperature,
        max_tokens,
        &seed,
        true,
        false,
    ) {
        Ok(outcome) => outcome,
        Err(e) => {
            return Ok(RefinementOutcome {
                record: failed_stage_record(StageName::Refinement, prompt, temperature, &e),
                refined_path: best_path.to_string(),
                accepted: false,
                call_failed: true,
            })
        }
    };
    let mut record = attempt.record;
    let mut refined = refined_of(&record.raw_output);

    if rejected(&refined) {
        record.flags.push("refine_retry".to_string());
        match execute_stage_at(
            ctx,
            StageName::Refinement,
            prompt,
            temperature,
            max_tokens,
            &format!("{seed}/retry"),
            true,
            false,
        ) {
            Ok(retry) => {
                record.prompt_tokens += retry.record.prompt_tokens;
                record.completion_tokens += retry.record.completion_tokens;
                record.raw_output = retry.record.raw_output;
                refined = refined_of(&record.raw_output);
            }
            Err(e) => record.flags.push(format!("call_failed: {e}")),
        }
    }

    if rejected(&refined) {
        record.flags.push("refinement_rejected".to_string());
        record.parsed_output = best_path.to_string();
        Ok(RefinementOutcome {
            record,
            refined_path: best_path.to_string(),
            accepted: false,
            call_failed: false,
        })
    } else {
        record.parsed_output = refined.clone();
        Ok(RefinementOutcome { record, refined_path: refined, accepted: true, call_failed: false })
    }
}

/// Full I2S+ run: I2S to obtain the initial trace, then up to `n_iter`
/// propose -> review -> refine iterations, early-stopping when an iteration
/// leaves the trace unchanged; the final answer comes from a last decoupled
/// call on (question, best_path).
///
/// With `snapshot_answers` an answer is re-derived from the trace after the
/// I2S phase and after each counted iteration; the last snapshot then serves
/// as the final answer. Without snapshots a single final re-answer call runs
/// after the loop.
pub fn run_i2s_plus(
    bank: &DemoBank,
    embedder: &dyn Embedder,
    task: &TaskItem,
    i2s_cfg: &I2sConfig,
    refine_cfg: &RefineConfig,
    ctx: &StageCtx,
    snapshot_answers: bool,
) -> Result<RunTrace, PipelineError> {
    refine_cfg.validate()?;
    let (i2s_trace, z0) = run_i2s_inner(bank, embedder, task, i2s_cfg, ctx)?;
    let mut stages = i2s_trace.stages;
    let mut state = RefinementState { iteration: 0, best_path: z0, history: Vec::new() };
    let mut snapshots: Vec<String> = Vec::new();

    if snapshot_answers {
        let (records, answer) = snapshot_answer(ctx, i2s_cfg, task, &state.best_path, 0)?;
        stages.extend(records);
        snapshots.push(answer.unwrap_or_default());
    }

    for iteration in 1..=refine_cfg.n_iter {
        if state.best_path.trim().is_empty() {
            break;
        }
        let round = propose_suggestions(
            ctx,
            i2s_cfg,
            refine_cfg,
            &task.question,
            &state.best_path,
            iteration,
        )?;
        let all_invalid = round.valid().is_err();
        stages.extend(round.records);
        if all_invalid {
            // AllSuggestionsInvalid: skip this iteration
            continue;
        }

        let review = review_suggestions(
            ctx,
            i2s_cfg,
            refine_cfg,
            &task.question,
            &state.best_path,
            &round.suggestions,
            iteration,
        )?;
        stages.extend(review.records);

        let refinement = apply_refinement(
            ctx,
            i2s_cfg,
            refine_cfg,
            &task.question,
            &state.best_path,
            &review.best_check,
            iteration,
        )?;
        let accepted = refinement.accepted;
        let call_failed = refinement.call_failed;
        stages.push(refinement.record);
        if call_failed {
            // a failed call skips the iteration; only a genuine rejection
            // counts and stops the loop
            continue;
        }
        state.best_path = refinement.refined_path.clone();
        state.history.push(IterationRecord {
            suggestions: round.suggestions,
            chosen_check: review.best_check,
            refined_path: refinement.refined_path,
            accepted,
        });
        state.iteration += 1;

        if snapshot_answers {
            if accepted {
                let (records, answer) =
                    snapshot_answer(ctx, i2s_cfg, task, &state.best_path, iteration)?;
                stages.extend(records);
                snapshots.push(answer.unwrap_or_default());
            } else {
                // trace unchanged; the previous snapshot still applies
                snapshots.push(snapshots.last().cloned().unwrap_or_default());
            }
        }
        if !accepted {
            break;
        }
    }
    debug_assert_eq!(state.history.len(), state.iteration as usize);
    debug_assert!(state.history.iter().all(|h| !h.refined_path.trim().is_empty()));

    let final_answer = if snapshot_answers {
        let last = snapshots.last().cloned().unwrap_or_default();
        if last.is_empty() {
            let (record, answer) = fallback_direct(ctx, i2s_cfg, &task.question, task.answer_kind)?;
            stages.push(record);
            if let Some(slot) = snapshots.last_mut() {
                *slot = answer.clone();
            }
            answer
        } else {
            last
        }
    } else {
        let (records, answer) = answer_from_trace(
            ctx,
            i2s_cfg,
            &task.question,
            &state.best_path,
            task.answer_kind,
            "final_answer",
            true,
        )?;
        stages.extend(records);
        answer.ok_or(PipelineError::FallbackFailed)?
    };

    Ok(RunTrace {
        task_id: task.id.clone(),
        method: Method::I2sPlus,
        stages,
        final_answer,
        iterations_used: state.iteration,
        run_index: 0,
        iteration_answers: snapshots,
        error: None,
    })
}

/// Derives an answer from the current trace without a fallback call; misses
/// surface as `None` and are resolved at loop end.
fn snapshot_answer(
    ctx: &StageCtx,
    cfg: &I2sConfig,
    task: &TaskItem,
    best_path: &str,
    iteration: u32,
) -> Result<(Vec<StageRecord>, Option<String>), PipelineError> {
    answer_from_trace(
        ctx,
        cfg,
        &task.question,
        best_path,
        task.answer_kind,
        &format!("iter{iteration}/answer"),
        false,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::MockScript;
    use crate::model::AnswerKind;
    use crate::pipeline::testutil::{demo, mock_client, task};
    use crate::prompts::TemplateRegistry;
    use crate::retrieval::{build_bank, HashEmbedder};
    use std::collections::BTreeSet;

    fn ctx_harness(script: MockScript) -> (crate::llm::LlmClient, TemplateRegistry) {
        let (client, _) = mock_client(script);
        (client, TemplateRegistry::builtin())
    }

    fn base_script() -> MockScript {
        MockScript::substrings(vec![
            ("Do not attempt to solve the new problem.", "Comparison: alike"),
            ("Do not try to solve the new question.", "Insights: check parity"),
            (
                "You may use the example and comparison",
                "<think>initial path</think>Final Answer: 10",
            ),
            ("Answer the question using the reasoning above", "Final Answer: 10"),
        ])
    }

    fn bank_and_embedder() -> (DemoBank, HashEmbedder) {
        let embedder = HashEmbedder::default();
        let demos = vec![demo("d1", "a parity puzzle", "long demo trace here", "4")];
        (build_bank(&demos, &BTreeSet::new(), &embedder).unwrap(), embedder)
    }

    #[test]
    fn propose_discards_duplicates_empties_and_parse_failures() {
        // three samples: valid, empty value, non-JSON
        let mut script = MockScript::default();
        script.push_regex(
            "(?s)suggest0.*issue_and_sanity_check",
            r#"{"issue_and_sanity_check":"recheck the units"}"#,
        );
        script.push_regex("(?s)suggest1.*issue_and_sanity_check", r#"{"issue_and_sanity_check":""}"#);
        script.push_regex("(?s)suggest2.*issue_and_sanity_check", "not json at all");
        let (client, registry) = ctx_harness(script);
        let ctx = StageCtx::new(&client, &registry, "t");
        let round = propose_suggestions(
            &ctx,
            &I2sConfig::default(),
            &RefineConfig::default(),
            "Q",
            "path",
            1,
        )
        .unwrap();
        assert_eq!(round.suggestions, vec!["recheck the units".to_string()]);
        assert_eq!(round.records.len(), 3);
        assert!(round.records[1].flags.contains(&"discard_empty".to_string()));
        // non-JSON output burns its one retry then is discarded
        assert!(round.records[2].flags.contains(&"discard_parse_failure".to_string()));
    }

    #[test]
    fn propose_merges_identical_candidates() {
        let script = MockScript::substrings(vec![(
            "issue_and_sanity_check",
            r#"{"issue_and_sanity_check":"same check"}"#,
        )]);
        let (client, registry) = ctx_harness(script);
        let ctx = StageCtx::new(&client, &registry, "t");
        let round = propose_suggestions(
            &ctx,
            &I2sConfig::default(),
            &RefineConfig::default(),
            "Q",
            "path",
            1,
        )
        .unwrap();
        assert_eq!(round.suggestions.len(), 1);
        let dupes = round
            .records
            .iter()
            .filter(|r| r.flags.contains(&"discard_duplicate".to_string()))
            .count();
        assert_eq!(dupes, 2);
    }

    #[test]
    fn propose_extracts_prose_wrapped_json() {
        let script = MockScript::substrings(vec![(
            "issue_and_sanity_check",
            r#"Sure, here you go: {"issue_and_sanity_check":"verify the base case"} hope that helps"#,
        )]);
        let (client, registry) = ctx_harness(script);
        let ctx = StageCtx::new(&client, &registry, "t");
        let round = propose_suggestions(
            &ctx,
            &I2sConfig::default(),
            &RefineConfig { n_suggestions: 1, ..Default::default() },
            "Q",
            "path",
            1,
        )
        .unwrap();
        assert_eq!(round.suggestions, vec!["verify the base case".to_string()]);
    }

    #[test]
    fn review_agreement_and_low_temperature_precedence() {
        // agreeing rounds
        let script = MockScript::substrings(vec![(
            "Candidate Checks:",
            r#"{"the_best_check":"the agreed check"}"#,
        )]);
        let (client, registry) = ctx_harness(script);
        let ctx = StageCtx::new(&client, &registry, "t");
        let review = review_suggestions(
            &ctx,
            &I2sConfig::default(),
            &RefineConfig::default(),
            "Q",
            "path",
            &["s1".to_string()],
            1,
        )
        .unwrap();
        assert_eq!(review.best_check, "the agreed check");
        assert!(!review.unparseable);
        assert_eq!(review.records.len(), 2);

        // disagreeing rounds: the 0.3-temperature round wins
        let mut script = MockScript::default();
        script.push_regex("(?s)review0.*Candidate Checks:", r#"{"the_best_check":"from cold round"}"#);
        script.push_regex("(?s)review1.*Candidate Checks:", r#"{"the_best_check":"from hot round"}"#);
        let (client, registry) = ctx_harness(script);
        let ctx = StageCtx::new(&client, &registry, "t");
        let review = review_suggestions(
            &ctx,
            &I2sConfig::default(),
            &RefineConfig::default(),
            "Q",
            "path",
            &["s1".to_string()],
            1,
        )
        .unwrap();
        assert_eq!(review.best_check, "from cold round");
    }

    #[test]
    fn review_empty_check_counts_as_unparseable() {
        let script =
            MockScript::substrings(vec![("Candidate Checks:", r#"{"the_best_check":"  "}"#)]);
        let (client, registry) = ctx_harness(script);
        let ctx = StageCtx::new(&client, &registry, "t");
        let review = review_suggestions(
            &ctx,
            &I2sConfig::default(),
            &RefineConfig::default(),
            "Q",
            "path",
            &["keep this suggestion".to_string()],
            1,
        )
        .unwrap();
        assert!(review.unparseable);
        assert_eq!(review.best_check, "keep this suggestion");
    }

    #[test]
    fn review_total_parse_failure_falls_back_to_first_suggestion() {
        let script = MockScript::substrings(vec![("Candidate Checks:", "never json")]);
        let (client, registry) = ctx_harness(script);
        let ctx = StageCtx::new(&client, &registry, "t");
        let review = review_suggestions(
            &ctx,
            &I2sConfig::default(),
            &RefineConfig::default(),
            "Q",
            "path",
            &["first suggestion".to_string(), "second".to_string()],
            1,
        )
        .unwrap();
        assert!(review.unparseable);
        assert_eq!(review.best_check, "first suggestion");
    }

    #[test]
    fn refinement_passthrough_think_and_rejection() {
        let script = MockScript::substrings(vec![(
            "Issue to Fix (with sanity check):",
            "<think>z2</think>Answer: 5",
        )]);
        let (client, registry) = ctx_harness(script);
        let ctx = StageCtx::new(&client, &registry, "t");
        let out = apply_refinement(
            &ctx,
            &I2sConfig::default(),
            &RefineConfig::default(),
            "Q",
            "old path",
            "the issue",
            1,
        )
        .unwrap();
        assert!(out.accepted);
        assert_eq!(out.refined_path, "z2");

        // echoing the current path twice gets rejected and retained
        let script =
            MockScript::substrings(vec![("Issue to Fix (with sanity check):", "old path")]);
        let (client, registry) = ctx_harness(script);
        let ctx = StageCtx::new(&client, &registry, "t");
        let out = apply_refinement(
            &ctx,
            &I2sConfig::default(),
            &RefineConfig::default(),
            "Q",
            "old path",
            "the issue",
            1,
        )
        .unwrap();
        assert!(!out.accepted);
        assert_eq!(out.refined_path, "old path");
        assert!(out.record.flags.contains(&"refinement_rejected".to_string()));
        assert!(out.record.flags.contains(&"refine_retry".to_string()));
    }

    fn full_refine_script() -> MockScript {
        let mut script = base_script();
        script.rules.insert(
            0,
            crate::llm::MockRule {
                matcher: crate::llm::MockMatcher::Substring("issue_and_sanity_check".into()),
                response: r#"{"issue_and_sanity_check":"verify edge case"}"#.into(),
            },
        );
        script.rules.insert(
            0,
            crate::llm::MockRule {
                matcher: crate::llm::MockMatcher::Substring("Candidate Checks:".into()),
                response: r#"{"the_best_check":"verify edge case"}"#.into(),
            },
        );
        // each refinement revises the path by appending to it
        script.rules.insert(
            0,
            crate::llm::MockRule {
                matcher: crate::llm::MockMatcher::Regex(
                    "(?s)iter1/refine.*Issue to Fix".into(),
                ),
                response: "<think>initial path + fix1</think>done".into(),
            },
        );
        script.rules.insert(
            0,
            crate::llm::MockRule {
                matcher: crate::llm::MockMatcher::Regex(
                    "(?s)iter2/refine.*Issue to Fix".into(),
                ),
                response: "<think>initial path + fix1 + fix2</think>done".into(),
            },
        );
        script.rules.insert(
            0,
            crate::llm::MockRule {
                matcher: crate::llm::MockMatcher::Regex(
                    "(?s)iter3/refine.*Issue to Fix".into(),
                ),
                response: "<think>initial path + fix1 + fix2 + fix3</think>done".into(),
            },
        );
        script
    }

    #[test]
    fn i2s_plus_all_accepted_uses_expected_call_budget() {
        let (bank, embedder) = bank_and_embedder();
        let (client, registry) = ctx_harness(full_refine_script());
        let ctx = StageCtx::new(&client, &registry, "run0/t1");
        let t = task("t1", "a parity puzzle about chairs", AnswerKind::Numeric);
        let cfg = I2sConfig::default();
        let rcfg = RefineConfig::default();
        let trace =
            run_i2s_plus(&bank, &embedder, &t, &cfg, &rcfg, &ctx, false).unwrap();
        // 3 (I2S) + 3 iterations x (3 suggestions + 2 reviews + 1 refine) + 1 final
        assert_eq!(trace.question_conditioned_stages(), 22);
        assert_eq!(trace.iterations_used, 3);
        assert_eq!(trace.final_answer, "10");
        assert!(trace.question_conditioned_stages() as u64 <= rcfg.call_bound());
    }

    #[test]
    fn i2s_plus_iter0_matches_i2s_answer() {
        let (bank, embedder) = bank_and_embedder();
        let t = task("t1", "a parity puzzle about chairs", AnswerKind::Numeric);
        let cfg = I2sConfig::default();
        let rcfg = RefineConfig { n_iter: 0, ..Default::default() };

        let (client, registry) = ctx_harness(base_script());
        let ctx = StageCtx::new(&client, &registry, "run0/t1");
        let i2s = crate::pipeline::run_i2s(&bank, &embedder, &t, &cfg, &ctx).unwrap();

        for snapshots in [false, true] {
            let (client, registry) = ctx_harness(base_script());
            let ctx = StageCtx::new(&client, &registry, "run0/t1");
            let plus =
                run_i2s_plus(&bank, &embedder, &t, &cfg, &rcfg, &ctx, snapshots).unwrap();
            assert_eq!(plus.final_answer, i2s.final_answer, "snapshots={snapshots}");
            assert_eq!(plus.iterations_used, 0);
            // exactly the I2S stages plus one re-answer stage
            assert_eq!(plus.stages.len(), i2s.stages.len() + 1);
            assert_eq!(plus.stages.last().unwrap().stage_name, StageName::TwoStepAnswer);
            if snapshots {
                assert_eq!(plus.iteration_answers.len(), 1);
            }
        }
    }

    #[test]
    fn i2s_plus_rejected_refinement_early_stops() {
        // refinement always echoes the current path -> rejected at iteration 1
        let mut script = base_script();
        script.rules.insert(
            0,
            crate::llm::MockRule {
                matcher: crate::llm::MockMatcher::Substring("issue_and_sanity_check".into()),
                response: r#"{"issue_and_sanity_check":"check it"}"#.into(),
            },
        );
        script.rules.insert(
            0,
            crate::llm::MockRule {
                matcher: crate::llm::MockMatcher::Substring("Candidate Checks:".into()),
                response: r#"{"the_best_check":"check it"}"#.into(),
            },
        );
        script.rules.insert(
            0,
            crate::llm::MockRule {
                matcher: crate::llm::MockMatcher::Substring("Issue to Fix".into()),
                response: "<think>initial path</think>".into(),
            },
        );
        let (bank, embedder) = bank_and_embedder();
        let (client, registry) = ctx_harness(script);
        let ctx = StageCtx::new(&client, &registry, "run0/t1");
        let t = task("t1", "a parity puzzle", AnswerKind::Numeric);
        let trace = run_i2s_plus(
            &bank,
            &embedder,
            &t,
            &I2sConfig::default(),
            &RefineConfig::default(),
            &ctx,
            false,
        )
        .unwrap();
        assert_eq!(trace.iterations_used, 1);
        assert_eq!(trace.final_answer, "10");
    }

    #[test]
    fn i2s_plus_snapshots_track_iterations() {
        let (bank, embedder) = bank_and_embedder();
        let (client, registry) = ctx_harness(full_refine_script());
        let ctx = StageCtx::new(&client, &registry, "run0/t1");
        let t = task("t1", "a parity puzzle about chairs", AnswerKind::Numeric);
        let trace = run_i2s_plus(
            &bank,
            &embedder,
            &t,
            &I2sConfig::default(),
            &RefineConfig::default(),
            &ctx,
            true,
        )
        .unwrap();
        assert_eq!(trace.iterations_used, 3);
        assert_eq!(trace.iteration_answers.len(), 4);
        assert!(trace.iteration_answers.iter().all(|a| a == "10"));
        assert!(trace.question_conditioned_stages() as u64 <= RefineConfig::default().call_bound());
    }

    #[test]
    fn i2s_plus_failed_refine_call_skips_iteration_without_counting() {
        // no rule matches the refinement prompt, so that call errors; the
        // loop skips each iteration and still produces a final answer
        let mut script = base_script();
        script.default_response = None;
        script.rules.insert(
            0,
            crate::llm::MockRule {
                matcher: crate::llm::MockMatcher::Substring("issue_and_sanity_check".into()),
                response: r#"{"issue_and_sanity_check":"check it"}"#.into(),
            },
        );
        script.rules.insert(
            0,
            crate::llm::MockRule {
                matcher: crate::llm::MockMatcher::Substring("Candidate Checks:".into()),
                response: r#"{"the_best_check":"check it"}"#.into(),
            },
        );
        let (bank, embedder) = bank_and_embedder();
        let (client, registry) = ctx_harness(script);
        let ctx = StageCtx::new(&client, &registry, "run0/t1");
        let t = task("t1", "a parity puzzle", AnswerKind::Numeric);
        let rcfg = RefineConfig { n_iter: 2, ..Default::default() };
        let trace =
            run_i2s_plus(&bank, &embedder, &t, &I2sConfig::default(), &rcfg, &ctx, false).unwrap();
        assert_eq!(trace.iterations_used, 0);
        assert_eq!(trace.final_answer, "10");
        let failed_refines = trace
            .stages
            .iter()
            .filter(|s| {
                s.stage_name == StageName::Refinement
                    && s.flags.iter().any(|f| f.starts_with("call_failed"))
            })
            .count();
        assert_eq!(failed_refines, 2);
    }

    #[test]
    fn i2s_plus_all_invalid_suggestions_skips_iterations() {
        let mut script = base_script();
        script.rules.insert(
            0,
            crate::llm::MockRule {
                matcher: crate::llm::MockMatcher::Substring("issue_and_sanity_check".into()),
                response: "garbage".into(),
            },
        );
        let (bank, embedder) = bank_and_embedder();
        let (client, registry) = ctx_harness(script);
        let ctx = StageCtx::new(&client, &registry, "run0/t1");
        let t = task("t1", "a parity puzzle", AnswerKind::Numeric);
        let rcfg = RefineConfig::default();
        let trace =
            run_i2s_plus(&bank, &embedder, &t, &I2sConfig::default(), &rcfg, &ctx, false).unwrap();
        assert_eq!(trace.iterations_used, 0);
        assert_eq!(trace.final_answer, "10");
        assert!(trace.question_conditioned_stages() as u64 <= rcfg.call_bound());
    }
}
