//! Core domain types shared by every stage, plus the pure text utilities
//! they rely on: think-tag handling, answer extraction and canonicalization,
//! JSON-fragment parsing, and token budgeting.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Subject area of a demonstration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Math,
    Science,
    Code,
    Puzzle,
    General,
    Engineering,
    #[default]
    Other,
}

/// A question / reasoning-trace / answer triple from the demonstration bank.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Demonstration {
    pub id: String,
    pub question: String,
    pub cot_trace: String,
    pub answer: String,
    #[serde(default)]
    pub domain: Domain,
}

impl Demonstration {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.id.is_empty() {
            return Err(ModelError::Invalid("demonstration id is empty".into()));
        }
        if self.question.is_empty() || self.cot_trace.is_empty() {
            return Err(ModelError::Invalid(format!(
                "demonstration {}: question and cot_trace must be non-empty",
                self.id
            )));
        }
        Ok(())
    }
}

/// How a task's final answer is interpreted and scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKind {
    Numeric,
    MultipleChoice,
    FreeForm,
}

/// A target question, optionally with a gold answer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskItem {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<String>,
    pub answer_kind: AnswerKind,
}

impl TaskItem {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.id.is_empty() || self.question.is_empty() {
            return Err(ModelError::Invalid("task id and question must be non-empty".into()));
        }
        if let Some(gold) = &self.gold_answer {
            match self.answer_kind {
                AnswerKind::MultipleChoice => {
                    let g = gold.trim();
                    if g.len() != 1 || !matches!(g.chars().next(), Some('A'..='D')) {
                        return Err(ModelError::Invalid(format!(
                            "task {}: multiple_choice gold must be a single letter A-D, got {gold:?}",
                            self.id
                        )));
                    }
                }
                AnswerKind::Numeric => {
                    if canonicalize_answer(gold, AnswerKind::Numeric).is_err() {
                        return Err(ModelError::Invalid(format!(
                            "task {}: numeric gold does not parse: {gold:?}",
                            self.id
                        )));
                    }
                }
                AnswerKind::FreeForm => {}
            }
        }
        Ok(())
    }
}

/// Pipeline stage identifiers, one per kind of generation call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Comparison,
    Distill,
    Insights,
    Solution,
    TwoStepAnswer,
    Suggestion,
    Review,
    Refinement,
    Direct,
    Fewshot,
    SrFeedback,
    SrRefine,
    PhpRetry,
    JudgeReference,
    JudgeExtract,
    JudgeVerify,
    Fallback,
}

/// One generation call in a run: prompt, raw and parsed output, and metadata.
///
/// An internal retry of the same stage is folded into a single record; the
/// record keeps the last attempt's prompt/output and sums token usage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage_name: StageName,
    pub prompt: String,
    pub raw_output: String,
    pub parsed_output: String,
    /// True iff the prompt contains the target question text.
    pub question_conditioned: bool,
    pub temperature: f64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

/// Inference strategy that produced a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Direct,
    FewshotK,
    TwoStep,
    I2s,
    I2sPlus,
    SelfRefine,
    Php,
    MajorityN,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Direct => "direct",
            Method::FewshotK => "fewshot_k",
            Method::TwoStep => "two_step",
            Method::I2s => "i2s",
            Method::I2sPlus => "i2s_plus",
            Method::SelfRefine => "self_refine",
            Method::Php => "php",
            Method::MajorityN => "majority_n",
        }
    }
}

/// Ordered record of every stage of one method run on one task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunTrace {
    pub task_id: String,
    pub method: Method,
    pub stages: Vec<StageRecord>,
    pub final_answer: String,
    pub iterations_used: u32,
    #[serde(default)]
    pub run_index: u32,
    /// Per-round (SR/PHP) or per-iteration (I2S+) answer snapshots.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub iteration_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunTrace {
    pub fn question_conditioned_stages(&self) -> usize {
        self.stages.iter().filter(|s| s.question_conditioned).count()
    }

    pub fn total_tokens(&self) -> u64 {
        self.stages.iter().map(|s| s.prompt_tokens + s.completion_tokens).sum()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("not a numeric answer: {0:?}")]
    NotNumeric(String),
}

/// Errors from [`extract_json_object`]. Callers retry once, then fall back.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum JsonExtractError {
    #[error("no balanced JSON object found")]
    NoObjectFound,
    #[error("JSON object found but key {0:?} missing or not a string")]
    KeyMissing(String),
}

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";

/// Splits text at the first think-tag span into (think_part, visible_part).
///
/// An opening tag with no close is treated as all-think: the scratchpad must
/// never leak into answer-bearing text. Later literal tags are plain text.
pub fn strip_think(text: &str) -> (&str, &str) {
    match text.find(THINK_OPEN) {
        None => ("", text),
        Some(open) => {
            let inner_start = open + THINK_OPEN.len();
            match text[inner_start..].find(THINK_CLOSE) {
                Some(rel) => {
                    let close = inner_start + rel;
                    (&text[inner_start..close], &text[close + THINK_CLOSE.len()..])
                }
                None => (&text[inner_start..], ""),
            }
        }
    }
}

/// True iff the text contains an opening think tag.
pub fn has_think_tag(text: &str) -> bool {
    text.contains(THINK_OPEN)
}

/// Extracts the final answer from model output, or `None` when the expected
/// marker is absent (signalling the caller to fall back).
///
/// Uses the LAST marker occurrence: models often restate the marker and the
/// final statement is authoritative.
pub fn extract_final_answer(text: &str, kind: AnswerKind) -> Option<String> {
    match kind {
        AnswerKind::MultipleChoice => extract_choice_letter(text),
        AnswerKind::Numeric | AnswerKind::FreeForm => {
            let marker = "Final Answer:";
            let pos = text.rfind(marker)?;
            let rest = &text[pos + marker.len()..];
            let line = rest.split('\n').next().unwrap_or("").trim();
            if line.is_empty() {
                None
            } else {
                Some(line.to_string())
            }
        }
    }
}

/// Letter after the last "Answer:" that reads as a single choice A-D.
fn extract_choice_letter(text: &str) -> Option<String> {
    let marker = "Answer:";
    let mut best = None;
    let mut search_from = 0;
    while let Some(rel) = text[search_from..].find(marker) {
        let pos = search_from + rel;
        let rest = text[pos + marker.len()..].trim_start();
        let rest = rest.strip_prefix('$').unwrap_or(rest);
        let mut chars = rest.chars();
        if let Some(c) = chars.next() {
            if ('A'..='D').contains(&c) || ('a'..='d').contains(&c) {
                let next = chars.next();
                if next.is_none_or(|n| !n.is_alphanumeric()) {
                    best = Some(c.to_ascii_uppercase().to_string());
                }
            }
        }
        search_from = pos + marker.len();
    }
    best
}

/// Normalizes an answer string for comparison and voting.
///
/// Numeric answers are stripped of whitespace/commas/trailing periods and
/// reprinted from the parsed value; multiple choice folds to an uppercase
/// letter; free-form text is whitespace-collapsed with trailing periods
/// removed. Idempotent for every kind.
pub fn canonicalize_answer(text: &str, kind: AnswerKind) -> Result<String, ModelError> {
    match kind {
        AnswerKind::Numeric => {
            let cleaned: String = text.chars().filter(|c| !c.is_whitespace() && *c != ',').collect();
            let cleaned = cleaned.trim_end_matches('.');
            let value: f64 = cleaned
                .parse()
                .map_err(|_| ModelError::NotNumeric(text.to_string()))?;
            if !value.is_finite() {
                return Err(ModelError::NotNumeric(text.to_string()));
            }
            // +0.0 collapses -0 to 0 so reprints are sign-stable.
            Ok(format!("{}", value + 0.0))
        }
        AnswerKind::MultipleChoice => {
            Ok(text.trim().trim_end_matches('.').trim().to_ascii_uppercase())
        }
        AnswerKind::FreeForm => {
            let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ");
            Ok(collapsed.trim_end_matches('.').trim_end().to_string())
        }
    }
}

/// Canonical form when it parses, raw trimmed string otherwise.
pub fn canonical_or_raw(text: &str, kind: AnswerKind) -> String {
    canonicalize_answer(text, kind).unwrap_or_else(|_| text.trim().to_string())
}

/// Finds the first balanced `{...}` region that parses as a JSON object with
/// `required_key` as a string field, and returns that field's value. Prose
/// around the object and earlier non-matching objects are ignored.
pub fn extract_json_object(text: &str, required_key: &str) -> Result<String, JsonExtractError> {
    assert!(!required_key.is_empty(), "required_key must be non-empty");
    let bytes = text.as_bytes();
    let mut any_parsed = false;
    let mut start = 0;
    while let Some(rel) = text[start..].find('{') {
        let open = start + rel;
        if let Some(end) = balanced_end(bytes, open) {
            let region = &text[open..=end];
            if let Ok(serde_json::Value::Object(map)) = serde_json::from_str(region) {
                any_parsed = true;
                if let Some(serde_json::Value::String(v)) = map.get(required_key) {
                    return Ok(v.clone());
                }
            }
        }
        start = open + 1;
    }
    if any_parsed {
        Err(JsonExtractError::KeyMissing(required_key.to_string()))
    } else {
        Err(JsonExtractError::NoObjectFound)
    }
}

/// Index of the brace closing the object opened at `open`, tracking JSON
/// string quoting and escapes.
fn balanced_end(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

pub const TRUNCATION_MARKER: &str = "\n[... truncated ...]\n";

/// Shortens text to roughly `token_budget` tokens by keeping the first 60%
/// and last 40% of the budget around a truncation marker. The head keeps the
/// problem setup, the tail the conclusion. Result estimate ≤ budget + 8.
pub fn truncate_middle(text: &str, token_budget: u64) -> String {
    assert!(token_budget >= 16, "token_budget must be >= 16");
    if estimate_tokens(text, None) <= token_budget {
        return text.to_string();
    }
    let budget_bytes = token_budget * 4;
    let head_bytes = (budget_bytes as f64 * 0.6) as usize;
    let tail_bytes = (budget_bytes as f64 * 0.4) as usize;
    let head_end = floor_char_boundary(text, head_bytes.min(text.len()));
    let tail_start = ceil_char_boundary(text, text.len().saturating_sub(tail_bytes));
    format!("{}{}{}", &text[..head_end], TRUNCATION_MARKER, &text[tail_start..])
}

fn floor_char_boundary(s: &str, mut i: usize) -> usize {
    i = i.min(s.len());
    while i > 0 && !s.is_char_boundary(i) {
        i -= 1;
    }
    i
}

fn ceil_char_boundary(s: &str, mut i: usize) -> usize {
    i = i.min(s.len());
    while i < s.len() && !s.is_char_boundary(i) {
        i += 1;
    }
    i
}

/// Provider-reported usage when available, otherwise ceil(bytes / 4).
pub fn estimate_tokens(text: &str, reported_usage: Option<u64>) -> u64 {
    match reported_usage {
        Some(n) => n,
        None => (text.len() as u64).div_ceil(4),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn strip_think_splits_first_span() {
        assert_eq!(strip_think("<think>steps</think>Answer: 7"), ("steps", "Answer: 7"));
        assert_eq!(strip_think("no tags here"), ("", "no tags here"));
        assert_eq!(strip_think("<think>unclosed reasoning"), ("unclosed reasoning", ""));
    }

    #[test]
    fn strip_think_keeps_later_tags_as_plain_text() {
        let (think, visible) = strip_think("<think>a</think>x<think>b</think>y");
        assert_eq!(think, "a");
        assert_eq!(visible, "x<think>b</think>y");
    }

    #[test]
    fn strip_think_drops_preamble_before_open_tag() {
        let (think, visible) = strip_think("pre<think>a</think>post");
        assert_eq!(think, "a");
        assert_eq!(visible, "post");
    }

    #[test]
    fn extract_final_answer_numeric_and_choice() {
        assert_eq!(
            extract_final_answer("... Final Answer: 42", AnswerKind::Numeric),
            Some("42".into())
        );
        assert_eq!(
            extract_final_answer("... Answer: C", AnswerKind::MultipleChoice),
            Some("C".into())
        );
        assert_eq!(extract_final_answer("no marker", AnswerKind::FreeForm), None);
    }

    #[test]
    fn extract_final_answer_uses_last_marker() {
        let text = "Final Answer: 1\nwait\nFinal Answer: 2";
        assert_eq!(extract_final_answer(text, AnswerKind::Numeric), Some("2".into()));
        let mc = "Answer: A is wrong.\nAnswer: B";
        assert_eq!(extract_final_answer(mc, AnswerKind::MultipleChoice), Some("B".into()));
    }

    #[test]
    fn extract_final_answer_choice_skips_prose_after_marker() {
        // 'C' here starts a word, so it is not a choice letter.
        assert_eq!(
            extract_final_answer("Answer: Certainly not.", AnswerKind::MultipleChoice),
            None
        );
        assert_eq!(
            extract_final_answer("Answer: $B", AnswerKind::MultipleChoice),
            Some("B".into())
        );
        assert_eq!(
            extract_final_answer("Final Answer: D.", AnswerKind::MultipleChoice),
            Some("D".into())
        );
    }

    #[test]
    fn extract_final_answer_empty_content_is_none() {
        assert_eq!(extract_final_answer("Final Answer:\nmore", AnswerKind::Numeric), None);
    }

    #[test]
    fn canonicalize_numeric_examples() {
        assert_eq!(canonicalize_answer("  042. ", AnswerKind::Numeric).unwrap(), "42");
        assert_eq!(canonicalize_answer("1,234", AnswerKind::Numeric).unwrap(), "1234");
        assert_eq!(canonicalize_answer("c", AnswerKind::MultipleChoice).unwrap(), "C");
        assert_eq!(canonicalize_answer("-0", AnswerKind::Numeric).unwrap(), "0");
        assert_eq!(canonicalize_answer("+7", AnswerKind::Numeric).unwrap(), "7");
        assert_eq!(canonicalize_answer("0.50", AnswerKind::Numeric).unwrap(), "0.5");
        assert!(canonicalize_answer("forty", AnswerKind::Numeric).is_err());
    }

    /// Independent oracle: hand-written normalization over formatted variants.
    #[test]
    fn canonicalize_numeric_against_formatted_variants() {
        let cases: &[(&str, &str)] = &[
            ("42", "42"),
            ("042", "42"),
            (" 42 ", "42"),
            ("42.", "42"),
            ("42.0", "42"),
            ("1,000", "1000"),
            ("1,000,000", "1000000"),
            ("-17", "-17"),
            ("-017", "-17"),
            ("+3", "3"),
            ("3.14", "3.14"),
            ("0.5", "0.5"),
            (".5", "0.5"),
            ("-0.0", "0"),
            ("2e3", "2000"),
            ("1e-2", "0.01"),
            ("  7\t", "7"),
            ("70.0000000001", "70.0000000001"),
            ("12 345", "12345"),
            ("999.", "999"),
        ];
        for (input, expected) in cases {
            assert_eq!(
                canonicalize_answer(input, AnswerKind::Numeric).unwrap(),
                *expected,
                "input {input:?}"
            );
        }
    }

    #[test]
    fn canonicalize_free_form_collapses_whitespace() {
        assert_eq!(
            canonicalize_answer("  two   words. ", AnswerKind::FreeForm).unwrap(),
            "two words"
        );
        assert_eq!(canonicalize_answer("Keep Case", AnswerKind::FreeForm).unwrap(), "Keep Case");
    }

    proptest! {
        #[test]
        fn canonicalize_idempotent(s in "\\PC{0,40}", kind in prop_oneof![
            Just(AnswerKind::Numeric), Just(AnswerKind::MultipleChoice), Just(AnswerKind::FreeForm)
        ]) {
            if let Ok(once) = canonicalize_answer(&s, kind) {
                let twice = canonicalize_answer(&once, kind).unwrap();
                prop_assert_eq!(once, twice);
            }
        }

        #[test]
        fn strip_think_visible_is_suffix(pre in "[a-z ]{0,10}", think in "[a-z ]{0,20}", post in "[a-z ]{0,20}") {
            let input = format!("{pre}<think>{think}</think>{post}");
            let (_, visible) = strip_think(&input);
            prop_assert!(input.ends_with(visible));
        }

        #[test]
        fn estimate_tokens_monotone(a in "\\PC{0,64}", b in "\\PC{0,64}") {
            let (short, long) = if a.len() <= b.len() { (&a, &b) } else { (&b, &a) };
            prop_assert!(estimate_tokens(short, None) <= estimate_tokens(long, None));
        }

        #[test]
        fn extract_json_never_returns_from_keyless_object(
            decoys in prop::collection::vec("[a-z]{1,6}", 0..4),
            value in "[a-z ]{0,12}",
            wrap in "[a-z {}]{0,8}",
        ) {
            let mut text = String::new();
            for d in &decoys {
                // decoy objects never contain the required key
                text.push_str(&format!("{{\"{d}_x\":\"{d}\"}} {wrap} "));
            }
            text.push_str(&serde_json::json!({"needle": value}).to_string());
            let got = extract_json_object(&text, "needle").unwrap();
            prop_assert_eq!(got, value);
        }
    }

    #[test]
    fn extract_json_examples() {
        assert_eq!(
            extract_json_object("Sure. {\"the_best_check\":\"recheck units\"} done", "the_best_check")
                .unwrap(),
            "recheck units"
        );
        assert_eq!(
            extract_json_object("{\"issue_and_sanity_check\":\"\"}", "issue_and_sanity_check").unwrap(),
            ""
        );
        assert_eq!(
            extract_json_object("{\"a\":1}{\"the_best_check\":\"x\"}", "the_best_check").unwrap(),
            "x"
        );
    }

    /// Brute-force oracle: try every substring as a JSON parse and pick the
    /// first (by start, then length) object carrying the key.
    #[test]
    fn extract_json_matches_brute_force_substring_scan() {
        let samples = [
            "{\"a\":1}{\"k\":\"x\"}",
            "noise {\"k\":\"v1\"} and {\"k\":\"v2\"}",
            "{\"outer\":{\"k\":\"inner\"}}",
            "{bad json} {\"k\":\"ok\"}",
            "{\"k\":\" spaced \"} trailing",
        ];
        for text in samples {
            let mut expected = None;
            'outer: for start in 0..text.len() {
                if !text.is_char_boundary(start) || text.as_bytes()[start] != b'{' {
                    continue;
                }
                for end in start + 1..=text.len() {
                    if !text.is_char_boundary(end) {
                        continue;
                    }
                    if let Ok(serde_json::Value::Object(m)) = serde_json::from_str(&text[start..end]) {
                        if let Some(serde_json::Value::String(v)) = m.get("k") {
                            expected = Some(v.clone());
                            break 'outer;
                        }
                        break; // first successful parse from this '{' decides
                    }
                }
            }
            assert_eq!(extract_json_object(text, "k").ok(), expected, "text {text:?}");
        }
    }

    #[test]
    fn extract_json_error_classes() {
        assert_eq!(extract_json_object("no braces", "k"), Err(JsonExtractError::NoObjectFound));
        assert_eq!(
            extract_json_object("{\"other\":\"v\"}", "k"),
            Err(JsonExtractError::KeyMissing("k".into()))
        );
        // key present but not a string does not count
        assert_eq!(
            extract_json_object("{\"k\":3}", "k"),
            Err(JsonExtractError::KeyMissing("k".into()))
        );
        // braces inside strings do not break balancing
        assert_eq!(extract_json_object("{\"k\":\"a}b\"}", "k").unwrap(), "a}b");
    }

    #[test]
    fn truncate_middle_respects_budget() {
        assert_eq!(truncate_middle("short", 100), "short");
        assert_eq!(truncate_middle("", 16), "");
        let long = "x".repeat(40_000); // 10k tokens
        let out = truncate_middle(&long, 1000);
        assert!(out.contains(TRUNCATION_MARKER));
        assert!(estimate_tokens(&out, None) <= 1008);
        assert!(out.starts_with('x') && out.ends_with('x'));
    }

    #[test]
    fn truncate_middle_bound_on_random_long_strings() {
        // deterministic xorshift so the test is reproducible
        let mut state = 0x9E37_79B9_7F4A_7C15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        for _ in 0..5 {
            let len = 20_000 + (next() % 20_000) as usize;
            let text: String = (0..len).map(|_| (b'a' + (next() % 26) as u8) as char).collect();
            let budget = 64 + next() % 2048;
            let out = truncate_middle(&text, budget);
            assert!(
                estimate_tokens(&out, None) <= budget + 8,
                "estimate {} over budget {budget}",
                estimate_tokens(&out, None)
            );
        }
    }

    #[test]
    fn estimate_tokens_rules() {
        assert_eq!(estimate_tokens("abcdefgh", None), 2);
        assert_eq!(estimate_tokens("anything", Some(137)), 137);
        assert_eq!(estimate_tokens("", None), 0);
        assert_eq!(estimate_tokens("abc", None), 1);
    }

    #[test]
    fn task_validation_rules() {
        let ok = TaskItem {
            id: "t1".into(),
            question: "q".into(),
            gold_answer: Some("C".into()),
            answer_kind: AnswerKind::MultipleChoice,
        };
        assert!(ok.validate().is_ok());
        let bad_mc = TaskItem { gold_answer: Some("E".into()), ..ok.clone() };
        assert!(bad_mc.validate().is_err());
        let bad_num = TaskItem {
            gold_answer: Some("abc".into()),
            answer_kind: AnswerKind::Numeric,
            ..ok
        };
        assert!(bad_num.validate().is_err());
    }
}
