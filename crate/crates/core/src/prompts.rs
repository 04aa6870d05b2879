//! Registry of prompt templates with placeholder validation, bit-exact
//! rendering, and few-shot prompt assembly.
//!
//! Template bodies live as individual UTF-8 files under `prompts/`
//! (file name = template name) and are embedded at compile time; a registry
//! can also be loaded from a directory at runtime.

use crate::model::{estimate_tokens, truncate_middle, Demonstration};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use thiserror::Error;

/// Names of the registered templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    Generation,
    Verification,
    AnswerConstruction,
    Comparison,
    CotDistill,
    TeacherInsights,
    Suggestion,
    Review,
    Refinement,
    SrFeedback,
    SrRefine,
    PhpHeader,
    FewshotBlock,
    FallbackDirect,
}

impl TemplateName {
    pub const ALL: [TemplateName; 14] = [
        TemplateName::Generation,
        TemplateName::Verification,
        TemplateName::AnswerConstruction,
        TemplateName::Comparison,
        TemplateName::CotDistill,
        TemplateName::TeacherInsights,
        TemplateName::Suggestion,
        TemplateName::Review,
        TemplateName::Refinement,
        TemplateName::SrFeedback,
        TemplateName::SrRefine,
        TemplateName::PhpHeader,
        TemplateName::FewshotBlock,
        TemplateName::FallbackDirect,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TemplateName::Generation => "generation",
            TemplateName::Verification => "verification",
            TemplateName::AnswerConstruction => "answer_construction",
            TemplateName::Comparison => "comparison",
            TemplateName::CotDistill => "cot_distill",
            TemplateName::TeacherInsights => "teacher_insights",
            TemplateName::Suggestion => "suggestion",
            TemplateName::Review => "review",
            TemplateName::Refinement => "refinement",
            TemplateName::SrFeedback => "sr_feedback",
            TemplateName::SrRefine => "sr_refine",
            TemplateName::PhpHeader => "php_header",
            TemplateName::FewshotBlock => "fewshot_block",
            TemplateName::FallbackDirect => "fallback_direct",
        }
    }

    /// Placeholders each template must declare, used to validate loaded bodies.
    fn expected_placeholders(&self) -> &'static [&'static str] {
        match self {
            TemplateName::Generation | TemplateName::FallbackDirect => &["question"],
            TemplateName::Verification => &["question", "model_answer", "generated_answer"],
            TemplateName::AnswerConstruction => {
                &["example_question", "comparison", "analyze", "question"]
            }
            TemplateName::Comparison => &["example_question", "current_question"],
            TemplateName::CotDistill => &["example_question", "example_cot"],
            TemplateName::TeacherInsights => {
                &["example_question", "example_cot", "current_question", "comparison"]
            }
            TemplateName::Suggestion => &["current_question", "best_path"],
            TemplateName::Review => &["current_question", "best_path", "suggestion_prompt"],
            TemplateName::Refinement => &["current_question", "best_path", "issue"],
            TemplateName::SrFeedback => &["index"],
            TemplateName::SrRefine => &[],
            TemplateName::PhpHeader => &["attempts"],
            TemplateName::FewshotBlock => &["question", "cot_trace", "answer"],
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A named prompt body with `{placeholder}` slots.
#[derive(Debug, Clone)]
pub struct Template {
    pub name: TemplateName,
    pub body: String,
    pub placeholders: Vec<String>,
}

impl Template {
    fn new(name: TemplateName, body: String) -> Result<Self, TemplateError> {
        let found = scan_placeholders(&body);
        let mut expected: Vec<&str> = name.expected_placeholders().to_vec();
        expected.sort_unstable();
        let mut found_sorted: Vec<&str> = found.iter().map(|s| s.as_str()).collect();
        found_sorted.sort_unstable();
        found_sorted.dedup();
        if found_sorted != expected {
            return Err(TemplateError::PlaceholderMismatch {
                template: name,
                found: found_sorted.iter().map(|s| s.to_string()).collect(),
                expected: expected.iter().map(|s| s.to_string()).collect(),
            });
        }
        Ok(Template { name, body, placeholders: found })
    }
}

/// `{name}` slots whose interior is an identifier. Literal brace regions such
/// as the compact-JSON examples inside the suggestion/review prompts are not
/// placeholders.
fn scan_placeholders(body: &str) -> Vec<String> {
    let mut out = Vec::new();
    let bytes = body.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            if let Some((name, end)) = parse_slot(body, i) {
                if !out.contains(&name.to_string()) {
                    out.push(name.to_string());
                }
                i = end;
                continue;
            }
        }
        i += 1;
    }
    out
}

/// Parses `{ident}` at byte offset `open`; returns (ident, offset past `}`).
fn parse_slot(body: &str, open: usize) -> Option<(&str, usize)> {
    let rest = &body[open + 1..];
    let close = rest.find('}')?;
    let name = &rest[..close];
    let mut chars = name.chars();
    let first = chars.next()?;
    if !(first.is_ascii_alphabetic() || first == '_') {
        return None;
    }
    if !chars.all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return None;
    }
    Some((name, open + 1 + close + 1))
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("template {template}: missing binding for {name:?}")]
    MissingBinding { template: TemplateName, name: String },
    #[error("template {template}: extra binding {name:?}")]
    ExtraBinding { template: TemplateName, name: String },
    #[error("template {template}: placeholders {found:?} do not match expected {expected:?}")]
    PlaceholderMismatch { template: TemplateName, found: Vec<String>, expected: Vec<String> },
    #[error("shot count {k} outside 1..={max}")]
    InvalidShotCount { k: usize, max: usize },
    #[error("few-shot prompt cannot fit context budget {budget} even at one maximally truncated shot")]
    BudgetExceeded { budget: u64 },
    #[error("failed to load template {name}: {source}")]
    Io { name: String, source: std::io::Error },
}

/// Immutable registry of all templates; rendering is pure.
#[derive(Debug, Clone)]
pub struct TemplateRegistry {
    templates: BTreeMap<TemplateName, Template>,
}

macro_rules! builtin_body {
    ($name:expr) => {
        include_str!(concat!("../prompts/", $name))
    };
}

impl TemplateRegistry {
    /// Registry backed by the template files embedded at compile time.
    pub fn builtin() -> Self {
        let mut templates = BTreeMap::new();
        for name in TemplateName::ALL {
            let body = match name {
                TemplateName::Generation => builtin_body!("generation"),
                TemplateName::Verification => builtin_body!("verification"),
                TemplateName::AnswerConstruction => builtin_body!("answer_construction"),
                TemplateName::Comparison => builtin_body!("comparison"),
                TemplateName::CotDistill => builtin_body!("cot_distill"),
                TemplateName::TeacherInsights => builtin_body!("teacher_insights"),
                TemplateName::Suggestion => builtin_body!("suggestion"),
                TemplateName::Review => builtin_body!("review"),
                TemplateName::Refinement => builtin_body!("refinement"),
                TemplateName::SrFeedback => builtin_body!("sr_feedback"),
                TemplateName::SrRefine => builtin_body!("sr_refine"),
                TemplateName::PhpHeader => builtin_body!("php_header"),
                TemplateName::FewshotBlock => builtin_body!("fewshot_block"),
                TemplateName::FallbackDirect => builtin_body!("fallback_direct"),
            };
            let template = Template::new(name, body.to_string())
                .expect("embedded template bodies are validated by tests");
            templates.insert(name, template);
        }
        TemplateRegistry { templates }
    }

    /// Loads all templates from a directory; file name = template name
    /// (a `.txt` extension is also accepted).
    pub fn from_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut templates = BTreeMap::new();
        for name in TemplateName::ALL {
            let plain = dir.join(name.as_str());
            let path = if plain.exists() { plain } else { dir.join(format!("{name}.txt")) };
            let body = std::fs::read_to_string(&path)
                .map_err(|source| TemplateError::Io { name: name.to_string(), source })?;
            templates.insert(name, Template::new(name, body)?);
        }
        Ok(TemplateRegistry { templates })
    }

    pub fn get(&self, name: TemplateName) -> &Template {
        &self.templates[&name]
    }

    pub fn body(&self, name: TemplateName) -> &str {
        &self.templates[&name].body
    }

    /// Renders a template by literal substitution: no escaping, no trimming.
    /// Bindings must cover exactly the template's placeholders.
    pub fn render(
        &self,
        name: TemplateName,
        bindings: &[(&str, &str)],
    ) -> Result<String, TemplateError> {
        let template = self.get(name);
        for (key, _) in bindings {
            if !template.placeholders.iter().any(|p| p == key) {
                return Err(TemplateError::ExtraBinding { template: name, name: key.to_string() });
            }
        }
        let mut out = String::with_capacity(template.body.len());
        let body = &template.body;
        let mut i = 0;
        while i < body.len() {
            if body.as_bytes()[i] == b'{' {
                if let Some((slot, end)) = parse_slot(body, i) {
                    if template.placeholders.iter().any(|p| p == slot) {
                        let value = bindings
                            .iter()
                            .find(|(k, _)| *k == slot)
                            .map(|(_, v)| *v)
                            .ok_or_else(|| TemplateError::MissingBinding {
                                template: name,
                                name: slot.to_string(),
                            })?;
                        out.push_str(value);
                        i = end;
                        continue;
                    }
                }
            }
            let ch_end = body[i..].chars().next().map(|c| i + c.len_utf8()).unwrap_or(body.len());
            out.push_str(&body[i..ch_end]);
            i = ch_end;
        }
        Ok(out)
    }
}

/// Per-demonstration trace budget applied before assembly.
pub const DEFAULT_TRACE_BUDGET: u64 = 12_288;
/// Whole-prompt token ceiling (32k context).
pub const DEFAULT_CONTEXT_BUDGET: u64 = 32_768;

/// PHP retry trail entry format.
pub const PHP_ROUND_LINE: &str = "Round {i}: {previous_answer}";

/// Formats one "Round {i}: {previous_answer}" entry of a PHP hint trail.
pub fn php_round_line(index: usize, previous_answer: &str) -> String {
    PHP_ROUND_LINE
        .replace("{i}", &index.to_string())
        .replace("{previous_answer}", previous_answer)
}

/// Builds a k-shot prompt: demonstration blocks in the model's native trace
/// format, then the bare target question.
///
/// `demos` must be in retrieval order (descending score). Blocks are emitted
/// with the nearest demonstration last, adjacent to the target question.
/// Traces are truncated independently to fit `context_budget`; if the prompt
/// still cannot fit, shots are dropped lowest-score first.
pub fn assemble_fewshot(
    registry: &TemplateRegistry,
    demos: &[Demonstration],
    target_question: &str,
    k: usize,
    trace_budget: u64,
    context_budget: u64,
) -> Result<String, TemplateError> {
    if k == 0 || k > demos.len() {
        return Err(TemplateError::InvalidShotCount { k, max: demos.len() });
    }
    let mut shots = k;
    loop {
        let mut budget = trace_budget.max(16);
        loop {
            let text = compose_fewshot(registry, &demos[..shots], target_question, budget)?;
            if estimate_tokens(&text, None) <= context_budget {
                return Ok(text);
            }
            if budget == 16 {
                break;
            }
            budget = (budget / 2).max(16);
        }
        if shots == 1 {
            return Err(TemplateError::BudgetExceeded { budget: context_budget });
        }
        shots -= 1;
    }
}

fn compose_fewshot(
    registry: &TemplateRegistry,
    demos: &[Demonstration],
    target_question: &str,
    trace_budget: u64,
) -> Result<String, TemplateError> {
    let mut out = String::new();
    for demo in demos.iter().rev() {
        let trace = truncate_middle(&demo.cot_trace, trace_budget);
        let block = registry.render(
            TemplateName::FewshotBlock,
            &[
                ("question", demo.question.as_str()),
                ("cot_trace", trace.as_str()),
                ("answer", demo.answer.as_str()),
            ],
        )?;
        out.push_str(&block);
    }
    out.push_str("Question:\n");
    out.push_str(target_question);
    Ok(out)
}

/// Decoupled answer prompt: only the target question and the elicited
/// reasoning trace, with a direct final-answer instruction. No demonstration
/// content may appear here.
pub fn two_step_answer_prompt(question: &str, trace: &str) -> String {
    format!(
        "Question:\n{question}\n<think>\n{trace}\n</think>\n\n\
         Answer the question using the reasoning above and provide only the final answer in the format:\n\
         Final Answer: <your final answer>"
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Domain;
    use proptest::prelude::*;

    fn demo(id: &str, q: &str, z: &str, a: &str) -> Demonstration {
        Demonstration {
            id: id.into(),
            question: q.into(),
            cot_trace: z.into(),
            answer: a.into(),
            domain: Domain::Other,
        }
    }

    #[test]
    fn registry_loads_all_templates() {
        let reg = TemplateRegistry::builtin();
        for name in TemplateName::ALL {
            assert!(!reg.body(name).is_empty(), "{name} body empty");
        }
    }

    #[test]
    fn from_dir_loads_the_same_bodies_as_builtin() {
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("prompts");
        let loaded = TemplateRegistry::from_dir(&dir).unwrap();
        let builtin = TemplateRegistry::builtin();
        for name in TemplateName::ALL {
            assert_eq!(loaded.body(name), builtin.body(name), "{name}");
        }
        assert!(TemplateRegistry::from_dir(std::path::Path::new("/nonexistent")).is_err());
    }

    #[test]
    fn render_comparison_matches_frame() {
        let reg = TemplateRegistry::builtin();
        let out = reg
            .render(
                TemplateName::Comparison,
                &[("example_question", "Q1"), ("current_question", "Q2")],
            )
            .unwrap();
        assert!(out.starts_with("You are provided with two questions:"));
        assert!(out.contains("Example Question:\nQ1\n"));
        assert!(out.contains("New Question:\nQ2\n"));
        assert!(out.trim_end().ends_with("Begin your response with: `Comparison:`"));
    }

    #[test]
    fn render_suggestion_keeps_literal_json_braces() {
        let reg = TemplateRegistry::builtin();
        let out = reg
            .render(TemplateName::Suggestion, &[("current_question", "Q"), ("best_path", "P")])
            .unwrap();
        assert!(out.contains("{\"issue_and_sanity_check\":\"$CONTENT\"}"));
        assert!(out.contains("**Current Best Reasoning Path:**\nP\n"));
    }

    #[test]
    fn render_generation_with_empty_binding() {
        let reg = TemplateRegistry::builtin();
        let out = reg.render(TemplateName::Generation, &[("question", "")]).unwrap();
        assert!(out.contains("Final Answer: <your final answer>"));
        // empty binding passes through; the body's trailing newline remains
        assert!(out.ends_with("Question:\n\n"));
    }

    #[test]
    fn render_binding_errors() {
        let reg = TemplateRegistry::builtin();
        assert!(matches!(
            reg.render(TemplateName::Generation, &[]),
            Err(TemplateError::MissingBinding { .. })
        ));
        assert!(matches!(
            reg.render(TemplateName::Generation, &[("question", "q"), ("bogus", "x")]),
            Err(TemplateError::ExtraBinding { .. })
        ));
    }

    #[test]
    fn render_does_not_rescan_substituted_text() {
        let reg = TemplateRegistry::builtin();
        let out = reg
            .render(
                TemplateName::Comparison,
                &[("example_question", "{current_question}"), ("current_question", "Q2")],
            )
            .unwrap();
        // the literal slot text injected through a binding stays literal
        assert!(out.contains("Example Question:\n{current_question}\n"));
    }

    #[test]
    fn assemble_single_shot_layout() {
        let reg = TemplateRegistry::builtin();
        let demos = vec![demo("d1", "Q1", "Z1", "A1")];
        let out = assemble_fewshot(&reg, &demos, "X", 1, 64, 4096).unwrap();
        assert_eq!(out, "Question:\nQ1\n<think>\nZ1\n</think>\nA1\n\nQuestion:\nX");
    }

    #[test]
    fn assemble_orders_nearest_demo_last() {
        let reg = TemplateRegistry::builtin();
        // input is retrieval order: d1 closest, d3 furthest
        let demos = vec![
            demo("d1", "NEAREST", "z1", "a1"),
            demo("d2", "MIDDLE", "z2", "a2"),
            demo("d3", "FURTHEST", "z3", "a3"),
        ];
        let out = assemble_fewshot(&reg, &demos, "X", 3, 64, 4096).unwrap();
        let pos = |s: &str| out.find(s).unwrap();
        assert!(pos("FURTHEST") < pos("MIDDLE"));
        assert!(pos("MIDDLE") < pos("NEAREST"));
        assert!(pos("NEAREST") < pos("Question:\nX"));
        assert_eq!(out.matches("</think>").count(), 3);
    }

    #[test]
    fn assemble_rejects_zero_shots() {
        let reg = TemplateRegistry::builtin();
        let demos = vec![demo("d1", "Q1", "Z1", "A1")];
        assert!(matches!(
            assemble_fewshot(&reg, &demos, "X", 0, 64, 4096),
            Err(TemplateError::InvalidShotCount { .. })
        ));
    }

    #[test]
    fn assemble_truncates_then_errors_when_even_one_shot_cannot_fit() {
        let reg = TemplateRegistry::builtin();
        let long = "y".repeat(8000);
        let demos = vec![demo("d1", "Q1", &long, "A1")];
        // budget 64 tokens: even a maximally truncated single shot is too big
        assert!(matches!(
            assemble_fewshot(&reg, &demos, "X", 1, 2000, 24),
            Err(TemplateError::BudgetExceeded { .. })
        ));
        // roomier budget: the trace gets truncated instead
        let out = assemble_fewshot(&reg, &demos, "X", 1, 2000, 256).unwrap();
        assert!(out.contains(crate::model::TRUNCATION_MARKER));
        assert!(estimate_tokens(&out, None) <= 256);
    }

    #[test]
    fn php_round_line_format() {
        assert_eq!(php_round_line(2, "42"), "Round 2: 42");
    }

    #[test]
    fn two_step_answer_prompt_contains_only_question_and_trace() {
        let p = two_step_answer_prompt("Q", "Z");
        assert!(p.starts_with("Question:\nQ\n<think>\nZ\n</think>"));
        assert!(p.contains("Final Answer: <your final answer>"));
    }

    proptest! {
        /// Distinct bindings give distinct outputs for a template whose slots
        /// are separated by fixed text.
        #[test]
        fn render_injective_in_bindings(
            a1 in "[a-z]{1,8}", b1 in "[a-z]{1,8}",
            a2 in "[a-z]{1,8}", b2 in "[a-z]{1,8}",
        ) {
            prop_assume!((a1.clone(), b1.clone()) != (a2.clone(), b2.clone()));
            let reg = TemplateRegistry::builtin();
            let r1 = reg.render(TemplateName::Comparison,
                &[("example_question", a1.as_str()), ("current_question", b1.as_str())]).unwrap();
            let r2 = reg.render(TemplateName::Comparison,
                &[("example_question", a2.as_str()), ("current_question", b2.as_str())]).unwrap();
            prop_assert_ne!(r1, r2);
        }

        #[test]
        fn assemble_has_k_think_closers(n in 1usize..5) {
            let reg = TemplateRegistry::builtin();
            let demos: Vec<_> = (0..n)
                .map(|i| demo(&format!("d{i}"), &format!("q{i}"), &format!("z{i}"), &format!("a{i}")))
                .collect();
            for k in 1..=n {
                let out = assemble_fewshot(&reg, &demos, "target", k, 64, 65_536).unwrap();
                prop_assert_eq!(out.matches("</think>").count(), k);
            }
        }
    }
}
