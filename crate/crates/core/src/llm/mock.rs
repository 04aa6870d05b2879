//! Deterministic scripted provider: ordered matcher/response rules over the
//! rendered prompt, first match wins.

use super::{GenerationRequest, GenerationResponse, LlmError, Provider};
use crate::model::estimate_tokens;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

/// Rule predicate over the match text. The match text is the request's
/// `seed_label` followed by a newline and the joined message contents, so
/// scripts can distinguish otherwise identical prompts (e.g. the N samples
/// of majority voting) by their seed labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockMatcher {
    Substring(String),
    Regex(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(rename = "match")]
    pub matcher: MockMatcher,
    pub response: String,
}

/// Ordered response script for the mock provider.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_response: Option<String>,
}

impl MockScript {
    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Protocol(format!("cannot read mock script {path:?}: {e}")))?;
        serde_json::from_str(&text)
            .map_err(|e| LlmError::Protocol(format!("invalid mock script {path:?}: {e}")))
    }

    /// Substring rules from (needle, response) pairs, for tests.
    pub fn substrings<S: Into<String>, R: Into<String>>(pairs: Vec<(S, R)>) -> Self {
        MockScript {
            rules: pairs
                .into_iter()
                .map(|(needle, response)| MockRule {
                    matcher: MockMatcher::Substring(needle.into()),
                    response: response.into(),
                })
                .collect(),
            default_response: None,
        }
    }

    pub fn with_default(mut self, response: impl Into<String>) -> Self {
        self.default_response = Some(response.into());
        self
    }

    pub fn push_regex(&mut self, pattern: impl Into<String>, response: impl Into<String>) {
        self.rules.push(MockRule {
            matcher: MockMatcher::Regex(pattern.into()),
            response: response.into(),
        });
    }
}

pub struct MockProvider {
    rules: Vec<(CompiledMatcher, String)>,
    default_response: Option<String>,
    calls: AtomicU64,
}

enum CompiledMatcher {
    Substring(String),
    Regex(regex::Regex),
}

impl MockProvider {
    pub fn new(script: MockScript) -> Result<Self, LlmError> {
        let mut rules = Vec::with_capacity(script.rules.len());
        for rule in script.rules {
            let compiled = match rule.matcher {
                MockMatcher::Substring(s) => CompiledMatcher::Substring(s),
                MockMatcher::Regex(pattern) => CompiledMatcher::Regex(
                    regex::Regex::new(&pattern)
                        .map_err(|e| LlmError::Protocol(format!("bad mock regex {pattern:?}: {e}")))?,
                ),
            };
            rules.push((compiled, rule.response));
        }
        Ok(MockProvider { rules, default_response: script.default_response, calls: AtomicU64::new(0) })
    }

    /// Number of generate calls served, for resume/caching assertions.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Provider for MockProvider {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let prompt = request.prompt_text();
        let match_text = format!("{}\n{}", request.seed_label, prompt);
        let response = self
            .rules
            .iter()
            .find(|(matcher, _)| match matcher {
                CompiledMatcher::Substring(s) => match_text.contains(s.as_str()),
                CompiledMatcher::Regex(re) => re.is_match(&match_text),
            })
            .map(|(_, response)| response.clone())
            .or_else(|| self.default_response.clone())
            .ok_or_else(|| LlmError::Protocol("unmatched mock prompt".into()))?;
        Ok(GenerationResponse {
            prompt_tokens: estimate_tokens(&prompt, None),
            completion_tokens: estimate_tokens(&response, None),
            text: response,
            provider_id: self.id().to_string(),
        })
    }

    fn id(&self) -> &str {
        "mock"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_matching_rule_wins() {
        let script = MockScript::substrings(vec![("alpha", "first"), ("alp", "second")]);
        let p = MockProvider::new(script).unwrap();
        let resp = p.generate(&GenerationRequest::user("the alpha prompt")).unwrap();
        assert_eq!(resp.text, "first");
    }

    #[test]
    fn scripted_echo_and_usage() {
        let script =
            MockScript::substrings(vec![("Comparison Prompt marker", "Comparison: both modular")]);
        let p = MockProvider::new(script).unwrap();
        let resp =
            p.generate(&GenerationRequest::user("... Comparison Prompt marker ...")).unwrap();
        assert_eq!(resp.text, "Comparison: both modular");
        assert_eq!(resp.prompt_tokens, estimate_tokens("... Comparison Prompt marker ...", None));
        assert_eq!(resp.completion_tokens, estimate_tokens("Comparison: both modular", None));
    }

    #[test]
    fn unmatched_without_default_is_protocol_error() {
        let p = MockProvider::new(MockScript::substrings::<&str, &str>(vec![])).unwrap();
        let err = p.generate(&GenerationRequest::user("anything")).unwrap_err();
        assert!(matches!(err, LlmError::Protocol(_)));
    }

    #[test]
    fn seed_label_participates_in_matching() {
        let script = MockScript::substrings(vec![("sample1", "Final Answer: B")])
            .with_default("Final Answer: A");
        let p = MockProvider::new(script).unwrap();
        let base = GenerationRequest::user("same prompt");
        let a = p.generate(&base.clone().seed_label("run0/sample0")).unwrap();
        let b = p.generate(&base.seed_label("run0/sample1")).unwrap();
        assert_eq!(a.text, "Final Answer: A");
        assert_eq!(b.text, "Final Answer: B");
    }

    #[test]
    fn regex_rules_and_script_roundtrip() {
        let json = r#"{
            "rules": [
                {"match": {"regex": "(?s)Question.*42"}, "response": "Final Answer: 42"},
                {"match": {"substring": "plain"}, "response": "ok"}
            ],
            "default_response": "none"
        }"#;
        let script: MockScript = serde_json::from_str(json).unwrap();
        let p = MockProvider::new(script).unwrap();
        assert_eq!(
            p.generate(&GenerationRequest::user("Question about\nthe number 42")).unwrap().text,
            "Final Answer: 42"
        );
        assert_eq!(p.generate(&GenerationRequest::user("plain")).unwrap().text, "ok");
        assert_eq!(p.generate(&GenerationRequest::user("other")).unwrap().text, "none");
        assert_eq!(p.calls(), 3);
    }
}
