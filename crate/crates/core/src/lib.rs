//! Test-time reasoning orchestration: the Insight-to-Solve (I2S/I2S+)
//! pipelines, sequential and parallel scaling baselines, demonstration
//! retrieval, and an evaluation harness with exact-match and LLM-judge
//! scoring. A scripted mock provider makes every stage runnable and
//! testable without model inference.

pub mod baselines;
pub mod harness;
pub mod llm;
pub mod model;
pub mod pipeline;
pub mod prompts;
pub mod refine;
pub mod retrieval;

pub use llm::{GenerationRequest, GenerationResponse, LlmClient, LlmError, MockScript};
pub use model::{AnswerKind, Demonstration, Method, RunTrace, StageName, StageRecord, TaskItem};
pub use pipeline::I2sConfig;
pub use prompts::TemplateRegistry;
pub use refine::RefineConfig;
pub use retrieval::DemoBank;
