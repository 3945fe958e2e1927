//! Natural-language descriptions of features and detection classification.
//!
//! - [`exemplars`]: top-activating estimation documents with the maximal
//!   token wrapped in `<< >>`.
//! - [`prompts`]: the generation and detection prompt templates.
//! - [`backend`]: chat-completion backends (HTTP, cached, offline mock).
//! - [`describe`]: description generation and classification with response
//!   parsing and retries.

pub mod backend;
pub mod describe;
pub mod exemplars;
pub mod prompts;

pub use backend::{BackendMode, CachingBackend, CallContext, ChatBackend, LiveBackend, LlmBackendConfig, Message, MockBackend, MockConfig, MockRule, Purpose, ReasoningEffort};
pub use describe::{classify, classify_many, generate_description, parse_description, parse_label, ClassifierPrediction, Description};
pub use exemplars::{extract_exemplar_sets, extract_exemplars, Exemplar, ExemplarSet, DEFAULT_EXEMPLARS};
pub use prompts::{build_detection_prompt, build_generation_prompt, Prompt};
