//! Description generation and detection classification.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::backend::{CallContext, ChatBackend, Purpose};
use super::prompts::{build_detection_prompt, Prompt};
use crate::{Error, FeatureId, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Description {
    pub feature_id: FeatureId,
    pub text: String,
    pub raw_model_output: String,
    pub model_id: String,
    pub prompt_hash: String,
}

/// The contents of the single `[[...]]` span, trimmed; `None` when there is
/// no span, more than one, or the span is blank.
pub fn parse_description(output: &str) -> Option<String> {
    let mut spans = Vec::new();
    let mut rest = output;
    while let Some(open) = rest.find("[[") {
        let after = &rest[open + 2..];
        let close = after.find("]]")?;
        spans.push(&after[..close]);
        rest = &after[close + 2..];
    }
    match spans.as_slice() {
        [one] if !one.trim().is_empty() => Some(one.trim().to_string()),
        _ => None,
    }
}

/// First standalone `0` or `1` token.
pub fn parse_label(output: &str) -> Option<u8> {
    output
        .split(|c: char| !c.is_alphanumeric())
        .find(|t| *t == "0" || *t == "1")
        .map(|t| u8::from(t == "1"))
}

/// Asks the backend for a description, retrying up to `retries` times on
/// output without exactly one `[[...]]` span.
pub fn generate_description(backend: &dyn ChatBackend, prompt: &Prompt, feature_id: FeatureId, retries: usize) -> Result<Description> {
    let messages = prompt.messages();
    let mut raw = Vec::new();
    for attempt in 0..=retries {
        let ctx = CallContext {
            purpose: Purpose::Generate,
            feature_id,
            doc_id: None,
            attempt,
        };
        let out = backend.complete(&messages, &ctx)?;
        if let Some(text) = parse_description(&out) {
            return Ok(Description {
                feature_id,
                text,
                raw_model_output: out,
                model_id: backend.model_id(),
                prompt_hash: prompt.hash(),
            });
        }
        log::warn!("feature {feature_id}: no unique [[...]] span in model output (try {})", attempt + 1);
        raw.push(out);
    }
    Err(Error::DescriptionUnparsable {
        feature: feature_id,
        attempts: retries + 1,
        raw,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierPrediction {
    pub doc_id: String,
    pub feature_id: FeatureId,
    /// `None` when no attempt produced a parsable label.
    pub predicted: Option<u8>,
}

impl ClassifierPrediction {
    pub fn is_invalid(&self) -> bool {
        self.predicted.is_none()
    }
}

pub fn classify(backend: &dyn ChatBackend, prompt: &Prompt, doc_id: &str, feature_id: FeatureId, retries: usize) -> Result<ClassifierPrediction> {
    let messages = prompt.messages();
    for attempt in 0..=retries {
        let ctx = CallContext {
            purpose: Purpose::Classify,
            feature_id,
            doc_id: Some(doc_id.to_string()),
            attempt,
        };
        let out = backend.complete(&messages, &ctx)?;
        if let Some(label) = parse_label(&out) {
            return Ok(ClassifierPrediction {
                doc_id: doc_id.to_string(),
                feature_id,
                predicted: Some(label),
            });
        }
    }
    log::warn!("feature {feature_id}, document {doc_id}: no 0/1 label after {} tries", retries + 1);
    Ok(ClassifierPrediction {
        doc_id: doc_id.to_string(),
        feature_id,
        predicted: None,
    })
}

/// Classifies every `(doc_id, text)` pair with at most `max_in_flight`
/// concurrent requests. Output follows input order.
pub fn classify_many(
    backend: &dyn ChatBackend,
    description: &str,
    docs: &[(String, String)],
    feature_id: FeatureId,
    retries: usize,
    max_in_flight: usize,
) -> Result<Vec<ClassifierPrediction>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<ClassifierPrediction>>>> = docs.iter().map(|_| Mutex::new(None)).collect();
    let workers = max_in_flight.clamp(1, docs.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= docs.len() {
                    break;
                }
                let (doc_id, text) = &docs[i];
                let prompt = build_detection_prompt(description, text);
                let r = classify(backend, &prompt, doc_id, feature_id, retries);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every slot filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autointerp::backend::{Message, MockBackend, MockConfig, MockRule};

    #[test]
    fn description_parsing() {
        assert_eq!(parse_description("...[[mentions of politics]]...").as_deref(), Some("mentions of politics"));
        assert_eq!(parse_description("no brackets"), None);
        assert_eq!(parse_description("[[a]] and [[b]]"), None);
        assert_eq!(parse_description("[[  ]]"), None);
        assert_eq!(parse_description("[[unterminated"), None);
    }

    #[test]
    fn label_parsing() {
        assert_eq!(parse_label("1"), Some(1));
        assert_eq!(parse_label("The answer is 0."), Some(0));
        assert_eq!(parse_label("maybe"), None);
        assert_eq!(parse_label("10 or 1"), Some(1));
    }

    struct Scripted(Mutex<Vec<&'static str>>);

    impl ChatBackend for Scripted {
        fn complete(&self, _: &[Message], _: &CallContext) -> Result<String> {
            Ok(self.0.lock().unwrap().remove(0).to_string())
        }
        fn model_id(&self) -> String {
            "scripted".into()
        }
    }

    fn prompt() -> Prompt {
        Prompt { system: "s".into(), user: "u".into() }
    }

    #[test]
    fn generation_retries_then_errors() {
        let b = Scripted(Mutex::new(vec!["nothing", "[[ok]]"]));
        assert_eq!(generate_description(&b, &prompt(), FeatureId(1), 1).unwrap().text, "ok");
        let b = Scripted(Mutex::new(vec!["nothing", "still nothing"]));
        match generate_description(&b, &prompt(), FeatureId(1), 1) {
            Err(Error::DescriptionUnparsable { raw, attempts: 2, .. }) => assert_eq!(raw.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn classification_invalid_after_retries() {
        let b = Scripted(Mutex::new(vec!["maybe", "maybe"]));
        let p = classify(&b, &prompt(), "d", FeatureId(1), 1).unwrap();
        assert!(p.is_invalid());
    }

    #[test]
    fn mock_description_needs_no_network() {
        let mut cfg = MockConfig::default();
        cfg.descriptions.insert("4".into(), "discussion of politics".into());
        let d = generate_description(&MockBackend::new(cfg), &prompt(), FeatureId(4), 0).unwrap();
        assert_eq!(d.text, "discussion of politics");
        assert_eq!(d.model_id, "mock");
    }

    #[test]
    fn concurrent_classification_keeps_order() {
        let cfg = MockConfig { rule: MockRule::Keyword, ..Default::default() };
        let docs: Vec<(String, String)> = (0..50)
            .map(|i| (format!("d{i}"), if i % 3 == 0 { "about tariffs".into() } else { "other".into() }))
            .collect();
        let backend = MockBackend::new(cfg);
        let a = classify_many(&backend, "tariffs", &docs, FeatureId(0), 0, 8).unwrap();
        let b = classify_many(&backend, "tariffs", &docs, FeatureId(0), 0, 1).unwrap();
        assert_eq!(a, b);
        for (i, p) in a.iter().enumerate() {
            assert_eq!(p.doc_id, format!("d{i}"));
            assert_eq!(p.predicted, Some(u8::from(i % 3 == 0)));
        }
    }
}
