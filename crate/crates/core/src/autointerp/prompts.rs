//! Prompt templates. Placeholders are filled in a single left-to-right pass,
//! so braces inside substituted values are never expanded.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::backend::Message;
use super::exemplars::ExemplarSet;

pub const GENERATION_SYSTEM: &str = "\n    You are a meticulous AI researcher conducting an important\n    investigation into patterns found in language.\n";

pub const GENERATION_USER: &str = "\n    When a corpus of texts was passed through a LLM, a particular neuron\n    most activated on the following examples, and specifically on the text\n    delimited << like this >>. Provide a single phrase description of what \n    the neuron likely responds to (in any corpus, not just this one), and\n    delimit it as [[your concise description here]]. Do not mention the \n    marker tokens ($<<$ $>>$) in your interpretation. The examples are: \n    {texts}\n";

pub const DETECTION_SYSTEM: &str = "\n    You are an intelligent and meticulous linguistics researcher.\n\n    You will be provided a certain latent attribute of text, such as\n    \u{2018}\u{2018}male pronouns\" or \u{2018}\u{2018}text with negative sentiment\".\n\n    You will then be given a text example. Your task\n    is to determine if the example possess the latent attribute.\n\n    Return 1 if the text possess the latent attribute,\n    and return 0 otherwise. Return only this number.\n";

pub const DETECTION_USER: &str = "\n    LATENT ATTRIBUTE: {description}\n    TEXT EXAMPLE: {text}\n";

/// Replaces each `{name}` in `template` whose name appears in `vars`.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    'outer: while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        for (name, value) in vars {
            if after.starts_with(name) && after[name.len()..].starts_with('}') {
                out.push_str(value);
                rest = &after[name.len() + 1..];
                continue 'outer;
            }
        }
        out.push('{');
        rest = after;
    }
    out.push_str(rest);
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

impl Prompt {
    pub fn messages(&self) -> Vec<Message> {
        vec![Message::new("system", &self.system), Message::new("user", &self.user)]
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&self.messages()).expect("messages serialize");
        hex::encode(Sha256::digest(&json))
    }
}

/// Exemplar texts are joined by blank lines.
pub fn build_generation_prompt(set: &ExemplarSet) -> Prompt {
    let texts = set
        .exemplars
        .iter()
        .map(|e| e.annotated_text.as_str())
        .collect::<Vec<_>>()
        .join("\n\n");
    Prompt {
        system: GENERATION_SYSTEM.to_string(),
        user: render(GENERATION_USER, &[("texts", &texts)]),
    }
}

pub fn build_detection_prompt(description: &str, text: &str) -> Prompt {
    Prompt {
        system: DETECTION_SYSTEM.to_string(),
        user: render(DETECTION_USER, &[("description", description), ("text", text)]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autointerp::exemplars::Exemplar;
    use crate::FeatureId;

    #[test]
    fn single_pass_substitution() {
        let p = build_detection_prompt("uses {text} literally", "body {description}");
        assert_eq!(p.user, "\n    LATENT ATTRIBUTE: uses {text} literally\n    TEXT EXAMPLE: body {description}\n");
        assert_eq!(render("{a}{b}{", &[("a", "{b}")]), "{b}{b}{");
    }

    #[test]
    fn generation_prompt_contents() {
        let set = ExemplarSet {
            feature_id: FeatureId(3),
            exemplars: vec![
                Exemplar { doc_id: "a".into(), annotated_text: "x <<y>>".into(), max_activation_value: 2.0 },
                Exemplar { doc_id: "b".into(), annotated_text: "<<z>> w".into(), max_activation_value: 1.0 },
            ],
            limit: 20,
        };
        let p = build_generation_prompt(&set);
        assert!(p.system.contains("meticulous AI researcher"));
        assert!(p.user.contains("delimited << like this >>"));
        assert!(p.user.ends_with("The examples are: \n    x <<y>>\n\n<<z>> w\n"));
        assert_eq!(p.hash().len(), 64);
    }

    #[test]
    fn detection_prompt_contents() {
        let p = build_detection_prompt("politics", "some text");
        assert!(p.system.contains("Return only this number"));
        assert!(p.user.contains("LATENT ATTRIBUTE: politics"));
    }
}
