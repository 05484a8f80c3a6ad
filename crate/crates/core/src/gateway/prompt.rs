use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parsing::Side;
use crate::vignette::VignettePair;

pub const DEFAULT_PROMPT_TEMPLATE: &str = "{context}\n\n{vignette}\n\n{decision_prompt}\n{options}\n\n\
Answer on the first line with the letter and label of exactly one option, then explain your reasoning.";

const BODY: &str = "vignette";
const KNOWN: [&str; 4] = ["vignette", "context", "decision_prompt", "options"];

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("static regex"))
}

/// A prompt with exactly one `{vignette}` body placeholder.
///
/// `{context}`, `{decision_prompt}` and `{options}` are also substituted;
/// options render one per line as `(a) Label`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PromptTemplate {
    text: String,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        let mut bodies = 0;
        for cap in placeholder_re().captures_iter(&text) {
            let name = &cap[1];
            if name == BODY {
                bodies += 1;
            } else if !KNOWN.contains(&name) {
                return Err(Error::Template(format!("unknown placeholder `{{{name}}}` in prompt template")));
            }
        }
        if bodies != 1 {
            return Err(Error::Template(format!(
                "prompt template needs exactly one {{vignette}} placeholder, found {bodies}"
            )));
        }
        Ok(PromptTemplate { text })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn render(&self, pair: &VignettePair, side: Side) -> String {
        let body = match side {
            Side::Base => &pair.base_text,
            Side::Swap => &pair.swap_text,
        };
        let options = render_options(&pair.options);
        placeholder_re()
            .replace_all(&self.text, |cap: &regex::Captures<'_>| match &cap[1] {
                "vignette" => body.clone(),
                "context" => pair.context.clone(),
                "decision_prompt" => pair.decision_prompt.clone(),
                "options" => options.clone(),
                other => format!("{{{other}}}"),
            })
            .into_owned()
    }
}

pub fn render_options(options: &[String]) -> String {
    options
        .iter()
        .enumerate()
        .map(|(i, label)| format!("({}) {label}", (b'a' + (i as u8 % 26)) as char))
        .collect::<Vec<_>>()
        .join("\n")
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate::new(DEFAULT_PROMPT_TEMPLATE).expect("default template is valid")
    }
}

impl TryFrom<String> for PromptTemplate {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        PromptTemplate::new(value)
    }
}

impl From<PromptTemplate> for String {
    fn from(t: PromptTemplate) -> String {
        t.text
    }
}
