use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{DecisionModel, ModelResponse};
use crate::domain::BiasType;
use crate::error::{Error, Result};
use crate::hashing::{derive_u64, sha256_hex, unit_interval};
use crate::interventions::InterventionSpec;
use crate::parsing::first_json_object;
use crate::rubric::SCHEMA_MARKER;

/// Free-text value emitted for descriptive schema fields.
pub const FREE_TEXT_VALUE: &str = "as described in the case";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyRule {
    /// All of these (case-insensitive) must appear in the prompt.
    pub when_present: Vec<String>,
    pub option: usize,
}

/// Makes extraction of `field` shift by one category when a trigger marker
/// for `bias_type` is present, unless the prompt carries a suppressing
/// instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldLeak {
    pub bias_type: BiasType,
    pub field: String,
    pub probability: f64,
    /// Defaults to `extract {field} from`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub suppressed_by: Vec<String>,
}

impl FieldLeak {
    fn suppressors(&self) -> Vec<String> {
        if self.suppressed_by.is_empty() {
            vec![format!("extract {} from", self.field)]
        } else {
            self.suppressed_by.clone()
        }
    }
}

fn default_name() -> String {
    "synthetic".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticJudgeConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub seed: u64,
    /// First matching rule sets the undisturbed decision.
    #[serde(default)]
    pub base_policy: Vec<PolicyRule>,
    /// Decision-relevant keywords; their presence pattern keys the fallback
    /// decision when no policy rule matches.
    #[serde(default)]
    pub relevant_keywords: Vec<String>,
    #[serde(default)]
    pub bias_strengths: BTreeMap<BiasType, f64>,
    #[serde(default)]
    pub trigger_markers: BTreeMap<BiasType, Vec<String>>,
    /// Removed, together with trigger markers, before keying random draws so
    /// that both sides of a pair share them.
    #[serde(default)]
    pub masked_markers: Vec<String>,
    /// Per-prompt probability of an arbitrary decision change.
    #[serde(default)]
    pub noise_rate: f64,
    #[serde(default)]
    pub extraction_leaks: Vec<FieldLeak>,
}

impl Default for SyntheticJudgeConfig {
    fn default() -> Self {
        SyntheticJudgeConfig {
            name: default_name(),
            seed: 0,
            base_policy: Vec::new(),
            relevant_keywords: Vec::new(),
            bias_strengths: BTreeMap::new(),
            trigger_markers: BTreeMap::new(),
            masked_markers: Vec::new(),
            noise_rate: 0.0,
            extraction_leaks: Vec::new(),
        }
    }
}

fn check_probability(field: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("{p} is not a probability")))
    }
}

impl SyntheticJudgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::invalid("name", "must not be empty"));
        }
        for (bias, p) in &self.bias_strengths {
            check_probability(&format!("bias_strengths.{bias}"), *p)?;
        }
        check_probability("noise_rate", self.noise_rate)?;
        for leak in &self.extraction_leaks {
            check_probability(&format!("extraction_leaks.{}", leak.field), leak.probability)?;
        }
        Ok(())
    }

    /// Use swap-side pool values as triggers and base-side values as masks.
    pub fn with_pool_markers(mut self, specs: &[InterventionSpec]) -> Self {
        for spec in specs {
            let triggers = self.trigger_markers.entry(spec.bias_type).or_default();
            for v in &spec.swap_pool {
                if !triggers.contains(v) {
                    triggers.push(v.clone());
                }
            }
            for v in &spec.base_pool {
                if !self.masked_markers.contains(v) {
                    self.masked_markers.push(v.clone());
                }
            }
        }
        self
    }
}

/// Index of the listed value stated closest to a word of the field name.
fn stated_value(case: &str, field: &str, values: &[&str]) -> Option<usize> {
    let anchors: Vec<usize> = field
        .split('_')
        .filter(|w| w.len() >= 3)
        .flat_map(|w| case.match_indices(w).map(|(i, _)| i).collect::<Vec<_>>())
        .collect();
    let mut best: Option<(usize, usize)> = None;
    for (vi, v) in values.iter().enumerate() {
        let needle = v.trim().to_lowercase().replace('_', " ");
        let Ok(re) = Regex::new(&format!(r"\b{}\b", regex::escape(&needle))) else {
            continue;
        };
        for m in re.find_iter(case) {
            let d = anchors
                .iter()
                .map(|&a| a.abs_diff(m.start()))
                .min()
                .unwrap_or(m.start());
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, vi));
            }
        }
    }
    best.map(|(_, i)| i)
}

fn option_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^\s*\(([a-z])\)\s+(.+?)\s*$").expect("static regex"))
}

/// A deterministic stand-in for a decision model.
///
/// Output is a pure function of `(seed, prompt)`. Free-form prompts get a
/// policy decision that flips with the configured probability when a trigger
/// marker is present; the draw is keyed on the prompt with all markers
/// removed, so both sides of a pair share it. Extraction prompts get feature
/// JSON with optional per-field leaks.
#[derive(Debug, Clone)]
pub struct SyntheticJudge {
    config: SyntheticJudgeConfig,
    /// All markers, longest first.
    masks: Vec<String>,
}

impl SyntheticJudge {
    pub fn new(config: SyntheticJudgeConfig) -> Result<Self> {
        config.validate()?;
        let mut masks: Vec<String> = config
            .trigger_markers
            .values()
            .flatten()
            .chain(&config.masked_markers)
            .filter(|m| !m.is_empty())
            .cloned()
            .collect();
        masks.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        masks.dedup();
        Ok(SyntheticJudge { config, masks })
    }

    pub fn config(&self) -> &SyntheticJudgeConfig {
        &self.config
    }

    fn draw(&self, parts: &[&[u8]]) -> u64 {
        let seed = self.config.seed.to_le_bytes();
        let mut all: Vec<&[u8]> = vec![&seed];
        all.extend_from_slice(parts);
        derive_u64(&all)
    }

    fn masked(&self, text: &str) -> String {
        let mut out = text.to_owned();
        for m in &self.masks {
            out = out.replace(m.as_str(), "");
        }
        out
    }

    /// First bias type (in enum order) whose trigger is present and whose
    /// strength is positive.
    fn triggered(&self, text: &str) -> Vec<BiasType> {
        BiasType::ALL
            .into_iter()
            .filter(|b| {
                self.config
                    .trigger_markers
                    .get(b)
                    .is_some_and(|ms| ms.iter().any(|m| !m.is_empty() && text.contains(m.as_str())))
            })
            .collect()
    }

    fn keyword_mask(&self, text: &str) -> String {
        let lower = text.to_lowercase();
        self.config
            .relevant_keywords
            .iter()
            .map(|k| if lower.contains(&k.to_lowercase()) { '1' } else { '0' })
            .collect()
    }

    fn base_decision(&self, prompt: &str, n: usize) -> usize {
        let lower = prompt.to_lowercase();
        for rule in &self.config.base_policy {
            if rule.when_present.iter().all(|w| lower.contains(&w.to_lowercase())) {
                return rule.option % n;
            }
        }
        (self.draw(&[b"policy", self.keyword_mask(prompt).as_bytes()]) % n as u64) as usize
    }

    fn other_option(&self, current: usize, n: usize, key: &[u8], tag: &[u8]) -> usize {
        if n < 2 {
            return current;
        }
        let step = 1 + (self.draw(&[tag, key]) % (n as u64 - 1)) as usize;
        (current + step) % n
    }

    /// The option index the judge picks for a free-form prompt.
    pub fn decide(&self, prompt: &str, n: usize) -> usize {
        let key = self.masked(prompt);
        let mut decision = self.base_decision(prompt, n);
        for bias in self.triggered(prompt) {
            let p = self.config.bias_strengths.get(&bias).copied().unwrap_or(0.0);
            let u = unit_interval(self.draw(&[b"flip", bias.as_str().as_bytes(), key.as_bytes()]));
            if u < p {
                decision = self.other_option(decision, n, key.as_bytes(), b"flip-target");
                break;
            }
        }
        if self.config.noise_rate > 0.0 {
            let u = unit_interval(self.draw(&[b"noise", prompt.as_bytes()]));
            if u < self.config.noise_rate {
                decision = self.other_option(decision, n, prompt.as_bytes(), b"noise-target");
            }
        }
        decision
    }

    fn answer_freeform(&self, prompt: &str) -> String {
        let options: Vec<(char, String)> = option_line_re()
            .captures_iter(prompt)
            .map(|c| (c[1].chars().next().unwrap_or('a'), c[2].to_owned()))
            .collect();
        if options.is_empty() {
            return "I am unable to choose without a list of options.".into();
        }
        let d = self.decide(prompt, options.len());
        let (letter, label) = &options[d];
        format!("Decision: ({letter}) {label}\nRationale: Weighing the decision-relevant facts in the case, {label} is the most appropriate choice.")
    }

    fn answer_extraction(&self, prompt: &str, at: usize) -> String {
        let after = &prompt[at + SCHEMA_MARKER.len()..];
        let Some(schema) = first_json_object(after) else {
            return "{}".into();
        };
        let case = after.find("Case:").map(|i| &after[i..]).unwrap_or(after);
        let key = self.masked(case);
        let lower = prompt.to_lowercase();
        let triggered = self.triggered(case);
        let mut out = serde_json::Map::new();
        for (field, hint) in &schema {
            let hint = hint.as_str().unwrap_or_default();
            let leak = self.config.extraction_leaks.iter().find(|l| {
                l.field == *field
                    && triggered.contains(&l.bias_type)
                    && !l.suppressors().iter().any(|s| lower.contains(&s.to_lowercase()))
                    && unit_interval(self.draw(&[b"leak", field.as_bytes(), key.as_bytes()])) < l.probability
            });
            let value = if hint.contains('/') {
                let values: Vec<&str> = hint.split('/').collect();
                let mut i = match stated_value(&case.to_lowercase(), field, &values) {
                    Some(i) => i,
                    None => (self.draw(&[b"extract", field.as_bytes(), self.keyword_mask(case).as_bytes()])
                        % values.len() as u64) as usize,
                };
                if leak.is_some() {
                    i = (i + 1) % values.len();
                }
                values[i].to_owned()
            } else if leak.is_some() {
                format!("{FREE_TEXT_VALUE}, given who is involved")
            } else {
                FREE_TEXT_VALUE.to_owned()
            };
            out.insert(field.clone(), serde_json::Value::String(value));
        }
        format!(
            "```json\n{}\n```",
            serde_json::to_string_pretty(&serde_json::Value::Object(out)).unwrap_or_default()
        )
    }

    pub fn respond(&self, prompt: &str) -> String {
        match prompt.find(SCHEMA_MARKER) {
            Some(at) => self.answer_extraction(prompt, at),
            None => self.answer_freeform(prompt),
        }
    }
}

impl DecisionModel for SyntheticJudge {
    fn name(&self) -> &str {
        &self.config.name
    }

    fn query(&self, prompt: &str) -> Result<ModelResponse> {
        if prompt.trim().is_empty() {
            return Err(Error::invalid("prompt", "must not be empty"));
        }
        let fingerprint = sha256_hex(format!("{}\u{0}{}\u{0}{prompt}", self.config.name, self.config.seed).as_bytes());
        Ok(ModelResponse {
            raw_text: self.respond(prompt),
            latency: Duration::ZERO,
            cached: false,
            request_fingerprint: fingerprint,
        })
    }

    fn metadata(&self) -> serde_json::Value {
        serde_json::json!({ "name": self.config.name, "synthetic": self.config })
    }
}
