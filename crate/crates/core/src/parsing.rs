//! Decision and feature extraction from free-form model text.
//!
//! Decisions are parsed in tiers (exact label, option letter, whole-word
//! label containment). The first tier that produces a match decides; a tier
//! that matches two different options abstains instead of guessing.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::rubric::{FieldKind, RubricSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Base,
    Swap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMethod {
    ExactLabel,
    LetterPrefix,
    FuzzyOption,
    Unparsed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedDecision {
    pub decision: Option<usize>,
    pub method: ParseMethod,
    pub rationale: String,
    /// Byte span of the decision in the raw text.
    pub span: Option<Range<usize>>,
}

/// A parsed answer for one side of one pair. `decision: None` is UNPARSED.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub pair_id: String,
    pub side: Side,
    pub decision: Option<usize>,
    pub rationale: String,
    pub raw_text: String,
    pub parse_method: ParseMethod,
}

impl DecisionRecord {
    pub fn from_response(pair_id: &str, side: Side, raw_text: &str, options: &[String]) -> Self {
        let parsed = parse_decision(raw_text, options);
        DecisionRecord {
            pair_id: pair_id.to_owned(),
            side,
            decision: parsed.decision,
            rationale: parsed.rationale,
            raw_text: raw_text.to_owned(),
            parse_method: parsed.method,
        }
    }
}

fn prefix_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^\s*[*_#>\s]*(?:final\s+)?(?:decision|answer|recommendation|choice)[*_]*\s*[:\-]\s*[*_]*\s*")
            .expect("valid regex")
    })
}

fn paren_letter_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\(([A-Za-z])\)").expect("valid regex"))
}

fn line_letter_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?mi)^[ \t*_]*(?:(?:final\s+)?(?:decision|answer|recommendation|choice)[*_]*\s*[:\-]\s*[*_]*\s*)?([A-Za-z])[\).](?:[ \t]|$)")
            .expect("valid regex")
    })
}

fn letter_index(c: &str) -> usize {
    let b = c.as_bytes()[0].to_ascii_lowercase();
    (b - b'a') as usize
}

fn first_line(raw: &str) -> Option<Range<usize>> {
    let mut offset = 0;
    for line in raw.split_inclusive('\n') {
        let content = line.trim_end_matches(['\n', '\r']);
        if !content.trim().is_empty() {
            return Some(offset..offset + content.len());
        }
        offset += line.len();
    }
    None
}

fn exact_tier(raw: &str, options: &[String]) -> Option<(usize, Range<usize>)> {
    let line_range = first_line(raw)?;
    let line = &raw[line_range.clone()];
    let stripped = prefix_re().replace(line, "");
    let candidate = stripped
        .trim()
        .trim_matches(|c: char| matches!(c, '*' | '_' | '"' | '\'' | '`'))
        .trim_end_matches(['.', '!'])
        .trim();
    let hits: Vec<usize> = options
        .iter()
        .enumerate()
        .filter(|(_, o)| o.trim().eq_ignore_ascii_case(candidate))
        .map(|(i, _)| i)
        .collect();
    match hits.as_slice() {
        [one] => Some((*one, line_range)),
        _ => None,
    }
}

enum TierResult {
    Hit(usize, Range<usize>),
    Tie,
    Miss,
}

fn letter_tier(raw: &str, options: &[String]) -> TierResult {
    let mut hits: Vec<(usize, Range<usize>)> = Vec::new();
    for cap in paren_letter_re().captures_iter(raw) {
        hits.push((letter_index(&cap[1]), cap.get(0).expect("match").range()));
    }
    for cap in line_letter_re().captures_iter(raw) {
        let letter = cap.get(1).expect("group");
        hits.push((letter_index(letter.as_str()), letter.start()..cap.get(0).expect("match").end()));
    }
    hits.retain(|(idx, _)| *idx < options.len());
    if hits.is_empty() {
        return TierResult::Miss;
    }
    let first = hits[0].0;
    if hits.iter().any(|(idx, _)| *idx != first) {
        return TierResult::Tie;
    }
    let mut span = hits.iter().min_by_key(|(_, r)| r.start).expect("non-empty").1.clone();
    // extend over the option label when it follows the letter
    let rest = &raw[span.end..];
    let trimmed = rest.trim_start();
    let label = options[first].trim();
    if trimmed.len() >= label.len() && trimmed[..label.len()].eq_ignore_ascii_case(label) {
        span.end += rest.len() - trimmed.len() + label.len();
    }
    TierResult::Hit(first, span)
}

fn fuzzy_tier(raw: &str, options: &[String]) -> TierResult {
    let mut matches: Vec<(usize, Range<usize>)> = Vec::new();
    for (idx, opt) in options.iter().enumerate() {
        let label = opt.trim();
        if label.is_empty() {
            continue;
        }
        let is_word = |c: char| c.is_alphanumeric() || c == '_';
        let lead = if label.starts_with(is_word) { r"\b" } else { "" };
        let trail = if label.ends_with(is_word) { r"\b" } else { "" };
        let re = Regex::new(&format!("(?i){lead}{}{trail}", regex::escape(label))).expect("escaped label");
        if let Some(m) = re.find(raw) {
            matches.push((idx, m.range()));
        }
    }
    // a label found only inside a longer option label does not count
    let contained = |a: &Range<usize>, b: &Range<usize>| b.start <= a.start && a.end <= b.end && (b.end - b.start) > (a.end - a.start);
    let kept: Vec<(usize, Range<usize>)> = matches
        .iter()
        .filter(|(i, r)| !matches.iter().any(|(j, other)| j != i && contained(r, other)))
        .cloned()
        .collect();
    match kept.len() {
        0 => TierResult::Miss,
        1 => TierResult::Hit(kept[0].0, kept[0].1.clone()),
        _ => TierResult::Tie,
    }
}

fn rationale_after(raw: &str, end: usize) -> String {
    let rest = raw[end..].trim_start_matches(|c: char| {
        c.is_whitespace() || matches!(c, '-' | '—' | '–' | ':' | '.' | ',' | ';' | '*' | ')' | '_')
    });
    let rest = rest
        .strip_prefix("Rationale:")
        .or_else(|| rest.strip_prefix("rationale:"))
        .unwrap_or(rest)
        .trim();
    if rest.is_empty() {
        raw.trim().to_owned()
    } else {
        rest.to_owned()
    }
}

/// Parse a forced-choice decision out of free-form text.
pub fn parse_decision(raw_text: &str, options: &[String]) -> ParsedDecision {
    let unparsed = || ParsedDecision {
        decision: None,
        method: ParseMethod::Unparsed,
        rationale: raw_text.trim().to_owned(),
        span: None,
    };
    if options.is_empty() || raw_text.trim().is_empty() {
        return unparsed();
    }
    let hit = |idx: usize, span: Range<usize>, method| ParsedDecision {
        decision: Some(idx),
        method,
        rationale: rationale_after(raw_text, span.end),
        span: Some(span),
    };
    if let Some((idx, span)) = exact_tier(raw_text, options) {
        return hit(idx, span, ParseMethod::ExactLabel);
    }
    match letter_tier(raw_text, options) {
        TierResult::Hit(idx, span) => return hit(idx, span, ParseMethod::LetterPrefix),
        TierResult::Tie => return unparsed(),
        TierResult::Miss => {}
    }
    match fuzzy_tier(raw_text, options) {
        TierResult::Hit(idx, span) => hit(idx, span, ParseMethod::FuzzyOption),
        TierResult::Tie | TierResult::Miss => unparsed(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipIndicator {
    Flip,
    NoFlip,
    Excluded,
}

impl FlipIndicator {
    pub fn from_decisions<T: PartialEq>(base: Option<T>, swap: Option<T>) -> Self {
        match (base, swap) {
            (Some(a), Some(b)) if a == b => FlipIndicator::NoFlip,
            (Some(_), Some(_)) => FlipIndicator::Flip,
            _ => FlipIndicator::Excluded,
        }
    }

    pub fn is_flip(self) -> bool {
        self == FlipIndicator::Flip
    }
}

pub fn record_flip(base: &DecisionRecord, swap: &DecisionRecord) -> Result<FlipIndicator> {
    if base.pair_id != swap.pair_id {
        return Err(Error::invalid(
            "pair_id",
            format!("mismatched pair ids `{}` and `{}`", base.pair_id, swap.pair_id),
        ));
    }
    Ok(FlipIndicator::from_decisions(base.decision, swap.decision))
}

// ---------------------------------------------------------------------------
// Structured feature extraction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Validation {
    Valid,
    MissingFields { fields: Vec<String> },
    BadCategory { field: String, value: String },
    BadJson,
}

impl Validation {
    pub fn is_valid(&self) -> bool {
        matches!(self, Validation::Valid)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedFeatures {
    pub pair_id: String,
    pub side: Side,
    pub fields: BTreeMap<String, String>,
    pub schema_id: String,
    pub validation: Validation,
}

impl ExtractedFeatures {
    pub fn with_origin(mut self, pair_id: &str, side: Side) -> Self {
        self.pair_id = pair_id.to_owned();
        self.side = side;
        self
    }
}

fn strip_code_fences(raw: &str) -> String {
    raw.lines()
        .filter(|l| !l.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// End of the balanced-brace object starting at `start`, honoring JSON strings.
fn balanced_end(text: &str, start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(start + i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// The first balanced `{...}` that parses as a JSON object.
pub fn first_json_object(raw: &str) -> Option<serde_json::Map<String, Value>> {
    let text = strip_code_fences(raw);
    for (start, _) in text.match_indices('{') {
        if let Some(end) = balanced_end(&text, start) {
            if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(&text[start..end]) {
                return Some(map);
            }
        }
    }
    None
}

fn value_text(v: &Value) -> Option<String> {
    match v {
        Value::Null => None,
        Value::String(s) => Some(s.trim().to_owned()),
        other => Some(other.to_string()),
    }
}

/// Extract and validate a feature map against the rubric's schema.
///
/// Categorical values are matched case-insensitively and stored in the
/// schema's spelling. The returned record has an empty `pair_id`; callers
/// attach one with [`ExtractedFeatures::with_origin`].
pub fn parse_features(raw_text: &str, schema: &RubricSpec) -> ExtractedFeatures {
    let mut out = ExtractedFeatures {
        pair_id: String::new(),
        side: Side::Base,
        fields: BTreeMap::new(),
        schema_id: schema.schema_id.clone(),
        validation: Validation::BadJson,
    };
    let Some(obj) = first_json_object(raw_text) else {
        return out;
    };
    let mut missing = Vec::new();
    let mut bad: Option<(String, String)> = None;
    for field in &schema.fields {
        let Some(value) = obj.get(&field.name).and_then(value_text).filter(|v| !v.is_empty()) else {
            missing.push(field.name.clone());
            continue;
        };
        match &field.kind {
            FieldKind::Categorical { values } => {
                match values.iter().find(|allowed| allowed.eq_ignore_ascii_case(&value)) {
                    Some(canonical) => {
                        out.fields.insert(field.name.clone(), canonical.clone());
                    }
                    None => {
                        if bad.is_none() {
                            bad = Some((field.name.clone(), value.clone()));
                        }
                        out.fields.insert(field.name.clone(), value);
                    }
                }
            }
            FieldKind::FreeText => {
                out.fields.insert(field.name.clone(), value);
            }
        }
    }
    out.validation = if !missing.is_empty() {
        Validation::MissingFields { fields: missing }
    } else if let Some((field, value)) = bad {
        Validation::BadCategory { field, value }
    } else {
        Validation::Valid
    };
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rubric::lending_rubric;

    fn opts(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn letter_prefix_with_label() {
        let o = opts(&["Diversion program", "Probation", "Incarceration"]);
        let p = parse_decision("Decision: (a) Diversion program — because he is a first-time offender.", &o);
        assert_eq!(p.decision, Some(0));
        assert_eq!(p.method, ParseMethod::LetterPrefix);
        assert_eq!(p.rationale, "because he is a first-time offender.");
    }

    #[test]
    fn empty_is_unparsed() {
        let p = parse_decision("", &opts(&["Buy", "Hold"]));
        assert_eq!(p.decision, None);
        assert_eq!(p.method, ParseMethod::Unparsed);
    }

    #[test]
    fn fuzzy_whole_word() {
        let o = opts(&["Buy", "Hold", "Sell"]);
        let p = parse_decision("I recommend Buy based on fundamentals", &o);
        assert_eq!((p.decision, p.method), (Some(0), ParseMethod::FuzzyOption));
        // "Buyers" is not the whole word "Buy"
        let p = parse_decision("Buyers are cautious, so Sell.", &o);
        assert_eq!(p.decision, Some(2));
    }

    #[test]
    fn exact_outranks_fuzzy() {
        let o = opts(&["Buy", "Hold", "Sell"]);
        let p = parse_decision("Sell\n\nI weighed Buy against Hold before settling.", &o);
        assert_eq!((p.decision, p.method), (Some(2), ParseMethod::ExactLabel));
        assert_eq!(p.rationale, "I weighed Buy against Hold before settling.");
        let p = parse_decision("**Decision:** Hold.", &o);
        assert_eq!((p.decision, p.method), (Some(1), ParseMethod::ExactLabel));
    }

    #[test]
    fn ties_abstain() {
        let o = opts(&["Buy", "Hold", "Sell"]);
        assert_eq!(parse_decision("Either Buy or Sell could work.", &o).decision, None);
        assert_eq!(parse_decision("Not (a), rather (c).", &o).decision, None);
    }

    #[test]
    fn letter_forms() {
        let o = opts(&["Approve", "Deny"]);
        assert_eq!(parse_decision("b) Deny. Too much debt.", &o).decision, Some(1));
        assert_eq!(parse_decision("A. Strong file overall.", &o).decision, Some(0));
        // letters past the option list are ignored
        assert_eq!(parse_decision("(d) something", &o).decision, None);
    }

    #[test]
    fn nested_labels_prefer_the_longer() {
        let o = opts(&["Approve", "Approve with conditions", "Deny"]);
        let p = parse_decision("I would go with approve with conditions given the record.", &o);
        assert_eq!(p.decision, Some(1));
    }

    #[test]
    fn record_flip_cases() {
        let rec = |id: &str, d: Option<usize>| DecisionRecord {
            pair_id: id.into(),
            side: Side::Base,
            decision: d,
            rationale: String::new(),
            raw_text: String::new(),
            parse_method: if d.is_some() { ParseMethod::ExactLabel } else { ParseMethod::Unparsed },
        };
        assert_eq!(record_flip(&rec("p", Some(0)), &rec("p", Some(0))).unwrap(), FlipIndicator::NoFlip);
        assert_eq!(record_flip(&rec("p", Some(0)), &rec("p", Some(2))).unwrap(), FlipIndicator::Flip);
        assert_eq!(record_flip(&rec("p", Some(0)), &rec("p", None)).unwrap(), FlipIndicator::Excluded);
        assert!(record_flip(&rec("p", Some(0)), &rec("q", Some(0))).is_err());
    }

    #[test]
    fn lending_features_valid() {
        let raw = r#"{"credit_indicators":"good","employment_stability":"stable","debt_to_income":"low","loan_purpose":"car"}"#;
        let f = parse_features(raw, &lending_rubric());
        assert_eq!(f.validation, Validation::Valid);
        assert_eq!(f.fields.len(), 4);
    }

    #[test]
    fn lending_features_bad_category() {
        let raw = r#"{"credit_indicators":"excellent","employment_stability":"stable","debt_to_income":"low","loan_purpose":"car"}"#;
        let f = parse_features(raw, &lending_rubric());
        assert_eq!(
            f.validation,
            Validation::BadCategory {
                field: "credit_indicators".into(),
                value: "excellent".into()
            }
        );
    }

    #[test]
    fn features_without_json() {
        let f = parse_features("The applicant seems fine to me.", &lending_rubric());
        assert_eq!(f.validation, Validation::BadJson);
    }

    #[test]
    fn features_in_fence_and_missing() {
        let raw = "Here you go:\n```json\n{\"credit_indicators\": \"Fair\", \"note\": \"{not a brace}\"}\n```";
        let f = parse_features(raw, &lending_rubric());
        assert_eq!(f.fields["credit_indicators"], "fair");
        match f.validation {
            Validation::MissingFields { fields } => assert_eq!(fields.len(), 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn skips_unparseable_brace_runs() {
        let raw = "{oops} then {\"a\": 1}";
        assert_eq!(first_json_object(raw).unwrap()["a"], 1);
    }
}

#[cfg(test)]
mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn parse_is_deterministic(text in "[ -~\n]{0,120}") {
            let o: Vec<String> = ["Buy", "Hold", "Sell"].iter().map(|s| s.to_string()).collect();
            let a = parse_decision(&text, &o);
            let b = parse_decision(&text, &o);
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.decision.is_none(), a.method == ParseMethod::Unparsed);
        }

        #[test]
        fn flip_outcome_symmetric(a in proptest::option::of(0usize..3), b in proptest::option::of(0usize..3)) {
            prop_assert_eq!(FlipIndicator::from_decisions(a, b), FlipIndicator::from_decisions(b, a));
        }
    }
}
