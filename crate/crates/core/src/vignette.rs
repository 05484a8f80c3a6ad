//! Benchmark data model: vignette pairs, control pairs, templates and
//! tabular case records, plus corpus files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::domain::{BiasType, Domain};
use crate::error::{Error, Result};
use crate::hashing::derive_u64;
use crate::interventions::{tokenize, InterventionSpec, TargetMarker};
use crate::jsonl::{self, SCHEMA_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Template,
    Tabular,
    Control,
}

/// One decision scenario in base and swap form with its forced-choice task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VignettePair {
    pub id: String,
    pub domain: Domain,
    pub bias_type: BiasType,
    pub context: String,
    pub base_text: String,
    pub swap_text: String,
    pub decision_prompt: String,
    pub options: Vec<String>,
    pub provenance: Provenance,
}

fn validate_options(options: &[String]) -> Result<()> {
    if options.len() < 2 {
        return Err(Error::invalid(
            "options",
            format!("need at least 2 options, got {}", options.len()),
        ));
    }
    let mut seen = BTreeSet::new();
    for opt in options {
        let key = opt.trim().to_lowercase();
        if key.is_empty() {
            return Err(Error::invalid("options", "empty option label"));
        }
        if !seen.insert(key) {
            return Err(Error::invalid("options", format!("duplicate option `{opt}`")));
        }
    }
    Ok(())
}

impl VignettePair {
    pub fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(Error::invalid("id", "empty id"));
        }
        if self.base_text.trim().is_empty() {
            return Err(Error::invalid("base_text", "empty text"));
        }
        if self.swap_text.trim().is_empty() {
            return Err(Error::invalid("swap_text", "empty text"));
        }
        if matches!(self.provenance, Provenance::Template | Provenance::Tabular) && self.base_text == self.swap_text {
            return Err(Error::invalid("swap_text", "identical to base_text"));
        }
        validate_options(&self.options)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    Punctuation,
    Synonym,
}

/// A near-identical pair used to estimate the noise baseline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlPair {
    pub id: String,
    pub domain: Domain,
    pub base_text: String,
    pub variant_text: String,
    pub decision_prompt: String,
    pub options: Vec<String>,
    pub perturbation_kind: PerturbationKind,
}

impl ControlPair {
    pub fn validate(&self) -> Result<()> {
        validate_options(&self.options)?;
        if self.base_text == self.variant_text {
            return Err(Error::invalid("variant_text", "identical to base_text"));
        }
        let base: Vec<String> = tokenize(&self.base_text).into_iter().map(|t| t.word.to_lowercase()).collect();
        let variant: Vec<String> = tokenize(&self.variant_text).into_iter().map(|t| t.word.to_lowercase()).collect();
        match self.perturbation_kind {
            PerturbationKind::Punctuation => {
                if base != variant {
                    return Err(Error::invalid("variant_text", "punctuation control changes words"));
                }
            }
            PerturbationKind::Synonym => {
                let edits = base.iter().zip(&variant).filter(|(a, b)| a != b).count();
                if base.len() != variant.len() || edits != 1 {
                    return Err(Error::invalid(
                        "variant_text",
                        "synonym control must differ in exactly one token",
                    ));
                }
            }
        }
        Ok(())
    }

    /// View as a vignette pair so the paired runner can drive it.
    pub fn as_pair(&self) -> VignettePair {
        VignettePair {
            id: self.id.clone(),
            domain: self.domain,
            bias_type: BiasType::Demographic,
            context: String::new(),
            base_text: self.base_text.clone(),
            swap_text: self.variant_text.clone(),
            decision_prompt: self.decision_prompt.clone(),
            options: self.options.clone(),
            provenance: Provenance::Control,
        }
    }
}

// ---------------------------------------------------------------------------
// Corpus files
// ---------------------------------------------------------------------------

/// Load a vignette corpus, validating every record and id uniqueness.
pub fn load_corpus(path: &Path, expected_schema_version: &str) -> Result<Vec<VignettePair>> {
    let records = jsonl::read_versioned::<VignettePair>(path, expected_schema_version)?;
    let mut ids = BTreeSet::new();
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        rec.value.validate().map_err(|e| at_line(e, rec.line))?;
        if !ids.insert(rec.value.id.clone()) {
            return Err(Error::invalid("id", format!("line {}: duplicate id `{}`", rec.line, rec.value.id)));
        }
        out.push(rec.value);
    }
    log::info!("loaded {} vignette pairs from {}", out.len(), path.display());
    Ok(out)
}

fn at_line(err: Error, line: usize) -> Error {
    match err {
        Error::Invalid { field, message } => Error::Invalid {
            field,
            message: format!("line {line}: {message}"),
        },
        other => other,
    }
}

pub fn save_corpus(path: &Path, pairs: &[VignettePair]) -> Result<()> {
    jsonl::write_versioned(path, SCHEMA_VERSION, pairs)
}

pub fn load_controls(path: &Path, expected_schema_version: &str) -> Result<Vec<ControlPair>> {
    let records = jsonl::read_versioned::<ControlPair>(path, expected_schema_version)?;
    records
        .into_iter()
        .map(|rec| rec.value.validate().map(|_| rec.value).map_err(|e| at_line(e, rec.line)))
        .collect()
}

pub fn save_controls(path: &Path, controls: &[ControlPair]) -> Result<()> {
    jsonl::write_versioned(path, SCHEMA_VERSION, controls)
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("valid regex"))
}

/// A scenario body with `{slot}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VignetteTemplate {
    pub domain: Domain,
    pub context: String,
    pub body: String,
    pub decision_prompt: String,
    pub options: Vec<String>,
}

impl VignetteTemplate {
    pub fn placeholders(&self) -> BTreeSet<String> {
        placeholder_re()
            .captures_iter(&self.body)
            .map(|c| c[1].to_owned())
            .collect()
    }

    /// Render the body, recording where each slot landed.
    fn render(&self, values: &BTreeMap<String, String>) -> Result<(String, Vec<(String, std::ops::Range<usize>)>)> {
        let mut out = String::with_capacity(self.body.len() + 64);
        let mut spans = Vec::new();
        let mut cursor = 0;
        for cap in placeholder_re().captures_iter(&self.body) {
            let whole = cap.get(0).expect("match");
            let name = &cap[1];
            let value = values
                .get(name)
                .ok_or_else(|| Error::Template(format!("unresolved placeholder `{{{name}}}`")))?;
            out.push_str(&self.body[cursor..whole.start()]);
            let start = out.len();
            out.push_str(value);
            spans.push((name.to_owned(), start..out.len()));
            cursor = whole.end();
        }
        out.push_str(&self.body[cursor..]);
        Ok((out, spans))
    }
}

/// Where a targeted slot sits in each side of an instantiated pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSpan {
    pub slot: String,
    pub base_start: usize,
    pub base_end: usize,
    pub swap_start: usize,
    pub swap_end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstantiatedPair {
    pub pair: VignettePair,
    /// Spans of intervention-targeted slots only.
    pub spans: Vec<SlotSpan>,
}

impl InstantiatedPair {
    /// Text outside the targeted spans is byte-identical between the two sides.
    pub fn diff_is_confined(&self) -> bool {
        let (b, s) = (&self.pair.base_text, &self.pair.swap_text);
        let mut bc = 0;
        let mut sc = 0;
        for span in &self.spans {
            if b[bc..span.base_start] != s[sc..span.swap_start] {
                return false;
            }
            bc = span.base_end;
            sc = span.swap_end;
        }
        b[bc..] == s[sc..]
    }
}

pub fn pair_id(domain: Domain, bias: BiasType, serial: usize) -> String {
    format!("{}-{}-{:04}", domain.as_str(), bias.as_str(), serial)
}

/// Fill a template twice: base values everywhere, and swap values in the
/// slots the intervention targets.
pub fn instantiate_template(
    template: &VignetteTemplate,
    slot_values: &BTreeMap<String, String>,
    intervention: &InterventionSpec,
    serial: usize,
) -> Result<InstantiatedPair> {
    let placeholders = template.placeholders();
    if let Some(missing) = placeholders.iter().find(|p| !slot_values.contains_key(*p)) {
        return Err(Error::Template(format!("unresolved placeholder `{{{missing}}}`")));
    }
    if let Some(marker) = intervention
        .target_markers
        .iter()
        .find(|m| matches!(m, TargetMarker::Literal(_)))
    {
        return Err(Error::Template(format!(
            "template interventions must target slots, found `{}`",
            marker.label()
        )));
    }
    let targeted: BTreeSet<&str> = intervention
        .slot_names()
        .filter(|s| placeholders.contains(*s))
        .collect();
    if targeted.is_empty() {
        return Err(Error::Template(format!(
            "intervention `{}` targets no slot of the template",
            intervention.name
        )));
    }
    if let Some(stray) = intervention.slot_names().find(|s| !placeholders.contains(*s)) {
        return Err(Error::Template(format!("intervention slot `{stray}` is not in the template")));
    }

    let mut swap_values = slot_values.clone();
    for slot in &targeted {
        let base_value = &slot_values[*slot];
        let draw = derive_u64(&[intervention.name.as_bytes(), base_value.as_bytes(), &(serial as u64).to_le_bytes()]);
        swap_values.insert((*slot).to_owned(), intervention.counterpart(base_value, draw)?);
    }

    let (base_text, base_spans) = template.render(slot_values)?;
    let (swap_text, swap_spans) = template.render(&swap_values)?;
    let spans = base_spans
        .into_iter()
        .zip(swap_spans)
        .filter(|((name, _), _)| targeted.contains(name.as_str()))
        .map(|((name, b), (_, s))| SlotSpan {
            slot: name,
            base_start: b.start,
            base_end: b.end,
            swap_start: s.start,
            swap_end: s.end,
        })
        .collect();

    let pair = VignettePair {
        id: pair_id(template.domain, intervention.bias_type, serial),
        domain: template.domain,
        bias_type: intervention.bias_type,
        context: template.context.clone(),
        base_text,
        swap_text,
        decision_prompt: template.decision_prompt.clone(),
        options: template.options.clone(),
        provenance: Provenance::Template,
    };
    pair.validate()?;
    Ok(InstantiatedPair { pair, spans })
}

/// A template together with the case facts that fill its non-intervention slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSpec {
    #[serde(flatten)]
    pub template: VignetteTemplate,
    pub cases: Vec<BTreeMap<String, String>>,
}

pub fn load_template_specs(path: &Path) -> Result<Vec<TemplateSpec>> {
    Ok(jsonl::read_plain(path)?.into_iter().map(|n| n.value).collect())
}

/// `n_per_area` pairs for every requested (domain, bias type) cell.
///
/// Each pair draws a case and a base value for every intervention slot in
/// the template from a stream seeded by `(seed, domain, bias type)`. A cell
/// whose template has no slot for the bias type is skipped with a warning.
pub fn generate_corpus(
    specs: &[TemplateSpec],
    interventions: &[InterventionSpec],
    domains: &[Domain],
    bias_types: &[BiasType],
    n_per_area: usize,
    seed: u64,
) -> Result<Vec<VignettePair>> {
    for spec in interventions {
        spec.validate()?;
    }
    let mut out = Vec::new();
    for &domain in domains {
        let spec = specs
            .iter()
            .find(|s| s.template.domain == domain)
            .ok_or_else(|| Error::Template(format!("no template for domain {domain}")))?;
        if spec.cases.is_empty() {
            return Err(Error::Template(format!("template for {domain} has no cases")));
        }
        let placeholders = spec.template.placeholders();
        let in_template: Vec<&InterventionSpec> = interventions
            .iter()
            .filter(|i| i.slot_names().any(|s| placeholders.contains(s)))
            .collect();
        for &bias in bias_types {
            let Some(target) = in_template.iter().find(|i| i.bias_type == bias) else {
                log::warn!("{domain}: template has no slot for {bias}, cell skipped");
                continue;
            };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_u64(&[
                &seed.to_le_bytes(),
                domain.as_str().as_bytes(),
                bias.as_str().as_bytes(),
            ]));
            for serial in 1..=n_per_area {
                let mut values = spec.cases[rng.random_range(0..spec.cases.len())].clone();
                for i in &in_template {
                    let pick = i.base_pool[rng.random_range(0..i.base_pool.len())].clone();
                    for slot in i.slot_names() {
                        values.insert(slot.to_owned(), pick.clone());
                    }
                }
                out.push(instantiate_template(&spec.template, &values, target, serial)?.pair);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Tabular derivation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldValue {
    Number(f64),
    Text(String),
}

impl FieldValue {
    fn parse(raw: &str) -> Self {
        let trimmed = raw.trim();
        match trimmed.parse::<f64>() {
            Ok(n) if n.is_finite() => FieldValue::Number(n),
            _ => FieldValue::Text(trimmed.to_owned()),
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, FieldValue::Text(s) if s.is_empty())
    }
}

impl fmt::Display for FieldValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldValue::Number(n) if n.fract() == 0.0 && n.abs() < 1e15 => write!(f, "{}", *n as i64),
            FieldValue::Number(n) => write!(f, "{n}"),
            FieldValue::Text(s) => f.write_str(s),
        }
    }
}

/// One row of a tabular case file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TabularCaseRecord {
    pub fields: BTreeMap<String, FieldValue>,
}

impl TabularCaseRecord {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        TabularCaseRecord {
            fields: pairs
                .into_iter()
                .map(|(k, v)| (k.to_owned(), FieldValue::parse(v)))
                .collect(),
        }
    }

    /// First required field that is absent or empty.
    pub fn missing_field<'a>(&self, required: impl IntoIterator<Item = &'a String>) -> Option<&'a String> {
        required
            .into_iter()
            .find(|name| self.fields.get(*name).is_none_or(FieldValue::is_empty))
    }
}

/// Read comma-separated case records with a header row.
pub fn load_tabular(path: &Path) -> Result<Vec<TabularCaseRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        out.push(TabularCaseRecord::from_pairs(headers.iter().zip(row.iter())));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRecord {
    /// 0-based index into the input records.
    pub index: usize,
    pub missing_field: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TabularDerivation {
    pub pairs: Vec<VignettePair>,
    pub skipped: Vec<SkippedRecord>,
    /// Requested minus produced, per bias type, when records ran short.
    pub shortfall: BTreeMap<BiasType, usize>,
}

/// Derive pairs from case records.
///
/// For each bias type the usable records are shuffled with a seed derived
/// from `(seed, bias type)` and the first `count` are taken. Slots owned by
/// any intervention get a pool value drawn from the same stream; only the
/// bias type's own slots differ between base and swap.
pub fn derive_from_tabular(
    records: &[TabularCaseRecord],
    domain_template: &VignetteTemplate,
    interventions: &BTreeMap<BiasType, InterventionSpec>,
    count_per_bias: &BTreeMap<BiasType, usize>,
    seed: u64,
) -> Result<TabularDerivation> {
    let mut result = TabularDerivation {
        pairs: Vec::new(),
        skipped: Vec::new(),
        shortfall: BTreeMap::new(),
    };
    if records.is_empty() {
        return Ok(result);
    }
    for spec in interventions.values() {
        spec.validate()?;
    }
    let intervention_slots: BTreeSet<String> = interventions
        .values()
        .flat_map(|s| s.slot_names().map(str::to_owned))
        .collect();
    let required: Vec<String> = domain_template
        .placeholders()
        .into_iter()
        .filter(|p| !intervention_slots.contains(p))
        .collect();

    let mut usable = Vec::new();
    for (index, rec) in records.iter().enumerate() {
        match rec.missing_field(&required) {
            Some(field) => {
                log::warn!("record {index} skipped: missing `{field}`");
                result.skipped.push(SkippedRecord {
                    index,
                    missing_field: field.clone(),
                });
            }
            None => usable.push(rec),
        }
    }

    for bias in BiasType::ALL {
        let Some(&count) = count_per_bias.get(&bias) else { continue };
        if count == 0 {
            continue;
        }
        let intervention = interventions
            .get(&bias)
            .ok_or_else(|| Error::invalid("interventions", format!("no intervention for bias type `{bias}`")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_u64(&[&seed.to_le_bytes(), bias.as_str().as_bytes()]));
        let mut order: Vec<usize> = (0..usable.len()).collect();
        order.shuffle(&mut rng);
        let take = count.min(order.len());
        if take < count {
            log::warn!("{bias}: requested {count} pairs, only {take} usable records");
            result.shortfall.insert(bias, count - take);
        }
        for (serial, &idx) in order[..take].iter().enumerate() {
            let mut values: BTreeMap<String, String> = usable[idx]
                .fields
                .iter()
                .map(|(k, v)| (k.clone(), v.to_string()))
                .collect();
            for spec in interventions.values() {
                let pick = rng.random_range(0..spec.base_pool.len());
                for slot in spec.slot_names() {
                    values.insert(slot.to_owned(), spec.base_pool[pick].clone());
                }
            }
            let mut inst = instantiate_template(domain_template, &values, intervention, serial + 1)?;
            inst.pair.provenance = Provenance::Tabular;
            result.pairs.push(inst.pair);
        }
    }
    Ok(result)
}
