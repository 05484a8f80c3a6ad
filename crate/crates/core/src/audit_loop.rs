//! Detect, diagnose, patch and verify structured flips.
//!
//! Diagnosis is pure rubric arithmetic over already extracted features; only
//! verification issues new model calls.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::domain::{BiasType, Domain};
use crate::error::{Error, Result};
use crate::gateway::DecisionModel;
use crate::jsonl;
use crate::parsing::{ExtractedFeatures, FlipIndicator};
use crate::rubric::{decide, run_structured, Rule, RubricSpec, StructuredOutcome, StructuredRun};
use crate::stats::{percent, FlipCount};
use crate::vignette::VignettePair;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldDiff {
    pub field: String,
    pub base_value: String,
    pub swap_value: String,
    /// Whether any rubric rule reads this field.
    pub scoring: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipDiagnosis {
    pub pair_id: String,
    pub domain: Domain,
    pub bias_type: BiasType,
    pub differing_fields: Vec<FieldDiff>,
    /// Rules whose match status changes when a differing field is reverted.
    pub rule_impact: Vec<Rule>,
    /// Differing fields whose reversion alone restores the base decision.
    pub decisive_fields: Vec<String>,
    /// Reverting every differing field restores the base decision.
    pub consistent: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldLeakCount {
    pub field: String,
    pub flips: u64,
    pub decisive: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Diagnosis {
    pub diagnoses: Vec<FlipDiagnosis>,
    /// Ranked by attribution count, then name.
    pub leak_table: Vec<FieldLeakCount>,
    /// Pairs excluded because an extraction was invalid.
    pub extraction_failures: Vec<String>,
}

fn field_diffs(base: &ExtractedFeatures, swap: &ExtractedFeatures, rubric: &RubricSpec) -> Vec<FieldDiff> {
    rubric
        .fields
        .iter()
        .filter_map(|f| {
            let b = base.fields.get(&f.name)?;
            let s = swap.fields.get(&f.name)?;
            (b != s).then(|| FieldDiff {
                field: f.name.clone(),
                base_value: b.clone(),
                swap_value: s.clone(),
                scoring: rubric.rules.iter().any(|r| r.field == f.name),
            })
        })
        .collect()
}

/// Localize every structured flip to the extracted fields that differ.
pub fn diagnose(outcomes: &[StructuredOutcome], rubric: &RubricSpec) -> Result<Diagnosis> {
    let mut out = Diagnosis::default();
    let mut counts: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for outcome in outcomes {
        let StructuredOutcome::Completed {
            pair_id,
            domain,
            bias_type,
            base_features,
            swap_features,
            base_decision,
            swap_decision,
            flip,
        } = outcome
        else {
            continue;
        };
        match flip {
            FlipIndicator::Excluded => {
                out.extraction_failures.push(pair_id.clone());
                continue;
            }
            FlipIndicator::NoFlip => continue,
            FlipIndicator::Flip => {}
        }
        let (Some(base_decision), Some(swap_decision)) = (base_decision, swap_decision) else {
            out.extraction_failures.push(pair_id.clone());
            continue;
        };
        let diffs = field_diffs(base_features, swap_features, rubric);
        let mut rule_impact: Vec<Rule> = Vec::new();
        let mut decisive = Vec::new();
        for d in &diffs {
            let mut reverted = swap_features.clone();
            reverted.fields.insert(d.field.clone(), d.base_value.clone());
            let (_, before) = rubric.score(&swap_features.fields);
            let (_, after) = rubric.score(&reverted.fields);
            let before: BTreeSet<usize> = before.into_iter().collect();
            let after: BTreeSet<usize> = after.into_iter().collect();
            for i in before.symmetric_difference(&after) {
                if !rule_impact.contains(&rubric.rules[*i]) {
                    rule_impact.push(rubric.rules[*i].clone());
                }
            }
            if decide(&reverted, rubric)?.decision == base_decision.decision {
                decisive.push(d.field.clone());
            }
        }
        let mut all_reverted = swap_features.clone();
        for d in &diffs {
            all_reverted.fields.insert(d.field.clone(), d.base_value.clone());
        }
        let consistent = decide(&all_reverted, rubric)?.decision == base_decision.decision;
        let note = rule_impact
            .is_empty()
            .then(|| "no scoring rule changed; check rubric bands or parsing".to_owned());
        debug_assert_ne!(base_decision.decision, swap_decision.decision);
        for d in &diffs {
            let e = counts.entry(d.field.clone()).or_default();
            e.0 += 1;
            e.1 += u64::from(decisive.contains(&d.field));
        }
        out.diagnoses.push(FlipDiagnosis {
            pair_id: pair_id.clone(),
            domain: *domain,
            bias_type: *bias_type,
            differing_fields: diffs,
            rule_impact,
            decisive_fields: decisive,
            consistent,
            note,
        });
    }
    let mut table: Vec<FieldLeakCount> = counts
        .into_iter()
        .map(|(field, (flips, decisive))| FieldLeakCount { field, flips, decisive })
        .collect();
    table.sort_by(|a, b| b.flips.cmp(&a.flips).then_with(|| a.field.cmp(&b.field)));
    out.leak_table = table;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchAuthor {
    Human,
    Templated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub schema_id: String,
    pub prompt_version_from: u32,
    pub prompt_version_to: u32,
    pub targeted_fields: Vec<String>,
    pub patch_text: String,
    pub author: PatchAuthor,
    pub timestamp: DateTime<Utc>,
}

impl PatchRecord {
    pub fn human(rubric: &RubricSpec, fields: &[String], text: &str) -> Self {
        PatchRecord {
            schema_id: rubric.schema_id.clone(),
            prompt_version_from: rubric.prompt_version,
            prompt_version_to: rubric.prompt_version + 1,
            targeted_fields: fields.to_vec(),
            patch_text: text.trim().to_owned(),
            author: PatchAuthor::Human,
            timestamp: Utc::now(),
        }
    }

    /// `Ignore {markers}; extract {field} from {evidence} only.`
    pub fn templated(rubric: &RubricSpec, fields: &[String], bias_markers: &[String], evidence: &str) -> Self {
        let mut parts = Vec::new();
        if !bias_markers.is_empty() {
            parts.push(format!("Ignore {}", bias_markers.join(", ")));
        }
        for f in fields {
            parts.push(format!("extract {f} from {evidence} only"));
        }
        let text = format!("{}.", parts.join("; "));
        PatchRecord {
            author: PatchAuthor::Templated,
            ..PatchRecord::human(rubric, fields, &text)
        }
    }
}

/// Append a patch to the extraction prompt under a new prompt version.
pub fn apply_patch(rubric: &RubricSpec, patch: &PatchRecord) -> Result<RubricSpec> {
    if patch.schema_id != rubric.schema_id {
        return Err(Error::Patch(format!(
            "patch is for `{}`, rubric is `{}`",
            patch.schema_id, rubric.schema_id
        )));
    }
    if patch.prompt_version_from != rubric.prompt_version {
        return Err(Error::Patch(format!(
            "patch applies to prompt version {}, rubric is at version {}",
            patch.prompt_version_from, rubric.prompt_version
        )));
    }
    if patch.prompt_version_to != patch.prompt_version_from + 1 {
        return Err(Error::Patch("patch must advance the prompt version by exactly one".into()));
    }
    if let Some(f) = patch.targeted_fields.iter().find(|f| rubric.field(f).is_none()) {
        return Err(Error::Patch(format!("patch targets unknown field `{f}`")));
    }
    if patch.patch_text.trim().is_empty() {
        return Err(Error::Patch("patch text is empty".into()));
    }
    let mut next = rubric.clone();
    next.extraction_prompt = format!("{}\n{}", rubric.extraction_prompt.trim_end(), patch.patch_text.trim());
    next.prompt_version = patch.prompt_version_to;
    Ok(next)
}

/// `1 - current / free_form`, undefined when the free-form rate is zero.
pub fn cumulative_reduction(current: f64, free_form: f64) -> Option<f64> {
    (free_form > 0.0).then(|| 1.0 - current / free_form)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopReport {
    pub iteration: u32,
    pub schema_id: String,
    pub prompt_version_before: u32,
    pub prompt_version_after: u32,
    pub before: FlipCount,
    pub after: FlipCount,
    pub leaks_before: Vec<FieldLeakCount>,
    pub leaks_after: Vec<FieldLeakCount>,
    pub free_form_rate: Option<f64>,
    pub cumulative_reduction: Option<f64>,
    pub timestamp: DateTime<Utc>,
}

impl LoopReport {
    pub fn from_counts(
        iteration: u32,
        schema_id: &str,
        versions: (u32, u32),
        before: FlipCount,
        after: FlipCount,
        free_form_rate: Option<f64>,
    ) -> Self {
        LoopReport {
            iteration,
            schema_id: schema_id.to_owned(),
            prompt_version_before: versions.0,
            prompt_version_after: versions.1,
            cumulative_reduction: free_form_rate.and_then(|f| cumulative_reduction(after.rate, f)),
            before,
            after,
            leaks_before: Vec::new(),
            leaks_after: Vec::new(),
            free_form_rate,
            timestamp: Utc::now(),
        }
    }

    /// Recheck the stored arithmetic.
    pub fn is_consistent(&self) -> bool {
        let rate_ok = |c: &FlipCount| c.n > 0 && c.rate == c.k as f64 / c.n as f64;
        let expected = self.free_form_rate.and_then(|f| cumulative_reduction(self.after.rate, f));
        rate_ok(&self.before) && rate_ok(&self.after) && expected == self.cumulative_reduction
    }

    pub fn summary(&self) -> String {
        arrow_summary(self.free_form_rate, self.before.rate, self.after.rate)
    }
}

/// `free-form 6.0% → structured 1.7% → patched 1.3% (78% cumulative)`
pub fn arrow_summary(free_form: Option<f64>, structured: f64, patched: f64) -> String {
    let mut out = String::new();
    if let Some(f) = free_form {
        out.push_str(&format!("free-form {}% → ", percent(f, 1)));
    }
    out.push_str(&format!("structured {}% → patched {}%", percent(structured, 1), percent(patched, 1)));
    if let Some(r) = free_form.and_then(|f| cumulative_reduction(patched, f)) {
        out.push_str(&format!(" ({}% cumulative)", percent(r, 0)));
    }
    out
}

pub struct Verification {
    pub report: LoopReport,
    pub before: StructuredRun,
    pub after: StructuredRun,
}

/// Run the same pairs under both rubrics and compare.
#[allow(clippy::too_many_arguments)]
pub fn verify(
    pairs: &[VignettePair],
    model: &dyn DecisionModel,
    rubric_before: &RubricSpec,
    rubric_after: &RubricSpec,
    free_form_rate: Option<f64>,
    iteration: u32,
    parallelism: usize,
) -> Result<Verification> {
    if rubric_before.schema_id != rubric_after.schema_id {
        return Err(Error::Patch("before and after rubrics have different schemas".into()));
    }
    let before = run_structured(pairs, model, rubric_before, parallelism)?;
    let after = run_structured(pairs, model, rubric_after, parallelism)?;
    let count = |run: &StructuredRun| -> Result<FlipCount> {
        let (n, k, excluded) = FlipCount::tally(&run.indicators());
        FlipCount::from_counts(n, k, excluded)
    };
    let mut report = LoopReport::from_counts(
        iteration,
        &rubric_after.schema_id,
        (rubric_before.prompt_version, rubric_after.prompt_version),
        count(&before)?,
        count(&after)?,
        free_form_rate,
    );
    report.leaks_before = diagnose(&before.outcomes, rubric_before)?.leak_table;
    report.leaks_after = diagnose(&after.outcomes, rubric_after)?.leak_table;
    Ok(Verification { report, before, after })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LedgerEntry {
    Patch(PatchRecord),
    Report(LoopReport),
}

/// Append-only record of patches and loop reports.
#[derive(Debug, Clone)]
pub struct LoopLedger {
    path: PathBuf,
}

impl LoopLedger {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        LoopLedger { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, entry: &LedgerEntry) -> Result<()> {
        jsonl::append(&self.path, entry)
    }

    pub fn entries(&self) -> Result<Vec<LedgerEntry>> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        Ok(jsonl::read_plain(&self.path)?.into_iter().map(|n| n.value).collect())
    }

    /// Every stored report's arithmetic still holds.
    pub fn audit(&self) -> Result<()> {
        for (i, e) in self.entries()?.iter().enumerate() {
            if let LedgerEntry::Report(r) = e {
                if !r.is_consistent() {
                    return Err(Error::Report(format!("ledger entry {} has inconsistent arithmetic", i + 1)));
                }
            }
        }
        Ok(())
    }
}
