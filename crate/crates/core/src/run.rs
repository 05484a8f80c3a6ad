//! Run configuration, end-to-end execution of each run mode and the run
//! directory layout.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::audit_loop::{diagnose, Diagnosis};
use crate::domain::{BiasType, Domain};
use crate::error::{Error, Result};
use crate::gateway::{run_paired, DecisionModel, EndpointConfig, PairOutcome, PromptTemplate, ResponseCache};
use crate::hashing::sha256_hex;
use crate::interventions::{generate_controls, load_swap_pools, pool_words, ControlVocabulary};
use crate::jsonl::{self, SCHEMA_VERSION};
use crate::parsing::{FlipIndicator, Side};
use crate::rubric::{load_rubrics, run_structured, shipped_rubrics, RubricSpec, StructuredOutcome};
use crate::stats::{
    apply_fdr, cell_stats, noise_baseline, win_rate, write_cells_csv, CellStats, FlipCount, NoiseBaseline, NullRate,
    WinRateResult,
};
use crate::validator::{
    classify_flips, summarize_classifications, ClassificationSummary, ClassifiedFlip, EntailmentProvider,
    FlipToClassify, HttpEntailmentProvider, KeywordOverlapStub,
};
use crate::vignette::{load_controls, load_corpus, VignettePair};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const FAILURES_FILE: &str = "failures.jsonl";
pub const CELLS_CSV: &str = "cell_stats.csv";
pub const CELLS_JSON: &str = "cell_stats.json";
pub const BASELINE_FILE: &str = "noise_baseline.json";
pub const WINRATE_JSON: &str = "winrate.json";
pub const DIAGNOSIS_FILE: &str = "diagnosis.json";
pub const CLASSIFICATIONS_FILE: &str = "classifications.jsonl";
pub const CLASSIFICATION_SUMMARY_FILE: &str = "classification_summary.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Freeform,
    Structured,
    Controls,
    Winrate,
    Loop,
    Validate,
}

impl RunMode {
    pub const ALL: [RunMode; 6] = [
        RunMode::Freeform,
        RunMode::Structured,
        RunMode::Controls,
        RunMode::Winrate,
        RunMode::Loop,
        RunMode::Validate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Freeform => "freeform",
            RunMode::Structured => "structured",
            RunMode::Controls => "controls",
            RunMode::Winrate => "winrate",
            RunMode::Loop => "loop",
            RunMode::Validate => "validate",
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RunMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

fn all_bias_types() -> Vec<BiasType> {
    BiasType::ALL.to_vec()
}

fn all_domains() -> Vec<Domain> {
    Domain::ALL.to_vec()
}

fn default_n() -> usize {
    10
}

fn default_parallelism() -> usize {
    4
}

fn default_q() -> f64 {
    0.05
}

fn default_m() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: RunMode,
    pub corpus: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n")]
    pub n_per_area: usize,
    #[serde(default = "all_domains")]
    pub domains: Vec<Domain>,
    #[serde(default = "all_bias_types")]
    pub bias_types: Vec<BiasType>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_q")]
    pub fdr_q: f64,
    /// Control pairs for `controls` mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controls: Option<PathBuf>,
    /// A `noise_baseline.json` from an earlier controls run, used as p0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_baseline: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_template: Option<String>,
    /// Rubric file; the shipped rubrics are used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rubrics: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_m")]
    pub controls_per_vignette: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub swap_pools: Option<PathBuf>,
    /// Entailment service; the keyword-overlap stub is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entailment_url: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub model_tiers: BTreeMap<String, String>,
    #[serde(default)]
    pub endpoints: Vec<EndpointConfig>,
}

impl RunConfig {
    pub fn new(mode: RunMode, corpus: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            mode,
            corpus: corpus.into(),
            output_dir: output_dir.into(),
            seed: 0,
            n_per_area: default_n(),
            domains: all_domains(),
            bias_types: all_bias_types(),
            parallelism: default_parallelism(),
            fdr_q: default_q(),
            controls: None,
            noise_baseline: None,
            prompt_template: None,
            rubrics: None,
            cache_dir: None,
            controls_per_vignette: default_m(),
            vocabulary: None,
            swap_pools: None,
            entailment_url: None,
            model_tiers: BTreeMap::new(),
            endpoints: Vec::new(),
        }
    }

    /// Parse a TOML config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.output_dir);
        for p in [
            &mut self.controls,
            &mut self.noise_baseline,
            &mut self.rubrics,
            &mut self.cache_dir,
            &mut self.vocabulary,
            &mut self.swap_pools,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_per_area == 0 {
            return Err(Error::invalid("n_per_area", "must be at least 1"));
        }
        if self.domains.is_empty() {
            return Err(Error::invalid("domains", "must not be empty"));
        }
        if self.bias_types.is_empty() {
            return Err(Error::invalid("bias_types", "must not be empty"));
        }
        if !(self.fdr_q > 0.0 && self.fdr_q < 1.0) {
            return Err(Error::invalid("fdr_q", "must lie in (0, 1)"));
        }
        if self.parallelism == 0 {
            return Err(Error::invalid("parallelism", "must be at least 1"));
        }
        if self.endpoints.is_empty() {
            return Err(Error::invalid("endpoints", "at least one endpoint is required"));
        }
        let mut names = std::collections::BTreeSet::new();
        for e in &self.endpoints {
            e.validate()?;
            if !names.insert(e.name()) {
                return Err(Error::invalid("endpoints", format!("duplicate endpoint name `{}`", e.name())));
            }
        }
        if let Some(t) = &self.prompt_template {
            PromptTemplate::new(t.clone())?;
        }
        match self.mode {
            RunMode::Controls if self.controls.is_none() => {
                Err(Error::invalid("controls", "controls mode needs a control pair file"))
            }
            RunMode::Winrate if self.vocabulary.is_none() => {
                Err(Error::invalid("vocabulary", "winrate mode needs a vocabulary file"))
            }
            RunMode::Winrate if self.controls_per_vignette == 0 => {
                Err(Error::invalid("controls_per_vignette", "must be at least 1"))
            }
            _ => Ok(()),
        }
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).unwrap_or_default().as_bytes())
    }

    pub fn template(&self) -> Result<PromptTemplate> {
        match &self.prompt_template {
            Some(t) => PromptTemplate::new(t.clone()),
            None => Ok(PromptTemplate::default()),
        }
    }

    pub fn build_models(&self) -> Result<Vec<Box<dyn DecisionModel>>> {
        self.endpoints
            .iter()
            .map(|e| {
                let cache = match (&self.cache_dir, e) {
                    (Some(dir), EndpointConfig::Remote(_)) => Some(ResponseCache::open(dir, e.name())?),
                    _ => None,
                };
                e.build(cache)
            })
            .collect()
    }
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

pub fn run_dir_name(mode: RunMode, config_hash: &str, corpus_hash: &str) -> String {
    format!("{mode}-{}-{}", &config_hash[..12], &corpus_hash[..12])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSelection {
    pub domain: Domain,
    pub bias_type: BiasType,
    pub requested: usize,
    pub available: usize,
    pub selected: usize,
}

impl CellSelection {
    pub fn shortfall(&self) -> usize {
        self.requested.saturating_sub(self.selected)
    }
}

/// The first `n_per_area` pairs of each requested cell, in corpus order.
pub fn select_pairs(
    corpus: &[VignettePair],
    domains: &[Domain],
    bias_types: &[BiasType],
    n_per_area: usize,
) -> (Vec<VignettePair>, Vec<CellSelection>) {
    let mut taken: BTreeMap<(Domain, BiasType), usize> = BTreeMap::new();
    let mut available: BTreeMap<(Domain, BiasType), usize> = BTreeMap::new();
    let mut out = Vec::new();
    for p in corpus {
        if !domains.contains(&p.domain) || !bias_types.contains(&p.bias_type) {
            continue;
        }
        let key = (p.domain, p.bias_type);
        *available.entry(key).or_default() += 1;
        let t = taken.entry(key).or_default();
        if *t < n_per_area {
            *t += 1;
            out.push(p.clone());
        }
    }
    let mut cells = Vec::new();
    for &d in domains {
        for &b in bias_types {
            let selection = CellSelection {
                domain: d,
                bias_type: b,
                requested: n_per_area,
                available: available.get(&(d, b)).copied().unwrap_or(0),
                selected: taken.get(&(d, b)).copied().unwrap_or(0),
            };
            if selection.shortfall() > 0 {
                log::warn!(
                    "{d}/{b}: {} of {n_per_area} requested pairs available",
                    selection.selected
                );
            }
            cells.push(selection);
        }
    }
    (out, cells)
}

/// One pair's outcome under one model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: String,
    pub domain: Domain,
    pub bias_type: BiasType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freeform: Option<PairOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structured: Option<StructuredOutcome>,
}

impl RunRecord {
    pub fn pair_id(&self) -> &str {
        match (&self.freeform, &self.structured) {
            (Some(o), _) => o.pair_id(),
            (_, Some(o)) => o.pair_id(),
            _ => "",
        }
    }

    /// `None` when the pair failed.
    pub fn flip(&self) -> Option<FlipIndicator> {
        match (&self.freeform, &self.structured) {
            (Some(o), _) => o.flip(),
            (_, Some(o)) => o.flip(),
            _ => None,
        }
    }

    pub fn failure(&self) -> Option<FailureRecord> {
        let (pair_id, side, reason) = match (&self.freeform, &self.structured) {
            (Some(PairOutcome::Failed { pair_id, side, reason }), _) => (pair_id, side, reason),
            (_, Some(StructuredOutcome::Failed { pair_id, side, reason })) => (pair_id, side, reason),
            _ => return None,
        };
        Some(FailureRecord {
            model: self.model.clone(),
            pair_id: pair_id.clone(),
            side: *side,
            reason: reason.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub model: String,
    pub pair_id: String,
    pub side: Side,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCount {
    pub domain: Domain,
    pub bias_type: BiasType,
    pub model: String,
    pub requested: usize,
    pub available: usize,
    pub n: u64,
    pub k: u64,
    pub excluded: u64,
    pub failed: u64,
    pub shortfall: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Clean,
    Partial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub mode: RunMode,
    pub config: RunConfig,
    pub config_hash: String,
    pub corpus_hash: String,
    pub code_version: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub models: Vec<serde_json::Value>,
    pub prompt_template: String,
    pub null_rate: NullRate,
    pub cells: Vec<CellCount>,
    pub prompts_issued: usize,
    pub failures: usize,
    pub status: RunStatus,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

/// Counts per cell, joined with the selection bookkeeping.
pub fn cell_counts(records: &[RunRecord], selection: &[CellSelection], models: &[String]) -> Vec<CellCount> {
    let mut tallies: BTreeMap<(String, Domain, BiasType), (u64, u64, u64, u64)> = BTreeMap::new();
    for r in records {
        let e = tallies.entry((r.model.clone(), r.domain, r.bias_type)).or_default();
        match r.flip() {
            Some(FlipIndicator::Flip) => {
                e.0 += 1;
                e.1 += 1;
            }
            Some(FlipIndicator::NoFlip) => e.0 += 1,
            Some(FlipIndicator::Excluded) => e.2 += 1,
            None => e.3 += 1,
        }
    }
    let mut out = Vec::new();
    for m in models {
        for s in selection {
            let (n, k, excluded, failed) = tallies
                .get(&(m.clone(), s.domain, s.bias_type))
                .copied()
                .unwrap_or_default();
            out.push(CellCount {
                domain: s.domain,
                bias_type: s.bias_type,
                model: m.clone(),
                requested: s.requested,
                available: s.available,
                n,
                k,
                excluded,
                failed,
                shortfall: s.shortfall(),
            });
        }
    }
    out
}

/// Per-cell statistics with BH-FDR applied across all cells of the run.
/// Cells without any included pair are omitted.
pub fn cells_from_records(records: &[RunRecord], p0: f64, q: f64) -> Result<Vec<CellStats>> {
    let mut groups: BTreeMap<(String, Domain, BiasType), Vec<FlipIndicator>> = BTreeMap::new();
    for r in records {
        if let Some(f) = r.flip() {
            groups.entry((r.model.clone(), r.domain, r.bias_type)).or_default().push(f);
        }
    }
    let mut cells = Vec::new();
    for ((model, domain, bias), inds) in groups {
        let (n, k, x) = FlipCount::tally(&inds);
        if n == 0 {
            log::warn!("{model} {domain}/{bias}: every pair excluded, no statistics");
            continue;
        }
        let count = FlipCount::from_counts(n, k, x)?;
        cells.push(cell_stats(domain, bias, &model, &count, p0)?);
    }
    apply_fdr(&mut cells, q)?;
    Ok(cells)
}

/// Stored with controls runs and read back as the null rate of later runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseBaselineRecord {
    pub pooled: NoiseBaseline,
    pub per_model: BTreeMap<String, NoiseBaseline>,
}

pub fn load_null_rate(path: Option<&Path>) -> Result<NullRate> {
    let Some(path) = path else {
        return Ok(NullRate::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let record: NoiseBaselineRecord = serde_json::from_str(&text)?;
    Ok(NullRate::choose(Some(record.pooled.rate())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRateCell {
    pub model: String,
    /// `None` for the per-model row pooled over all cells.
    pub domain: Option<Domain>,
    pub bias_type: Option<BiasType>,
    pub result: WinRateResult,
    /// Vignettes left out because the targeted pair or a control was unusable.
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisEntry {
    pub model: String,
    pub domain: Domain,
    pub schema_id: String,
    pub diagnosis: Diagnosis,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let path = dir.join(RECORDS_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(jsonl::read_plain(&path)?.into_iter().map(|n| n.value).collect())
}

/// One rubric per domain from `path`, or the shipped set.
pub fn rubric_map(path: Option<&Path>) -> Result<BTreeMap<Domain, RubricSpec>> {
    let list = match path {
        Some(p) => load_rubrics(p)?,
        None => shipped_rubrics()?,
    };
    let mut out = BTreeMap::new();
    for r in list {
        if out.insert(r.domain, r.clone()).is_some() {
            return Err(Error::Config(format!("more than one rubric for {}", r.domain)));
        }
    }
    Ok(out)
}

fn freeform_records(
    pairs: &[VignettePair],
    models: &[Box<dyn DecisionModel>],
    template: &PromptTemplate,
    parallelism: usize,
) -> (Vec<RunRecord>, usize) {
    let mut records = Vec::new();
    let mut issued = 0;
    for model in models {
        let run = run_paired(pairs, model.as_ref(), template, parallelism);
        issued += run.prompts_issued;
        for (pair, outcome) in pairs.iter().zip(run.outcomes) {
            records.push(RunRecord {
                model: model.name().to_owned(),
                domain: pair.domain,
                bias_type: pair.bias_type,
                freeform: Some(outcome),
                structured: None,
            });
        }
    }
    (records, issued)
}

fn structured_records(
    pairs: &[VignettePair],
    models: &[Box<dyn DecisionModel>],
    rubrics: &BTreeMap<Domain, RubricSpec>,
    parallelism: usize,
) -> Result<(Vec<RunRecord>, usize, Vec<DiagnosisEntry>)> {
    let mut by_domain: BTreeMap<Domain, Vec<VignettePair>> = BTreeMap::new();
    for p in pairs {
        by_domain.entry(p.domain).or_default().push(p.clone());
    }
    let mut records = Vec::new();
    let mut issued = 0;
    let mut diagnoses = Vec::new();
    for model in models {
        for (domain, group) in &by_domain {
            let rubric = rubrics
                .get(domain)
                .ok_or_else(|| Error::Config(format!("no rubric for domain {domain}")))?;
            let run = run_structured(group, model.as_ref(), rubric, parallelism)?;
            issued += run.prompts_issued;
            diagnoses.push(DiagnosisEntry {
                model: model.name().to_owned(),
                domain: *domain,
                schema_id: rubric.schema_id.clone(),
                diagnosis: diagnose(&run.outcomes, rubric)?,
            });
            for (pair, outcome) in group.iter().zip(run.outcomes) {
                records.push(RunRecord {
                    model: model.name().to_owned(),
                    domain: pair.domain,
                    bias_type: pair.bias_type,
                    freeform: None,
                    structured: Some(outcome),
                });
            }
        }
    }
    Ok((records, issued, diagnoses))
}

/// Execute a run with the endpoints named in the config.
pub fn cmd_run(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    let models = config.build_models()?;
    execute(config, &models)
}

/// Execute a run against already constructed models.
pub fn execute(config: &RunConfig, models: &[Box<dyn DecisionModel>]) -> Result<RunOutcome> {
    if config.n_per_area == 0 || config.domains.is_empty() || config.bias_types.is_empty() {
        config.validate()?;
    }
    if models.is_empty() {
        return Err(Error::invalid("endpoints", "at least one model is required"));
    }
    let started_at = Utc::now();
    let template = config.template()?;
    let corpus = load_corpus(&config.corpus, SCHEMA_VERSION)?;
    let corpus_hash = file_hash(&config.corpus)?;
    let config_hash = config.hash();
    let dir = config.output_dir.join(run_dir_name(config.mode, &config_hash, &corpus_hash));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let null_rate = load_null_rate(config.noise_baseline.as_deref())?;
    let model_names: Vec<String> = models.iter().map(|m| m.name().to_owned()).collect();
    let (pairs, selection) = select_pairs(&corpus, &config.domains, &config.bias_types, config.n_per_area);

    let (records, issued) = match config.mode {
        RunMode::Freeform | RunMode::Validate => freeform_records(&pairs, models, &template, config.parallelism),
        RunMode::Structured | RunMode::Loop => {
            let rubrics = rubric_map(config.rubrics.as_deref())?;
            let (records, issued, diagnoses) = structured_records(&pairs, models, &rubrics, config.parallelism)?;
            if config.mode == RunMode::Loop {
                write_json(&dir.join(DIAGNOSIS_FILE), &diagnoses)?;
            }
            (records, issued)
        }
        RunMode::Controls => {
            let mut records = Vec::new();
            let issued = run_controls(config, models, &template, &dir, &mut records)?;
            (records, issued)
        }
        RunMode::Winrate => run_winrate(config, models, &template, &pairs, &dir)?,
    };

    let failures: Vec<FailureRecord> = records.iter().filter_map(RunRecord::failure).collect();
    jsonl::write_plain(&dir.join(RECORDS_FILE), &records)?;
    jsonl::write_plain(&dir.join(FAILURES_FILE), &failures)?;

    let mut cells = Vec::new();
    if config.mode != RunMode::Controls {
        let stats = cells_from_records(&records, null_rate.value, config.fdr_q)?;
        write_cells_csv(&dir.join(CELLS_CSV), &stats)?;
        write_json(&dir.join(CELLS_JSON), &stats)?;
        cells = cell_counts(&records, &selection, &model_names);
    }
    if config.mode == RunMode::Validate {
        run_validation(config, &records, &dir)?;
    }

    let manifest = RunManifest {
        mode: config.mode,
        config: config.clone(),
        config_hash,
        corpus_hash,
        code_version: env!("CARGO_PKG_VERSION").to_owned(),
        started_at,
        finished_at: Utc::now(),
        models: models.iter().map(|m| m.metadata()).collect(),
        prompt_template: template.text().to_owned(),
        null_rate,
        cells,
        prompts_issued: issued,
        failures: failures.len(),
        status: if failures.is_empty() {
            RunStatus::Clean
        } else {
            RunStatus::Partial
        },
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    log::info!("run written to {}", dir.display());
    Ok(RunOutcome { dir, manifest })
}

fn run_controls(
    config: &RunConfig,
    models: &[Box<dyn DecisionModel>],
    template: &PromptTemplate,
    dir: &Path,
    records: &mut Vec<RunRecord>,
) -> Result<usize> {
    let path = config
        .controls
        .as_deref()
        .ok_or_else(|| Error::invalid("controls", "controls mode needs a control pair file"))?;
    let controls: Vec<VignettePair> = load_controls(path, SCHEMA_VERSION)?
        .into_iter()
        .filter(|c| config.domains.contains(&c.domain))
        .map(|c| c.as_pair())
        .collect();
    let mut issued = 0;
    let mut pooled: BTreeMap<Domain, Vec<FlipIndicator>> = BTreeMap::new();
    let mut per_model = BTreeMap::new();
    for model in models {
        let run = run_paired(&controls, model.as_ref(), template, config.parallelism);
        issued += run.prompts_issued;
        let mut mine: BTreeMap<Domain, Vec<FlipIndicator>> = BTreeMap::new();
        for (pair, outcome) in controls.iter().zip(run.outcomes) {
            if let Some(f) = outcome.flip() {
                mine.entry(pair.domain).or_default().push(f);
                pooled.entry(pair.domain).or_default().push(f);
            }
            records.push(RunRecord {
                model: model.name().to_owned(),
                domain: pair.domain,
                bias_type: pair.bias_type,
                freeform: Some(outcome),
                structured: None,
            });
        }
        per_model.insert(model.name().to_owned(), noise_baseline(&mine, &config.domains)?);
    }
    let record = NoiseBaselineRecord {
        pooled: noise_baseline(&pooled, &config.domains)?,
        per_model,
    };
    write_json(&dir.join(BASELINE_FILE), &record)?;
    Ok(issued)
}

fn run_winrate(
    config: &RunConfig,
    models: &[Box<dyn DecisionModel>],
    template: &PromptTemplate,
    pairs: &[VignettePair],
    dir: &Path,
) -> Result<(Vec<RunRecord>, usize)> {
    let excluded = match &config.swap_pools {
        Some(p) => pool_words(&load_swap_pools(p)?),
        None => Default::default(),
    };
    let vocab_path = config
        .vocabulary
        .as_deref()
        .ok_or_else(|| Error::invalid("vocabulary", "winrate mode needs a vocabulary file"))?;
    let vocab = ControlVocabulary::load(vocab_path, &excluded)?;
    let m = config.controls_per_vignette;
    let mut control_pairs = Vec::with_capacity(pairs.len() * m);
    for pair in pairs {
        for c in generate_controls(pair, m, &vocab, config.seed)? {
            control_pairs.push(VignettePair {
                id: format!("{}#control-{:02}", pair.id, c.variant_index),
                swap_text: c.perturbed_text,
                ..pair.clone()
            });
        }
    }
    let (records, mut issued) = freeform_records(pairs, models, template, config.parallelism);
    let mut cells = Vec::new();
    let mut control_records = Vec::new();
    for model in models {
        let run = run_paired(&control_pairs, model.as_ref(), template, config.parallelism);
        issued += run.prompts_issued;
        let targeted: Vec<&RunRecord> = records.iter().filter(|r| r.model == model.name()).collect();
        let mut groups: BTreeMap<(Domain, BiasType), (Vec<bool>, Vec<Vec<bool>>, usize)> = BTreeMap::new();
        for (i, rec) in targeted.iter().enumerate() {
            let controls = &run.outcomes[i * m..(i + 1) * m];
            let entry = groups.entry((rec.domain, rec.bias_type)).or_default();
            let d = match rec.flip() {
                Some(FlipIndicator::Flip) => true,
                Some(FlipIndicator::NoFlip) => false,
                _ => {
                    entry.2 += 1;
                    continue;
                }
            };
            let c: Option<Vec<bool>> = controls
                .iter()
                .map(|o| match o.flip() {
                    Some(FlipIndicator::Flip) => Some(true),
                    Some(FlipIndicator::NoFlip) => Some(false),
                    _ => None,
                })
                .collect();
            match c {
                Some(c) => {
                    entry.0.push(d);
                    entry.1.push(c);
                }
                None => entry.2 += 1,
            }
        }
        for (pair, outcome) in control_pairs.iter().zip(run.outcomes) {
            control_records.push(RunRecord {
                model: model.name().to_owned(),
                domain: pair.domain,
                bias_type: pair.bias_type,
                freeform: Some(outcome),
                structured: None,
            });
        }
        let (mut all_d, mut all_c, mut all_dropped) = (Vec::new(), Vec::new(), 0);
        for ((domain, bias), (d, c, dropped)) in groups {
            all_dropped += dropped;
            if d.is_empty() {
                continue;
            }
            cells.push(WinRateCell {
                model: model.name().to_owned(),
                domain: Some(domain),
                bias_type: Some(bias),
                result: win_rate(&d, &c)?,
                dropped,
            });
            all_d.extend(d);
            all_c.extend(c);
        }
        if !all_d.is_empty() {
            cells.push(WinRateCell {
                model: model.name().to_owned(),
                domain: None,
                bias_type: None,
                result: win_rate(&all_d, &all_c)?,
                dropped: all_dropped,
            });
        }
    }
    jsonl::write_plain(&dir.join("control_records.jsonl"), &control_records)?;
    write_json(&dir.join(WINRATE_JSON), &cells)?;
    Ok((records, issued))
}

/// Completed free-form flips, ready for entailment checks.
pub fn collect_flips(records: &[RunRecord], tiers: &BTreeMap<String, String>) -> Vec<FlipToClassify> {
    records
        .iter()
        .filter_map(|r| match &r.freeform {
            Some(PairOutcome::Completed {
                pair_id,
                base,
                swap,
                flip: FlipIndicator::Flip,
            }) => Some(FlipToClassify {
                pair_id: pair_id.clone(),
                model: r.model.clone(),
                tier: tiers.get(&r.model).cloned(),
                bias_type: r.bias_type,
                base_rationale: base.rationale.clone(),
                swap_rationale: swap.rationale.clone(),
            }),
            _ => None,
        })
        .collect()
}

/// Classify the flips among `records` and write the results into `dir`.
pub fn validate_flips(
    records: &[RunRecord],
    tiers: &BTreeMap<String, String>,
    provider: &dyn EntailmentProvider,
    parallelism: usize,
    dir: &Path,
) -> Result<ClassificationSummary> {
    let flips = collect_flips(records, tiers);
    let classified = classify_flips(&flips, provider, parallelism)
        .into_iter()
        .collect::<Result<Vec<ClassifiedFlip>>>()?;
    jsonl::write_plain(&dir.join(CLASSIFICATIONS_FILE), &classified)?;
    let summary = summarize_classifications(&classified);
    write_json(&dir.join(CLASSIFICATION_SUMMARY_FILE), &summary)?;
    Ok(summary)
}

fn run_validation(config: &RunConfig, records: &[RunRecord], dir: &Path) -> Result<ClassificationSummary> {
    let provider: Box<dyn EntailmentProvider> = match &config.entailment_url {
        Some(url) => Box::new(HttpEntailmentProvider::new(url, std::time::Duration::from_secs(60))),
        None => Box::new(KeywordOverlapStub),
    };
    validate_flips(records, &config.model_tiers, provider.as_ref(), config.parallelism, dir)
}

/// Field diagnosis of the structured outcomes in `records`, per model and domain.
pub fn diagnose_records(records: &[RunRecord], rubrics: &BTreeMap<Domain, RubricSpec>) -> Result<Vec<DiagnosisEntry>> {
    let mut groups: BTreeMap<(String, Domain), Vec<StructuredOutcome>> = BTreeMap::new();
    for r in records {
        if let Some(o) = &r.structured {
            groups.entry((r.model.clone(), r.domain)).or_default().push(o.clone());
        }
    }
    let mut out = Vec::new();
    for ((model, domain), outcomes) in groups {
        let rubric = rubrics
            .get(&domain)
            .ok_or_else(|| Error::Config(format!("no rubric for domain {domain}")))?;
        out.push(DiagnosisEntry {
            model,
            domain,
            schema_id: rubric.schema_id.clone(),
            diagnosis: diagnose(&outcomes, rubric)?,
        });
    }
    Ok(out)
}

pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::SyntheticJudgeConfig;
    use crate::vignette::{save_corpus, Provenance};

    fn corpus(n: usize) -> Vec<VignettePair> {
        let mut out = Vec::new();
        for d in [Domain::Finance, Domain::Lending] {
            for i in 0..n {
                out.push(VignettePair {
                    id: format!("{d}-authority-{i:04}"),
                    domain: d,
                    bias_type: BiasType::Authority,
                    context: "ctx".into(),
                    base_text: format!("Case {i}. A senior analyst says yes."),
                    swap_text: format!("Case {i}. A random blog says yes."),
                    decision_prompt: "Decide:".into(),
                    options: vec!["Yes".into(), "No".into()],
                    provenance: Provenance::Template,
                });
            }
        }
        out
    }

    fn config(dir: &Path, mode: RunMode) -> RunConfig {
        let mut c = RunConfig::new(mode, dir.join("corpus.jsonl"), dir.join("runs"));
        c.domains = vec![Domain::Finance, Domain::Lending];
        c.bias_types = vec![BiasType::Authority];
        c.n_per_area = 5;
        c.endpoints = vec![EndpointConfig::Synthetic(SyntheticJudgeConfig {
            name: "judge".into(),
            seed: 1,
            bias_strengths: BTreeMap::from([(BiasType::Authority, 0.5)]),
            trigger_markers: BTreeMap::from([(BiasType::Authority, vec!["A random blog".into()])]),
            masked_markers: vec!["A senior analyst".into()],
            ..Default::default()
        })];
        c
    }

    #[test]
    fn selection_reports_shortfall() {
        let (pairs, cells) = select_pairs(&corpus(3), &[Domain::Finance], &[BiasType::Authority, BiasType::Framing], 5);
        assert_eq!(pairs.len(), 3);
        assert_eq!(cells[0].shortfall(), 2);
        assert_eq!(cells[1].available, 0);
    }

    #[test]
    fn config_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = config(dir.path(), RunMode::Freeform);
        assert!(c.validate().is_ok());
        c.n_per_area = 0;
        assert!(c.validate().is_err());
        let mut c = config(dir.path(), RunMode::Freeform);
        c.fdr_q = 1.0;
        assert!(c.validate().is_err());
        let mut c = config(dir.path(), RunMode::Controls);
        assert!(c.validate().is_err());
        c.endpoints.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn freeform_run_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        save_corpus(&dir.path().join("corpus.jsonl"), &corpus(8)).unwrap();
        let c = config(dir.path(), RunMode::Freeform);
        let a = cmd_run(&c).unwrap();
        let first = fs::read(a.dir.join(CELLS_CSV)).unwrap();
        let b = cmd_run(&c).unwrap();
        assert_eq!(a.dir, b.dir);
        assert_eq!(first, fs::read(b.dir.join(CELLS_CSV)).unwrap());
        assert_eq!(a.manifest.status, RunStatus::Clean);
        assert_eq!(a.manifest.prompts_issued, 20);
        assert_eq!(a.manifest.cells.len(), 2);
        assert!(a.dir.file_name().unwrap().to_str().unwrap().starts_with("freeform-"));
    }

    #[test]
    fn toml_config_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(
            &path,
            r#"
mode = "structured"
corpus = "corpus.jsonl"
output_dir = "runs"
n_per_area = 50
domains = ["finance"]
bias_types = ["authority", "framing"]

[[endpoints]]
kind = "synthetic"
name = "judge"
seed = 7
bias_strengths = { authority = 0.2 }
trigger_markers = { authority = ["a retail investor blog"] }

[[endpoints]]
kind = "remote"
name = "remote-model"
base_url = "https://example.invalid/v1"
api_key_env = "EXAMPLE_KEY"
temperature = 0.1
max_tokens = 500
"#,
        )
        .unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.mode, RunMode::Structured);
        assert_eq!(c.corpus, dir.path().join("corpus.jsonl"));
        assert_eq!(c.endpoints.len(), 2);
        c.validate().unwrap();
    }
}
