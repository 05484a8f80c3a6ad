//! Tables built from persisted run directories.
//!
//! Every number is recomputed from `records.jsonl`. Pooling sums flips and
//! included pairs before any rate is formed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{BiasType, Domain};
use crate::error::{Error, Result};
use crate::parsing::FlipIndicator;
use crate::run::{cells_from_records, read_manifest, read_records, RunManifest, RunMode, RunRecord, CELLS_JSON};
use crate::stats::{percent, round_half_away, wilson_interval, CellStats};

#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub records: Vec<RunRecord>,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        manifest: read_manifest(dir)?,
        records: read_records(dir)?,
    })
}

/// Flip counts over included pairs, plus the pairs that did not count.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub n: u64,
    pub k: u64,
    pub excluded: u64,
    pub failed: u64,
}

impl Tally {
    pub fn add(&mut self, flip: Option<FlipIndicator>) {
        match flip {
            Some(FlipIndicator::Flip) => {
                self.n += 1;
                self.k += 1;
            }
            Some(FlipIndicator::NoFlip) => self.n += 1,
            Some(FlipIndicator::Excluded) => self.excluded += 1,
            None => self.failed += 1,
        }
    }

    pub fn merge(&mut self, other: &Tally) {
        self.n += other.n;
        self.k += other.k;
        self.excluded += other.excluded;
        self.failed += other.failed;
    }

    pub fn rate(&self) -> Option<f64> {
        (self.n > 0).then(|| self.k as f64 / self.n as f64)
    }

    /// Percentage with one decimal, or "n/a" for an empty cell.
    pub fn display(&self) -> String {
        self.rate().map_or_else(|| "n/a".to_owned(), |r| percent(r, 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub model: String,
    pub by_bias: BTreeMap<BiasType, Tally>,
    pub overall: Tally,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledCell {
    pub domain: Domain,
    pub bias_type: BiasType,
    pub tally: Tally,
    pub models: usize,
    pub rate: Option<f64>,
    pub wilson_low: Option<f64>,
    pub wilson_high: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionRow {
    pub model: String,
    pub free: Tally,
    pub structured: Tally,
    /// Signed relative change in percent, `None` when the free-form rate is zero or missing.
    pub delta_pct: Option<f64>,
}

impl ReductionRow {
    pub fn delta_display(&self) -> String {
        format_delta(self.delta_pct)
    }
}

/// Relative change from `free` to `structured`, in percent.
pub fn relative_change(free: f64, structured: f64) -> Option<f64> {
    (free > 0.0).then(|| (structured - free) / free * 100.0)
}

/// Whole percent with an explicit sign; zero renders as "0%".
pub fn format_delta(delta: Option<f64>) -> String {
    let Some(d) = delta else {
        return "n/a".to_owned();
    };
    let r = round_half_away(d, 0);
    if r == 0.0 {
        "0%".to_owned()
    } else if r > 0.0 {
        format!("+{r:.0}%")
    } else {
        format!("-{:.0}%", -r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub runs: Vec<PathBuf>,
    pub corpus_hash: String,
    pub model_by_bias: Vec<ModelRow>,
    pub domain_by_bias: Vec<PooledCell>,
    pub reductions: Vec<ReductionRow>,
}

fn is_freeform(mode: RunMode) -> bool {
    matches!(mode, RunMode::Freeform | RunMode::Validate)
}

fn is_structured(mode: RunMode) -> bool {
    matches!(mode, RunMode::Structured | RunMode::Loop)
}

/// Build all tables. Runs must share a corpus hash.
pub fn build_report(runs: &[LoadedRun]) -> Result<Report> {
    let first = runs
        .first()
        .ok_or_else(|| Error::Report("at least one run directory is required".into()))?;
    let corpus_hash = first.manifest.corpus_hash.clone();
    for r in runs {
        if r.manifest.corpus_hash != corpus_hash {
            return Err(Error::Report(format!(
                "corpus hash mismatch: {} uses {}, {} uses {}",
                first.dir.display(),
                &corpus_hash[..12.min(corpus_hash.len())],
                r.dir.display(),
                &r.manifest.corpus_hash[..12.min(r.manifest.corpus_hash.len())],
            )));
        }
    }

    let mut free: BTreeMap<(String, Domain, BiasType), Tally> = BTreeMap::new();
    let mut structured: BTreeMap<String, Tally> = BTreeMap::new();
    for run in runs {
        let mode = run.manifest.mode;
        for rec in &run.records {
            if is_freeform(mode) {
                free.entry((rec.model.clone(), rec.domain, rec.bias_type))
                    .or_default()
                    .add(rec.flip());
            } else if is_structured(mode) {
                structured.entry(rec.model.clone()).or_default().add(rec.flip());
            }
        }
    }

    let mut rows: BTreeMap<String, ModelRow> = BTreeMap::new();
    let mut pooled: BTreeMap<(Domain, BiasType), (Tally, BTreeSet<String>)> = BTreeMap::new();
    for ((model, domain, bias), t) in &free {
        let row = rows.entry(model.clone()).or_insert_with(|| ModelRow {
            model: model.clone(),
            by_bias: BTreeMap::new(),
            overall: Tally::default(),
        });
        row.by_bias.entry(*bias).or_default().merge(t);
        row.overall.merge(t);
        let cell = pooled.entry((*domain, *bias)).or_default();
        cell.0.merge(t);
        cell.1.insert(model.clone());
    }

    let mut domain_by_bias = Vec::new();
    for ((domain, bias), (tally, models)) in pooled {
        let (lo, hi) = if tally.n > 0 {
            let (lo, hi) = wilson_interval(tally.k, tally.n, 0.95)?;
            (Some(lo), Some(hi))
        } else {
            (None, None)
        };
        domain_by_bias.push(PooledCell {
            domain,
            bias_type: bias,
            tally,
            models: models.len(),
            rate: tally.rate(),
            wilson_low: lo,
            wilson_high: hi,
        });
    }

    let reductions = structured
        .iter()
        .map(|(model, s)| {
            let f = rows.get(model).map(|r| r.overall).unwrap_or_default();
            ReductionRow {
                model: model.clone(),
                free: f,
                structured: *s,
                delta_pct: match (f.rate(), s.rate()) {
                    (Some(a), Some(b)) => relative_change(a, b),
                    _ => None,
                },
            }
        })
        .collect();

    Ok(Report {
        runs: runs.iter().map(|r| r.dir.clone()).collect(),
        corpus_hash,
        model_by_bias: rows.into_values().collect(),
        domain_by_bias,
        reductions,
    })
}

impl Report {
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        if !self.model_by_bias.is_empty() {
            let _ = writeln!(s, "Flip rates (%) by model and bias type");
            let _ = writeln!(s, "{:<24} {:>12} {:>12} {:>12} {:>10}", "model", "demographic", "authority", "framing", "overall");
            for row in &self.model_by_bias {
                let cell = |b: BiasType| row.by_bias.get(&b).map_or_else(|| "n/a".to_owned(), Tally::display);
                let _ = writeln!(
                    s,
                    "{:<24} {:>12} {:>12} {:>12} {:>10}",
                    row.model,
                    cell(BiasType::Demographic),
                    cell(BiasType::Authority),
                    cell(BiasType::Framing),
                    row.overall.display()
                );
            }
            let _ = writeln!(s);
        }
        if !self.domain_by_bias.is_empty() {
            let _ = writeln!(s, "Flip rates (%) by domain and bias type, pooled across models, 95% Wilson CI");
            for c in &self.domain_by_bias {
                let ci = match (c.wilson_low, c.wilson_high) {
                    (Some(lo), Some(hi)) => format!("[{}, {}]", percent(lo, 1), percent(hi, 1)),
                    _ => "n/a".to_owned(),
                };
                let _ = writeln!(
                    s,
                    "{:<20} {:<12} {:>6} {:<16} k={} n={} excluded={} failed={}",
                    c.domain.as_str(),
                    c.bias_type.as_str(),
                    c.tally.display(),
                    ci,
                    c.tally.k,
                    c.tally.n,
                    c.tally.excluded,
                    c.tally.failed
                );
            }
            let _ = writeln!(s);
        }
        if !self.reductions.is_empty() {
            let _ = writeln!(s, "Free-form vs structured flip rates (%)");
            let _ = writeln!(s, "{:<24} {:>8} {:>8} {:>8}", "model", "free", "struct", "delta");
            for r in &self.reductions {
                let _ = writeln!(
                    s,
                    "{:<24} {:>8} {:>8} {:>8}",
                    r.model,
                    r.free.display(),
                    r.structured.display(),
                    r.delta_display()
                );
            }
        }
        s
    }

    /// Write CSV, JSON and text renderings into `out`.
    pub fn write(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

        let path = out.join("model_by_bias.csv");
        let mut w = csv::Writer::from_writer(File::create(&path).map_err(|e| Error::io(&path, e))?);
        w.write_record(["model", "bias_type", "n", "k", "excluded", "failed", "flip_rate_pct"])?;
        for row in &self.model_by_bias {
            let entries = row
                .by_bias
                .iter()
                .map(|(b, t)| (b.as_str(), t))
                .chain(std::iter::once(("overall", &row.overall)));
            for (label, t) in entries {
                w.write_record([
                    row.model.clone(),
                    label.to_owned(),
                    t.n.to_string(),
                    t.k.to_string(),
                    t.excluded.to_string(),
                    t.failed.to_string(),
                    t.display(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = out.join("domain_by_bias.csv");
        let mut w = csv::Writer::from_writer(File::create(&path).map_err(|e| Error::io(&path, e))?);
        w.write_record(["domain", "bias_type", "models", "n", "k", "excluded", "failed", "flip_rate", "wilson_low", "wilson_high"])?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
        for c in &self.domain_by_bias {
            w.write_record([
                c.domain.as_str().to_owned(),
                c.bias_type.as_str().to_owned(),
                c.models.to_string(),
                c.tally.n.to_string(),
                c.tally.k.to_string(),
                c.tally.excluded.to_string(),
                c.tally.failed.to_string(),
                opt(c.rate),
                opt(c.wilson_low),
                opt(c.wilson_high),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = out.join("reductions.csv");
        let mut w = csv::Writer::from_writer(File::create(&path).map_err(|e| Error::io(&path, e))?);
        w.write_record(["model", "free_n", "free_k", "structured_n", "structured_k", "free_pct", "structured_pct", "delta"])?;
        for r in &self.reductions {
            w.write_record([
                r.model.clone(),
                r.free.n.to_string(),
                r.free.k.to_string(),
                r.structured.n.to_string(),
                r.structured.k.to_string(),
                r.free.display(),
                r.structured.display(),
                r.delta_display(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = out.join("report.json");
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&path, e))?;
        let path = out.join("report.txt");
        fs::write(&path, self.render_text()).map_err(|e| Error::io(&path, e))
    }
}

/// Load the run directories, build the report and write it to `out`.
pub fn cmd_report(dirs: &[PathBuf], out: &Path) -> Result<Report> {
    let runs = dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    let report = build_report(&runs)?;
    report.write(out)?;
    Ok(report)
}

/// Recompute each run's per-cell statistics and compare them with the
/// persisted ones. Returns one line per discrepancy.
pub fn verify_run(run: &LoadedRun) -> Result<Vec<String>> {
    let mut diffs = Vec::new();
    let path = run.dir.join(CELLS_JSON);
    let stored: Vec<CellStats> = if path.exists() {
        serde_json::from_str(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?
    } else {
        Vec::new()
    };
    let recomputed = if run.manifest.mode == RunMode::Controls {
        Vec::new()
    } else {
        cells_from_records(&run.records, run.manifest.null_rate.value, run.manifest.config.fdr_q)?
    };
    if stored.len() != recomputed.len() {
        diffs.push(format!(
            "{}: {} stored cells, {} recomputed",
            run.dir.display(),
            stored.len(),
            recomputed.len()
        ));
    }
    for (a, b) in stored.iter().zip(&recomputed) {
        if a != b {
            diffs.push(format!(
                "{}: {}/{}/{} stored k={} n={} p={:e}, recomputed k={} n={} p={:e}",
                run.dir.display(),
                a.model,
                a.domain,
                a.bias_type,
                a.k,
                a.n,
                a.p_value,
                b.k,
                b.n,
                b.p_value
            ));
        }
    }
    let mut tallies: BTreeMap<(String, Domain, BiasType), Tally> = BTreeMap::new();
    for rec in &run.records {
        tallies
            .entry((rec.model.clone(), rec.domain, rec.bias_type))
            .or_default()
            .add(rec.flip());
    }
    for c in &run.manifest.cells {
        let t = tallies
            .get(&(c.model.clone(), c.domain, c.bias_type))
            .copied()
            .unwrap_or_default();
        if (t.n, t.k, t.excluded, t.failed) != (c.n, c.k, c.excluded, c.failed) {
            diffs.push(format!(
                "{}: manifest counts for {}/{}/{} disagree with records",
                run.dir.display(),
                c.model,
                c.domain,
                c.bias_type
            ));
        }
    }
    Ok(diffs)
}
