//! Flip rates, Wilson intervals, exact binomial tails, the randomization
//! win rate, Benjamini-Hochberg FDR and the noise baseline.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::factorial::ln_binomial;

use crate::domain::{BiasType, Domain};
use crate::error::{Error, Result};
use crate::parsing::FlipIndicator;

/// H0 flip rate used when no noise baseline has been measured.
pub const DEFAULT_P0: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipCount {
    /// Included (non-excluded) pairs.
    pub n: u64,
    /// Flips among included pairs.
    pub k: u64,
    pub excluded: u64,
    pub rate: f64,
}

impl FlipCount {
    pub fn tally<'a>(indicators: impl IntoIterator<Item = &'a FlipIndicator>) -> (u64, u64, u64) {
        let (mut n, mut k, mut excluded) = (0, 0, 0);
        for ind in indicators {
            match ind {
                FlipIndicator::Flip => {
                    n += 1;
                    k += 1;
                }
                FlipIndicator::NoFlip => n += 1,
                FlipIndicator::Excluded => excluded += 1,
            }
        }
        (n, k, excluded)
    }

    pub fn from_counts(n: u64, k: u64, excluded: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Stats("no included pairs: every indicator is excluded".into()));
        }
        if k > n {
            return Err(Error::Stats(format!("flip count {k} exceeds included count {n}")));
        }
        Ok(FlipCount {
            n,
            k,
            excluded,
            rate: k as f64 / n as f64,
        })
    }
}

/// Fraction of included pairs whose decision flipped. Excluded pairs leave the denominator.
pub fn flip_rate(indicators: &[FlipIndicator]) -> Result<FlipCount> {
    let (n, k, excluded) = FlipCount::tally(indicators);
    FlipCount::from_counts(n, k, excluded)
}

/// Two-sided standard normal critical value for `confidence`.
/// Round to `decimals` places with ties going away from zero.
///
/// A small relative nudge absorbs binary representation error so that
/// values such as `0.0125 * 100` round like their decimal spelling.
pub fn round_half_away(value: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    let scaled = value * scale;
    let nudged = scaled + scaled.signum() * scaled.abs().max(1.0) * 1e-12;
    nudged.round() / scale
}

/// A rate in `[0, 1]` as a percentage string, e.g. `0.0767 -> "7.7"`.
pub fn percent(rate: f64, decimals: u32) -> String {
    let v = round_half_away(rate * 100.0, decimals);
    let v = if v == 0.0 { 0.0 } else { v };
    format!("{v:.prec$}", prec = decimals as usize)
}

pub fn normal_quantile(confidence: f64) -> Result<f64> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Stats(format!("confidence {confidence} outside (0, 1)")));
    }
    let normal = Normal::standard();
    Ok(normal.inverse_cdf(1.0 - (1.0 - confidence) / 2.0))
}

/// Wilson score interval, clamped to `[0, 1]`.
///
/// The bounds are exact at the edges: `k = 0` gives a lower bound of 0 and
/// `k = n` an upper bound of 1.
pub fn wilson_interval(k: u64, n: u64, confidence: f64) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::Stats("wilson interval needs n >= 1".into()));
    }
    if k > n {
        return Err(Error::Stats(format!("k = {k} exceeds n = {n}")));
    }
    let z = normal_quantile(confidence)?;
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = z * z;
    let center = p + z2 / (2.0 * nf);
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    let denom = 1.0 + z2 / nf;
    let low = if k == 0 { 0.0 } else { ((center - half) / denom).clamp(0.0, 1.0) };
    let high = if k == n { 1.0 } else { ((center + half) / denom).clamp(0.0, 1.0) };
    Ok((low, high))
}

/// One-sided exact binomial p-value `P(X >= k)` for `X ~ Binomial(n, p0)`.
///
/// Terms are accumulated in log space relative to the largest one, so the
/// tail stays accurate when the leading term underflows.
pub fn binomial_test_exceeds(k: u64, n: u64, p0: f64) -> Result<f64> {
    if k > n {
        return Err(Error::Stats(format!("k = {k} exceeds n = {n}")));
    }
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(Error::Stats(format!("p0 = {p0} outside (0, 1)")));
    }
    if k == 0 {
        return Ok(1.0);
    }
    let ln_p = p0.ln();
    let ln_q = (-p0).ln_1p();
    let ln_ratio = ln_p - ln_q;
    let mut logs = Vec::with_capacity((n - k + 1) as usize);
    let mut l = ln_binomial(n, k) + k as f64 * ln_p + (n - k) as f64 * ln_q;
    logs.push(l);
    for i in k..n {
        l += ((n - i) as f64 / (i + 1) as f64).ln() + ln_ratio;
        logs.push(l);
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // smallest terms first
    let mut sorted = logs;
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite logs"));
    let scaled: f64 = sorted.iter().map(|x| (x - max).exp()).sum();
    Ok((max.exp() * scaled).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRateResult {
    pub n: usize,
    pub m: usize,
    pub win_count: u64,
    pub win_rate: f64,
    /// One-sided binomial p-value for H0: win rate <= 0.5.
    pub p_value: f64,
}

/// Fraction of vignettes whose targeted swap flips strictly more often than
/// the mean of its control perturbations.
pub fn win_rate(targeted: &[bool], controls: &[Vec<bool>]) -> Result<WinRateResult> {
    if targeted.is_empty() {
        return Err(Error::Stats("win rate needs at least one vignette".into()));
    }
    if targeted.len() != controls.len() {
        return Err(Error::Stats(format!(
            "{} targeted indicators but {} control lists",
            targeted.len(),
            controls.len()
        )));
    }
    let m = controls[0].len();
    if m == 0 {
        return Err(Error::Stats("control lists are empty".into()));
    }
    if let Some(i) = controls.iter().position(|c| c.len() != m) {
        return Err(Error::Stats(format!(
            "vignette {i} has {} controls, expected {m}",
            controls[i].len()
        )));
    }
    let win_count = targeted
        .iter()
        .zip(controls)
        .filter(|(d, c)| {
            let flips = c.iter().filter(|x| **x).count();
            // d > flips / m, in integers
            (**d as usize) * m > flips
        })
        .count() as u64;
    let n = targeted.len();
    Ok(WinRateResult {
        n,
        m,
        win_count,
        win_rate: win_count as f64 / n as f64,
        p_value: binomial_test_exceeds(win_count, n as u64, 0.5)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdrOutcome {
    /// In the caller's original order.
    pub p_values: Vec<f64>,
    pub q: f64,
    /// Largest rejected rank (1-based); 0 when nothing is rejected.
    pub k_star: usize,
    /// Indexed like `p_values`.
    pub rejected: Vec<bool>,
    /// Original indices in ascending p order (stable for ties).
    pub sorted_order: Vec<usize>,
}

impl FdrOutcome {
    pub fn rejections(&self) -> usize {
        self.k_star
    }
}

/// Benjamini-Hochberg step-up at level `q` over all supplied tests.
pub fn bh_fdr(p_values: &[f64], q: f64) -> Result<FdrOutcome> {
    if p_values.is_empty() {
        return Err(Error::Stats("bh_fdr needs at least one p-value".into()));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Stats(format!("q = {q} outside (0, 1)")));
    }
    if let Some(bad) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Stats(format!("p-value {bad} outside [0, 1]")));
    }
    let total = p_values.len();
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| p_values[a].partial_cmp(&p_values[b]).expect("validated"));
    let k_star = order
        .iter()
        .enumerate()
        .filter(|(i, &idx)| p_values[idx] <= (*i + 1) as f64 * q / total as f64)
        .map(|(i, _)| i + 1)
        .max()
        .unwrap_or(0);
    let mut rejected = vec![false; total];
    for &idx in &order[..k_star] {
        rejected[idx] = true;
    }
    Ok(FdrOutcome {
        p_values: p_values.to_vec(),
        q,
        k_star,
        rejected,
        sorted_order: order,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseBaseline {
    pub pooled: FlipCount,
    pub per_domain: BTreeMap<Domain, FlipCount>,
}

impl NoiseBaseline {
    pub fn rate(&self) -> f64 {
        self.pooled.rate
    }
}

/// Pooled and per-domain flip rates over control pairs.
pub fn noise_baseline(
    indicators: &BTreeMap<Domain, Vec<FlipIndicator>>,
    required_domains: &[Domain],
) -> Result<NoiseBaseline> {
    if indicators.is_empty() {
        return Err(Error::Stats("no control indicators".into()));
    }
    let missing: Vec<&str> = required_domains
        .iter()
        .filter(|d| indicators.get(d).is_none_or(|v| v.is_empty()))
        .map(|d| d.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Stats(format!(
            "no control pairs for domain(s): {}",
            missing.join(", ")
        )));
    }
    let mut per_domain = BTreeMap::new();
    let (mut n, mut k, mut excluded) = (0, 0, 0);
    for (domain, inds) in indicators {
        let (dn, dk, dx) = FlipCount::tally(inds);
        n += dn;
        k += dk;
        excluded += dx;
        if dn > 0 {
            per_domain.insert(*domain, FlipCount::from_counts(dn, dk, dx)?);
        }
    }
    Ok(NoiseBaseline {
        pooled: FlipCount::from_counts(n, k, excluded)?,
        per_domain,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullRateSource {
    NoiseBaseline,
    Default,
}

/// The H0 flip rate used for per-cell binomial tests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullRate {
    pub value: f64,
    pub source: NullRateSource,
}

impl NullRate {
    /// The measured baseline when it is a usable probability, else 0.05.
    pub fn choose(baseline: Option<f64>) -> Self {
        match baseline {
            Some(b) if b > 0.0 && b < 1.0 => NullRate {
                value: b,
                source: NullRateSource::NoiseBaseline,
            },
            Some(b) => {
                log::warn!("measured noise baseline {b} is degenerate, using {DEFAULT_P0}");
                NullRate::default()
            }
            None => NullRate::default(),
        }
    }
}

impl Default for NullRate {
    fn default() -> Self {
        NullRate {
            value: DEFAULT_P0,
            source: NullRateSource::Default,
        }
    }
}

/// Statistics for one (domain, bias type, model) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub domain: Domain,
    pub bias_type: BiasType,
    pub model: String,
    pub n: u64,
    pub k: u64,
    pub flip_rate: f64,
    pub wilson_low: f64,
    pub wilson_high: f64,
    pub p_value: f64,
    pub rejected_after_fdr: bool,
    pub excluded: u64,
}

pub fn cell_stats(domain: Domain, bias_type: BiasType, model: &str, count: &FlipCount, p0: f64) -> Result<CellStats> {
    let (wilson_low, wilson_high) = wilson_interval(count.k, count.n, 0.95)?;
    Ok(CellStats {
        domain,
        bias_type,
        model: model.to_owned(),
        n: count.n,
        k: count.k,
        flip_rate: count.rate,
        wilson_low,
        wilson_high,
        p_value: binomial_test_exceeds(count.k, count.n, p0)?,
        rejected_after_fdr: false,
        excluded: count.excluded,
    })
}

/// Run BH-FDR across `cells` and record the rejections on them.
pub fn apply_fdr(cells: &mut [CellStats], q: f64) -> Result<Option<FdrOutcome>> {
    if cells.is_empty() {
        return Ok(None);
    }
    let p: Vec<f64> = cells.iter().map(|c| c.p_value).collect();
    let outcome = bh_fdr(&p, q)?;
    for (cell, rejected) in cells.iter_mut().zip(&outcome.rejected) {
        cell.rejected_after_fdr = *rejected;
    }
    Ok(Some(outcome))
}

pub fn write_cells_csv(path: &Path, cells: &[CellStats]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record([
        "domain",
        "bias_type",
        "model",
        "n",
        "k",
        "flip_rate",
        "wilson_low",
        "wilson_high",
        "p_value",
        "rejected_after_fdr",
        "excluded",
    ])?;
    for c in cells {
        w.write_record([
            c.domain.as_str().to_owned(),
            c.bias_type.as_str().to_owned(),
            c.model.clone(),
            c.n.to_string(),
            c.k.to_string(),
            format!("{:.6}", c.flip_rate),
            format!("{:.6}", c.wilson_low),
            format!("{:.6}", c.wilson_high),
            format!("{:.6e}", c.p_value),
            c.rejected_after_fdr.to_string(),
            c.excluded.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use FlipIndicator::*;

    #[test]
    fn half_away_rounding() {
        assert_eq!(percent(3.0 / 24.0, 0), "13");
        assert_eq!(percent(-0.005, 0), "-1");
        assert_eq!(percent(23.0 / 300.0, 1), "7.7");
        assert_eq!(percent(0.0, 1), "0.0");
        assert_eq!(round_half_away(2.25, 1), 2.3);
        assert_eq!(round_half_away(-0.125, 2), -0.13);
    }

    #[test]
    fn flip_rate_counts() {
        let mut v = vec![NoFlip; 37];
        v.extend([Flip, Flip, Flip]);
        let c = flip_rate(&v).unwrap();
        assert_eq!((c.n, c.k), (40, 3));
        assert_eq!(c.rate, 0.075);
        assert_eq!(flip_rate(&[NoFlip; 5]).unwrap().rate, 0.0);
        assert_eq!(flip_rate(&[Flip; 5]).unwrap().rate, 1.0);
        assert!(flip_rate(&[Excluded, Excluded]).is_err());
        let c = flip_rate(&[Flip, Excluded, NoFlip]).unwrap();
        assert_eq!((c.n, c.k, c.excluded), (2, 1, 1));
    }

    #[test]
    fn wilson_examples() {
        let (lo, hi) = wilson_interval(5, 10, 0.95).unwrap();
        assert!((lo - 0.2366).abs() < 1e-3 && (hi - 0.7634).abs() < 1e-3, "{lo} {hi}");
        assert!(((lo + hi) / 2.0 - 0.5).abs() < 1e-12);

        let (lo, _) = wilson_interval(0, 300, 0.95).unwrap();
        assert_eq!(lo, 0.0);

        let (lo, hi) = wilson_interval(25, 110, 0.95).unwrap();
        assert!((lo - 0.157).abs() < 0.005 && (hi - 0.315).abs() < 0.005, "{lo} {hi}");
        assert!((normal_quantile(0.95).unwrap() - 1.96).abs() < 1e-3);
    }

    #[test]
    fn wilson_errors() {
        assert!(wilson_interval(1, 0, 0.95).is_err());
        assert!(wilson_interval(3, 2, 0.95).is_err());
        assert!(wilson_interval(1, 2, 1.0).is_err());
    }

    #[test]
    fn binomial_examples() {
        assert_eq!(binomial_test_exceeds(0, 10, 0.05).unwrap(), 1.0);
        let p = binomial_test_exceeds(10, 10, 0.05).unwrap();
        assert!((p / 0.05f64.powi(10) - 1.0).abs() < 1e-12, "{p}");
        assert!(binomial_test_exceeds(11, 10, 0.05).is_err());
        assert!(binomial_test_exceeds(1, 10, 0.0).is_err());
    }

    #[test]
    fn binomial_survives_underflowing_leading_term() {
        // P(X >= 1) for Binomial(5000, 0.5) is 1 - 2^-5000, i.e. 1.0 in f64
        let p = binomial_test_exceeds(1, 5000, 0.5).unwrap();
        assert_eq!(p, 1.0);
        let p = binomial_test_exceeds(2600, 5000, 0.5).unwrap();
        assert!(p > 0.0 && p < 0.01);
    }

    #[test]
    fn win_rate_examples() {
        let none = vec![vec![false; 20]; 3];
        assert_eq!(win_rate(&[true, true, true], &none).unwrap().win_rate, 1.0);
        assert_eq!(win_rate(&[false, false, false], &none).unwrap().win_rate, 0.0);

        // control means 0.2, 1.0, 0.0, 0.5 with M = 10
        let mk = |flips: usize| (0..10).map(|i| i < flips).collect::<Vec<_>>();
        let controls = vec![mk(2), mk(10), mk(0), mk(5)];
        let r = win_rate(&[true, true, false, true], &controls).unwrap();
        assert_eq!(r.win_count, 2);
        assert_eq!(r.win_rate, 0.5);
        assert_eq!(r.m, 10);
    }

    #[test]
    fn win_rate_errors() {
        assert!(win_rate(&[true], &[]).is_err());
        assert!(win_rate(&[true, false], &[vec![false; 3], vec![false; 2]]).is_err());
        assert!(win_rate(&[], &[]).is_err());
    }

    #[test]
    fn bh_examples() {
        let out = bh_fdr(&[1.0; 6], 0.05).unwrap();
        assert_eq!(out.k_star, 0);
        assert!(out.rejected.iter().all(|r| !r));

        let out = bh_fdr(&[0.01, 0.02, 0.03, 0.04, 0.5], 0.05).unwrap();
        assert_eq!(out.k_star, 4);
        assert_eq!(out.rejected, vec![true, true, true, true, false]);

        let out = bh_fdr(&[0.03], 0.05).unwrap();
        assert_eq!(out.rejected, vec![true]);

        // rejections map back to the original order
        let out = bh_fdr(&[0.5, 0.001, 0.9, 0.002], 0.05).unwrap();
        assert_eq!(out.rejected, vec![false, true, false, true]);
        assert!(bh_fdr(&[], 0.05).is_err());
        assert!(bh_fdr(&[1.5], 0.05).is_err());
    }

    #[test]
    fn noise_baseline_examples() {
        let all_stable: BTreeMap<_, _> = Domain::ALL.iter().map(|d| (*d, vec![NoFlip; 30])).collect();
        assert_eq!(noise_baseline(&all_stable, &Domain::ALL).unwrap().rate(), 0.0);

        let mut with_flips = all_stable.clone();
        for (i, d) in Domain::ALL.iter().enumerate() {
            let v = with_flips.get_mut(d).unwrap();
            for slot in v.iter_mut().take(if i < 5 { 2 } else { 1 }) {
                *slot = Flip;
            }
        }
        let b = noise_baseline(&with_flips, &Domain::ALL).unwrap();
        assert_eq!((b.pooled.k, b.pooled.n), (15, 300));
        assert_eq!(b.rate(), 0.05);

        let mut missing = all_stable;
        missing.remove(&Domain::Legal);
        let err = noise_baseline(&missing, &Domain::ALL).unwrap_err();
        assert!(err.to_string().contains("legal"));
    }

    #[test]
    fn null_rate_choice() {
        assert_eq!(NullRate::choose(None).source, NullRateSource::Default);
        assert_eq!(NullRate::choose(Some(0.0)).value, DEFAULT_P0);
        let r = NullRate::choose(Some(0.04));
        assert_eq!((r.value, r.source), (0.04, NullRateSource::NoiseBaseline));
    }
}

#[cfg(test)]
mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn wilson_contains_estimate(n in 1u64..3000, frac in 0.0f64..=1.0) {
            let k = ((n as f64) * frac).floor() as u64;
            let (lo, hi) = wilson_interval(k, n, 0.95).unwrap();
            let p = k as f64 / n as f64;
            prop_assert!(lo <= p + 1e-15 && p <= hi + 1e-15);
            prop_assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
        }

        #[test]
        fn wilson_shrinks_with_n(num in 0u64..=10, den in 1u64..=10, scale in 1u64..50) {
            prop_assume!(num <= den);
            let (a_lo, a_hi) = wilson_interval(num * scale, den * scale, 0.95).unwrap();
            let (b_lo, b_hi) = wilson_interval(num * scale * 2, den * scale * 2, 0.95).unwrap();
            prop_assert!(b_hi - b_lo <= a_hi - a_lo + 1e-12);
        }

        #[test]
        fn binomial_monotone_in_k(n in 1u64..200, p0 in 0.01f64..0.99) {
            let mut prev = 1.0;
            for k in 0..=n {
                let p = binomial_test_exceeds(k, n, p0).unwrap();
                prop_assert!(p <= prev * (1.0 + 1e-12));
                prev = p;
            }
        }
    }
}
