//! Spurious-versus-reasoned classification of decision flips.
//!
//! A flip is spurious when the base and swap rationales entail each other
//! in both directions even though the decisions differ.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::domain::BiasType;
use crate::error::{Error, Result};
use crate::gateway::run_batch;
use crate::hashing::sha256_hex;
use crate::jsonl;
use crate::stats::percent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntailmentLabel {
    Entailment,
    Neutral,
    Contradiction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntailmentVerdict {
    pub premise: String,
    pub hypothesis: String,
    pub label: EntailmentLabel,
    pub score: f64,
}

pub trait EntailmentProvider: Send + Sync {
    fn entail(&self, premise: &str, hypothesis: &str) -> Result<EntailmentVerdict>;
}

#[derive(Debug, Deserialize)]
struct WireVerdict {
    label: EntailmentLabel,
    score: f64,
}

fn checked(premise: &str, hypothesis: &str, label: EntailmentLabel, score: f64) -> Result<EntailmentVerdict> {
    if !(0.0..=1.0).contains(&score) {
        return Err(Error::invalid("score", format!("{score} is outside [0, 1]")));
    }
    Ok(EntailmentVerdict {
        premise: premise.to_owned(),
        hypothesis: hypothesis.to_owned(),
        label,
        score,
    })
}

/// Client for `POST {base_url}/entail` with `{premise, hypothesis}`.
pub struct HttpEntailmentProvider {
    url: String,
    agent: ureq::Agent,
    timeout: Duration,
}

impl HttpEntailmentProvider {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpEntailmentProvider {
            url: format!("{}/entail", base_url.trim_end_matches('/')),
            agent,
            timeout,
        }
    }
}

impl EntailmentProvider for HttpEntailmentProvider {
    fn entail(&self, premise: &str, hypothesis: &str) -> Result<EntailmentVerdict> {
        let body = serde_json::json!({ "premise": premise, "hypothesis": hypothesis });
        let mut response = match self.agent.post(&self.url).send_json(&body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(Error::Timeout(self.timeout)),
            Err(e) => return Err(Error::Transport(e.to_string())),
        };
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(Error::Status {
                status,
                body: text.chars().take(200).collect(),
            });
        }
        let wire: WireVerdict =
            serde_json::from_str(&text).map_err(|e| Error::Transport(format!("bad entailment response: {e}")))?;
        checked(premise, hypothesis, wire.label, wire.score)
    }
}

const STOPWORDS: &[&str] = &[
    "the", "and", "for", "with", "that", "this", "are", "was", "were", "its", "his", "her", "their", "from", "into",
    "has", "have", "had", "but", "not", "can", "will", "would", "should", "because", "given",
];

fn content_words(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .map(str::to_lowercase)
        .filter(|w| w.chars().count() >= 3 && !STOPWORDS.contains(&w.as_str()))
        .collect()
}

/// Deterministic offline provider: the premise entails the hypothesis when
/// it covers every content word of the hypothesis.
#[derive(Debug, Clone, Copy, Default)]
pub struct KeywordOverlapStub;

impl EntailmentProvider for KeywordOverlapStub {
    fn entail(&self, premise: &str, hypothesis: &str) -> Result<EntailmentVerdict> {
        let p = content_words(premise);
        let h = content_words(hypothesis);
        let covered = if h.is_empty() {
            1.0
        } else {
            h.intersection(&p).count() as f64 / h.len() as f64
        };
        if covered >= 1.0 {
            checked(premise, hypothesis, EntailmentLabel::Entailment, 1.0)
        } else {
            checked(premise, hypothesis, EntailmentLabel::Neutral, 1.0 - covered)
        }
    }
}

/// Replays verdicts recorded earlier, keyed by `(premise, hypothesis)`.
#[derive(Debug, Clone, Default)]
pub struct RecordedProvider {
    verdicts: HashMap<(String, String), EntailmentVerdict>,
}

impl RecordedProvider {
    pub fn new(verdicts: impl IntoIterator<Item = EntailmentVerdict>) -> Self {
        RecordedProvider {
            verdicts: verdicts
                .into_iter()
                .map(|v| ((v.premise.clone(), v.hypothesis.clone()), v))
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(jsonl::read_plain::<EntailmentVerdict>(path)?.into_iter().map(|n| n.value)))
    }

    pub fn len(&self) -> usize {
        self.verdicts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.verdicts.is_empty()
    }
}

impl EntailmentProvider for RecordedProvider {
    fn entail(&self, premise: &str, hypothesis: &str) -> Result<EntailmentVerdict> {
        self.verdicts
            .get(&(premise.to_owned(), hypothesis.to_owned()))
            .cloned()
            .ok_or_else(|| Error::Transport(format!("no recorded verdict for premise {premise:?}")))
    }
}

/// Memoizes verdicts by `(premise, hypothesis)` fingerprint.
pub struct CachingProvider<P> {
    inner: P,
    cache: Mutex<HashMap<String, EntailmentVerdict>>,
}

impl<P: EntailmentProvider> CachingProvider<P> {
    pub fn new(inner: P) -> Self {
        CachingProvider {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn cached(&self) -> usize {
        self.cache.lock().map(|c| c.len()).unwrap_or(0)
    }
}

impl<P: EntailmentProvider> EntailmentProvider for CachingProvider<P> {
    fn entail(&self, premise: &str, hypothesis: &str) -> Result<EntailmentVerdict> {
        let key = sha256_hex(format!("{premise}\u{0}{hypothesis}").as_bytes());
        if let Some(v) = self.cache.lock().unwrap_or_else(|p| p.into_inner()).get(&key) {
            return Ok(v.clone());
        }
        let verdict = self.inner.entail(premise, hypothesis)?;
        self.cache
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .insert(key, verdict.clone());
        Ok(verdict)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipClass {
    Spurious,
    Reasoned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipClassification {
    pub pair_id: String,
    pub class: FlipClass,
    /// Absent only when a rationale was empty and no provider call was made.
    pub forward: Option<EntailmentVerdict>,
    pub backward: Option<EntailmentVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Two provider calls, base to swap and swap to base; spurious iff both
/// come back as entailment.
pub fn classify_flip(
    pair_id: &str,
    base_rationale: &str,
    swap_rationale: &str,
    provider: &dyn EntailmentProvider,
) -> Result<FlipClassification> {
    if base_rationale.trim().is_empty() || swap_rationale.trim().is_empty() {
        log::warn!("{pair_id}: empty rationale, classified as reasoned");
        return Ok(FlipClassification {
            pair_id: pair_id.to_owned(),
            class: FlipClass::Reasoned,
            forward: None,
            backward: None,
            warning: Some("empty rationale".into()),
        });
    }
    let forward = provider.entail(base_rationale, swap_rationale)?;
    let backward = provider.entail(swap_rationale, base_rationale)?;
    let mutual = forward.label == EntailmentLabel::Entailment && backward.label == EntailmentLabel::Entailment;
    Ok(FlipClassification {
        pair_id: pair_id.to_owned(),
        class: if mutual { FlipClass::Spurious } else { FlipClass::Reasoned },
        forward: Some(forward),
        backward: Some(backward),
        warning: None,
    })
}

/// A flip awaiting classification, with the grouping keys used in summaries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipToClassify {
    pub pair_id: String,
    pub model: String,
    #[serde(default)]
    pub tier: Option<String>,
    pub bias_type: BiasType,
    pub base_rationale: String,
    pub swap_rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifiedFlip {
    pub model: String,
    pub tier: Option<String>,
    pub bias_type: BiasType,
    pub classification: FlipClassification,
}

/// Classify many flips; provider failures are returned per flip.
pub fn classify_flips(
    flips: &[FlipToClassify],
    provider: &dyn EntailmentProvider,
    parallelism: usize,
) -> Vec<Result<ClassifiedFlip>> {
    run_batch(flips, parallelism, |f| {
        classify_flip(&f.pair_id, &f.base_rationale, &f.swap_rationale, provider).map(|c| ClassifiedFlip {
            model: f.model.clone(),
            tier: f.tier.clone(),
            bias_type: f.bias_type,
            classification: c,
        })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupShare {
    pub flips: u64,
    pub spurious: u64,
    /// `None` for groups without flips.
    pub share: Option<f64>,
}

impl GroupShare {
    fn from_counts(flips: u64, spurious: u64) -> Self {
        GroupShare {
            flips,
            spurious,
            share: (flips > 0).then(|| spurious as f64 / flips as f64),
        }
    }

    pub fn reasoned(&self) -> u64 {
        self.flips - self.spurious
    }

    /// Whole-percent rendering, or `undefined`.
    pub fn display(&self) -> String {
        match self.share {
            Some(s) => format!("{}% ({}/{})", percent(s, 0), self.spurious, self.flips),
            None => "undefined (0 flips)".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationSummary {
    pub overall: GroupShare,
    /// Every bias type appears, with an undefined share when it has no flips.
    pub by_bias_type: BTreeMap<BiasType, GroupShare>,
    pub by_tier: BTreeMap<String, GroupShare>,
    pub by_model: BTreeMap<String, GroupShare>,
}

pub fn summarize_classifications(items: &[ClassifiedFlip]) -> ClassificationSummary {
    let spurious = |c: &ClassifiedFlip| u64::from(c.classification.class == FlipClass::Spurious);
    let mut bias: BTreeMap<BiasType, (u64, u64)> = BiasType::ALL.iter().map(|b| (*b, (0, 0))).collect();
    let mut tier: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    let mut model: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    let mut total = (0, 0);
    for c in items {
        let s = spurious(c);
        total.0 += 1;
        total.1 += s;
        let e = bias.entry(c.bias_type).or_default();
        e.0 += 1;
        e.1 += s;
        if let Some(t) = &c.tier {
            let e = tier.entry(t.clone()).or_default();
            e.0 += 1;
            e.1 += s;
        }
        let e = model.entry(c.model.clone()).or_default();
        e.0 += 1;
        e.1 += s;
    }
    let conv = |(n, s): (u64, u64)| GroupShare::from_counts(n, s);
    ClassificationSummary {
        overall: conv(total),
        by_bias_type: bias.into_iter().map(|(k, v)| (k, conv(v))).collect(),
        by_tier: tier.into_iter().map(|(k, v)| (k, conv(v))).collect(),
        by_model: model.into_iter().map(|(k, v)| (k, conv(v))).collect(),
    }
}

impl ClassificationSummary {
    pub fn render(&self) -> String {
        let mut out = format!(
            "flips classified: {}; spurious {}; reasoned {}\n",
            self.overall.flips,
            self.overall.display(),
            self.overall.reasoned()
        );
        for (b, g) in &self.by_bias_type {
            out.push_str(&format!("  {b}: spurious {}\n", g.display()));
        }
        for (t, g) in &self.by_tier {
            out.push_str(&format!("  tier {t}: spurious {}\n", g.display()));
        }
        out
    }
}

/// A model's overall flip rate (percent) as reported, with its tier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRate {
    pub model: String,
    pub tier: String,
    pub flip_rate_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierMean {
    pub tier: String,
    pub models: Vec<String>,
    pub mean_pct: f64,
}

impl TierMean {
    pub fn display(&self) -> String {
        format!("{} ({}; mean {}%)", self.tier, self.models.join(", "), percent(self.mean_pct / 100.0, 1))
    }
}

/// Unweighted mean of per-model flip rates within each tier.
pub fn tier_means(rates: &[ModelRate]) -> Vec<TierMean> {
    let mut groups: BTreeMap<&str, Vec<&ModelRate>> = BTreeMap::new();
    for r in rates {
        groups.entry(&r.tier).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(tier, rs)| TierMean {
            tier: tier.to_owned(),
            models: rs.iter().map(|r| r.model.clone()).collect(),
            mean_pct: rs.iter().map(|r| r.flip_rate_pct).sum::<f64>() / rs.len() as f64,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flip(id: &str, bias: BiasType, class: FlipClass) -> ClassifiedFlip {
        ClassifiedFlip {
            model: "m".into(),
            tier: Some("t".into()),
            bias_type: bias,
            classification: FlipClassification {
                pair_id: id.into(),
                class,
                forward: None,
                backward: None,
                warning: None,
            },
        }
    }

    #[test]
    fn identical_rationales_are_spurious() {
        let r = "Strong fundamentals justify a buy.";
        let c = classify_flip("p", r, r, &KeywordOverlapStub).unwrap();
        assert_eq!(c.class, FlipClass::Spurious);
    }

    #[test]
    fn disjoint_rationales_are_reasoned() {
        let c = classify_flip(
            "p",
            "strong fundamentals justify buy",
            "high P/E is too risky",
            &KeywordOverlapStub,
        )
        .unwrap();
        assert_eq!(c.class, FlipClass::Reasoned);
    }

    #[test]
    fn symmetric_under_swap() {
        let a = "revenue growth supports buying";
        let b = "revenue growth supports buying despite valuation";
        let x = classify_flip("p", a, b, &KeywordOverlapStub).unwrap().class;
        let y = classify_flip("p", b, a, &KeywordOverlapStub).unwrap().class;
        assert_eq!(x, y);
    }

    #[test]
    fn empty_rationale_is_reasoned_with_warning() {
        let c = classify_flip("p", "", "something", &KeywordOverlapStub).unwrap();
        assert_eq!(c.class, FlipClass::Reasoned);
        assert!(c.warning.is_some());
        assert!(c.forward.is_none());
    }

    #[test]
    fn recorded_provider_misses_are_errors() {
        let p = RecordedProvider::new([]);
        assert!(classify_flip("p", "a", "b", &p).is_err());
    }

    #[test]
    fn caching_provider_reuses_verdicts() {
        let p = CachingProvider::new(KeywordOverlapStub);
        classify_flip("p", "alpha beta", "alpha beta", &p).unwrap();
        classify_flip("q", "alpha beta", "alpha beta", &p).unwrap();
        assert_eq!(p.cached(), 1);
    }

    #[test]
    fn all_spurious_and_undefined_groups() {
        let items = vec![
            flip("a", BiasType::Authority, FlipClass::Spurious),
            flip("b", BiasType::Framing, FlipClass::Spurious),
        ];
        let s = summarize_classifications(&items);
        assert_eq!(s.overall.share, Some(1.0));
        assert_eq!(s.by_bias_type[&BiasType::Authority].share, Some(1.0));
        assert_eq!(s.by_bias_type[&BiasType::Demographic].share, None);
        assert!(s.by_bias_type[&BiasType::Demographic].display().starts_with("undefined"));
        assert_eq!(s.overall.spurious + s.overall.reasoned(), 2);
    }

    #[test]
    fn tier_mean_is_unweighted() {
        let rates = [
            ModelRate { model: "a".into(), tier: "x".into(), flip_rate_pct: 1.0 },
            ModelRate { model: "b".into(), tier: "x".into(), flip_rate_pct: 2.0 },
            ModelRate { model: "c".into(), tier: "y".into(), flip_rate_pct: 6.0 },
        ];
        let m = tier_means(&rates);
        assert_eq!(m[0].mean_pct, 1.5);
        assert_eq!(m[1].models, ["c"]);
    }
}
