//! Intervention operators and the control perturbations used as baselines.
//!
//! An intervention swaps one decision-irrelevant feature (identity,
//! credential, framing) and reports exactly which spans it touched. Controls
//! are the null counterpart: random equal-length word substitutions in the
//! same region, or single punctuation/synonym edits anywhere.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{BiasType, Domain};
use crate::error::{Error, Result};
use crate::hashing::derive_u64;
use crate::jsonl;
use crate::vignette::{ControlPair, PerturbationKind, VignettePair};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMarker {
    /// A named template slot; its bound value is what gets swapped.
    Slot(String),
    /// A literal span expected verbatim in the text.
    Literal(String),
}

impl TargetMarker {
    pub fn label(&self) -> String {
        match self {
            TargetMarker::Slot(name) => format!("slot:{name}"),
            TargetMarker::Literal(text) => format!("literal:{text}"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    #[default]
    Indexed,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub bias_type: BiasType,
    pub name: String,
    pub target_markers: Vec<TargetMarker>,
    pub base_pool: Vec<String>,
    pub swap_pool: Vec<String>,
    #[serde(default)]
    pub pairing: Pairing,
}

impl InterventionSpec {
    /// Indexed single-slot intervention, the shape produced by swap-pool files.
    pub fn for_slot(bias_type: BiasType, slot: &str, pairs: &[(&str, &str)]) -> Self {
        InterventionSpec {
            bias_type,
            name: slot.to_owned(),
            target_markers: vec![TargetMarker::Slot(slot.to_owned())],
            base_pool: pairs.iter().map(|(b, _)| (*b).to_owned()).collect(),
            swap_pool: pairs.iter().map(|(_, s)| (*s).to_owned()).collect(),
            pairing: Pairing::Indexed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_pool.is_empty() {
            return Err(Error::invalid("base_pool", format!("pool of `{}` is empty", self.name)));
        }
        if self.swap_pool.is_empty() {
            return Err(Error::invalid("swap_pool", format!("pool of `{}` is empty", self.name)));
        }
        if self.pairing == Pairing::Indexed && self.base_pool.len() != self.swap_pool.len() {
            return Err(Error::invalid(
                "swap_pool",
                format!(
                    "indexed pairing needs equal pool sizes, got {} and {}",
                    self.base_pool.len(),
                    self.swap_pool.len()
                ),
            ));
        }
        Ok(())
    }

    pub fn slot_names(&self) -> impl Iterator<Item = &str> {
        self.target_markers.iter().filter_map(|m| match m {
            TargetMarker::Slot(name) => Some(name.as_str()),
            TargetMarker::Literal(_) => None,
        })
    }

    /// The swap-side value paired with `base_value`.
    ///
    /// Indexed pairing looks the value up in the base pool; random pairing
    /// picks from the swap pool with `draw`.
    pub fn counterpart(&self, base_value: &str, draw: u64) -> Result<String> {
        self.validate()?;
        match self.pairing {
            Pairing::Indexed => {
                let idx = self
                    .base_pool
                    .iter()
                    .position(|b| b == base_value)
                    .or_else(|| {
                        self.base_pool
                            .iter()
                            .position(|b| b.eq_ignore_ascii_case(base_value))
                    })
                    .ok_or_else(|| {
                        Error::Intervention(format!(
                            "value `{base_value}` is not in the base pool of `{}`",
                            self.name
                        ))
                    })?;
                Ok(self.swap_pool[idx].clone())
            }
            Pairing::Random => {
                let idx = (draw % self.swap_pool.len() as u64) as usize;
                Ok(self.swap_pool[idx].clone())
            }
        }
    }
}

/// One line of a swap-pool file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapPoolEntry {
    pub bias_type: BiasType,
    pub name: String,
    pub base: String,
    pub swap: String,
}

/// Group swap-pool lines into one indexed slot intervention per `(bias_type, name)`.
pub fn interventions_from_pool_entries(entries: &[SwapPoolEntry]) -> Vec<InterventionSpec> {
    let mut grouped: BTreeMap<(BiasType, String), Vec<(&str, &str)>> = BTreeMap::new();
    for e in entries {
        grouped
            .entry((e.bias_type, e.name.clone()))
            .or_default()
            .push((e.base.as_str(), e.swap.as_str()));
    }
    grouped
        .into_iter()
        .map(|((bias, name), pairs)| InterventionSpec::for_slot(bias, &name, &pairs))
        .collect()
}

pub fn load_swap_pools(path: &Path) -> Result<Vec<InterventionSpec>> {
    let entries: Vec<SwapPoolEntry> = jsonl::read_plain(path)?.into_iter().map(|n| n.value).collect();
    Ok(interventions_from_pool_entries(&entries))
}

/// Every word appearing in any pool entry, lowercased and stripped.
pub fn pool_words(specs: &[InterventionSpec]) -> BTreeSet<String> {
    specs
        .iter()
        .flat_map(|s| s.base_pool.iter().chain(s.swap_pool.iter()))
        .flat_map(|entry| tokenize(entry).into_iter().map(|t| t.word.to_lowercase()))
        .collect()
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

/// A whitespace-delimited token.
///
/// `chunk` covers the raw whitespace-free run; `core` is the part left after
/// stripping leading and trailing punctuation, and `word` is its text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub chunk: Range<usize>,
    pub core: Range<usize>,
    pub word: String,
}

/// Whitespace split with punctuation stripped from both ends of each chunk.
/// Chunks that are entirely punctuation are not tokens.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut start = None;
    for (i, ch) in text.char_indices().chain(std::iter::once((text.len(), ' '))) {
        match (ch.is_whitespace(), start) {
            (true, Some(s)) => {
                if let Some(tok) = make_token(text, s, i) {
                    tokens.push(tok);
                }
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    tokens
}

fn make_token(text: &str, start: usize, end: usize) -> Option<Token> {
    let chunk = &text[start..end];
    let trimmed_front = chunk.trim_start_matches(|c: char| c.is_ascii_punctuation() || is_unicode_punct(c));
    let lead = chunk.len() - trimmed_front.len();
    let core = trimmed_front.trim_end_matches(|c: char| c.is_ascii_punctuation() || is_unicode_punct(c));
    if core.is_empty() {
        return None;
    }
    Some(Token {
        chunk: start..end,
        core: start + lead..start + lead + core.len(),
        word: core.to_owned(),
    })
}

fn is_unicode_punct(c: char) -> bool {
    matches!(c, '\u{2010}'..='\u{2027}' | '\u{2030}'..='\u{205E}' | '\u{00AB}' | '\u{00BB}' | '\u{00BF}' | '\u{00A1}')
}

pub fn token_words(text: &str) -> Vec<String> {
    tokenize(text).into_iter().map(|t| t.word).collect()
}

// ---------------------------------------------------------------------------
// Applying interventions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModifiedSpan {
    pub marker: String,
    pub base_start: usize,
    pub base_end: usize,
    pub swap_start: usize,
    pub swap_end: usize,
    pub base_value: String,
    pub swap_value: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Intervened {
    pub text: String,
    pub spans: Vec<ModifiedSpan>,
}

/// Swap every occurrence of each target marker in `base_text`.
///
/// Slot markers are resolved through `slot_bindings` (slot name to the value
/// currently in the text); literal markers are searched verbatim.
pub fn apply_intervention(
    base_text: &str,
    spec: &InterventionSpec,
    slot_bindings: &BTreeMap<String, String>,
) -> Result<Intervened> {
    if spec.target_markers.is_empty() {
        return Err(Error::Intervention(format!("intervention `{}` has no target markers", spec.name)));
    }
    spec.validate()?;

    let mut edits: Vec<(Range<usize>, String, String, String)> = Vec::new();
    for marker in &spec.target_markers {
        let needle = match marker {
            TargetMarker::Slot(name) => slot_bindings.get(name).ok_or_else(|| {
                Error::Intervention(format!("marker `{}` has no slot binding", marker.label()))
            })?,
            TargetMarker::Literal(text) => text,
        };
        if needle.is_empty() {
            return Err(Error::Intervention(format!("marker `{}` resolves to empty text", marker.label())));
        }
        let replacement = spec.counterpart(needle, derive_u64(&[spec.name.as_bytes(), needle.as_bytes()]))?;
        let mut found = false;
        for (pos, _) in base_text.match_indices(needle.as_str()) {
            found = true;
            edits.push((pos..pos + needle.len(), needle.clone(), replacement.clone(), marker.label()));
        }
        if !found {
            return Err(Error::Intervention(format!(
                "marker `{}` not found in text",
                marker.label()
            )));
        }
    }

    edits.sort_by_key(|(r, ..)| (r.start, r.end));
    for pair in edits.windows(2) {
        if pair[1].0.start < pair[0].0.end {
            return Err(Error::Intervention(format!(
                "markers `{}` and `{}` overlap",
                pair[0].3, pair[1].3
            )));
        }
    }

    let mut text = String::with_capacity(base_text.len());
    let mut spans = Vec::with_capacity(edits.len());
    let mut cursor = 0;
    for (range, base_value, swap_value, marker) in edits {
        text.push_str(&base_text[cursor..range.start]);
        let swap_start = text.len();
        text.push_str(&swap_value);
        spans.push(ModifiedSpan {
            marker,
            base_start: range.start,
            base_end: range.end,
            swap_start,
            swap_end: text.len(),
            base_value,
            swap_value,
        });
        cursor = range.end;
    }
    text.push_str(&base_text[cursor..]);
    Ok(Intervened { text, spans })
}

/// Locate the swapped-in values in an already-swapped text.
pub fn locate_swapped_values(swapped: &Intervened) -> Vec<Range<usize>> {
    swapped
        .spans
        .iter()
        .filter(|s| swapped.text.get(s.swap_start..s.swap_end) == Some(s.swap_value.as_str()))
        .map(|s| s.swap_start..s.swap_end)
        .collect()
}

// ---------------------------------------------------------------------------
// Randomization controls
// ---------------------------------------------------------------------------

/// The token region of `base` that differs from `swap`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwapRegion {
    /// Byte range in the base text, from the first differing chunk to the last.
    pub bytes: Range<usize>,
    /// Indices into `tokenize(base)`.
    pub tokens: Range<usize>,
}

/// Common-prefix/common-suffix diff over token words.
pub fn swap_region(base: &str, swap: &str) -> Option<SwapRegion> {
    let bt = tokenize(base);
    let st = tokenize(swap);
    let prefix = bt.iter().zip(&st).take_while(|(a, b)| a.word == b.word).count();
    let max_suffix = bt.len().min(st.len()) - prefix;
    let suffix = bt
        .iter()
        .rev()
        .zip(st.iter().rev())
        .take(max_suffix)
        .take_while(|(a, b)| a.word == b.word)
        .count();
    let end = bt.len() - suffix;
    if end <= prefix {
        return None;
    }
    Some(SwapRegion {
        bytes: bt[prefix].chunk.start..bt[end - 1].chunk.end,
        tokens: prefix..end,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSpan {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlPerturbation {
    pub source_pair_id: String,
    /// 1-based.
    pub variant_index: usize,
    pub perturbed_text: String,
    /// Region in the base text that was rewritten.
    pub region: TextSpan,
    /// The same region in `perturbed_text`.
    pub perturbed_region: TextSpan,
    pub removed: Vec<String>,
    pub substituted: Vec<String>,
}

impl ControlPerturbation {
    /// Text outside the region is untouched and the substitution is token-for-token.
    pub fn is_region_confined(&self, base_text: &str) -> bool {
        let r = &self.region;
        let p = &self.perturbed_region;
        base_text[..r.start] == self.perturbed_text[..p.start]
            && base_text[r.end..] == self.perturbed_text[p.end..]
            && tokenize(&base_text[r.start..r.end]).len()
                == tokenize(&self.perturbed_text[p.start..p.end]).len()
            && self.removed.len() == self.substituted.len()
    }
}

/// Neutral replacement words, with every swap-pool word removed.
#[derive(Debug, Clone)]
pub struct ControlVocabulary {
    words: Vec<String>,
}

impl ControlVocabulary {
    pub fn new<I, S>(words: I, excluded: &BTreeSet<String>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut seen = BTreeSet::new();
        let words = words
            .into_iter()
            .map(|w| w.as_ref().trim().to_owned())
            .filter(|w| !w.is_empty() && !w.starts_with('#'))
            .filter(|w| !excluded.contains(&w.to_lowercase()))
            .filter(|w| seen.insert(w.to_lowercase()))
            .collect();
        ControlVocabulary { words }
    }

    pub fn load(path: &Path, excluded: &BTreeSet<String>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(text.lines(), excluded))
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// `m` random equal-length substitutions inside the pair's swap region.
///
/// Variant `v` is seeded from `(seed, pair id, v)` so any single variant can
/// be regenerated on its own.
pub fn generate_controls(
    pair: &VignettePair,
    m: usize,
    vocabulary: &ControlVocabulary,
    seed: u64,
) -> Result<Vec<ControlPerturbation>> {
    if m == 0 {
        return Err(Error::invalid("m", "need at least one control perturbation"));
    }
    let region = swap_region(&pair.base_text, &pair.swap_text)
        .ok_or_else(|| Error::Intervention(format!("pair `{}`: swap region shorter than 1 token", pair.id)))?;
    let tokens = tokenize(&pair.base_text);
    let region_tokens = &tokens[region.tokens.clone()];

    // words that already sit in either side of the targeted region are off limits
    let mut local_excluded: BTreeSet<String> = region_tokens.iter().map(|t| t.word.to_lowercase()).collect();
    if let Some(swap_region) = swap_region(&pair.swap_text, &pair.base_text) {
        let swap_tokens = tokenize(&pair.swap_text);
        local_excluded.extend(swap_tokens[swap_region.tokens].iter().map(|t| t.word.to_lowercase()));
    }
    let candidates: Vec<&String> = vocabulary
        .words()
        .iter()
        .filter(|w| !local_excluded.contains(&w.to_lowercase()))
        .collect();
    if candidates.is_empty() {
        return Err(Error::invalid("vocabulary", "no usable control words"));
    }
    if candidates.len() < region_tokens.len() {
        return Err(Error::invalid(
            "vocabulary",
            format!(
                "{} usable words cannot fill a {}-token region without replacement",
                candidates.len(),
                region_tokens.len()
            ),
        ));
    }

    let mut out = Vec::with_capacity(m);
    for variant in 1..=m {
        let stream = derive_u64(&[
            &seed.to_le_bytes(),
            pair.id.as_bytes(),
            &(variant as u64).to_le_bytes(),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        let picks: Vec<String> = candidates
            .choose_multiple(&mut rng, region_tokens.len())
            .map(|w| (*w).clone())
            .collect();

        let base = &pair.base_text;
        let mut text = String::with_capacity(base.len());
        text.push_str(&base[..region.bytes.start]);
        let perturbed_start = text.len();
        let mut cursor = region.bytes.start;
        for (tok, word) in region_tokens.iter().zip(&picks) {
            text.push_str(&base[cursor..tok.core.start]);
            text.push_str(word);
            cursor = tok.core.end;
        }
        text.push_str(&base[cursor..region.bytes.end]);
        let perturbed_end = text.len();
        text.push_str(&base[region.bytes.end..]);

        out.push(ControlPerturbation {
            source_pair_id: pair.id.clone(),
            variant_index: variant,
            perturbed_text: text,
            region: TextSpan {
                start: region.bytes.start,
                end: region.bytes.end,
            },
            perturbed_region: TextSpan {
                start: perturbed_start,
                end: perturbed_end,
            },
            removed: region_tokens.iter().map(|t| t.word.clone()).collect(),
            substituted: picks,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Noise-baseline control pairs
// ---------------------------------------------------------------------------

/// Bidirectional single-word synonym lookup.
#[derive(Debug, Clone, Default)]
pub struct SynonymTable {
    map: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynonymEntry {
    pub word: String,
    pub synonym: String,
}

impl SynonymTable {
    pub fn new<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut map = BTreeMap::new();
        for (a, b) in pairs {
            let (a, b) = (a.trim().to_lowercase(), b.trim().to_lowercase());
            if a.is_empty() || b.is_empty() || a == b {
                continue;
            }
            map.entry(a.clone()).or_insert_with(|| b.clone());
            map.entry(b).or_insert(a);
        }
        SynonymTable { map }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries: Vec<SynonymEntry> = jsonl::read_plain(path)?.into_iter().map(|n| n.value).collect();
        Ok(Self::new(entries.iter().map(|e| (e.word.as_str(), e.synonym.as_str()))))
    }

    pub fn lookup(&self, word: &str) -> Option<&str> {
        self.map.get(&word.to_lowercase()).map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn match_case(original: &str, replacement: &str) -> String {
    let mut chars = original.chars();
    match chars.next() {
        Some(first) if first.is_uppercase() && original.chars().skip(1).all(|c| !c.is_uppercase()) => {
            let mut r = replacement.chars();
            match r.next() {
                Some(f) => f.to_uppercase().chain(r).collect(),
                None => String::new(),
            }
        }
        Some(_) if original.chars().all(|c| !c.is_lowercase()) && original.len() > 1 => replacement.to_uppercase(),
        _ => replacement.to_owned(),
    }
}

fn synonym_variant(text: &str, synonyms: &SynonymTable, rng: &mut ChaCha8Rng) -> Option<String> {
    let tokens = tokenize(text);
    let eligible: Vec<&Token> = tokens.iter().filter(|t| synonyms.lookup(&t.word).is_some()).collect();
    let tok = eligible.choose(rng)?;
    let replacement = match_case(&tok.word, synonyms.lookup(&tok.word)?);
    let mut out = String::with_capacity(text.len() + 8);
    out.push_str(&text[..tok.core.start]);
    out.push_str(&replacement);
    out.push_str(&text[tok.core.end..]);
    Some(out)
}

fn punctuation_variant(text: &str, rng: &mut ChaCha8Rng) -> Option<String> {
    // only clause commas; dropping one inside "15,000" would merge tokens
    let commas: Vec<usize> = text
        .match_indices(", ")
        .map(|(i, _)| i)
        .collect();
    if let Some(&pos) = commas.choose(rng) {
        let mut out = String::with_capacity(text.len());
        out.push_str(&text[..pos]);
        out.push_str(&text[pos + 1..]);
        return Some(out);
    }
    // no comma to drop: insert one after a token that is not the last
    let tokens = tokenize(text);
    if tokens.len() < 2 {
        return None;
    }
    let tok = &tokens[rng.random_range(0..tokens.len() - 1)];
    let mut out = String::with_capacity(text.len() + 1);
    out.push_str(&text[..tok.chunk.end]);
    out.push(',');
    out.push_str(&text[tok.chunk.end..]);
    Some(out)
}

/// `per_domain` near-identical control pairs for each domain in `domains`.
///
/// Even-numbered controls prefer a single synonym swap and odd-numbered ones
/// a punctuation edit; either falls back to the other when inapplicable.
pub fn generate_noise_controls(
    corpus: &[VignettePair],
    domains: &[Domain],
    per_domain: usize,
    synonyms: &SynonymTable,
    seed: u64,
) -> Result<Vec<ControlPair>> {
    if per_domain == 0 {
        return Ok(Vec::new());
    }
    if synonyms.is_empty() {
        return Err(Error::invalid("synonym_table", "synonym table is empty"));
    }
    let missing: Vec<&str> = domains
        .iter()
        .filter(|d| !corpus.iter().any(|p| p.domain == **d))
        .map(|d| d.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::invalid(
            "corpus",
            format!("no eligible vignettes for domain(s): {}", missing.join(", ")),
        ));
    }

    let mut out = Vec::with_capacity(per_domain * domains.len());
    for &domain in domains {
        let mut eligible: Vec<&VignettePair> = corpus.iter().filter(|p| p.domain == domain).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_u64(&[&seed.to_le_bytes(), domain.as_str().as_bytes()]));
        eligible.shuffle(&mut rng);
        let mut serial = 0;
        let mut attempts = 0;
        while serial < per_domain {
            if attempts >= per_domain * eligible.len() * 2 + 2 {
                return Err(Error::invalid(
                    "corpus",
                    format!("no eligible vignettes for domain(s): {}", domain.as_str()),
                ));
            }
            let source = eligible[attempts % eligible.len()];
            attempts += 1;
            let prefer_synonym = serial % 2 == 0;
            let attempt = if prefer_synonym {
                synonym_variant(&source.base_text, synonyms, &mut rng)
                    .map(|t| (t, PerturbationKind::Synonym))
                    .or_else(|| punctuation_variant(&source.base_text, &mut rng).map(|t| (t, PerturbationKind::Punctuation)))
            } else {
                punctuation_variant(&source.base_text, &mut rng)
                    .map(|t| (t, PerturbationKind::Punctuation))
                    .or_else(|| synonym_variant(&source.base_text, synonyms, &mut rng).map(|t| (t, PerturbationKind::Synonym)))
            };
            let Some((variant_text, kind)) = attempt else { continue };
            serial += 1;
            let control = ControlPair {
                id: format!("{}-control-{serial:03}", domain.as_str()),
                domain,
                base_text: source.base_text.clone(),
                variant_text,
                decision_prompt: source.decision_prompt.clone(),
                options: source.options.clone(),
                perturbation_kind: kind,
            };
            control.validate()?;
            out.push(control);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vignette::Provenance;

    fn auth_spec() -> InterventionSpec {
        InterventionSpec {
            bias_type: BiasType::Authority,
            name: "study_source".into(),
            target_markers: vec![TargetMarker::Literal("Harvard Medical School".into())],
            base_pool: vec!["Harvard Medical School".into()],
            swap_pool: vec!["community college".into()],
            pairing: Pairing::Indexed,
        }
    }

    fn pair(base: &str, swap: &str) -> VignettePair {
        VignettePair {
            id: "finance-authority-0001".into(),
            domain: Domain::Finance,
            bias_type: BiasType::Authority,
            context: "Investment recommendation".into(),
            base_text: base.into(),
            swap_text: swap.into(),
            decision_prompt: "Investment recommendation:".into(),
            options: vec!["Buy".into(), "Hold".into(), "Sell".into()],
            provenance: Provenance::Template,
        }
    }

    #[test]
    fn authority_literal_swap() {
        let out = apply_intervention("A Harvard Medical School study found…", &auth_spec(), &BTreeMap::new()).unwrap();
        assert_eq!(out.text, "A community college study found…");
        assert_eq!(out.spans.len(), 1);
        assert_eq!(out.spans[0].base_start, 2);
        assert_eq!(&out.text[out.spans[0].swap_start..out.spans[0].swap_end], "community college");
    }

    #[test]
    fn framing_swap() {
        let spec = InterventionSpec {
            bias_type: BiasType::Framing,
            name: "outcome".into(),
            target_markers: vec![TargetMarker::Literal("95% of patients survived the procedure".into())],
            base_pool: vec!["95% of patients survived the procedure".into()],
            swap_pool: vec!["5% of patients died during the procedure".into()],
            pairing: Pairing::Indexed,
        };
        let out = apply_intervention("95% of patients survived the procedure", &spec, &BTreeMap::new()).unwrap();
        assert_eq!(out.text, "5% of patients died during the procedure");
    }

    #[test]
    fn empty_spec_is_rejected() {
        let mut spec = auth_spec();
        spec.target_markers.clear();
        assert!(apply_intervention("anything", &spec, &BTreeMap::new()).is_err());
    }

    #[test]
    fn unresolvable_marker_names_marker() {
        let mut spec = auth_spec();
        spec.target_markers = vec![TargetMarker::Slot("name".into())];
        let err = apply_intervention("no name here", &spec, &BTreeMap::new()).unwrap_err();
        assert!(err.to_string().contains("slot:name"), "{err}");
    }

    #[test]
    fn slot_binding_swaps_every_occurrence() {
        let spec = InterventionSpec::for_slot(BiasType::Demographic, "name", &[("James Smith", "Jamal Washington")]);
        let bindings = BTreeMap::from([("name".to_string(), "James Smith".to_string())]);
        let out = apply_intervention("James Smith applied. James Smith waits.", &spec, &bindings).unwrap();
        assert_eq!(out.text, "Jamal Washington applied. Jamal Washington waits.");
        assert_eq!(out.spans.len(), 2);
        assert_eq!(locate_swapped_values(&out).len(), 2);
    }

    #[test]
    fn overlapping_markers_error() {
        let spec = InterventionSpec {
            bias_type: BiasType::Authority,
            name: "x".into(),
            target_markers: vec![TargetMarker::Literal("Harvard Medical".into()), TargetMarker::Literal("Medical School".into())],
            base_pool: vec!["Harvard Medical".into(), "Medical School".into()],
            swap_pool: vec!["a".into(), "b".into()],
            pairing: Pairing::Indexed,
        };
        assert!(apply_intervention("Harvard Medical School", &spec, &BTreeMap::new()).is_err());
    }

    #[test]
    fn indexed_pools_must_match() {
        let mut spec = auth_spec();
        spec.swap_pool.push("extra".into());
        assert!(spec.validate().is_err());
        spec.pairing = Pairing::Random;
        assert!(spec.validate().is_ok());
    }

    #[test]
    fn tokenizer_strips_punctuation() {
        let words = token_words("Hello, world! -- (a) \"quoted\" 95%");
        assert_eq!(words, vec!["Hello", "world", "a", "quoted", "95"]);
    }

    #[test]
    fn swap_region_covers_the_name() {
        let r = swap_region("James Smith was arrested.", "Jamal Washington was arrested.").unwrap();
        assert_eq!(r.tokens, 0..2);
        assert_eq!(&"James Smith was arrested."[r.bytes.clone()], "James Smith");
        assert!(swap_region("same text", "same text").is_none());
    }

    fn vocab() -> ControlVocabulary {
        let words = ["river", "table", "window", "orange", "pencil", "garden", "cloud", "ladder", "violin", "marble"];
        ControlVocabulary::new(words, &BTreeSet::new())
    }

    #[test]
    fn controls_are_region_confined() {
        let p = pair(
            "Revenue: $285M. JP Morgan's top-rated sector analyst rates it a strong buy.",
            "Revenue: $285M. A retail investor blog rates it a strong buy.",
        );
        let controls = generate_controls(&p, 20, &vocab(), 7).unwrap();
        assert_eq!(controls.len(), 20);
        for (i, c) in controls.iter().enumerate() {
            assert_eq!(c.variant_index, i + 1);
            assert!(c.is_region_confined(&p.base_text), "{c:?}");
        }
    }

    #[test]
    fn controls_are_deterministic() {
        let p = pair("James Smith was arrested.", "Jamal Washington was arrested.");
        let a = generate_controls(&p, 1, &vocab(), 99).unwrap();
        let b = generate_controls(&p, 1, &vocab(), 99).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_controls(&p, 1, &vocab(), 100).unwrap());
    }

    #[test]
    fn three_token_region_substitutes_three_tokens() {
        let p = pair("The Harvard Medical School study found gains.", "The community college lab study found gains.");
        // region: "Harvard Medical School" (3 tokens) vs "community college lab"
        let controls = generate_controls(&p, 20, &vocab(), 1).unwrap();
        for c in &controls {
            // independent check: plain whitespace split, compare position by position
            let base: Vec<&str> = p.base_text.split_whitespace().collect();
            let pert: Vec<&str> = c.perturbed_text.split_whitespace().collect();
            assert_eq!(base.len(), pert.len());
            let changed = base.iter().zip(&pert).filter(|(a, b)| a != b).count();
            assert_eq!(changed, 3, "{}", c.perturbed_text);
            assert_eq!(c.substituted.len(), 3);
        }
    }

    #[test]
    fn controls_reject_empty_region_and_zero_m() {
        let p = pair("same words here", "same words here!");
        assert!(generate_controls(&p, 5, &vocab(), 1).is_err());
        let p = pair("James Smith was arrested.", "Jamal Washington was arrested.");
        assert!(generate_controls(&p, 0, &vocab(), 1).is_err());
    }

    #[test]
    fn vocabulary_excludes_pool_words() {
        let specs = vec![InterventionSpec::for_slot(BiasType::Demographic, "name", &[("James Smith", "Jamal Washington")])];
        let excluded = pool_words(&specs);
        let v = ControlVocabulary::new(["james", "river", "Washington", "table"], &excluded);
        assert_eq!(v.words(), &["river".to_string(), "table".to_string()]);
    }

    #[test]
    fn synonym_swap_is_single_token() {
        let table = SynonymTable::new([("significant", "substantial")]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = synonym_variant("The study found a significant effect.", &table, &mut rng).unwrap();
        assert_eq!(out, "The study found a substantial effect.");
        let out = synonym_variant("Substantial gains.", &table, &mut rng).unwrap();
        assert_eq!(out, "Significant gains.");
    }

    #[test]
    fn noise_controls_per_domain() {
        let corpus: Vec<VignettePair> = Domain::ALL
            .iter()
            .map(|d| VignettePair {
                id: format!("{d}-demographic-0001"),
                domain: *d,
                bias_type: BiasType::Demographic,
                context: String::new(),
                base_text: "James Smith, an accountant, showed a significant record of cooperation.".into(),
                swap_text: "Jamal Washington, an accountant, showed a significant record of cooperation.".into(),
                decision_prompt: "Decide:".into(),
                options: vec!["Yes".into(), "No".into()],
                provenance: Provenance::Template,
            })
            .collect();
        let table = SynonymTable::new([("significant", "substantial")]);
        let controls = generate_noise_controls(&corpus, &Domain::ALL, 30, &table, 5).unwrap();
        assert_eq!(controls.len(), 300);
        assert!(controls.iter().any(|c| c.perturbation_kind == PerturbationKind::Synonym));
        assert!(controls.iter().any(|c| c.perturbation_kind == PerturbationKind::Punctuation));
        assert!(generate_noise_controls(&corpus, &Domain::ALL, 0, &table, 5).unwrap().is_empty());

        let err = generate_noise_controls(&corpus[..9], &Domain::ALL, 3, &table, 5).unwrap_err();
        assert!(err.to_string().contains("customer_service"), "{err}");
    }
}
