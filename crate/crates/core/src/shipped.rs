//! Data files bundled with the crate.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::interventions::{interventions_from_pool_entries, pool_words, ControlVocabulary, InterventionSpec, SwapPoolEntry, SynonymEntry, SynonymTable};
use crate::vignette::TemplateSpec;

pub const TEMPLATES: &str = include_str!("../data/templates.jsonl");
pub const SWAP_POOLS: &str = include_str!("../data/swap_pools.jsonl");
pub const SYNONYMS: &str = include_str!("../data/synonyms.jsonl");
pub const CONTROL_VOCABULARY: &str = include_str!("../data/control_vocabulary.txt");

fn parse_lines<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::MalformedLine {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn templates() -> Result<Vec<TemplateSpec>> {
    parse_lines(TEMPLATES)
}

pub fn swap_pools() -> Result<Vec<InterventionSpec>> {
    Ok(interventions_from_pool_entries(&parse_lines::<SwapPoolEntry>(SWAP_POOLS)?))
}

pub fn synonyms() -> Result<SynonymTable> {
    let entries: Vec<SynonymEntry> = parse_lines(SYNONYMS)?;
    Ok(SynonymTable::new(entries.iter().map(|e| (e.word.as_str(), e.synonym.as_str()))))
}

/// The bundled vocabulary minus every word of `pools`.
pub fn control_vocabulary(pools: &[InterventionSpec]) -> ControlVocabulary {
    let excluded: BTreeSet<String> = pool_words(pools);
    ControlVocabulary::new(CONTROL_VOCABULARY.lines(), &excluded)
}
