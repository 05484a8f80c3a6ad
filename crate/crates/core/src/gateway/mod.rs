//! Uniform access to decision models: a remote chat-completion client, a
//! deterministic synthetic judge, and the paired/batched runners on top.

mod cache;
mod prompt;
mod remote;
mod synthetic;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cache::{CachedExchange, ResponseCache};
pub use prompt::{PromptTemplate, DEFAULT_PROMPT_TEMPLATE};
pub use remote::{request_fingerprint, ModelEndpointConfig, RemoteChatModel, TokenBucket};
pub use synthetic::{FieldLeak, PolicyRule, SyntheticJudge, SyntheticJudgeConfig};

use crate::error::{Error, Result};
use crate::parsing::{DecisionRecord, FlipIndicator, Side};
use crate::vignette::VignettePair;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub raw_text: String,
    #[serde(with = "duration_ms")]
    pub latency: Duration,
    pub cached: bool,
    pub request_fingerprint: String,
}

pub(crate) mod duration_ms {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// Anything that answers a prompt with text.
pub trait DecisionModel: Send + Sync {
    fn name(&self) -> &str;

    fn query(&self, prompt: &str) -> Result<ModelResponse>;

    /// Decoding settings recorded in run metadata.
    fn metadata(&self) -> serde_json::Value {
        serde_json::json!({ "name": self.name() })
    }
}

/// Endpoint definitions as they appear in endpoint files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EndpointConfig {
    Remote(ModelEndpointConfig),
    Synthetic(SyntheticJudgeConfig),
}

impl EndpointConfig {
    pub fn name(&self) -> &str {
        match self {
            EndpointConfig::Remote(c) => &c.name,
            EndpointConfig::Synthetic(c) => &c.name,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EndpointConfig::Remote(c) => c.validate(),
            EndpointConfig::Synthetic(c) => c.validate(),
        }
    }

    pub fn build(&self, cache: Option<ResponseCache>) -> Result<Box<dyn DecisionModel>> {
        self.validate()?;
        Ok(match self {
            EndpointConfig::Remote(c) => Box::new(RemoteChatModel::new(c.clone(), cache)?),
            EndpointConfig::Synthetic(c) => Box::new(SyntheticJudge::new(c.clone())?),
        })
    }
}

/// Map `f` over `items` on at most `parallelism` threads, preserving order.
pub fn run_batch<T, R, F>(items: &[T], parallelism: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    let threads = parallelism.max(1);
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(e) => {
            log::warn!("could not build a {threads}-thread pool ({e}); running serially");
            items.iter().map(f).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PairOutcome {
    Completed {
        pair_id: String,
        base: DecisionRecord,
        swap: DecisionRecord,
        flip: FlipIndicator,
    },
    Failed {
        pair_id: String,
        side: Side,
        reason: String,
    },
}

impl PairOutcome {
    pub fn pair_id(&self) -> &str {
        match self {
            PairOutcome::Completed { pair_id, .. } | PairOutcome::Failed { pair_id, .. } => pair_id,
        }
    }

    pub fn flip(&self) -> Option<FlipIndicator> {
        match self {
            PairOutcome::Completed { flip, .. } => Some(*flip),
            PairOutcome::Failed { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedRun {
    pub model: String,
    /// In input order.
    pub outcomes: Vec<PairOutcome>,
    pub prompts_issued: usize,
}

impl PairedRun {
    pub fn failures(&self) -> impl Iterator<Item = &PairOutcome> {
        self.outcomes.iter().filter(|o| matches!(o, PairOutcome::Failed { .. }))
    }

    pub fn is_partial(&self) -> bool {
        self.failures().next().is_some()
    }

    pub fn indicators(&self) -> Vec<FlipIndicator> {
        self.outcomes.iter().filter_map(PairOutcome::flip).collect()
    }
}

/// Prompt the model with both sides of every pair through one template.
///
/// A failed side is recorded against the pair and the batch carries on; the
/// swap side is skipped when the base side already failed.
pub fn run_paired(
    pairs: &[VignettePair],
    model: &dyn DecisionModel,
    template: &PromptTemplate,
    parallelism: usize,
) -> PairedRun {
    let issued = AtomicUsize::new(0);
    let outcomes = run_batch(pairs, parallelism, |pair| {
        let ask = |side: Side| -> Result<DecisionRecord> {
            issued.fetch_add(1, Ordering::Relaxed);
            let prompt = template.render(pair, side);
            let response = model.query(&prompt)?;
            Ok(DecisionRecord::from_response(&pair.id, side, &response.raw_text, &pair.options))
        };
        let failed = |side, e: Error| PairOutcome::Failed {
            pair_id: pair.id.clone(),
            side,
            reason: e.to_string(),
        };
        let base = match ask(Side::Base) {
            Ok(r) => r,
            Err(e) => return failed(Side::Base, e),
        };
        let swap = match ask(Side::Swap) {
            Ok(r) => r,
            Err(e) => return failed(Side::Swap, e),
        };
        let flip = FlipIndicator::from_decisions(base.decision, swap.decision);
        PairOutcome::Completed {
            pair_id: pair.id.clone(),
            base,
            swap,
            flip,
        }
    });
    PairedRun {
        model: model.name().to_owned(),
        outcomes,
        prompts_issued: issued.into_inner(),
    }
}
