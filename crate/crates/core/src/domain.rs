use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The ten decision domains covered by the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    CriminalJustice,
    Hiring,
    Healthcare,
    Lending,
    Education,
    Insurance,
    Legal,
    ContentModeration,
    Finance,
    CustomerService,
}

impl Domain {
    pub const ALL: [Domain; 10] = [
        Domain::CriminalJustice,
        Domain::Hiring,
        Domain::Healthcare,
        Domain::Lending,
        Domain::Education,
        Domain::Insurance,
        Domain::Legal,
        Domain::ContentModeration,
        Domain::Finance,
        Domain::CustomerService,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::CriminalJustice => "criminal_justice",
            Domain::Hiring => "hiring",
            Domain::Healthcare => "healthcare",
            Domain::Lending => "lending",
            Domain::Education => "education",
            Domain::Insurance => "insurance",
            Domain::Legal => "legal",
            Domain::ContentModeration => "content_moderation",
            Domain::Finance => "finance",
            Domain::CustomerService => "customer_service",
        }
    }

    /// Human-readable label used in rendered tables.
    pub fn label(self) -> &'static str {
        match self {
            Domain::CriminalJustice => "Criminal Justice",
            Domain::Hiring => "Hiring",
            Domain::Healthcare => "Healthcare",
            Domain::Lending => "Lending",
            Domain::Education => "Education",
            Domain::Insurance => "Insurance",
            Domain::Legal => "Legal",
            Domain::ContentModeration => "Content Mod.",
            Domain::Finance => "Finance",
            Domain::CustomerService => "Customer Service",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Domain::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::invalid("domain", format!("unknown domain `{s}`")))
    }
}

/// Which kind of decision-irrelevant feature an intervention swaps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasType {
    Demographic,
    Authority,
    Framing,
}

impl BiasType {
    pub const ALL: [BiasType; 3] = [BiasType::Demographic, BiasType::Authority, BiasType::Framing];

    pub fn as_str(self) -> &'static str {
        match self {
            BiasType::Demographic => "demographic",
            BiasType::Authority => "authority",
            BiasType::Framing => "framing",
        }
    }
}

impl fmt::Display for BiasType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BiasType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BiasType::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::invalid("bias_type", format!("unknown bias type `{s}`")))
    }
}
