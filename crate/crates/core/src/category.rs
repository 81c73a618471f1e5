//! Semantic step categories.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Semantic role of one reasoning step.
///
/// `Fa`, `Sr`, `Ac` and `Uv` form the core set used by every model;
/// `Unk` marks steps the classifier could not place and is never part of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "final_answer")]
    Fa,
    #[serde(rename = "setup_and_retrieval")]
    Sr,
    #[serde(rename = "analysis_and_computation")]
    Ac,
    #[serde(rename = "uncertainty_and_verification")]
    Uv,
    #[serde(rename = "unknown")]
    Unk,
}

/// Number of core categories.
pub const NUM_CORE: usize = 4;

impl Category {
    /// Core categories in table order (FA, SR, AC, UV).
    pub const CORE: [Category; NUM_CORE] = [Category::Fa, Category::Sr, Category::Ac, Category::Uv];

    pub const ALL: [Category; 5] = [
        Category::Fa,
        Category::Sr,
        Category::Ac,
        Category::Uv,
        Category::Unk,
    ];

    pub fn is_core(self) -> bool {
        self != Category::Unk
    }

    /// Position within [`Category::CORE`], or `None` for `Unk`.
    pub fn core_index(self) -> Option<usize> {
        match self {
            Category::Fa => Some(0),
            Category::Sr => Some(1),
            Category::Ac => Some(2),
            Category::Uv => Some(3),
            Category::Unk => None,
        }
    }

    pub fn from_core_index(idx: usize) -> Option<Category> {
        Category::CORE.get(idx).copied()
    }

    /// Long name as stored in trace manifests.
    pub fn name(self) -> &'static str {
        match self {
            Category::Fa => "final_answer",
            Category::Sr => "setup_and_retrieval",
            Category::Ac => "analysis_and_computation",
            Category::Uv => "uncertainty_and_verification",
            Category::Unk => "unknown",
        }
    }

    /// Two- or three-letter table label.
    pub fn short(self) -> &'static str {
        match self {
            Category::Fa => "FA",
            Category::Sr => "SR",
            Category::Ac => "AC",
            Category::Uv => "UV",
            Category::Unk => "UNK",
        }
    }

    /// Parses either the long manifest name or the short label.
    pub fn parse(s: &str) -> Option<Category> {
        Category::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s || c.short() == s)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownCategory(pub String);

impl fmt::Display for UnknownCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown category string {:?}", self.0)
    }
}

impl std::error::Error for UnknownCategory {}

impl FromStr for Category {
    type Err = UnknownCategory;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::parse(s).ok_or_else(|| UnknownCategory(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_excludes_unknown() {
        assert_eq!(Category::CORE.len(), 4);
        assert!(!Category::CORE.contains(&Category::Unk));
        assert_eq!(Category::Unk.core_index(), None);
        for (i, c) in Category::CORE.iter().enumerate() {
            assert_eq!(c.core_index(), Some(i));
            assert_eq!(Category::from_core_index(i), Some(*c));
        }
    }

    #[test]
    fn names_round_trip() {
        for c in Category::ALL {
            assert_eq!(c.name().parse::<Category>().unwrap(), c);
            assert_eq!(c.short().parse::<Category>().unwrap(), c);
        }
        assert!("banana".parse::<Category>().is_err());
        let json = serde_json::to_string(&Category::Uv).unwrap();
        assert_eq!(json, "\"uncertainty_and_verification\"");
    }
}
