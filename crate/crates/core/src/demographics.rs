//! Gender and descent-category model, and the origin-phrase classifier.
//!
//! Origin phrases ("White Canadian", "Korean-American", "Nigerian") are
//! resolved to one of four descent categories through a priority-ordered
//! [`MappingTable`]. The default table ships as `data/mapping_table.tsv`
//! and can be replaced at runtime.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const DEFAULT_TABLE: &str = include_str!("../data/mapping_table.tsv");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DemographicsError {
    #[error("mapping table line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("mapping table line {line}: duplicate pattern {pattern:?}")]
    DuplicatePattern { line: usize, pattern: String },
    #[error("mapping table line {line}: unknown category {token:?}")]
    UnknownCategory { line: usize, token: String },
    #[error("invalid intersection: gender {gender}, ethnicity {ethnicity}")]
    InvalidIntersection {
        gender: Gender,
        ethnicity: EthnicityCategory,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Female,
    Male,
    Unstated,
}

impl Gender {
    /// The two genders that enter distributions, in axis order.
    pub const NAMED: [Gender; 2] = [Gender::Female, Gender::Male];

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Female => "female",
            Gender::Male => "male",
            Gender::Unstated => "unstated",
        }
    }

    /// Position on the gender axis; `None` for `Unstated`.
    pub fn index(self) -> Option<usize> {
        match self {
            Gender::Female => Some(0),
            Gender::Male => Some(1),
            Gender::Unstated => None,
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EthnicityCategory {
    European,
    African,
    Api,
    HispanicLatino,
    Unclassified,
}

impl EthnicityCategory {
    /// The four categories that enter distributions, in axis order.
    pub const NAMED: [EthnicityCategory; 4] = [
        EthnicityCategory::European,
        EthnicityCategory::African,
        EthnicityCategory::Api,
        EthnicityCategory::HispanicLatino,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EthnicityCategory::European => "european",
            EthnicityCategory::African => "african",
            EthnicityCategory::Api => "api",
            EthnicityCategory::HispanicLatino => "hispanic_latino",
            EthnicityCategory::Unclassified => "unclassified",
        }
    }

    /// Human-readable name used in prompts.
    pub fn display_name(self) -> &'static str {
        match self {
            EthnicityCategory::European => "European",
            EthnicityCategory::African => "African",
            EthnicityCategory::Api => "Asian and Pacific Islander (API)",
            EthnicityCategory::HispanicLatino => "Hispanic/Latino",
            EthnicityCategory::Unclassified => "Unclassified",
        }
    }

    pub fn index(self) -> Option<usize> {
        match self {
            EthnicityCategory::European => Some(0),
            EthnicityCategory::African => Some(1),
            EthnicityCategory::Api => Some(2),
            EthnicityCategory::HispanicLatino => Some(3),
            EthnicityCategory::Unclassified => None,
        }
    }
}

impl fmt::Display for EthnicityCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EthnicityCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "european" => Ok(EthnicityCategory::European),
            "african" => Ok(EthnicityCategory::African),
            "api" => Ok(EthnicityCategory::Api),
            "hispanic_latino" => Ok(EthnicityCategory::HispanicLatino),
            "unclassified" => Ok(EthnicityCategory::Unclassified),
            other => Err(other.to_string()),
        }
    }
}

/// One of the eight gender × ethnicity cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IntersectionKey {
    gender: Gender,
    ethnicity: EthnicityCategory,
}

impl IntersectionKey {
    pub fn new(gender: Gender, ethnicity: EthnicityCategory) -> Result<Self, DemographicsError> {
        if gender.index().is_none() || ethnicity.index().is_none() {
            return Err(DemographicsError::InvalidIntersection { gender, ethnicity });
        }
        Ok(Self { gender, ethnicity })
    }

    /// All eight keys, ethnicity-major (european/female, european/male, ...).
    pub fn all() -> [IntersectionKey; 8] {
        let mut out = [IntersectionKey {
            gender: Gender::Female,
            ethnicity: EthnicityCategory::European,
        }; 8];
        for (i, e) in EthnicityCategory::NAMED.iter().enumerate() {
            for (j, g) in Gender::NAMED.iter().enumerate() {
                out[i * 2 + j] = IntersectionKey {
                    gender: *g,
                    ethnicity: *e,
                };
            }
        }
        out
    }

    pub fn gender(&self) -> Gender {
        self.gender
    }

    pub fn ethnicity(&self) -> EthnicityCategory {
        self.ethnicity
    }

    pub fn index(&self) -> usize {
        // both indices exist by construction
        self.ethnicity.index().unwrap_or(0) * 2 + self.gender.index().unwrap_or(0)
    }

    pub fn label(&self) -> String {
        format!("{}_{}", self.ethnicity.as_str(), self.gender.as_str())
    }
}

impl fmt::Display for IntersectionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

/// Constructs the key for a classified (gender, ethnicity) pair.
pub fn intersection_key(
    gender: Gender,
    ethnicity: EthnicityCategory,
) -> Result<IntersectionKey, DemographicsError> {
    IntersectionKey::new(gender, ethnicity)
}

/// One character's extracted gender, origin text and resolved category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemographicLabel {
    pub gender: Gender,
    pub origin_text: Option<String>,
    pub ethnicity: EthnicityCategory,
}

impl DemographicLabel {
    pub fn intersection(&self) -> Option<IntersectionKey> {
        IntersectionKey::new(self.gender, self.ethnicity).ok()
    }
}

/// Case-folds and collapses every run of non-alphanumeric characters
/// (hyphens, spaces, punctuation) into a single space.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.extend(ch.to_lowercase());
        } else {
            pending_space = true;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingEntry {
    pub pattern: String,
    pub category: EthnicityCategory,
    pub priority: i32,
}

#[derive(Debug, Clone, Default)]
pub struct MappingTable {
    entries: Vec<MappingEntry>,
    // first pattern token -> (entry index, pattern tokens)
    by_first: HashMap<String, Vec<(usize, Vec<String>)>>,
}

/// A pattern occurrence found in a piece of text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternMatch {
    pub entry: usize,
    /// First matched token.
    pub token_start: usize,
    pub token_len: usize,
}

impl MappingTable {
    pub fn new(entries: Vec<MappingEntry>) -> Result<Self, DemographicsError> {
        let mut table = MappingTable::default();
        for (i, e) in entries.into_iter().enumerate() {
            table.push(e, i + 1)?;
        }
        Ok(table)
    }

    /// The built-in table.
    pub fn default_table() -> Self {
        Self::parse(DEFAULT_TABLE).expect("built-in mapping table is valid")
    }

    /// Parses `pattern<TAB>category<TAB>priority` rows; `#` starts a comment.
    pub fn parse(document: &str) -> Result<Self, DemographicsError> {
        let mut table = MappingTable::default();
        for (i, raw) in document.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("");
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
            if cols.len() != 3 {
                return Err(DemographicsError::Parse {
                    line: line_no,
                    message: format!("expected 3 tab-separated columns, found {}", cols.len()),
                });
            }
            let category =
                cols[1]
                    .parse::<EthnicityCategory>()
                    .map_err(|token| DemographicsError::UnknownCategory {
                        line: line_no,
                        token,
                    })?;
            let priority = cols[2].parse::<i32>().map_err(|e| DemographicsError::Parse {
                line: line_no,
                message: format!("bad priority {:?}: {e}", cols[2]),
            })?;
            table.push(
                MappingEntry {
                    pattern: cols[0].to_string(),
                    category,
                    priority,
                },
                line_no,
            )?;
        }
        Ok(table)
    }

    fn push(&mut self, mut entry: MappingEntry, line: usize) -> Result<(), DemographicsError> {
        let pattern = normalize(&entry.pattern);
        if pattern.is_empty() {
            return Err(DemographicsError::Parse {
                line,
                message: "empty pattern".into(),
            });
        }
        if self.entries.iter().any(|e| e.pattern == pattern) {
            return Err(DemographicsError::DuplicatePattern { line, pattern });
        }
        entry.pattern = pattern;
        let tokens: Vec<String> = entry.pattern.split(' ').map(str::to_string).collect();
        let idx = self.entries.len();
        self.by_first
            .entry(tokens[0].clone())
            .or_default()
            .push((idx, tokens));
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[MappingEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All pattern occurrences over a token sequence (already normalized).
    pub fn find_all(&self, tokens: &[&str]) -> Vec<PatternMatch> {
        let mut found = Vec::new();
        for start in 0..tokens.len() {
            let Some(cands) = self.by_first.get(tokens[start]) else {
                continue;
            };
            for (entry, pat) in cands {
                let end = start + pat.len();
                if end <= tokens.len() && tokens[start..end].iter().zip(pat).all(|(a, b)| *a == b)
                {
                    found.push(PatternMatch {
                        entry: *entry,
                        token_start: start,
                        token_len: pat.len(),
                    });
                }
            }
        }
        found
    }

    /// Highest priority, then longest, then earliest.
    pub fn best_match(&self, tokens: &[&str]) -> Option<PatternMatch> {
        self.find_all(tokens).into_iter().min_by(|a, b| {
            let ea = &self.entries[a.entry];
            let eb = &self.entries[b.entry];
            eb.priority
                .cmp(&ea.priority)
                .then(b.token_len.cmp(&a.token_len))
                .then(eb.pattern.len().cmp(&ea.pattern.len()))
                .then(a.token_start.cmp(&b.token_start))
        })
    }

    /// Resolves a free-text origin phrase to a descent category.
    pub fn classify(&self, origin_text: &str) -> EthnicityCategory {
        let norm = normalize(origin_text);
        let tokens: Vec<&str> = norm.split(' ').filter(|t| !t.is_empty()).collect();
        self.best_match(&tokens)
            .map(|m| self.entries[m.entry].category)
            .unwrap_or(EthnicityCategory::Unclassified)
    }
}

/// Loads a mapping table document; see [`MappingTable::parse`].
pub fn load_mapping_table(document: &str) -> Result<MappingTable, DemographicsError> {
    MappingTable::parse(document)
}

pub fn classify_origin(origin_text: &str, table: &MappingTable) -> EthnicityCategory {
    table.classify(origin_text)
}
