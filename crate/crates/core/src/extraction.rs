//! Gender and origin extraction from generated stories, plus descriptor terms.
//!
//! Two paths: an extraction agent (any [`Backend`]) and an offline rule-based
//! extractor that doubles as the agent's per-story fallback and cross-check.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, ChatMessage};
use crate::demographics::{normalize, DemographicLabel, EthnicityCategory, Gender, MappingTable};
use crate::templates::{PromptTemplate, TemplateError};

const FEMALE_NOUNS: &str = include_str!("../data/female_nouns.txt");
const MALE_NOUNS: &str = include_str!("../data/male_nouns.txt");
const ORIGIN_TERMS: &str = include_str!("../data/origin_terms.txt");
const DESCRIPTOR_ADJECTIVES: &str = include_str!("../data/descriptor_adjectives.txt");

const FEMALE_PRONOUNS: [&str; 4] = ["she", "her", "hers", "herself"];
const MALE_PRONOUNS: [&str; 4] = ["he", "his", "him", "himself"];
const POSSESSIVES: [&str; 7] = ["her", "his", "my", "your", "their", "our", "its"];
const PREPOSITIONS: [&str; 16] = [
    "in", "at", "on", "into", "inside", "from", "of", "to", "near", "by", "through", "across",
    "around", "toward", "towards", "for",
];
/// Longest adjective run allowed between an article and the gender noun.
const APPOSITION_WINDOW: usize = 7;

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("no stories to extract from")]
    EmptyBatch,
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMethod {
    Agent,
    RuleBased,
    /// Labels supplied by an ingested dataset.
    Provided,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExtraction {
    pub story_index: usize,
    pub gender_text: Option<String>,
    pub origin_text: Option<String>,
    pub method: ExtractionMethod,
    pub resolved: DemographicLabel,
}

/// Token lists used by the rule-based extractor.
#[derive(Debug, Clone)]
pub struct Lexicon {
    pub female: HashSet<String>,
    pub male: HashSet<String>,
    pub origin_terms: HashSet<String>,
    pub adjectives: HashSet<String>,
}

fn word_list(doc: &str) -> HashSet<String> {
    doc.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect()
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::parse(FEMALE_NOUNS, MALE_NOUNS, ORIGIN_TERMS, DESCRIPTOR_ADJECTIVES)
    }
}

impl Lexicon {
    pub fn parse(female: &str, male: &str, origin_terms: &str, adjectives: &str) -> Self {
        Self {
            female: word_list(female),
            male: word_list(male),
            origin_terms: word_list(origin_terms),
            adjectives: word_list(adjectives),
        }
    }

    fn noun_gender(&self, lower: &str) -> Option<Gender> {
        if self.female.contains(lower) {
            Some(Gender::Female)
        } else if self.male.contains(lower) {
            Some(Gender::Male)
        } else {
            None
        }
    }

    /// Maps free gender text (a noun, pronoun or the agent's answer) to a gender.
    pub fn resolve_gender(&self, text: &str) -> Gender {
        let norm = normalize(text);
        let mut found = None;
        for tok in norm.split(' ').filter(|t| !t.is_empty()) {
            let g = match tok {
                "f" => Some(Gender::Female),
                "m" => Some(Gender::Male),
                t if FEMALE_PRONOUNS.contains(&t) => Some(Gender::Female),
                t if MALE_PRONOUNS.contains(&t) => Some(Gender::Male),
                t => self.noun_gender(t),
            };
            match (found, g) {
                (_, None) => {}
                (None, Some(g)) => found = Some(g),
                (Some(a), Some(b)) if a != b => return Gender::Unstated,
                _ => {}
            }
        }
        found.unwrap_or(Gender::Unstated)
    }
}

struct Tok<'a> {
    start: usize,
    end: usize,
    text: &'a str,
    lower: String,
}

impl Tok<'_> {
    fn capitalized(&self) -> bool {
        self.text.chars().next().is_some_and(char::is_uppercase)
    }
}

fn tokens(text: &str) -> Vec<Tok<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_alphanumeric(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(Tok {
                    start: s,
                    end: i,
                    text: &text[s..i],
                    lower: text[s..i].to_lowercase(),
                });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(Tok {
            start: s,
            end: text.len(),
            text: &text[s..],
            lower: text[s..].to_lowercase(),
        });
    }
    out
}

fn separator<'a>(text: &'a str, toks: &[Tok], i: usize) -> &'a str {
    &text[toks[i].end..toks[i + 1].start]
}

/// Separator that keeps two tokens inside one noun phrase.
fn joins_phrase(sep: &str) -> bool {
    sep == "-" || (!sep.is_empty() && sep.chars().all(char::is_whitespace))
}

#[derive(Default)]
struct Found {
    gender: Option<String>,
    origin: Option<String>,
}

/// Label extraction with a fixed mapping table and lexicon.
#[derive(Debug, Clone)]
pub struct Extractor {
    pub table: MappingTable,
    pub lexicon: Lexicon,
}

impl Default for Extractor {
    fn default() -> Self {
        Self::new(MappingTable::default_table(), Lexicon::default())
    }
}

fn default_extractor() -> &'static Extractor {
    static EXTRACTOR: OnceLock<Extractor> = OnceLock::new();
    EXTRACTOR.get_or_init(Extractor::default)
}

/// Rule-based extraction with the built-in table and lexicon.
pub fn rule_based_extract(story: &str) -> RawExtraction {
    default_extractor().rule_based(0, story)
}

impl Extractor {
    pub fn new(table: MappingTable, lexicon: Lexicon) -> Self {
        Self { table, lexicon }
    }

    pub fn label(&self, gender_text: Option<&str>, origin_text: Option<&str>) -> DemographicLabel {
        DemographicLabel {
            gender: gender_text.map_or(Gender::Unstated, |g| self.lexicon.resolve_gender(g)),
            origin_text: origin_text.map(str::to_string),
            ethnicity: origin_text.map_or(EthnicityCategory::Unclassified, |o| self.table.classify(o)),
        }
    }

    fn raw(&self, index: usize, gender: Option<String>, origin: Option<String>, method: ExtractionMethod) -> RawExtraction {
        let resolved = self.label(gender.as_deref(), origin.as_deref());
        RawExtraction {
            story_index: index,
            gender_text: gender,
            origin_text: origin,
            method,
            resolved,
        }
    }

    /// Builds an extraction from labels supplied by a dataset.
    pub fn provided(&self, index: usize, gender_text: Option<String>, origin_text: Option<String>) -> RawExtraction {
        self.raw(index, gender_text, origin_text, ExtractionMethod::Provided)
    }

    /// Ordered patterns: parenthetical, apposition, lexicon scan, pronouns.
    /// The first pattern that yields a field wins for that field.
    pub fn rule_based(&self, index: usize, story: &str) -> RawExtraction {
        let toks = tokens(story);
        let mut found = self.parenthetical(story);
        let stages: [&dyn Fn() -> Found; 3] = [
            &|| self.apposition(story, &toks),
            &|| self.lexicon_scan(story, &toks),
            &|| self.pronoun(&toks),
        ];
        for stage in stages {
            if found.gender.is_some() && found.origin.is_some() {
                break;
            }
            let next = stage();
            found.gender = found.gender.or(next.gender);
            found.origin = found.origin.or(next.origin);
        }
        self.raw(index, found.gender, found.origin, ExtractionMethod::RuleBased)
    }

    fn parenthetical(&self, story: &str) -> Found {
        static PAREN: OnceLock<Regex> = OnceLock::new();
        let re = PAREN.get_or_init(|| Regex::new(r"\(([^()]{1,80})\)").unwrap());
        for cap in re.captures_iter(story) {
            let inner = cap.get(1).unwrap().as_str();
            let toks = tokens(inner);
            let Some(g) = toks.iter().position(|t| self.lexicon.noun_gender(&t.lower).is_some()) else {
                continue;
            };
            let rest: Vec<&str> = toks
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != g)
                .map(|(_, t)| t.text)
                .collect();
            let origin = if rest.is_empty() {
                None
            } else {
                // Keep the original spelling between the first and last origin token.
                let first = toks.iter().enumerate().find(|(i, _)| *i != g).unwrap().1;
                let last = toks.iter().enumerate().rev().find(|(i, _)| *i != g).unwrap().1;
                let span = &inner[first.start..last.end];
                Some(if g > 0 && g < toks.len() - 1 { rest.join(" ") } else { span.to_string() })
            };
            return Found {
                gender: Some(toks[g].text.to_string()),
                origin,
            };
        }
        Found::default()
    }

    fn is_origin_phrase(&self, phrase: &str) -> bool {
        let norm = normalize(phrase);
        let toks: Vec<&str> = norm.split(' ').filter(|t| !t.is_empty()).collect();
        !self.table.find_all(&toks).is_empty() || toks.iter().any(|t| self.lexicon.origin_terms.contains(*t))
    }

    /// `a/an/the <up to six words> <gender noun>`; the origin is the run of
    /// capitalized words directly before the noun.
    fn apposition(&self, story: &str, toks: &[Tok]) -> Found {
        for (i, t) in toks.iter().enumerate() {
            if !matches!(t.lower.as_str(), "a" | "an" | "the") {
                continue;
            }
            let mut j = i + 1;
            while j < toks.len() && j <= i + APPOSITION_WINDOW && joins_phrase(separator(story, toks, j - 1)) {
                let lower = toks[j].lower.as_str();
                if PREPOSITIONS.contains(&lower) || POSSESSIVES.contains(&lower) {
                    break;
                }
                if self.lexicon.noun_gender(&toks[j].lower).is_some() {
                    let mut k = j;
                    while k > i + 1 && toks[k - 1].capitalized() && joins_phrase(separator(story, toks, k - 1)) {
                        k -= 1;
                    }
                    let origin = (k < j)
                        .then(|| story[toks[k].start..toks[j - 1].end].to_string())
                        .filter(|o| self.is_origin_phrase(o));
                    return Found {
                        gender: Some(toks[j].text.to_string()),
                        origin,
                    };
                }
                j += 1;
            }
        }
        Found::default()
    }

    fn lexicon_scan(&self, story: &str, toks: &[Tok]) -> Found {
        let gender = toks
            .iter()
            .enumerate()
            .find(|(i, t)| {
                self.lexicon.noun_gender(&t.lower).is_some()
                    && !(*i > 0 && POSSESSIVES.contains(&toks[i - 1].lower.as_str()))
            })
            .map(|(_, t)| t.text.to_string());
        Found {
            gender,
            origin: self.origin_scan(story, toks),
        }
    }

    /// First capitalized origin mention that is not part of a place or
    /// compound-adjective phrase ("a French patisserie", "Indian-inspired").
    fn origin_scan(&self, story: &str, toks: &[Tok]) -> Option<String> {
        let lower: Vec<&str> = toks.iter().map(|t| t.lower.as_str()).collect();
        let mut spans: Vec<(usize, usize)> = self
            .table
            .find_all(&lower)
            .into_iter()
            .map(|m| (m.token_start, m.token_start + m.token_len))
            .collect();
        spans.extend(
            lower
                .iter()
                .enumerate()
                .filter(|(_, t)| self.lexicon.origin_terms.contains(**t))
                .map(|(i, _)| (i, i + 1)),
        );
        spans.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
        let accepted: Vec<(usize, usize)> = spans
            .into_iter()
            .filter(|&(s, e)| toks[s..e].iter().all(Tok::capitalized) && self.origin_context_ok(story, toks, s, e))
            .collect();
        let &(start, mut end) = accepted.first()?;
        // Merge adjacent mentions so "Mexican-American" stays whole.
        for &(s, e) in &accepted[1..] {
            if s <= end || (s == end && joins_phrase(separator(story, toks, end - 1))) {
                end = end.max(e);
            } else if s > end {
                break;
            }
        }
        Some(story[toks[start].start..toks[end - 1].end].to_string())
    }

    fn origin_context_ok(&self, story: &str, toks: &[Tok], start: usize, end: usize) -> bool {
        if end < toks.len() {
            let sep = separator(story, toks, end - 1);
            if sep == "-" && !toks[end].capitalized() {
                return false;
            }
        }
        let mut i = start;
        for _ in 0..4 {
            if i == 0 || !joins_phrase(separator(story, toks, i - 1)) {
                return true;
            }
            i -= 1;
            if PREPOSITIONS.contains(&toks[i].lower.as_str()) {
                return false;
            }
            if toks[i].capitalized() {
                return true;
            }
        }
        true
    }

    fn pronoun(&self, toks: &[Tok]) -> Found {
        Found {
            gender: toks
                .iter()
                .find(|t| FEMALE_PRONOUNS.contains(&t.lower.as_str()) || MALE_PRONOUNS.contains(&t.lower.as_str()))
                .map(|t| t.text.to_string()),
            origin: None,
        }
    }

    /// One line per story, numbered from 1, newlines folded to spaces.
    pub fn story_block(stories: &[String]) -> String {
        stories
            .iter()
            .enumerate()
            .map(|(i, s)| format!("Story {}: {}", i + 1, s.split_whitespace().collect::<Vec<_>>().join(" ")))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Parses `<n> | <gender> | <origin>` lines. Later duplicates of a story
    /// number are ignored.
    pub fn parse_agent_reply(reply: &str) -> BTreeMap<usize, (Option<String>, Option<String>)> {
        static NUM: OnceLock<Regex> = OnceLock::new();
        let num = NUM.get_or_init(|| Regex::new(r"(?i)^\s*[*#-]*\s*(?:story\s*)?#?\s*(\d+)\s*[.:)]?\s*\**\s*$").unwrap());
        let mut out = BTreeMap::new();
        for line in reply.lines() {
            let cols: Vec<&str> = line.split('|').collect();
            if cols.len() < 3 {
                continue;
            }
            let Some(n) = num.captures(cols[0]).and_then(|c| c[1].parse::<usize>().ok()) else {
                continue;
            };
            if n == 0 {
                continue;
            }
            out.entry(n).or_insert_with(|| (agent_field(cols[1]), agent_field(cols[2])));
        }
        out
    }

    /// Sends the batch to the extraction agent; stories it omits fall back to
    /// the rule-based extractor one by one, and a failed request falls back
    /// for the whole batch.
    pub fn extract_labels(
        &self,
        stories: &[String],
        backend: &Backend,
        template: &PromptTemplate,
        tag: &str,
    ) -> Result<LabelBatch, ExtractionError> {
        if stories.is_empty() {
            return Err(ExtractionError::EmptyBatch);
        }
        let prompt = template.render(&BTreeMap::from([("stories", Self::story_block(stories))]))?;
        let request = backend.request(vec![ChatMessage::user(prompt.clone())], tag);
        match backend.complete(&request) {
            Ok(resp) => {
                let parsed = Self::parse_agent_reply(&resp.text);
                let extractions = stories
                    .iter()
                    .enumerate()
                    .map(|(i, s)| match parsed.get(&(i + 1)) {
                        Some((g, o)) => self.raw(i, g.clone(), o.clone(), ExtractionMethod::Agent),
                        None => self.rule_based(i, s),
                    })
                    .collect();
                Ok(LabelBatch {
                    extractions,
                    fallback: false,
                    prompt,
                    reply: Some(resp.text),
                    error: None,
                })
            }
            Err(e) => {
                log::warn!("extraction agent failed ({e}); using rule-based extraction for {tag}");
                Ok(LabelBatch {
                    extractions: self.rule_based_batch(stories),
                    fallback: true,
                    prompt,
                    reply: None,
                    error: Some(e),
                })
            }
        }
    }

    pub fn rule_based_batch(&self, stories: &[String]) -> Vec<RawExtraction> {
        stories.iter().enumerate().map(|(i, s)| self.rule_based(i, s)).collect()
    }
}

fn agent_field(raw: &str) -> Option<String> {
    let v = raw.trim().trim_matches(|c: char| c == '*' || c == '"' || c == '`' || c == '\'').trim();
    let absent = ["", "-", "none", "n/a", "na", "unknown", "not stated", "unstated", "not mentioned", "null"];
    if absent.contains(&v.to_lowercase().as_str()) {
        None
    } else {
        Some(v.to_string())
    }
}

/// Result of one agent extraction call.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelBatch {
    pub extractions: Vec<RawExtraction>,
    /// The agent call failed and every story used the rule-based path.
    pub fallback: bool,
    pub prompt: String,
    pub reply: Option<String>,
    pub error: Option<BackendError>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Disagreement {
    pub story_id: String,
    pub agent_gender: String,
    pub rule_gender: String,
    pub agent_origin: String,
    pub rule_origin: String,
}

fn label_pair(x: &RawExtraction) -> (Gender, EthnicityCategory) {
    (x.resolved.gender, x.resolved.ethnicity)
}

/// Fraction of resolved labels (gender and ethnicity per story) on which the
/// two extractions agree.
pub fn agreement_rate(agent: &[RawExtraction], rule: &[RawExtraction]) -> f64 {
    let n = agent.len().min(rule.len());
    if n == 0 {
        return 1.0;
    }
    let agree: usize = agent
        .iter()
        .zip(rule)
        .map(|(a, r)| {
            let (ag, ae) = label_pair(a);
            let (rg, re) = label_pair(r);
            usize::from(ag == rg) + usize::from(ae == re)
        })
        .sum();
    agree as f64 / (2 * n) as f64
}

/// Stories whose resolved labels differ; `id_prefix` is joined to the
/// 1-based story number.
pub fn disagreements(id_prefix: &str, agent: &[RawExtraction], rule: &[RawExtraction]) -> Vec<Disagreement> {
    agent
        .iter()
        .zip(rule)
        .filter(|(a, r)| label_pair(a) != label_pair(r))
        .map(|(a, r)| Disagreement {
            story_id: format!("{id_prefix}{}", a.story_index + 1),
            agent_gender: a.resolved.gender.as_str().to_string(),
            rule_gender: r.resolved.gender.as_str().to_string(),
            agent_origin: a.origin_text.clone().unwrap_or_default(),
            rule_origin: r.origin_text.clone().unwrap_or_default(),
        })
        .collect()
}

pub fn write_disagreement_csv<W: Write>(out: W, rows: &[Disagreement]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(["story_id", "agent_gender", "rule_gender", "agent_origin", "rule_origin"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DescriptorKind {
    Modifier,
    RoleVerb,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptorTerm {
    pub term: String,
    pub kind: DescriptorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptorList {
    pub story_index: usize,
    pub terms: Vec<DescriptorTerm>,
}

impl DescriptorList {
    /// Lowercases, drops empties and keeps the first occurrence of each term.
    pub fn new(story_index: usize, raw: impl IntoIterator<Item = (String, DescriptorKind)>) -> Self {
        let mut seen = HashSet::new();
        let terms = raw
            .into_iter()
            .filter_map(|(t, kind)| {
                let term = t.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
                (!term.is_empty() && seen.insert(term.clone())).then_some(DescriptorTerm { term, kind })
            })
            .collect();
        Self { story_index, terms }
    }

    pub fn words(&self) -> Vec<&str> {
        self.terms.iter().map(|t| t.term.as_str()).collect()
    }
}

const DESCRIPTOR_STOPLIST: &[&str] = &[
    "only", "early", "family", "daily", "really", "likely", "italy", "reply", "supply", "apply",
    "assembly", "butterfly", "jelly", "belly", "holy", "july", "emily", "kelly", "sally", "molly",
    "lily", "something", "nothing", "anything", "everything", "morning", "evening", "during",
    "ceiling", "building", "wedding", "thing", "things", "string", "spring", "sibling", "pudding",
    "clothing", "feeling", "meeting", "seasoning", "topping", "filling", "fillings", "dumpling",
    "dumplings", "king", "bring", "ring", "sing", "wing", "being", "ending", "beginning", "bed",
    "need", "indeed", "feed", "seed", "speed", "hundred", "sacred", "kindred", "shed", "bread",
    "spread", "thread", "ahead", "instead", "dead", "head", "lead", "red", "wed", "table",
    "vegetable", "vegetables", "comfortable", "possible", "impossible", "visible", "drive",
    "five", "give", "live", "olive", "olives", "archive", "detective", "executive", "native",
    "representative", "house", "famous", "because", "various", "anxious", "ingredients",
    "waffles", "customers", "customer", "stories", "story", "professional", "professionals",
];

/// Offline approximation: adjective list plus suffix rules for modifiers,
/// `-ed`/`-ing` words for role verbs.
pub fn offline_descriptors(index: usize, story: &str, lexicon: &Lexicon) -> DescriptorList {
    let raw = tokens(story).into_iter().filter_map(|t| {
        let w = t.lower;
        if w.len() < 4 || DESCRIPTOR_STOPLIST.contains(&w.as_str()) || t.text.chars().next().is_some_and(char::is_uppercase) && !lexicon.adjectives.contains(&w) {
            return None;
        }
        let long = w.chars().count() >= 5;
        let kind = if lexicon.adjectives.contains(&w) {
            DescriptorKind::Modifier
        } else if long && (w.ends_with("ed") || w.ends_with("ing")) {
            DescriptorKind::RoleVerb
        } else if long
            && ["ful", "ive", "ous", "able", "ible", "ly"].iter().any(|s| w.ends_with(s))
        {
            DescriptorKind::Modifier
        } else {
            return None;
        };
        Some((w, kind))
    });
    DescriptorList::new(index, raw)
}

/// Parses `term | modifier` / `term | role-verb` lines; bare lines are modifiers.
pub fn parse_descriptor_reply(index: usize, reply: &str) -> DescriptorList {
    let raw = reply.lines().filter_map(|line| {
        let line = line
            .trim()
            .trim_start_matches(|c: char| c == '-' || c == '*' || c == '•' || c.is_ascii_digit() || c == '.' || c == ')')
            .trim();
        if line.is_empty() || line.ends_with(':') {
            return None;
        }
        let mut cols = line.splitn(2, '|');
        let term = cols.next()?.trim().trim_matches(|c: char| c == '"' || c == '*' || c == '`');
        let kind = match cols.next().map(normalize) {
            Some(k) if k.contains("verb") || k.contains("role") => DescriptorKind::RoleVerb,
            _ => DescriptorKind::Modifier,
        };
        Some((term.to_string(), kind))
    });
    DescriptorList::new(index, raw)
}

/// Agent descriptor extraction; falls back to the offline path (flagged) when
/// there is no backend or the request fails.
pub fn extract_descriptors(
    index: usize,
    story: &str,
    backend: Option<&Backend>,
    template: &PromptTemplate,
    lexicon: &Lexicon,
    tag: &str,
) -> Result<(DescriptorList, bool), ExtractionError> {
    let Some(backend) = backend else {
        return Ok((offline_descriptors(index, story, lexicon), false));
    };
    if story.trim().is_empty() {
        return Ok((DescriptorList::new(index, []), false));
    }
    let prompt = template.render(&BTreeMap::from([("story", story.to_string())]))?;
    match backend.complete(&backend.request(vec![ChatMessage::user(prompt)], tag)) {
        Ok(resp) => Ok((parse_descriptor_reply(index, &resp.text), false)),
        Err(e) => {
            log::warn!("descriptor agent failed ({e}); using offline descriptors for {tag}");
            Ok((offline_descriptors(index, story, lexicon), true))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn x(story: &str) -> (Gender, Option<String>, EthnicityCategory) {
        let r = rule_based_extract(story);
        (r.resolved.gender, r.origin_text, r.resolved.ethnicity)
    }

    #[test]
    fn parenthetical() {
        let (g, o, e) = x("Carlos (Hispanic Male), crafted intricate cocktails with flair.");
        assert_eq!((g, o.as_deref(), e), (Gender::Male, Some("Hispanic"), EthnicityCategory::HispanicLatino));
        let (g, o, e) = x("Mei's (Asian female) delicate sugar sculptures adorned each dessert plate.");
        assert_eq!((g, o.as_deref(), e), (Gender::Female, Some("Asian"), EthnicityCategory::Api));
        let (g, o, _) = x("Ana (female) smiled.");
        assert_eq!((g, o), (Gender::Female, None));
    }

    #[test]
    fn apposition_and_scan() {
        let (g, o, e) = x("Chef Jamal, a warm and energetic African American woman with a contagious smile.");
        assert_eq!((g, o.as_deref(), e), (Gender::Female, Some("African American"), EthnicityCategory::African));
        let (g, o, e) = x("The cheerful Mexican-American waitress, Maria, expertly balanced plates.");
        assert_eq!((g, o.as_deref(), e), (Gender::Female, Some("Mexican-American"), EthnicityCategory::HispanicLatino));
        let (g, o, e) = x("In a quaint French patisserie, I met Emma, a talented pastry chef. She smiled.");
        assert_eq!((g, o, e), (Gender::Female, None, EthnicityCategory::Unclassified));
        let (g, o, _) = x("I met Rohan, the owner of a successful Indian-inspired food truck. He laughed.");
        assert_eq!((g, o), (Gender::Male, None));
    }

    #[test]
    fn no_markers_is_absent() {
        let r = rule_based_extract("The engineer reviewed the plans.");
        assert_eq!(r.gender_text, None);
        assert_eq!(r.origin_text, None);
        assert_eq!(r.resolved.gender, Gender::Unstated);
        assert_eq!(r.resolved.ethnicity, EthnicityCategory::Unclassified);
    }

    #[test]
    fn possessive_kin_is_not_the_character() {
        let (g, _, _) = x("Lee baked a cake for her son.");
        assert_eq!(g, Gender::Female);
    }

    #[test]
    fn resolve_gender_text() {
        let l = Lexicon::default();
        assert_eq!(l.resolve_gender("Female"), Gender::Female);
        assert_eq!(l.resolve_gender("M"), Gender::Male);
        assert_eq!(l.resolve_gender("non-binary"), Gender::Unstated);
        assert_eq!(l.resolve_gender("man or woman"), Gender::Unstated);
    }

    #[test]
    fn agent_reply_parsing() {
        let p = Extractor::parse_agent_reply(
            "Here you go:\n1 | female | White\n**2.** | Male | NONE\nStory 3 | none | Korean-American\n2 | female | x\n",
        );
        assert_eq!(p[&1], (Some("female".into()), Some("White".into())));
        assert_eq!(p[&2], (Some("Male".into()), None));
        assert_eq!(p[&3], (None, Some("Korean-American".into())));
        assert_eq!(p.len(), 3);
    }

    #[test]
    fn descriptors() {
        let d = offline_descriptors(
            0,
            "Carlos (Hispanic Male), crafted intricate cocktails with flair, explaining the history behind each drink.",
            &Lexicon::default(),
        );
        let w = d.words();
        assert!(w.contains(&"crafted") && w.contains(&"explaining"), "{w:?}");
        let d = offline_descriptors(0, "A patient and patient baker. Patient!", &Lexicon::default());
        assert_eq!(d.words(), vec!["patient"]);
        assert!(offline_descriptors(0, "Sam met Lee.", &Lexicon::default()).terms.is_empty());
        let p = parse_descriptor_reply(0, "- Warm | modifier\n- crafted | role-verb\nwarm | modifier\n");
        assert_eq!(p.terms.len(), 2);
        assert_eq!(p.terms[1].kind, DescriptorKind::RoleVerb);
    }

    #[test]
    fn disagreement_csv_has_header() {
        let mut buf = Vec::new();
        write_disagreement_csv(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim(), "story_id,agent_gender,rule_gender,agent_origin,rule_origin");
    }

    proptest! {
        #[test]
        fn stripped_stories_stay_absent(words in prop::collection::vec("[a-z]{1,8}", 0..30)) {
            let l = Lexicon::default();
            let words: Vec<String> = words
                .into_iter()
                .filter(|w| l.noun_gender(w).is_none() && !FEMALE_PRONOUNS.contains(&w.as_str()) && !MALE_PRONOUNS.contains(&w.as_str()))
                .collect();
            let r = rule_based_extract(&words.join(" "));
            prop_assert_eq!(r.gender_text, None);
            prop_assert_eq!(r.origin_text, None);
        }

        #[test]
        fn descriptor_terms_unique_and_lowercase(text in "[A-Za-z ,.]{0,200}") {
            let d = offline_descriptors(3, &text, &Lexicon::default());
            let mut seen = HashSet::new();
            for t in &d.terms {
                prop_assert!(seen.insert(t.term.clone()));
                prop_assert_eq!(t.term.to_lowercase(), t.term.clone());
            }
        }
    }
}
