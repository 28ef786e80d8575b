//! Deterministic offline backend.
//!
//! Replies come from a replay table keyed by [`prompt_hash`], or are
//! synthesized: story batches with scripted demographic weights, extraction
//! and descriptor answers computed by the rule-based extractor, and tally
//! echoing explanations. Every reply is a pure function of the script seed,
//! model, request tag and messages.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, ChatMessage, CompletionRequest, CompletionResponse, FinishReason, Transport};
use crate::demographics::{EthnicityCategory, Gender, IntersectionKey};
use crate::extraction::{offline_descriptors, DescriptorKind, Extractor};

/// Hex sha256 of the serialized message list.
pub fn prompt_hash(messages: &[ChatMessage]) -> String {
    let json = serde_json::to_vec(messages).expect("messages serialize");
    hex(&Sha256::digest(json))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Each story draws its cell independently.
    #[default]
    Random,
    /// Cell counts follow the weights by largest remainder, then shuffled.
    Quota,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplanationStyle {
    /// Restates the tally it was shown, naming the over-represented groups.
    #[default]
    Echo,
    /// Only blames the training data.
    Superficial,
    /// Empty replies.
    Empty,
}

/// Demographic weights for generated stories. Ethnicities missing from the
/// map share the remaining mass equally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellWeights {
    #[serde(default)]
    pub ethnicity: BTreeMap<EthnicityCategory, f64>,
    #[serde(default = "half")]
    pub female: f64,
}

fn half() -> f64 {
    0.5
}

impl Default for CellWeights {
    fn default() -> Self {
        Self {
            ethnicity: BTreeMap::new(),
            female: 0.5,
        }
    }
}

impl CellWeights {
    pub fn skewed(category: EthnicityCategory, weight: f64) -> Self {
        Self {
            ethnicity: BTreeMap::from([(category, weight)]),
            female: 0.5,
        }
    }

    /// Probability of each intersection cell, in [`IntersectionKey::all`] order.
    pub fn cell_probabilities(&self) -> Result<[f64; 8], String> {
        if !(0.0..=1.0).contains(&self.female) {
            return Err(format!("female weight {} outside [0, 1]", self.female));
        }
        let mut eth = [f64::NAN; 4];
        let mut given = 0.0;
        for (cat, w) in &self.ethnicity {
            let Some(i) = cat.index() else {
                return Err("weights must name one of the four categories".into());
            };
            if !w.is_finite() || *w < 0.0 {
                return Err(format!("bad weight {w} for {cat}"));
            }
            eth[i] = *w;
            given += w;
        }
        if given > 1.0 + 1e-9 {
            return Err(format!("ethnicity weights sum to {given} > 1"));
        }
        let missing = eth.iter().filter(|w| w.is_nan()).count();
        for w in eth.iter_mut().filter(|w| w.is_nan()) {
            *w = (1.0 - given).max(0.0) / missing as f64;
        }
        let sum: f64 = eth.iter().sum();
        if sum <= 0.0 {
            return Err("weights put no mass on any category".into());
        }
        let mut out = [0.0; 8];
        for key in IntersectionKey::all() {
            let e = eth[key.ethnicity().index().unwrap()] / sum;
            let g = if key.gender() == Gender::Female { self.female } else { 1.0 - self.female };
            out[key.index()] = e * g;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseWeights {
    #[serde(default)]
    pub default: CellWeights,
    #[serde(default)]
    pub vanilla: Option<CellWeights>,
    #[serde(default)]
    pub baseline: Option<CellWeights>,
    #[serde(default)]
    pub bame: Option<CellWeights>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Vanilla,
    Baseline,
    Bame,
}

impl PhaseWeights {
    fn for_phase(&self, phase: Phase) -> &CellWeights {
        match phase {
            Phase::Vanilla => self.vanilla.as_ref(),
            Phase::Baseline => self.baseline.as_ref(),
            Phase::Bame => self.bame.as_ref(),
        }
        .unwrap_or(&self.default)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default)]
    pub weights: PhaseWeights,
    #[serde(default)]
    pub explanation: ExplanationStyle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default)]
    pub seed: u64,
    /// prompt hash -> reply text; consulted before synthesis.
    #[serde(default)]
    pub replay: BTreeMap<String, String>,
    /// `None` makes unscripted prompts fail with `MockMiss`.
    #[serde(default = "default_synthetic")]
    pub synthetic: Option<SyntheticConfig>,
}

fn default_synthetic() -> Option<SyntheticConfig> {
    Some(SyntheticConfig::default())
}

impl Default for MockScript {
    fn default() -> Self {
        Self {
            seed: 0,
            replay: BTreeMap::new(),
            synthetic: default_synthetic(),
        }
    }
}

impl MockScript {
    pub fn seeded(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn with_synthetic(mut self, synthetic: SyntheticConfig) -> Self {
        self.synthetic = Some(synthetic);
        self
    }
}

pub struct MockTransport {
    script: MockScript,
    extractor: Extractor,
}

impl MockTransport {
    pub fn new(script: MockScript) -> Self {
        Self {
            script,
            extractor: Extractor::default(),
        }
    }

    fn rng(&self, request: &CompletionRequest) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.script.seed.to_le_bytes());
        for part in [&request.model, &request.request_tag] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        h.update(serde_json::to_vec(&request.messages).expect("messages serialize"));
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    fn synthesize(&self, cfg: &SyntheticConfig, request: &CompletionRequest) -> Result<String, BackendError> {
        let prompt = request.last_user_text();
        let mut rng = self.rng(request);
        if prompt.contains("information extraction agent") {
            return Ok(if prompt.contains("nationality or ethnicity") {
                self.extraction_reply(prompt)
            } else {
                self.descriptor_reply(prompt)
            });
        }
        if let Some(gen) = GenerationPrompt::parse(prompt) {
            let weights = cfg.weights.for_phase(gen.phase);
            let probs = weights.cell_probabilities().map_err(BackendError::InvalidRequest)?;
            let cells = match cfg.sampling {
                Sampling::Random => random_cells(&probs, gen.batch_size, &mut rng),
                Sampling::Quota => quota_cells(&probs, gen.batch_size, &mut rng),
            };
            return Ok(stories(&cells, &gen.occupation, &mut rng));
        }
        Ok(match cfg.explanation {
            ExplanationStyle::Empty => String::new(),
            ExplanationStyle::Superficial => {
                "These outputs simply reflect patterns in training data.".to_string()
            }
            ExplanationStyle::Echo => echo_explanation(prompt),
        })
    }

    fn extraction_reply(&self, prompt: &str) -> String {
        static LINE: OnceLock<Regex> = OnceLock::new();
        let re = LINE.get_or_init(|| Regex::new(r"(?m)^Story (\d+): (.*)$").unwrap());
        re.captures_iter(prompt)
            .map(|c| {
                let r = self.extractor.rule_based(0, &c[2]);
                format!(
                    "{} | {} | {}",
                    &c[1],
                    r.gender_text.as_deref().unwrap_or("NONE"),
                    r.origin_text.as_deref().unwrap_or("NONE")
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn descriptor_reply(&self, prompt: &str) -> String {
        let story = prompt.rsplit_once("Story: ").map_or("", |(_, s)| s);
        offline_descriptors(0, story, &self.extractor.lexicon)
            .terms
            .iter()
            .map(|t| {
                let kind = match t.kind {
                    DescriptorKind::Modifier => "modifier",
                    DescriptorKind::RoleVerb => "role-verb",
                };
                format!("{} | {kind}", t.term)
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

impl Transport for MockTransport {
    fn send(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let key = prompt_hash(&request.messages);
        let text = match (self.script.replay.get(&key), &self.script.synthetic) {
            (Some(text), _) => text.clone(),
            (None, Some(cfg)) => self.synthesize(cfg, request)?,
            (None, None) => return Err(BackendError::MockMiss(key)),
        };
        Ok(CompletionResponse {
            text,
            finish_reason: FinishReason::Complete,
            usage: None,
            latency: Duration::ZERO,
        })
    }
}

struct GenerationPrompt {
    phase: Phase,
    batch_size: usize,
    occupation: String,
}

impl GenerationPrompt {
    fn parse(prompt: &str) -> Option<Self> {
        static RE: OnceLock<(Regex, Regex)> = OnceLock::new();
        let (count, occ) = RE.get_or_init(|| {
            (
                Regex::new(r"Create (\d+) different stories about interacting with").unwrap(),
                Regex::new(r"(?:work|working) in (.+?)\.(?:\s|$)").unwrap(),
            )
        });
        let batch_size = count.captures(prompt)?[1].parse().ok()?;
        let occupation = occ.captures(prompt)?[1].to_string();
        let phase = if prompt.contains("take into consideration") {
            Phase::Bame
        } else if prompt.contains("equal and balanced") {
            Phase::Baseline
        } else {
            Phase::Vanilla
        };
        Some(Self {
            phase,
            batch_size,
            occupation,
        })
    }
}

fn random_cells(probs: &[f64; 8], n: usize, rng: &mut ChaCha8Rng) -> Vec<IntersectionKey> {
    let keys = IntersectionKey::all();
    (0..n)
        .map(|_| {
            let mut u: f64 = rng.gen();
            for (k, p) in keys.iter().zip(probs) {
                if u < *p {
                    return *k;
                }
                u -= p;
            }
            keys[probs.iter().rposition(|p| *p > 0.0).unwrap_or(7)]
        })
        .collect()
}

/// Largest-remainder apportionment of `n` over the cells, shuffled.
pub(crate) fn quota_counts(probs: &[f64; 8], n: usize) -> [usize; 8] {
    let mut counts = [0usize; 8];
    let mut rema: Vec<(f64, usize)> = Vec::with_capacity(8);
    for (i, p) in probs.iter().enumerate() {
        let exact = p * n as f64;
        counts[i] = exact.floor() as usize;
        rema.push((exact - exact.floor(), i));
    }
    let mut left = n - counts.iter().sum::<usize>();
    rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, i) in rema {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

fn quota_cells(probs: &[f64; 8], n: usize, rng: &mut ChaCha8Rng) -> Vec<IntersectionKey> {
    let counts = quota_counts(probs, n);
    let mut cells: Vec<IntersectionKey> = IntersectionKey::all()
        .iter()
        .zip(counts)
        .flat_map(|(k, c)| std::iter::repeat_n(*k, c))
        .collect();
    cells.shuffle(rng);
    cells
}

fn origins(e: EthnicityCategory) -> &'static [&'static str] {
    match e {
        EthnicityCategory::European => &["White", "Italian", "Irish", "Polish", "Greek", "German"],
        EthnicityCategory::African => &["Black", "Nigerian", "Kenyan", "Ghanaian", "African American"],
        EthnicityCategory::Api => &["Korean", "Japanese", "Filipino", "Vietnamese", "Chinese", "Indian", "Samoan"],
        EthnicityCategory::HispanicLatino => &["Hispanic", "Mexican", "Colombian", "Puerto Rican", "Peruvian", "Cuban"],
        EthnicityCategory::Unclassified => &[],
    }
}

fn names(key: IntersectionKey) -> &'static [&'static str] {
    use EthnicityCategory::*;
    match (key.ethnicity(), key.gender()) {
        (European, Gender::Female) => &["Sofia", "Emma", "Anna", "Claire", "Katarzyna", "Greta"],
        (European, _) => &["Lukas", "Marco", "Sean", "Piotr", "Nikos", "Thomas"],
        (African, Gender::Female) => &["Amara", "Nneoma", "Wanjiru", "Abena", "Keisha", "Zuri"],
        (African, _) => &["Kwame", "Chidi", "Jamal", "Otieno", "Malik", "Tunde"],
        (Api, Gender::Female) => &["Mei", "Hana", "Nalini", "Linh", "Maria Clara", "Leilani"],
        (Api, _) => &["Taro", "Min-jun", "Rohan", "Bao", "Wei", "Sione"],
        (HispanicLatino, Gender::Female) => &["Lucia", "Valentina", "Camila", "Rosa", "Gabriela", "Isabel"],
        (HispanicLatino, _) => &["Carlos", "Juan", "Mateo", "Diego", "Luis", "Andres"],
        _ => &["Alex"],
    }
}

const ADJECTIVES: [&str; 12] = [
    "patient", "meticulous", "cheerful", "experienced", "creative", "calm", "energetic", "dedicated",
    "friendly", "knowledgeable", "attentive", "confident",
];
const ACTIONS: [&str; 12] = [
    "walked me through every step of the process",
    "answered my questions with remarkable clarity",
    "shared a practical tip I still use today",
    "solved a problem that had puzzled the whole team",
    "explained the tradeoffs before we made a decision",
    "stayed late to make sure everything was finished",
    "showed me how small details change the outcome",
    "turned a stressful afternoon into a calm one",
    "told a story about their first year on the job",
    "checked each item twice before signing off",
    "introduced me to colleagues who could help further",
    "suggested an approach I had never considered",
];
const CLOSINGS: [&str; 8] = [
    "I left with a new appreciation for the work.",
    "The visit changed how I think about the field.",
    "I would gladly return for their advice.",
    "It was clear they loved what they do.",
    "Their expertise made the whole experience easy.",
    "I recommended them to friends the same week.",
    "The conversation stayed with me for days.",
    "Everything went more smoothly than I expected.",
];

fn stories(cells: &[IntersectionKey], occupation: &str, rng: &mut ChaCha8Rng) -> String {
    let mut out = format!("Here are {} stories about professionals in {occupation}:\n", cells.len());
    for (i, key) in cells.iter().enumerate() {
        let name = names(*key).choose(rng).unwrap();
        let origin = origins(key.ethnicity()).choose(rng).unwrap();
        let adj = ADJECTIVES.choose(rng).unwrap();
        let action = ACTIONS.choose(rng).unwrap();
        let closing = CLOSINGS.choose(rng).unwrap();
        let gender = if key.gender() == Gender::Female { "female" } else { "male" };
        out.push_str(&format!(
            "\n{}. {name} ({origin} {gender}), a {adj} professional in {occupation}, {action}. {closing}\n",
            i + 1
        ));
    }
    out
}

fn echo_explanation(prompt: &str) -> String {
    let mentioned: Vec<&str> = EthnicityCategory::NAMED
        .iter()
        .map(|c| c.display_name())
        .chain(["female", "male"])
        .filter(|name| prompt.contains(name))
        .collect();
    let facts: Vec<&str> = prompt
        .lines()
        .map(str::trim)
        .filter(|l| l.chars().any(|c| c.is_ascii_digit()) && l.contains(':'))
        .collect();
    let groups = if mentioned.is_empty() {
        "the groups I described".to_string()
    } else {
        mentioned.join(", ")
    };
    let mut text = format!(
        "I defaulted to the demographic associations that feel most typical for this occupation, \
         so some groups ({groups}) appear more often than a balanced set would require and others \
         are under-represented. I did not deliberately plan the mix of genders within each ethnicity."
    );
    if !facts.is_empty() {
        text.push_str(" Specifically: ");
        text.push_str(&facts.join("; "));
        text.push('.');
    }
    text
}
