//! Representation metrics: batch tallies, observed and target distributions,
//! total variation distance, demographic parity ratios, the directional
//! correction Δ, gender representation summaries and n-gram diversity.
//!
//! Distributions hold fractions in `[0, 1]`; percentages only appear in
//! rendered reports.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::de::Error as _;
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::demographics::{DemographicLabel, EthnicityCategory, Gender, IntersectionKey};

/// Tolerance for "sums to one" checks.
pub const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no classified characters on the {0} axis")]
    EmptyBatch(Axis),
    #[error("axis mismatch: {left} vs {right}")]
    AxisMismatch { left: Axis, right: Axis },
    #[error("target share for {0} is zero; parity ratio undefined")]
    ZeroTarget(String),
    #[error("{axis} distribution needs {expected} shares, got {got}")]
    WrongLength {
        axis: Axis,
        expected: usize,
        got: usize,
    },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("no tallies to summarize")]
    NoTallies,
    #[error("n-gram order must be 1..=3, got {0}")]
    BadOrder(usize),
    #[error("corpus has no {0}-grams")]
    NoNgrams(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Gender,
    Ethnicity,
    Intersection,
}

#[allow(clippy::len_without_is_empty)] // an axis always has categories
impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Gender, Axis::Ethnicity, Axis::Intersection];

    pub fn len(self) -> usize {
        match self {
            Axis::Gender => 2,
            Axis::Ethnicity => 4,
            Axis::Intersection => 8,
        }
    }

    pub fn labels(self) -> Vec<String> {
        match self {
            Axis::Gender => Gender::NAMED.iter().map(|g| g.as_str().to_string()).collect(),
            Axis::Ethnicity => EthnicityCategory::NAMED
                .iter()
                .map(|e| e.as_str().to_string())
                .collect(),
            Axis::Intersection => IntersectionKey::all().iter().map(|k| k.label()).collect(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Gender => "gender",
            Axis::Ethnicity => "ethnicity",
            Axis::Intersection => "intersection",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn serialize_axis_map<S: Serializer>(
    s: S,
    axis: Axis,
    key: &str,
    values: &[f64],
) -> Result<S::Ok, S::Error> {
    struct Inner<'a>(Axis, &'a [f64]);
    impl Serialize for Inner<'_> {
        fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
            let labels = self.0.labels();
            let mut m = s.serialize_map(Some(labels.len()))?;
            for (l, v) in labels.iter().zip(self.1) {
                m.serialize_entry(l, v)?;
            }
            m.end()
        }
    }
    let mut m = s.serialize_map(Some(2))?;
    m.serialize_entry("axis", &axis)?;
    m.serialize_entry(key, &Inner(axis, values))?;
    m.end()
}

fn values_from_map<E: serde::de::Error>(
    axis: Axis,
    mut map: BTreeMap<String, f64>,
) -> Result<Vec<f64>, E> {
    let labels = axis.labels();
    let mut out = Vec::with_capacity(labels.len());
    for l in &labels {
        out.push(
            map.remove(l)
                .ok_or_else(|| E::custom(format!("missing category {l}")))?,
        );
    }
    if let Some(extra) = map.keys().next() {
        return Err(E::custom(format!("unexpected category {extra}")));
    }
    Ok(out)
}

/// Normalized shares over one axis, in axis category order.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    axis: Axis,
    shares: Vec<f64>,
}

impl Distribution {
    pub fn new(axis: Axis, shares: Vec<f64>) -> Result<Self, MetricsError> {
        if shares.len() != axis.len() {
            return Err(MetricsError::WrongLength {
                axis,
                expected: axis.len(),
                got: shares.len(),
            });
        }
        if shares.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(MetricsError::InvalidDistribution(format!(
                "share outside [0,1]: {shares:?}"
            )));
        }
        let sum: f64 = shares.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(MetricsError::InvalidDistribution(format!(
                "shares sum to {sum}"
            )));
        }
        Ok(Self { axis, shares })
    }

    pub fn from_counts(axis: Axis, counts: &[u32]) -> Result<Self, MetricsError> {
        if counts.len() != axis.len() {
            return Err(MetricsError::WrongLength {
                axis,
                expected: axis.len(),
                got: counts.len(),
            });
        }
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        if total == 0 {
            return Err(MetricsError::EmptyBatch(axis));
        }
        let shares = counts
            .iter()
            .map(|&c| c as f64 / total as f64)
            .collect();
        Ok(Self { axis, shares })
    }

    pub fn axis(&self) -> Axis {
        self.axis
    }

    pub fn shares(&self) -> &[f64] {
        &self.shares
    }

    /// (category label, share) pairs in axis order.
    pub fn labelled(&self) -> Vec<(String, f64)> {
        self.axis.labels().into_iter().zip(self.shares.iter().copied()).collect()
    }
}

impl Serialize for Distribution {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        serialize_axis_map(s, self.axis, "shares", &self.shares)
    }
}

impl<'de> Deserialize<'de> for Distribution {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            axis: Axis,
            shares: BTreeMap<String, f64>,
        }
        let r = Repr::deserialize(d)?;
        let shares = values_from_map::<D::Error>(r.axis, r.shares)?;
        Distribution::new(r.axis, shares).map_err(D::Error::custom)
    }
}

/// Uniform target: 1/2 per gender, 1/4 per ethnicity, 1/8 per intersection
/// (each ethnicity's quarter split evenly between the two genders).
pub fn target_distribution(axis: Axis) -> Distribution {
    let shares = match axis {
        Axis::Gender => vec![0.5; 2],
        Axis::Ethnicity => vec![0.25; 4],
        Axis::Intersection => vec![0.25 / 2.0; 8],
    };
    Distribution { axis, shares }
}

/// Character counts for one batch (or an aggregate of batches).
///
/// Only characters with both a named gender and a named ethnicity are
/// counted on the three axes; everything else goes to `excluded`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "TallyRepr", try_from = "TallyRepr")]
pub struct BatchTally {
    pub occupation: String,
    pub gender: [u32; 2],
    pub ethnicity: [u32; 4],
    pub intersection: [u32; 8],
    /// Characters missing a named gender or a named ethnicity.
    pub excluded: u32,
    pub unstated_gender: u32,
    pub unclassified_ethnicity: u32,
}

#[derive(Serialize, Deserialize)]
struct TallyRepr {
    occupation: String,
    gender: BTreeMap<String, u32>,
    ethnicity: BTreeMap<String, u32>,
    intersection: BTreeMap<String, u32>,
    excluded: u32,
    unstated_gender: u32,
    unclassified_ethnicity: u32,
}

impl From<BatchTally> for TallyRepr {
    fn from(t: BatchTally) -> Self {
        let to_map = |axis: Axis, xs: &[u32]| -> BTreeMap<String, u32> {
            axis.labels().into_iter().zip(xs.iter().copied()).collect()
        };
        TallyRepr {
            gender: to_map(Axis::Gender, &t.gender),
            ethnicity: to_map(Axis::Ethnicity, &t.ethnicity),
            intersection: to_map(Axis::Intersection, &t.intersection),
            occupation: t.occupation,
            excluded: t.excluded,
            unstated_gender: t.unstated_gender,
            unclassified_ethnicity: t.unclassified_ethnicity,
        }
    }
}

impl TryFrom<TallyRepr> for BatchTally {
    type Error = String;

    fn try_from(r: TallyRepr) -> Result<Self, Self::Error> {
        fn take<const N: usize>(axis: Axis, mut m: BTreeMap<String, u32>) -> Result<[u32; N], String> {
            let mut out = [0u32; N];
            for (i, l) in axis.labels().iter().enumerate() {
                out[i] = m.remove(l).ok_or_else(|| format!("missing {axis} count {l}"))?;
            }
            if let Some(k) = m.keys().next() {
                return Err(format!("unexpected {axis} category {k}"));
            }
            Ok(out)
        }
        let t = BatchTally {
            occupation: r.occupation,
            gender: take(Axis::Gender, r.gender)?,
            ethnicity: take(Axis::Ethnicity, r.ethnicity)?,
            intersection: take(Axis::Intersection, r.intersection)?,
            excluded: r.excluded,
            unstated_gender: r.unstated_gender,
            unclassified_ethnicity: r.unclassified_ethnicity,
        };
        if !t.is_consistent() {
            return Err("tally axis totals disagree".into());
        }
        Ok(t)
    }
}

impl BatchTally {
    pub fn empty(occupation: impl Into<String>) -> Self {
        Self {
            occupation: occupation.into(),
            gender: [0; 2],
            ethnicity: [0; 4],
            intersection: [0; 8],
            excluded: 0,
            unstated_gender: 0,
            unclassified_ethnicity: 0,
        }
    }

    pub fn add(&mut self, label: &DemographicLabel) {
        if label.gender == Gender::Unstated {
            self.unstated_gender += 1;
        }
        if label.ethnicity == EthnicityCategory::Unclassified {
            self.unclassified_ethnicity += 1;
        }
        match label.intersection() {
            Some(key) => {
                self.intersection[key.index()] += 1;
                self.gender[key.gender().index().unwrap_or(0)] += 1;
                self.ethnicity[key.ethnicity().index().unwrap_or(0)] += 1;
            }
            None => self.excluded += 1,
        }
    }

    /// Adds another tally's counts into this one.
    pub fn merge(&mut self, other: &BatchTally) {
        for (a, b) in self.gender.iter_mut().zip(other.gender) {
            *a += b;
        }
        for (a, b) in self.ethnicity.iter_mut().zip(other.ethnicity) {
            *a += b;
        }
        for (a, b) in self.intersection.iter_mut().zip(other.intersection) {
            *a += b;
        }
        self.excluded += other.excluded;
        self.unstated_gender += other.unstated_gender;
        self.unclassified_ethnicity += other.unclassified_ethnicity;
    }

    pub fn aggregate<'a>(
        occupation: impl Into<String>,
        tallies: impl IntoIterator<Item = &'a BatchTally>,
    ) -> Self {
        let mut out = Self::empty(occupation);
        for t in tallies {
            out.merge(t);
        }
        out
    }

    pub fn counts(&self, axis: Axis) -> &[u32] {
        match axis {
            Axis::Gender => &self.gender,
            Axis::Ethnicity => &self.ethnicity,
            Axis::Intersection => &self.intersection,
        }
    }

    pub fn classified(&self) -> u32 {
        self.intersection.iter().sum()
    }

    pub fn total(&self) -> u32 {
        self.classified() + self.excluded
    }

    pub fn female(&self) -> u32 {
        self.gender[0]
    }

    pub fn male(&self) -> u32 {
        self.gender[1]
    }

    pub fn is_consistent(&self) -> bool {
        let i: u32 = self.intersection.iter().sum();
        let g: u32 = self.gender.iter().sum();
        let e: u32 = self.ethnicity.iter().sum();
        i == g && g == e
    }
}

pub fn tally_batch(labels: &[DemographicLabel], occupation: &str) -> BatchTally {
    let mut t = BatchTally::empty(occupation);
    for l in labels {
        t.add(l);
    }
    t
}

pub fn distribution_of(tally: &BatchTally, axis: Axis) -> Result<Distribution, MetricsError> {
    Distribution::from_counts(axis, tally.counts(axis))
}

fn check_axes(a: Axis, b: Axis) -> Result<(), MetricsError> {
    if a != b {
        return Err(MetricsError::AxisMismatch { left: a, right: b });
    }
    Ok(())
}

/// Half the L1 distance between two distributions on the same axis.
pub fn tvd(observed: &Distribution, target: &Distribution) -> Result<f64, MetricsError> {
    check_axes(observed.axis, target.axis)?;
    let l1: f64 = observed
        .shares
        .iter()
        .zip(&target.shares)
        .map(|(o, t)| (o - t).abs())
        .sum();
    Ok((0.5 * l1).clamp(0.0, 1.0))
}

/// Observed share divided by target share, per category.
#[derive(Debug, Clone, PartialEq)]
pub struct DprVector {
    axis: Axis,
    ratios: Vec<f64>,
}

impl DprVector {
    pub fn new(axis: Axis, ratios: Vec<f64>) -> Result<Self, MetricsError> {
        if ratios.len() != axis.len() {
            return Err(MetricsError::WrongLength {
                axis,
                expected: axis.len(),
                got: ratios.len(),
            });
        }
        Ok(Self { axis, ratios })
    }

    pub fn axis(&self) -> Axis {
        self.axis
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn labelled(&self) -> Vec<(String, f64)> {
        self.axis.labels().into_iter().zip(self.ratios.iter().copied()).collect()
    }
}

impl Serialize for DprVector {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        serialize_axis_map(s, self.axis, "ratios", &self.ratios)
    }
}

impl<'de> Deserialize<'de> for DprVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            axis: Axis,
            ratios: BTreeMap<String, f64>,
        }
        let r = Repr::deserialize(d)?;
        let ratios = values_from_map::<D::Error>(r.axis, r.ratios)?;
        DprVector::new(r.axis, ratios).map_err(D::Error::custom)
    }
}

pub fn dpr(observed: &Distribution, target: &Distribution) -> Result<DprVector, MetricsError> {
    check_axes(observed.axis, target.axis)?;
    let labels = target.axis.labels();
    let mut ratios = Vec::with_capacity(labels.len());
    for ((o, t), l) in observed.shares.iter().zip(&target.shares).zip(labels) {
        if *t <= 0.0 {
            return Err(MetricsError::ZeroTarget(l));
        }
        ratios.push(o / t);
    }
    Ok(DprVector {
        axis: observed.axis,
        ratios,
    })
}

/// Per-category Δ = |baseline − 1| − |treated − 1|; positive moves toward parity.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaMap {
    axis: Axis,
    values: Vec<f64>,
}

impl DeltaMap {
    pub fn axis(&self) -> Axis {
        self.axis
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn labelled(&self) -> Vec<(String, f64)> {
        self.axis.labels().into_iter().zip(self.values.iter().copied()).collect()
    }
}

impl Serialize for DeltaMap {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        serialize_axis_map(s, self.axis, "values", &self.values)
    }
}

impl<'de> Deserialize<'de> for DeltaMap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            axis: Axis,
            values: BTreeMap<String, f64>,
        }
        let r = Repr::deserialize(d)?;
        let values = values_from_map::<D::Error>(r.axis, r.values)?;
        Ok(DeltaMap {
            axis: r.axis,
            values,
        })
    }
}

pub fn delta_correction(baseline: &DprVector, treated: &DprVector) -> Result<DeltaMap, MetricsError> {
    check_axes(baseline.axis, treated.axis)?;
    let values = baseline
        .ratios
        .iter()
        .zip(&treated.ratios)
        .map(|(b, t)| (b - 1.0).abs() - (t - 1.0).abs())
        .collect();
    Ok(DeltaMap {
        axis: baseline.axis,
        values,
    })
}

/// Share of occupations with equal gender counts, or over-representing one gender.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationSummary {
    pub occupations: usize,
    pub equal: usize,
    pub over_female: usize,
    pub over_male: usize,
    pub equal_pct: f64,
    pub over_female_pct: f64,
    pub over_male_pct: f64,
}

pub fn representation_summary(tallies: &[BatchTally]) -> Result<RepresentationSummary, MetricsError> {
    if tallies.is_empty() {
        return Err(MetricsError::NoTallies);
    }
    let (mut equal, mut over_female, mut over_male) = (0usize, 0usize, 0usize);
    for t in tallies {
        match t.female().cmp(&t.male()) {
            std::cmp::Ordering::Equal => equal += 1,
            std::cmp::Ordering::Greater => over_female += 1,
            std::cmp::Ordering::Less => over_male += 1,
        }
    }
    let n = tallies.len();
    let pct = |k: usize| (100 * k) as f64 / n as f64;
    Ok(RepresentationSummary {
        occupations: n,
        equal,
        over_female,
        over_male,
        equal_pct: pct(equal),
        over_female_pct: pct(over_female),
        over_male_pct: pct(over_male),
    })
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Distinct n-grams over total n-grams, pooled across texts.
///
/// N-grams never span two texts, so the score does not depend on text order.
pub fn ngram_diversity<S: AsRef<str>>(texts: &[S], n: usize) -> Result<f64, MetricsError> {
    if !(1..=3).contains(&n) {
        return Err(MetricsError::BadOrder(n));
    }
    let mut seen: HashSet<Vec<String>> = HashSet::new();
    let mut total = 0usize;
    for text in texts {
        let toks = tokenize(text.as_ref());
        for w in toks.windows(n) {
            total += 1;
            seen.insert(w.to_vec());
        }
    }
    if total == 0 {
        return Err(MetricsError::NoNgrams(n));
    }
    Ok(seen.len() as f64 / total as f64)
}
