//! Audit reports over a run directory: summary JSON, table CSVs and
//! long-format plot data.

mod ingest;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demographics::IntersectionKey;
use crate::metrics::{
    delta_correction, distribution_of, dpr, ngram_diversity, representation_summary, target_distribution, tvd, Axis,
    BatchTally, DeltaMap, Distribution, DprVector, MetricsError, RepresentationSummary,
};
use crate::par::Exec;
use crate::pipeline::{BatchRecord, Method, PipelineError, RunStore};
use crate::stats::{wilcoxon_signed_rank_with, Alternative, WilcoxonResult};
use crate::store;

pub use ingest::{export_dataset, ingest_dataset, read_dataset, DatasetRow, IngestError, DATASET_COLUMNS};

pub const REPORT_DIR: &str = "report";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("run directory {0} has no records")]
    EmptyRun(PathBuf),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("unknown figure kind {0:?} (expected ethnicity, tvd or dpr)")]
    UnknownFigure(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupationMetrics {
    pub occupation: String,
    pub record_id: String,
    pub female: u32,
    pub male: u32,
    /// `None` when no character had a named ethnicity.
    pub ethnicity: Option<Distribution>,
    pub ethnicity_tvd: Option<f64>,
    pub intersection_dpr: Option<DprVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    pub unigram: f64,
    pub bigram: f64,
    pub trigram: f64,
}

/// Metrics for one (model, method) over all its occupations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub model: String,
    pub method: Method,
    pub record_ids: Vec<String>,
    pub failed_record_ids: Vec<String>,
    pub pooled: BatchTally,
    pub gender: Option<Distribution>,
    pub female_pct: f64,
    pub male_pct: f64,
    pub representation: Option<RepresentationSummary>,
    pub occupations: Vec<OccupationMetrics>,
    /// Mean of the per-occupation ethnicity TVDs.
    pub ethnicity_tvd_mean: Option<f64>,
    /// Ethnicity TVD of the pooled counts.
    pub ethnicity_tvd_pooled: Option<f64>,
    /// Intersection DPR of the pooled counts.
    pub intersection_dpr: Option<DprVector>,
    /// Per-category mean of per-occupation intersection DPRs.
    pub intersection_dpr_mean: Option<DprVector>,
    pub diversity: Option<Diversity>,
    pub excluded: u32,
    pub unstated_gender: u32,
    pub unclassified_ethnicity: u32,
}

/// Baseline vs explanation-feedback comparison for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub model: String,
    pub baseline: Method,
    pub treated: Method,
    pub delta: Option<DeltaMap>,
    pub wilcoxon: Option<WilcoxonResult>,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub run_id: String,
    pub groups: Vec<GroupReport>,
    pub deltas: Vec<DeltaReport>,
}

impl AuditReport {
    pub fn group(&self, model: &str, method: Method) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.model == model && g.method == method)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn group_report(model: &str, method: Method, records: &[&BatchRecord]) -> Result<GroupReport, ReportError> {
    let ok: Vec<&BatchRecord> = records.iter().copied().filter(|r| r.is_ok() && r.tally.is_some()).collect();
    let failed_record_ids = records.iter().filter(|r| !r.is_ok() || r.tally.is_none()).map(|r| r.record_id.clone()).collect();
    let tallies: Vec<BatchTally> = ok.iter().filter_map(|r| r.tally.clone()).collect();
    let pooled = BatchTally::aggregate("all", &tallies);
    let eth_target = target_distribution(Axis::Ethnicity);
    let int_target = target_distribution(Axis::Intersection);
    let occupations: Vec<OccupationMetrics> = ok
        .iter()
        .map(|r| {
            let t = r.tally.as_ref().expect("filtered");
            let ethnicity = distribution_of(t, Axis::Ethnicity).ok();
            let ethnicity_tvd = ethnicity.as_ref().map(|d| tvd(d, &eth_target)).transpose()?;
            let intersection_dpr = distribution_of(t, Axis::Intersection)
                .ok()
                .map(|d| dpr(&d, &int_target))
                .transpose()?;
            Ok(OccupationMetrics {
                occupation: r.occupation.clone(),
                record_id: r.record_id.clone(),
                female: t.female(),
                male: t.male(),
                ethnicity,
                ethnicity_tvd,
                intersection_dpr,
            })
        })
        .collect::<Result<_, MetricsError>>()?;
    let gender = distribution_of(&pooled, Axis::Gender).ok();
    let (female_pct, male_pct) = gender.as_ref().map_or((0.0, 0.0), |g| (100.0 * g.shares()[0], 100.0 * g.shares()[1]));
    let ethnicity_tvd_pooled = distribution_of(&pooled, Axis::Ethnicity).ok().map(|d| tvd(&d, &eth_target)).transpose()?;
    let intersection_dpr = distribution_of(&pooled, Axis::Intersection).ok().map(|d| dpr(&d, &int_target)).transpose()?;
    let dprs: Vec<&DprVector> = occupations.iter().filter_map(|o| o.intersection_dpr.as_ref()).collect();
    let intersection_dpr_mean = if dprs.is_empty() {
        None
    } else {
        let means = (0..8).map(|i| mean(dprs.iter().map(|d| d.ratios()[i])).unwrap_or(0.0)).collect();
        Some(DprVector::new(Axis::Intersection, means)?)
    };
    let stories: Vec<&str> = ok.iter().flat_map(|r| r.stories.iter().map(String::as_str)).collect();
    let diversity = if stories.iter().any(|s| !crate::metrics::tokenize(s).is_empty()) {
        let d = |n| ngram_diversity(&stories, n).ok();
        match (d(1), d(2), d(3)) {
            (Some(unigram), Some(bigram), Some(trigram)) => Some(Diversity { unigram, bigram, trigram }),
            _ => None,
        }
    } else {
        None
    };
    Ok(GroupReport {
        model: model.to_string(),
        method,
        record_ids: ok.iter().map(|r| r.record_id.clone()).collect(),
        failed_record_ids,
        representation: representation_summary(&tallies).ok(),
        ethnicity_tvd_mean: mean(occupations.iter().filter_map(|o| o.ethnicity_tvd)),
        ethnicity_tvd_pooled,
        intersection_dpr,
        intersection_dpr_mean,
        diversity,
        excluded: pooled.excluded,
        unstated_gender: pooled.unstated_gender,
        unclassified_ethnicity: pooled.unclassified_ethnicity,
        pooled,
        gender,
        female_pct,
        male_pct,
        occupations,
    })
}

fn delta_report(model: &str, groups: &[GroupReport], exec: Exec) -> DeltaReport {
    let find = |m: Method| groups.iter().find(|g| g.model == model && g.method == m).and_then(|g| g.intersection_dpr.as_ref());
    let mut out = DeltaReport {
        model: model.to_string(),
        baseline: Method::Baseline,
        treated: Method::Bame,
        delta: None,
        wilcoxon: None,
        reason: None,
    };
    let (Some(base), Some(treated)) = (find(Method::Baseline), find(Method::Bame)) else {
        out.reason = Some("needs classified characters from both baseline and bame records".into());
        return out;
    };
    match delta_correction(base, treated) {
        Ok(d) => {
            match wilcoxon_signed_rank_with(d.values(), Alternative::Greater, exec) {
                Ok(w) => out.wilcoxon = Some(w),
                Err(e) => out.reason = Some(format!("wilcoxon test not computable: {e}")),
            }
            out.delta = Some(d);
        }
        Err(e) => out.reason = Some(e.to_string()),
    }
    out
}

/// Computes every metric from a set of records.
pub fn analyze_records(run_id: &str, records: &[BatchRecord], exec: Exec) -> Result<AuditReport, ReportError> {
    let mut by_group: BTreeMap<(String, Method), Vec<&BatchRecord>> = BTreeMap::new();
    for r in records {
        by_group.entry((r.model.clone(), r.method)).or_default().push(r);
    }
    for recs in by_group.values_mut() {
        recs.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    }
    let keys: Vec<(String, Method)> = by_group.keys().cloned().collect();
    let groups = exec
        .map(&keys, |(model, method)| group_report(model, *method, &by_group[&(model.clone(), *method)]))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let mut models: Vec<&str> = groups.iter().map(|g| g.model.as_str()).collect();
    models.dedup();
    let deltas = models.iter().map(|m| delta_report(m, &groups, exec)).collect();
    Ok(AuditReport {
        run_id: run_id.to_string(),
        groups,
        deltas,
    })
}

fn run_id_of(dir: &Path, records: &[BatchRecord]) -> String {
    records
        .first()
        .map(|r| r.run_id.clone())
        .unwrap_or_else(|| dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
}

/// Loads a run directory, computes the report and writes `report/`.
pub fn analyze_run(dir: &Path, exec: Exec) -> Result<AuditReport, ReportError> {
    let records = RunStore::open(dir).load_records()?;
    if records.is_empty() {
        return Err(ReportError::EmptyRun(dir.to_path_buf()));
    }
    let report = analyze_records(&run_id_of(dir, &records), &records, exec)?;
    write_report(&report, &dir.join(REPORT_DIR))?;
    Ok(report)
}

fn csv_bytes<F>(header: &[&str], fill: F) -> Result<Vec<u8>, ReportError>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<(), csv::Error>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    fill(&mut w)?;
    w.into_inner().map_err(|e| ReportError::Io {
        path: PathBuf::new(),
        source: e.into_error(),
    })
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn table1_csv(report: &AuditReport) -> Result<Vec<u8>, ReportError> {
    csv_bytes(&["model", "method", "female_pct", "male_pct", "equal_pct", "over_female_pct", "over_male_pct"], |w| {
        for g in &report.groups {
            let Some(r) = &g.representation else { continue };
            w.write_record([
                g.model.clone(),
                g.method.to_string(),
                format!("{:.1}", g.female_pct),
                format!("{:.1}", g.male_pct),
                format!("{:.1}", r.equal_pct),
                format!("{:.1}", r.over_female_pct),
                format!("{:.1}", r.over_male_pct),
            ])?;
        }
        Ok(())
    })
}

pub fn tvd_csv(report: &AuditReport) -> Result<Vec<u8>, ReportError> {
    csv_bytes(&["model", "method", "occupation", "tvd"], |w| {
        for g in &report.groups {
            for o in &g.occupations {
                w.write_record([g.model.clone(), g.method.to_string(), o.occupation.clone(), opt(o.ethnicity_tvd)])?;
            }
        }
        Ok(())
    })
}

pub fn dpr_csv(report: &AuditReport) -> Result<Vec<u8>, ReportError> {
    csv_bytes(&["model", "method", "intersection", "dpr_pooled", "dpr_mean"], |w| {
        for g in &report.groups {
            let (Some(p), Some(m)) = (&g.intersection_dpr, &g.intersection_dpr_mean) else { continue };
            for (i, k) in IntersectionKey::all().iter().enumerate() {
                w.write_record([g.model.clone(), g.method.to_string(), k.label(), p.ratios()[i].to_string(), m.ratios()[i].to_string()])?;
            }
        }
        Ok(())
    })
}

pub fn delta_csv(report: &AuditReport) -> Result<Vec<u8>, ReportError> {
    let header = ["model", "baseline", "treated", "intersection", "delta", "statistic", "p_value", "n_effective", "test_method", "reason"];
    csv_bytes(&header, |w| {
        for d in &report.deltas {
            let (stat, p, n, tm) = d.wilcoxon.as_ref().map_or_else(
                || (String::new(), String::new(), String::new(), String::new()),
                |r| {
                    let tm = serde_json::to_value(r.method).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
                    (r.statistic.to_string(), r.p_value.to_string(), r.n_effective.to_string(), tm)
                },
            );
            let reason = d.reason.clone().unwrap_or_default();
            match &d.delta {
                Some(delta) => {
                    for (label, v) in delta.labelled() {
                        w.write_record([&d.model, d.baseline.as_str(), d.treated.as_str(), &label, &v.to_string(), &stat, &p, &n, &tm, &reason])?;
                    }
                }
                None => w.write_record([&d.model, d.baseline.as_str(), d.treated.as_str(), "", "", "", "", "", "", &reason])?,
            }
        }
        Ok(())
    })
}

pub fn diversity_csv(report: &AuditReport) -> Result<Vec<u8>, ReportError> {
    csv_bytes(&["model", "method", "n", "diversity"], |w| {
        for g in &report.groups {
            let Some(d) = &g.diversity else { continue };
            for (n, v) in [(1, d.unigram), (2, d.bigram), (3, d.trigram)] {
                w.write_record([g.model.clone(), g.method.to_string(), n.to_string(), v.to_string()])?;
            }
        }
        Ok(())
    })
}

pub const REPORT_FILES: [&str; 6] = [
    "summary.json",
    "table1.csv",
    "tvd_by_occupation.csv",
    "dpr_intersections.csv",
    "delta_wilcoxon.csv",
    "diversity.csv",
];

pub fn write_report(report: &AuditReport, dir: &Path) -> Result<(), ReportError> {
    let summary = dir.join(REPORT_FILES[0]);
    store::write_json(&summary, report).map_err(io_err(&summary))?;
    let files = [
        (REPORT_FILES[1], table1_csv(report)?),
        (REPORT_FILES[2], tvd_csv(report)?),
        (REPORT_FILES[3], dpr_csv(report)?),
        (REPORT_FILES[4], delta_csv(report)?),
        (REPORT_FILES[5], diversity_csv(report)?),
    ];
    for (name, bytes) in files {
        let p = dir.join(name);
        store::write_atomic(&p, &bytes).map_err(io_err(&p))?;
    }
    Ok(())
}

pub fn load_report(run_dir: &Path) -> Result<AuditReport, ReportError> {
    let p = run_dir.join(REPORT_DIR).join(REPORT_FILES[0]);
    store::read_json(&p).map_err(io_err(&p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FigureKind {
    /// Ethnicity shares per occupation.
    Ethnicity,
    /// Ethnicity TVD per occupation.
    Tvd,
    /// Pooled intersection DPR.
    Dpr,
}

impl FigureKind {
    pub const ALL: [FigureKind; 3] = [FigureKind::Ethnicity, FigureKind::Tvd, FigureKind::Dpr];

    pub fn as_str(self) -> &'static str {
        match self {
            FigureKind::Ethnicity => "ethnicity",
            FigureKind::Tvd => "tvd",
            FigureKind::Dpr => "dpr",
        }
    }
}

impl fmt::Display for FigureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FigureKind {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FigureKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| ReportError::UnknownFigure(s.to_string()))
    }
}

/// Long-format CSV for one figure.
pub fn plot_data(report: &AuditReport, kind: FigureKind) -> Result<Vec<u8>, ReportError> {
    match kind {
        FigureKind::Ethnicity => csv_bytes(&["model", "method", "occupation", "ethnicity", "share"], |w| {
            for g in &report.groups {
                for o in &g.occupations {
                    let Some(d) = &o.ethnicity else { continue };
                    for (label, share) in d.labelled() {
                        w.write_record([g.model.clone(), g.method.to_string(), o.occupation.clone(), label, share.to_string()])?;
                    }
                }
            }
            Ok(())
        }),
        FigureKind::Tvd => csv_bytes(&["model", "occupation", "method", "tvd"], |w| {
            for g in &report.groups {
                for o in &g.occupations {
                    w.write_record([g.model.clone(), o.occupation.clone(), g.method.to_string(), opt(o.ethnicity_tvd)])?;
                }
            }
            Ok(())
        }),
        FigureKind::Dpr => csv_bytes(&["model", "method", "intersection", "dpr"], |w| {
            for g in &report.groups {
                let Some(p) = &g.intersection_dpr else { continue };
                for (label, v) in p.labelled() {
                    w.write_record([g.model.clone(), g.method.to_string(), label, v.to_string()])?;
                }
            }
            Ok(())
        }),
    }
}

/// Writes `report/plot_<kind>.csv` and returns its path.
pub fn emit_plot_data(report: &AuditReport, kind: FigureKind, run_dir: &Path) -> Result<PathBuf, ReportError> {
    let p = run_dir.join(REPORT_DIR).join(format!("plot_{kind}.csv"));
    store::write_atomic(&p, &plot_data(report, kind)?).map_err(io_err(&p))?;
    Ok(p)
}
