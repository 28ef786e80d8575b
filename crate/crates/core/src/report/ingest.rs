//! Dataset CSV import and export.
//!
//! Columns: model, method, occupation, story_index, story_text,
//! gender_text, origin_text. Empty gender/origin cells mean "not stated".

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::extraction::Extractor;
use crate::metrics::tally_batch;
use crate::pipeline::{record_id, BatchRecord, Method, PipelineError, RunStore};
use crate::store;
use crate::backend::SamplingParams;

pub const DATASET_COLUMNS: [&str; 7] = [
    "model",
    "method",
    "occupation",
    "story_index",
    "story_text",
    "gender_text",
    "origin_text",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub model: String,
    pub method: Method,
    pub occupation: String,
    pub story_index: usize,
    pub story_text: String,
    pub gender_text: Option<String>,
    pub origin_text: Option<String>,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("dataset has no rows")]
    Empty,
    #[error("dataset columns do not match the schema; missing: [{}], unexpected: [{}]", missing.join(", "), unexpected.join(", "))]
    Schema {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("line {line}: duplicate (model, method, occupation, story_index) = ({model}, {method}, {occupation}, {story_index}); first seen on line {first}")]
    Duplicate {
        line: u64,
        first: u64,
        model: String,
        method: Method,
        occupation: String,
        story_index: usize,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

fn blank_to_none(s: String) -> Option<String> {
    let t = s.trim();
    (!t.is_empty()).then(|| t.to_string())
}

/// Parses and validates a dataset CSV.
pub fn read_dataset<R: Read>(input: R) -> Result<Vec<DatasetRow>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let missing: Vec<String> = DATASET_COLUMNS.iter().filter(|c| !headers.iter().any(|h| h == *c)).map(|c| c.to_string()).collect();
    let unexpected: Vec<String> = headers.iter().filter(|h| !DATASET_COLUMNS.contains(&h.as_str())).cloned().collect();
    if !missing.is_empty() || !unexpected.is_empty() {
        return Err(IngestError::Schema { missing, unexpected });
    }
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let idx: Vec<usize> = DATASET_COLUMNS.iter().map(|c| col(c)).collect();
    let mut rows = Vec::new();
    let mut seen: HashMap<(String, Method, String, usize), u64> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(idx[i]).unwrap_or("").to_string();
        let bad = |message: String| IngestError::Row { line, message };
        let method: Method = field(1).parse().map_err(bad)?;
        let story_index: usize = field(3)
            .trim()
            .parse()
            .map_err(|e| IngestError::Row { line, message: format!("story_index: {e}") })?;
        let row = DatasetRow {
            model: field(0).trim().to_string(),
            method,
            occupation: field(2).trim().to_string(),
            story_index,
            story_text: field(4),
            gender_text: blank_to_none(field(5)),
            origin_text: blank_to_none(field(6)),
        };
        if row.model.is_empty() || row.occupation.is_empty() {
            return Err(IngestError::Row { line, message: "model and occupation must be non-empty".into() });
        }
        let key = (row.model.clone(), row.method, row.occupation.clone(), row.story_index);
        if let Some(&first) = seen.get(&key) {
            return Err(IngestError::Duplicate {
                line,
                first,
                model: key.0,
                method: key.1,
                occupation: key.2,
                story_index: key.3,
            });
        }
        seen.insert(key, line);
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(IngestError::Empty);
    }
    Ok(rows)
}

#[derive(Debug, Serialize)]
struct IngestInfo<'a> {
    source: &'a str,
    sha256: String,
    rows: usize,
    records: usize,
}

/// Builds one record per (model, method, occupation) from labelled rows and
/// writes them to `<out>/<run_id>/`. Returns the run directory.
pub fn ingest_dataset(path: &Path, out: &Path, run_id: Option<&str>) -> Result<PathBuf, IngestError> {
    let bytes = std::fs::read(path).map_err(|source| IngestError::Io { path: path.to_path_buf(), source })?;
    let rows = read_dataset(bytes.as_slice())?;
    let digest: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    let run_id = run_id.map_or_else(|| format!("ingest-{}", &digest[..12]), str::to_string);
    let extractor = Extractor::default();
    let mut groups: BTreeMap<(String, Method, String), Vec<DatasetRow>> = BTreeMap::new();
    for r in rows.iter().cloned() {
        groups.entry((r.model.clone(), r.method, r.occupation.clone())).or_default().push(r);
    }
    let dir = out.join(&run_id);
    let store = RunStore::create(&dir)?;
    for ((model, method, occupation), mut rows) in groups {
        rows.sort_by_key(|r| r.story_index);
        let mut rec = BatchRecord::new(record_id(&model, method, &occupation), run_id.clone(), model, method, occupation, rows.len(), SamplingParams::default());
        rec.stories = rows.iter().map(|r| r.story_text.clone()).collect();
        rec.extractions = rows
            .iter()
            .enumerate()
            .map(|(i, r)| extractor.provided(i, r.gender_text.clone(), r.origin_text.clone()))
            .collect();
        let labels: Vec<_> = rec.extractions.iter().map(|x| x.resolved.clone()).collect();
        rec.tally = Some(tally_batch(&labels, &rec.occupation));
        // Timestamps are left empty so re-ingesting the same file is byte-stable.
        rec.started_at.clear();
        store.save_record(&rec)?;
    }
    let info = dir.join("ingest.json");
    store::write_json(
        &info,
        &IngestInfo {
            source: &path.display().to_string(),
            sha256: digest,
            rows: rows.len(),
            records: RunStore::open(&dir).load_records()?.len(),
        },
    )
    .map_err(|source| IngestError::Io { path: info, source })?;
    Ok(dir)
}

/// Writes every successful record of a run as dataset rows.
pub fn export_dataset<W: Write>(run_dir: &Path, out: W) -> Result<usize, IngestError> {
    let records = RunStore::open(run_dir).load_records()?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DATASET_COLUMNS)?;
    let mut n = 0;
    for r in records.iter().filter(|r| r.is_ok()) {
        for (i, story) in r.stories.iter().enumerate() {
            let x = r.extractions.get(i);
            w.write_record([
                r.model.as_str(),
                r.method.as_str(),
                r.occupation.as_str(),
                &i.to_string(),
                story.as_str(),
                x.and_then(|x| x.gender_text.as_deref()).unwrap_or(""),
                x.and_then(|x| x.origin_text.as_deref()).unwrap_or(""),
            ])?;
            n += 1;
        }
    }
    w.flush().map_err(|source| IngestError::Io { path: PathBuf::from("<export>"), source })?;
    Ok(n)
}
