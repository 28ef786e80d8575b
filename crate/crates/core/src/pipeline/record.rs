use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, ChatMessage, SamplingParams};
use crate::extraction::{DescriptorList, RawExtraction};
use crate::metrics::BatchTally;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    Baseline,
    Bame,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Vanilla, Method::Baseline, Method::Bame];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Baseline => "baseline",
            Method::Bame => "bame",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vanilla" => Ok(Method::Vanilla),
            "baseline" => Ok(Method::Baseline),
            "bame" => Ok(Method::Bame),
            other => Err(format!("unknown method {other:?} (expected vanilla, baseline or bame)")),
        }
    }
}

/// Which part of a batch's protocol a backend call belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    /// Source vanilla batch for an explanation.
    Source,
    Generate,
    Extract,
    Explain,
    Probe,
    Regenerate,
    Descriptors,
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

/// One backend call: the full conversation sent and what came back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub step: Step,
    pub messages: Vec<ChatMessage>,
    pub params: SamplingParams,
    pub response: Option<String>,
    pub error: Option<BackendError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RecordStatus {
    Ok,
    Failed {
        step: Step,
        message: String,
        backend_error: Option<BackendError>,
    },
}

/// Everything produced for one (model, method, occupation) batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub record_id: String,
    pub run_id: String,
    pub model: String,
    pub method: Method,
    pub occupation: String,
    pub batch_size: usize,
    pub params: SamplingParams,
    pub exchanges: Vec<Exchange>,
    pub raw_response: Option<String>,
    pub stories: Vec<String>,
    pub extractions: Vec<RawExtraction>,
    pub tally: Option<BatchTally>,
    pub explanation_text: Option<String>,
    pub source_vanilla_id: Option<String>,
    pub descriptors: Vec<DescriptorList>,
    /// Fewer stories than `batch_size` were recovered.
    pub shortfall: bool,
    /// The extraction agent failed and every story used the rule-based path.
    pub extraction_fallback: bool,
    pub descriptor_fallback: bool,
    pub status: RecordStatus,
    pub started_at: String,
    pub finished_at: String,
}

impl BatchRecord {
    pub fn new(record_id: String, run_id: String, model: String, method: Method, occupation: String, batch_size: usize, params: SamplingParams) -> Self {
        Self {
            record_id,
            run_id,
            model,
            method,
            occupation,
            batch_size,
            params,
            exchanges: Vec::new(),
            raw_response: None,
            stories: Vec::new(),
            extractions: Vec::new(),
            tally: None,
            explanation_text: None,
            source_vanilla_id: None,
            descriptors: Vec::new(),
            shortfall: false,
            extraction_fallback: false,
            descriptor_fallback: false,
            status: RecordStatus::Ok,
            started_at: now(),
            finished_at: String::new(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == RecordStatus::Ok
    }

    /// Prompts sent, in order (last user message of each exchange).
    pub fn prompts(&self) -> Vec<&str> {
        self.exchanges
            .iter()
            .filter_map(|e| e.messages.iter().rev().find(|m| m.role == crate::backend::Role::User))
            .map(|m| m.content.as_str())
            .collect()
    }

    /// The prompt that produced this batch's stories.
    pub fn generation_prompt(&self) -> Option<&str> {
        self.exchanges
            .iter()
            .rev()
            .find(|e| matches!(e.step, Step::Generate | Step::Regenerate))
            .and_then(|e| e.messages.last())
            .map(|m| m.content.as_str())
    }

    pub fn fail(&mut self, step: Step, message: impl Into<String>, backend_error: Option<BackendError>) {
        self.status = RecordStatus::Failed {
            step,
            message: message.into(),
            backend_error,
        };
    }

    pub fn finish(&mut self) {
        self.finished_at = now();
    }
}

pub(crate) fn now() -> String {
    time::OffsetDateTime::now_utc()
        .format(&time::format_description::well_known::Rfc3339)
        .unwrap_or_default()
}

/// Lowercase, with every run of other characters replaced by `-`.
pub fn slug(s: &str) -> String {
    let mut out = String::new();
    let mut dash = false;
    for c in s.chars() {
        if c.is_ascii_alphanumeric() || c == '.' || c == '_' {
            if dash && !out.is_empty() {
                out.push('-');
            }
            dash = false;
            out.push(c.to_ascii_lowercase());
        } else {
            dash = true;
        }
    }
    out.trim_matches('.').to_string()
}

pub fn record_id(model: &str, method: Method, occupation: &str) -> String {
    format!("{}__{}__{}", slug(model), method, slug(occupation))
}
