//! Splitting one model response into individual stories.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMethod {
    NumberedList,
    BlankLines,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub stories: Vec<String>,
    pub method: SplitMethod,
}

fn marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?mi)^[ \t]*(?:[#*_]+[ \t]*)?(?:story[ \t]+)?(\d{1,3})[.):][ \t]*(?:[*_]+)?[ \t]*").unwrap()
    })
}

fn clean(s: &str) -> String {
    s.trim().trim_matches(|c| c == '*' || c == '_').trim().to_string()
}

/// Numbered-list markers first (at least two, counting up from 1 without
/// going backwards); otherwise blank-line paragraphs, dropping a leading
/// preamble paragraph that ends with a colon.
pub fn split_stories(text: &str) -> Split {
    let marks: Vec<(usize, usize, u32)> = marker()
        .captures_iter(text)
        .map(|c| {
            let m = c.get(0).unwrap();
            (m.start(), m.end(), c[1].parse().unwrap_or(0))
        })
        .collect();
    // keep the longest prefix of markers numbered 1, 2, 3, ...
    let mut seq = Vec::new();
    for &(s, e, n) in &marks {
        if n as usize == seq.len() + 1 {
            seq.push((s, e));
        }
    }
    if seq.len() >= 2 {
        let stories = seq
            .iter()
            .enumerate()
            .map(|(i, &(_, body))| {
                let end = seq.get(i + 1).map_or(text.len(), |n| n.0);
                clean(&text[body..end])
            })
            .filter(|s| !s.is_empty())
            .collect();
        return Split {
            stories,
            method: SplitMethod::NumberedList,
        };
    }
    static BLANK: OnceLock<Regex> = OnceLock::new();
    let blank = BLANK.get_or_init(|| Regex::new(r"\n[ \t]*\n").unwrap());
    let mut paras: Vec<String> = blank.split(text).map(clean).filter(|p| !p.is_empty()).collect();
    if paras.len() > 1 && paras[0].ends_with(':') {
        paras.remove(0);
    }
    Split {
        stories: paras,
        method: SplitMethod::BlankLines,
    }
}
