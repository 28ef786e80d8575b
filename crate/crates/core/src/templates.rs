//! Prompt templates with `{name}` placeholders.
//!
//! Substitution is a single literal pass: bound values are never scanned for
//! further placeholders, and nothing is escaped.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template {template}: placeholder {{{name}}} is not bound")]
    Unbound { template: String, name: String },
    #[error("template {template}: placeholder {{{name}}} is bound to empty text")]
    EmptyBinding { template: String, name: String },
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub text: String,
}

fn is_placeholder_char(c: char) -> bool {
    c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_'
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            text: text.into(),
        }
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for (_, name) in scan(&self.text) {
            if !out.iter().any(|n| n == name) {
                out.push(name.to_string());
            }
        }
        out
    }

    pub fn render(&self, bindings: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.text.len() + 256);
        let mut last = 0;
        for (start, name) in scan(&self.text) {
            let value = bindings.get(name).ok_or_else(|| TemplateError::Unbound {
                template: self.name.clone(),
                name: name.to_string(),
            })?;
            if value.trim().is_empty() {
                return Err(TemplateError::EmptyBinding {
                    template: self.name.clone(),
                    name: name.to_string(),
                });
            }
            out.push_str(&self.text[last..start]);
            out.push_str(value);
            last = start + name.len() + 2;
        }
        out.push_str(&self.text[last..]);
        Ok(out)
    }
}

/// (byte offset of `{`, name) for every `{name}` occurrence.
fn scan(text: &str) -> Vec<(usize, &str)> {
    let mut found = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let rest = &text[i + 1..];
            let len = rest.find(|c: char| !is_placeholder_char(c)).unwrap_or(rest.len());
            if len > 0 && rest[len..].starts_with('}') {
                found.push((i, &rest[..len]));
                i += len + 2;
                continue;
            }
        }
        i += 1;
    }
    found
}

macro_rules! builtin {
    ($file:literal) => {
        include_str!(concat!("../templates/", $file))
    };
}

fn strip_final_newline(s: &str) -> &str {
    s.strip_suffix('\n').unwrap_or(s)
}

/// Every prompt the pipeline sends.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub vanilla: PromptTemplate,
    pub baseline: PromptTemplate,
    pub bame: PromptTemplate,
    pub explanation: PromptTemplate,
    pub probe: PromptTemplate,
    pub extraction_agent: PromptTemplate,
    pub descriptor_agent: PromptTemplate,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        let t = |name: &str, text: &str| PromptTemplate::new(name, strip_final_newline(text));
        Self {
            vanilla: t("vanilla", builtin!("vanilla.txt")),
            baseline: t("baseline", builtin!("baseline.txt")),
            bame: t("bame", builtin!("bame.txt")),
            explanation: t("explanation", builtin!("explanation.txt")),
            probe: t("probe", builtin!("probe.txt")),
            extraction_agent: t("extraction_agent", builtin!("extraction_agent.txt")),
            descriptor_agent: t("descriptor_agent", builtin!("descriptor_agent.txt")),
        }
    }
}

impl PromptTemplates {
    pub fn all(&self) -> [&PromptTemplate; 7] {
        [
            &self.vanilla,
            &self.baseline,
            &self.bame,
            &self.explanation,
            &self.probe,
            &self.extraction_agent,
            &self.descriptor_agent,
        ]
    }

    fn slot(&mut self, name: &str) -> Option<&mut PromptTemplate> {
        Some(match name {
            "vanilla" => &mut self.vanilla,
            "baseline" => &mut self.baseline,
            "bame" => &mut self.bame,
            "explanation" => &mut self.explanation,
            "probe" => &mut self.probe,
            "extraction_agent" => &mut self.extraction_agent,
            "descriptor_agent" => &mut self.descriptor_agent,
            _ => return None,
        })
    }

    /// Defaults, overridden by any `<name>.txt` present in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut out = Self::default();
        let names: Vec<String> = out.all().iter().map(|t| t.name.clone()).collect();
        for name in names {
            let path = dir.join(format!("{name}.txt"));
            if !path.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|e| TemplateError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            if let Some(slot) = out.slot(&name) {
                slot.text = strip_final_newline(&text).to_string();
            }
        }
        Ok(out)
    }

    pub fn write_dir(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for t in self.all() {
            crate::store::write_atomic(&dir.join(format!("{}.txt", t.name)), format!("{}\n", t.text).as_bytes())?;
        }
        Ok(())
    }
}
