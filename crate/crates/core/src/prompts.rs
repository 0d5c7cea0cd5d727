//! Prompt variants #0-#3 and the registry that serves them.
//!
//! The variants are cumulative: #1 adds the binary-answer instruction, #2
//! excludes cartoons and illustrations, #3 also excludes children whose face
//! is not visible. #3 is the default for full-dataset runs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BINARY_CLAUSE: &str = "Answer with only \"Yes\" or \"No\".";
pub const DEFAULT_PROMPT: u32 = 3;
pub const FIRST_USER_INDEX: u32 = 4;

const BUILTIN: [(&str, bool, bool, bool); 4] = [
    ("Are there any children in the picture?", false, false, false),
    ("Are there any children in the picture? Answer with only \"Yes\" or \"No\".", true, false, false),
    (
        "Are there any children in the picture? Disconsider any cartoons or digital illustrations, \
         consider only real children. Answer with only \"Yes\" or \"No\".",
        true,
        true,
        false,
    ),
    (
        "Are there any children in the picture? Disconsider children facing away or with the face \
         not visible. Also, disconsider any cartoons or digital illustrations, consider only real \
         children. Answer with only \"Yes\" or \"No\".",
        true,
        true,
        true,
    ),
];

pub const REGISTRY_JSON: &str = include_str!("../data/prompts.json");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("unknown prompt #{0}")]
    UnknownPrompt(u32),
    #[error("prompt text is empty")]
    EmptyPrompt,
    #[error("built-in prompt #{0} cannot be redefined")]
    BuiltinMismatch(u32),
    #[error("user prompts need an index >= {FIRST_USER_INDEX}, got #{0}")]
    ReservedIndex(u32),
    #[error("duplicate prompt index #{0}")]
    DuplicateIndex(u32),
    #[error("prompt registry file: {0}")]
    File(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptFlags {
    pub expects_binary: bool,
    #[serde(default)]
    pub excludes_illustrations: bool,
    #[serde(default)]
    pub excludes_unidentifiable: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub index: u32,
    pub text: String,
    pub flags: PromptFlags,
}

impl PromptTemplate {
    pub fn expects_binary(&self) -> bool {
        self.flags.expects_binary
    }

    pub fn excludes_illustrations(&self) -> bool {
        self.flags.excludes_illustrations
    }

    pub fn excludes_unidentifiable(&self) -> bool {
        self.flags.excludes_unidentifiable
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptRegistry {
    templates: BTreeMap<u32, PromptTemplate>,
    default_index: u32,
}

impl Default for PromptRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptRegistry {
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .enumerate()
            .map(|(i, &(text, expects_binary, excludes_illustrations, excludes_unidentifiable))| {
                let index = i as u32;
                let flags = PromptFlags { expects_binary, excludes_illustrations, excludes_unidentifiable };
                (index, PromptTemplate { index, text: text.to_string(), flags })
            })
            .collect();
        Self { templates, default_index: DEFAULT_PROMPT }
    }

    /// Built-ins plus the user entries of a registry file. Entries 0-3 in the
    /// file must match the built-ins exactly.
    pub fn from_json(json: &str) -> Result<Self, PromptError> {
        let entries: Vec<PromptTemplate> =
            serde_json::from_str(json).map_err(|e| PromptError::File(e.to_string()))?;
        let mut registry = Self::builtin();
        let mut seen = std::collections::BTreeSet::new();
        for entry in entries {
            if !seen.insert(entry.index) {
                return Err(PromptError::DuplicateIndex(entry.index));
            }
            if entry.index < FIRST_USER_INDEX {
                if registry.templates.get(&entry.index) != Some(&entry) {
                    return Err(PromptError::BuiltinMismatch(entry.index));
                }
                continue;
            }
            if entry.text.trim().is_empty() {
                return Err(PromptError::EmptyPrompt);
            }
            registry.templates.insert(entry.index, normalize(entry));
        }
        Ok(registry)
    }

    pub fn from_file(path: &Path) -> Result<Self, PromptError> {
        let json = std::fs::read_to_string(path).map_err(|e| PromptError::File(format!("{}: {e}", path.display())))?;
        Self::from_json(&json)
    }

    pub fn to_json(&self) -> String {
        let entries: Vec<&PromptTemplate> = self.templates.values().collect();
        serde_json::to_string_pretty(&entries).expect("serializable")
    }

    pub fn get_prompt(&self, index: u32) -> Result<&PromptTemplate, PromptError> {
        self.templates.get(&index).ok_or(PromptError::UnknownPrompt(index))
    }

    pub fn default_prompt(&self) -> &PromptTemplate {
        &self.templates[&self.default_index]
    }

    pub fn set_default(&mut self, index: u32) -> Result<(), PromptError> {
        self.get_prompt(index)?;
        self.default_index = index;
        Ok(())
    }

    pub fn templates(&self) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.values()
    }

    /// Registers a user prompt and returns its index; re-registering the same
    /// text returns the existing index. Binary prompts get the standard
    /// answer instruction appended when they do not already end with it.
    pub fn register_prompt(&mut self, text: &str, expects_binary: bool) -> Result<u32, PromptError> {
        let text = text.trim();
        if text.is_empty() {
            return Err(PromptError::EmptyPrompt);
        }
        let candidate = normalize(PromptTemplate {
            index: 0,
            text: text.to_string(),
            flags: PromptFlags { expects_binary, ..PromptFlags::default() },
        });
        if let Some(existing) = self
            .templates
            .values()
            .find(|t| t.text == candidate.text && t.flags.expects_binary == expects_binary)
        {
            return Ok(existing.index);
        }
        let index = self.templates.keys().next_back().map_or(FIRST_USER_INDEX, |&k| (k + 1).max(FIRST_USER_INDEX));
        self.templates.insert(index, PromptTemplate { index, ..candidate });
        Ok(index)
    }
}

fn normalize(mut t: PromptTemplate) -> PromptTemplate {
    if t.flags.expects_binary && !t.text.ends_with(BINARY_CLAUSE) {
        t.text = format!("{} {BINARY_CLAUSE}", t.text.trim_end());
    }
    t
}
