//! Operator-editable prompt text: a guideline set per pipeline stage and the
//! schema-description instructions.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

const DEFAULT_GENERATION: &str = include_str!("../prompts/generation.md");
const DEFAULT_EVALUATION: &str = include_str!("../prompts/evaluation.md");
const DEFAULT_SCHEMA_DESCRIPTION: &str = include_str!("../prompts/schema_description.md");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Generation,
    Evaluation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Guidelines {
    pub generation: String,
    pub evaluation: String,
    pub schema_description: String,
}

impl Default for Guidelines {
    fn default() -> Self {
        Self {
            generation: DEFAULT_GENERATION.to_string(),
            evaluation: DEFAULT_EVALUATION.to_string(),
            schema_description: DEFAULT_SCHEMA_DESCRIPTION.to_string(),
        }
    }
}

impl Guidelines {
    pub fn empty() -> Self {
        Self { generation: String::new(), evaluation: String::new(), schema_description: String::new() }
    }

    /// Reads `generation.md`, `evaluation.md` and `schema_description.md`
    /// from `dir`. Missing files keep the built-in text; an empty file means
    /// no guidelines for that stage.
    pub fn from_dir(dir: &Path) -> io::Result<Self> {
        let mut g = Self::default();
        for (name, slot) in [
            ("generation.md", &mut g.generation),
            ("evaluation.md", &mut g.evaluation),
            ("schema_description.md", &mut g.schema_description),
        ] {
            match std::fs::read_to_string(dir.join(name)) {
                Ok(text) => *slot = text,
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(e) => return Err(e),
            }
        }
        Ok(g)
    }
}

pub fn inject_guidelines(stage: Stage, guidelines: &Guidelines) -> &str {
    match stage {
        Stage::Generation => &guidelines.generation,
        Stage::Evaluation => &guidelines.evaluation,
    }
}

/// System message: stage guidelines followed by the schema description.
pub(crate) fn system_prompt(guidelines: &str, schema_description: &str) -> String {
    let guidelines = guidelines.trim();
    if guidelines.is_empty() {
        format!("# Database schema\n\n{}", schema_description.trim())
    } else {
        format!("{guidelines}\n\n# Database schema\n\n{}", schema_description.trim())
    }
}
