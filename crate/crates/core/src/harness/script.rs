//! Scripted policies keyed by query id, loaded from line-delimited files of
//! `{"query_id": "...", "turns": ["<search>...</search>", ...]}`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::persist::{read_jsonl, PersistError};
use crate::environment::{Policy, PolicyError, PolicyInput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub query_id: String,
    pub turns: Vec<String>,
}

/// Replays the turns scripted for the current query, one per step.
#[derive(Debug, Clone, Default)]
pub struct ScriptBook {
    scripts: BTreeMap<String, Vec<String>>,
}

impl ScriptBook {
    pub fn new(entries: impl IntoIterator<Item = ScriptEntry>) -> Self {
        Self {
            scripts: entries.into_iter().map(|e| (e.query_id, e.turns)).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, PersistError> {
        Ok(Self::new(read_jsonl::<ScriptEntry>(path)?))
    }

    pub fn insert(&mut self, query_id: impl Into<String>, turns: Vec<String>) {
        self.scripts.insert(query_id.into(), turns);
    }
}

impl Policy for ScriptBook {
    fn generate(&self, input: &PolicyInput<'_>) -> Result<String, PolicyError> {
        let id = &input.trajectory.query.id;
        let turns = self
            .scripts
            .get(id)
            .ok_or_else(|| PolicyError::Other(format!("no script for query {id}")))?;
        turns
            .get(input.step)
            .cloned()
            .ok_or(PolicyError::Exhausted(input.step))
    }
}
