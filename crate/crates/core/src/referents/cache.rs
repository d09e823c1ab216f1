use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{DefinitionSource, GenerationConfig, ReferentError, TypeDefinition};
use crate::synthetic;

const BUNDLED_DEFINITIONS: &str = include_str!("../../fixtures/definitions.jsonl");
const BUNDLED_EXAMPLES: &str = include_str!("../../fixtures/examples.jsonl");

/// Synthetic classes covered by the bundled fixtures.
pub const BUNDLED_SYNTHETIC_CLASSES: usize = 64;

/// One line of the referent cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    #[serde(rename = "type")]
    pub type_name: String,
    pub definition: String,
    pub source: DefinitionSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<GenerationConfig>,
}

impl From<CacheRecord> for TypeDefinition {
    fn from(r: CacheRecord) -> Self {
        TypeDefinition { type_name: r.type_name, definition_text: r.definition, source: r.source, config: r.config }
    }
}

impl From<&TypeDefinition> for CacheRecord {
    fn from(d: &TypeDefinition) -> Self {
        CacheRecord {
            type_name: d.type_name.clone(),
            definition: d.definition_text.clone(),
            source: d.source,
            config: d.config.clone(),
        }
    }
}

fn parse_records(text: impl BufRead) -> Result<Vec<CacheRecord>, ReferentError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CacheRecord = serde_json::from_str(&line)
            .map_err(|e| ReferentError::Malformed { line: i + 1, message: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

/// Type definitions keyed by type name, optionally backed by a JSON-lines
/// file that new entries are appended to.
#[derive(Debug, Default)]
pub struct DefinitionCache {
    entries: RwLock<BTreeMap<String, TypeDefinition>>,
    path: Option<PathBuf>,
    writer: Mutex<()>,
}

impl DefinitionCache {
    pub fn empty() -> Self {
        Self::default()
    }

    /// The repository fixtures: the hand-checked definitions in
    /// `fixtures/definitions.jsonl` plus the synthetic classes.
    pub fn bundled() -> Self {
        let cache = Self::empty();
        for rec in parse_records(BUNDLED_DEFINITIONS.as_bytes()).expect("bundled fixtures parse") {
            cache.insert_memory(rec.into());
        }
        for c in 0..BUNDLED_SYNTHETIC_CLASSES {
            cache.insert_memory(synthetic::synthetic_definition(c));
        }
        cache
    }

    /// Load a cache file; later lines win. New entries are appended to it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ReferentError> {
        let path = path.as_ref();
        let cache = Self { path: Some(path.to_path_buf()), ..Self::default() };
        if path.exists() {
            for rec in parse_records(BufReader::new(File::open(path)?))? {
                cache.insert_memory(rec.into());
            }
        }
        Ok(cache)
    }

    /// Bundled fixtures overlaid with an optional cache file.
    pub fn bundled_with(path: Option<&Path>) -> Result<Self, ReferentError> {
        let mut cache = Self::bundled();
        if let Some(p) = path {
            let file = Self::open(p)?;
            for d in file.entries.into_inner().expect("poisoned").into_values() {
                cache.insert_memory(d);
            }
            cache.path = Some(p.to_path_buf());
        }
        Ok(cache)
    }

    pub fn get(&self, type_name: &str) -> Option<TypeDefinition> {
        self.entries.read().expect("poisoned").get(type_name).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn insert_memory(&self, def: TypeDefinition) {
        self.entries.write().expect("poisoned").insert(def.type_name.clone(), def);
    }

    /// Insert and, when file-backed, append the record. Writes are serialized.
    pub fn insert(&self, def: TypeDefinition) -> Result<(), ReferentError> {
        let _guard = self.writer.lock().expect("poisoned");
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            let line = serde_json::to_string(&CacheRecord::from(&def)).map_err(std::io::Error::from)?;
            writeln!(f, "{line}")?;
        }
        self.insert_memory(def);
        Ok(())
    }

    /// Write every entry to `path` in type-name order.
    pub fn persist(&self, path: impl AsRef<Path>) -> Result<(), ReferentError> {
        let _guard = self.writer.lock().expect("poisoned");
        let mut f = std::io::BufWriter::new(File::create(path)?);
        for d in self.entries.read().expect("poisoned").values() {
            let line = serde_json::to_string(&CacheRecord::from(d)).map_err(std::io::Error::from)?;
            writeln!(f, "{line}")?;
        }
        f.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ExampleRecord {
    #[serde(rename = "type")]
    type_name: String,
    examples: Vec<String>,
}

/// Example mentions per type, used only by the example-referent ablation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExampleFixture {
    map: BTreeMap<String, Vec<String>>,
}

impl ExampleFixture {
    pub fn bundled() -> Self {
        let mut fx = Self::default();
        fx.extend_from(BUNDLED_EXAMPLES.as_bytes()).expect("bundled examples parse");
        for c in 0..BUNDLED_SYNTHETIC_CLASSES {
            fx.map.insert(synthetic::class_name(c), synthetic::synthetic_examples(c));
        }
        fx
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReferentError> {
        let mut fx = Self::default();
        fx.extend_from(BufReader::new(File::open(path)?))?;
        Ok(fx)
    }

    pub fn extend_from(&mut self, r: impl BufRead) -> Result<(), ReferentError> {
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ExampleRecord = serde_json::from_str(&line)
                .map_err(|e| ReferentError::Malformed { line: i + 1, message: e.to_string() })?;
            self.map.insert(rec.type_name, rec.examples);
        }
        Ok(())
    }

    pub fn get(&self, type_name: &str) -> Option<&[String]> {
        self.map.get(type_name).map(Vec::as_slice)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_has_table_definitions_and_synthetic_classes() {
        let c = DefinitionCache::bundled();
        assert!(c.get("location").unwrap().definition_text.contains("latitude and longitude"));
        assert!(c.get("date").unwrap().definition_text.ends_with("or even a relative date."));
        assert!(c.get("syn07").is_some());
        assert!(c.get("corporation").is_none());
        assert!(ExampleFixture::bundled().get("syn03").is_some());
    }

    #[test]
    fn file_backed_insert_then_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let c = DefinitionCache::open(&path).unwrap();
        let d = TypeDefinition {
            type_name: "corporation".into(),
            definition_text: "A corporation is a company.".into(),
            source: DefinitionSource::Llm,
            config: Some(GenerationConfig::default()),
        };
        c.insert(d.clone()).unwrap();
        let again = DefinitionCache::open(&path).unwrap();
        assert_eq!(again.get("corporation"), Some(d));

        let out = dir.path().join("copy.jsonl");
        DefinitionCache::bundled().persist(&out).unwrap();
        assert_eq!(DefinitionCache::open(&out).unwrap().get("location"), DefinitionCache::bundled().get("location"));
    }
}
