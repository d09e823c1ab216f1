//! Resolved run configuration: built-in defaults, overlaid by an optional
//! JSON config file, overlaid by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fewner::classifier::Objective;
use fewner::detector::PretrainConfig;
use fewner::neural::{AdamWConfig, EncoderConfig};
use fewner::referents::ReferentVariant;
use fewner::training::{MetaConfig, MetaOptimizerKind};
use serde::{Deserialize, Serialize};

/// Seeds used when only a count is requested.
pub const DEFAULT_SEEDS: [u64; 10] = [171, 354, 550, 667, 985, 1212, 1337, 2024, 3141, 4242];

/// Synthetic-corpus layout. Classes `main_first .. main_first + main_classes`
/// are split into train/dev/test; `pretrain_first ..` feed the hyperlink
/// corpus used for steppingstone pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticLayout {
    pub seed: u64,
    pub main_first: usize,
    pub main_classes: usize,
    pub sentences_per_class: usize,
    pub pretrain_first: usize,
    pub pretrain_classes: usize,
    pub pretrain_sentences_per_class: usize,
    /// Train/dev/test class fractions.
    pub split: (f64, f64, f64),
    /// Every this-many-th train-class sentence is held out for validation.
    pub holdout_every: usize,
}

impl Default for SyntheticLayout {
    fn default() -> Self {
        Self {
            seed: 7,
            main_first: 0,
            main_classes: 36,
            sentences_per_class: 20,
            pretrain_first: 40,
            pretrain_classes: 24,
            pretrain_sentences_per_class: 20,
            split: (0.6, 0.15, 0.25),
            holdout_every: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub query_shots: usize,
    pub train_episodes: usize,
    pub validation_episodes: usize,
    pub dev_episodes: usize,
    pub test_episodes: usize,
    pub encoder: EncoderConfig,
    /// Embedding scale of a fresh classifier (fresh detectors use
    /// `pretrain.embedding_std`).
    pub classifier_embedding_std: f64,
    pub steppingstone: bool,
    pub pretrain: PretrainConfig,
    pub detector: MetaConfig,
    pub classifier: MetaConfig,
    pub objective: Objective,
    pub referent_variant: ReferentVariant,
    pub seeds: Vec<u64>,
    pub offline: bool,
    pub convergence_epsilon: f64,
    pub convergence_patience: u64,
    pub synthetic: SyntheticLayout,
    /// Extra definitions (JSON lines) layered over the bundled fixtures.
    pub referent_cache: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let encoder = EncoderConfig { vocab_size: 4096, dim: 32, radius: 1 };
        Self {
            n_way: 5,
            k_shot: 1,
            query_shots: 1,
            train_episodes: 200,
            validation_episodes: 10,
            dev_episodes: 10,
            test_episodes: 20,
            encoder,
            classifier_embedding_std: 0.5,
            steppingstone: true,
            pretrain: PretrainConfig { encoder, embedding_std: 0.1, ..Default::default() },
            detector: MetaConfig::default(),
            classifier: MetaConfig {
                beta: 0.003,
                meta_optimizer: MetaOptimizerKind::Adamw,
                meta_adamw: AdamWConfig { weight_decay: 0.0, ..Default::default() },
                ..MetaConfig::default()
            },
            objective: Objective::OneVsRest,
            referent_variant: ReferentVariant::Mcs,
            seeds: DEFAULT_SEEDS[..5].to_vec(),
            offline: true,
            convergence_epsilon: 0.01,
            convergence_patience: 50,
            synthetic: SyntheticLayout::default(),
            referent_cache: None,
        }
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Defaults overlaid with a (possibly partial) JSON config file.
    pub fn from_file(path: Option<&Path>) -> Result<Self> {
        let mut value = serde_json::to_value(Self::default())?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let over: serde_json::Value =
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
            merge(&mut value, over);
        }
        let config: Self = serde_json::from_value(value).context("invalid configuration")?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("seed list is empty");
        }
        if self.n_way == 0 || self.k_shot == 0 {
            bail!("n_way and k_shot must be positive");
        }
        for (name, m) in [("detector", &self.detector), ("classifier", &self.classifier)] {
            if m.zeta_support < 0.0 || m.zeta_query < 0.0 {
                bail!("{name}: zeta must be non-negative");
            }
            if m.batch_episodes == 0 {
                bail!("{name}: batch_episodes must be at least 1");
            }
        }
        if self.pretrain.encoder != self.encoder {
            bail!("pretrain.encoder must equal encoder");
        }
        Ok(())
    }

    pub fn shape(&self) -> fewner::episodes::EpisodeShape {
        fewner::episodes::EpisodeShape { n_way: self.n_way, k_shot: self.k_shot, query_shots: self.query_shots }
    }

    /// Apply an encoder change everywhere it is mirrored.
    pub fn set_encoder(&mut self, encoder: EncoderConfig) {
        self.encoder = encoder;
        self.pretrain.encoder = encoder;
    }
}

/// `--seeds 5` → the first five default seeds; `--seeds 1,2,3` → those.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let spec = spec.trim();
    if !spec.contains(',') {
        let n: usize = spec.parse().with_context(|| format!("bad seed spec {spec:?}"))?;
        if n == 0 || n > DEFAULT_SEEDS.len() {
            bail!("seed count must be between 1 and {}", DEFAULT_SEEDS.len());
        }
        return Ok(DEFAULT_SEEDS[..n].to_vec());
    }
    let seeds: Vec<u64> = spec
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().with_context(|| format!("bad seed {s:?}")))
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        bail!("no seeds in {spec:?}");
    }
    Ok(seeds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_defaults_partially() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"n_way": 3, "detector": {"alpha": 0.2}}"#).unwrap();
        let c = RunConfig::from_file(Some(&p)).unwrap();
        assert_eq!(c.n_way, 3);
        assert_eq!(c.detector.alpha, 0.2);
        assert_eq!(c.detector.beta, MetaConfig::default().beta);
        std::fs::write(&p, r#"{"n_wya": 3}"#).unwrap();
        assert!(RunConfig::from_file(Some(&p)).is_err());
    }

    #[test]
    fn seeds() {
        assert_eq!(parse_seeds("2").unwrap(), vec![171, 354]);
        assert_eq!(parse_seeds("4, 9").unwrap(), vec![4, 9]);
        assert!(parse_seeds("0").is_err());
        assert_eq!(parse_seeds("171,").unwrap(), vec![171]);
        assert!(parse_seeds(",").is_err());
    }
}
