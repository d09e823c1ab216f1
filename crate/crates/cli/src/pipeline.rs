//! Glue shared by the subcommands: the synthetic world, episode sets,
//! referent resources and end-to-end evaluation.

use std::collections::BTreeSet;

use anyhow::{anyhow, Context, Result};
use fewner::classifier::{adapt_and_classify, ClassifierParams, Objective};
use fewner::corpus::{annotate_documents, Dataset, LabeledSentence};
use fewner::detector::{adapt_and_detect, SpanDetectorParams};
use fewner::episodes::{partition_classes, sample_episodes, ClassSplit, Episode};
use fewner::metrics::{micro_f1, span_f1, EvalReport};
use fewner::referents::{
    referent_inputs, DefinitionCache, ExampleFixture, LlmClient, ReferentInput, ReferentResources,
    ReferentVariant,
};
use fewner::synthetic::{class_name, generate, synthetic_markup_documents, SyntheticConfig};
use fewner::tagging::Span;
use fewner::training::MetaConfig;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SyntheticLayout};

/// Client honouring `offline`. Without the `live` build feature every
/// client is offline.
pub fn make_client(offline: bool) -> Result<LlmClient> {
    if offline {
        return Ok(LlmClient::offline());
    }
    #[cfg(feature = "live")]
    {
        Ok(LlmClient::live_from_env(fewner::referents::ClientConfig::default())?)
    }
    #[cfg(not(feature = "live"))]
    {
        Ok(LlmClient::offline())
    }
}

/// Definition cache, LLM client and example fixture.
pub struct Resources {
    pub cache: DefinitionCache,
    pub client: LlmClient,
    pub examples: ExampleFixture,
}

impl Resources {
    pub fn new(config: &RunConfig) -> Result<Self> {
        Ok(Self {
            cache: DefinitionCache::bundled_with(config.referent_cache.as_deref())?,
            client: make_client(config.offline)?,
            examples: ExampleFixture::bundled(),
        })
    }

    pub fn view(&self) -> ReferentResources<'_> {
        ReferentResources { cache: &self.cache, client: &self.client, examples: &self.examples }
    }
}

pub fn episode_referents(
    variant: ReferentVariant,
    episodes: &[Episode],
    resources: &Resources,
    seed: u64,
    dim: usize,
) -> Result<Vec<Vec<ReferentInput>>> {
    episodes
        .iter()
        .map(|e| referent_inputs(variant, &e.classes, resources.view(), seed, dim).map_err(Into::into))
        .collect()
}

/// Fixed synthetic corpora: the main labelled corpus with its class split
/// (train-class sentences divided into a training pool and a held-out pool)
/// and the span-only hyperlink corpus for steppingstone pretraining.
pub struct World {
    pub split: ClassSplit,
    pub full: Dataset,
    pub train_pool: Dataset,
    pub holdout_pool: Dataset,
    pub pretrain: Dataset,
    pub pretrain_discarded: usize,
}

pub fn synthetic_world(layout: &SyntheticLayout) -> Result<World> {
    let full = generate(SyntheticConfig {
        n_types: layout.main_classes,
        sentences_per_type: layout.sentences_per_class,
        first_class: layout.main_first,
        seed: layout.seed,
    });
    let inventory: BTreeSet<String> = (layout.main_first..layout.main_first + layout.main_classes).map(class_name).collect();
    let split = partition_classes(&inventory, layout.split, layout.seed)?;
    let every = layout.holdout_every.max(2);
    let (mut train, mut holdout) = (Vec::new(), Vec::new());
    for (i, s) in full.sentences.iter().enumerate() {
        if i % every == every - 1 {
            holdout.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    let docs = synthetic_markup_documents(SyntheticConfig {
        n_types: layout.pretrain_classes,
        sentences_per_type: layout.pretrain_sentences_per_class,
        first_class: layout.pretrain_first,
        seed: layout.seed.wrapping_add(1),
    });
    let annotation = annotate_documents(&docs)?;
    Ok(World {
        split,
        full,
        train_pool: Dataset::new(train),
        holdout_pool: Dataset::new(holdout),
        pretrain: Dataset::new(annotation.sentences),
        pretrain_discarded: annotation.discarded,
    })
}

/// Episodes of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSets {
    /// Train classes, training pool.
    pub train: Vec<Episode>,
    /// Train classes, held-out pool; classifier validation.
    pub validation: Vec<Episode>,
    /// Dev classes; detector validation and grid search.
    pub dev: Vec<Episode>,
    /// Train classes, held-out pool, disjoint seeds from `validation`.
    pub seen_test: Vec<Episode>,
    /// Test classes.
    pub test: Vec<Episode>,
}

fn episode_seed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(tag * 100_000)
}

pub fn sample_sets(world: &World, config: &RunConfig, seed: u64) -> Result<EpisodeSets> {
    let shape = config.shape();
    let s = &world.split;
    Ok(EpisodeSets {
        train: sample_episodes(&world.train_pool, &s.train, shape, config.train_episodes, episode_seed(seed, 1))?,
        validation: sample_episodes(&world.holdout_pool, &s.train, shape, config.validation_episodes, episode_seed(seed, 2))?,
        dev: sample_episodes(&world.full, &s.dev, shape, config.dev_episodes, episode_seed(seed, 3))?,
        seen_test: sample_episodes(&world.holdout_pool, &s.train, shape, config.test_episodes, episode_seed(seed, 4))?,
        test: sample_episodes(&world.full, &s.test, shape, config.test_episodes, episode_seed(seed, 5))?,
    })
}

/// Span-only and typed scores of the full pipeline on one episode set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineScores {
    /// Detector boundaries, types ignored.
    pub span: EvalReport,
    /// Detector spans typed by the classifier.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub typed: Option<EvalReport>,
    /// Classifier alone, typing gold spans.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub typed_gold_spans: Option<EvalReport>,
}

fn gold(ep: &Episode) -> Vec<Vec<Span>> {
    ep.query.iter().map(LabeledSentence::entity_spans).collect()
}

/// Typed micro scores of the classifier given gold query spans.
pub fn typed_on_gold(
    classifier: &ClassifierParams,
    episodes: &[Episode],
    referents: &[Vec<ReferentInput>],
    config: &MetaConfig,
    objective: Objective,
) -> Result<EvalReport> {
    let per: Vec<Result<(Vec<Vec<Span>>, Vec<Vec<Span>>)>> = episodes
        .par_iter()
        .zip(referents)
        .map(|(ep, refs)| {
            let g = gold(ep);
            let untyped: Vec<Vec<Span>> = g.iter().map(|s| s.iter().map(Span::untyped).collect()).collect();
            Ok((adapt_and_classify(classifier, ep, refs, &untyped, config, objective)?, g))
        })
        .collect();
    let (mut pred, mut all_gold) = (Vec::new(), Vec::new());
    for r in per {
        let (p, g) = r?;
        pred.extend(p);
        all_gold.extend(g);
    }
    Ok(micro_f1(&pred, &all_gold)?)
}

/// Detector, then (when given) the classifier on the detected spans.
pub fn evaluate_pipeline(
    detector: &SpanDetectorParams,
    classifier: Option<(&ClassifierParams, &[Vec<ReferentInput>])>,
    episodes: &[Episode],
    config: &RunConfig,
) -> Result<PipelineScores> {
    if let Some((_, refs)) = classifier {
        if refs.len() != episodes.len() {
            return Err(anyhow!("{} episodes but {} referent lists", episodes.len(), refs.len()));
        }
    }
    type Row = (Vec<Vec<Span>>, Option<Vec<Vec<Span>>>, Vec<Vec<Span>>);
    let per: Vec<Result<Row>> = episodes
        .par_iter()
        .enumerate()
        .map(|(i, ep)| {
            let detected = adapt_and_detect(detector, ep, &config.detector)?;
            let typed = match classifier {
                Some((c, refs)) => {
                    Some(adapt_and_classify(c, ep, &refs[i], &detected, &config.classifier, config.objective)?)
                }
                None => None,
            };
            Ok((detected, typed, gold(ep)))
        })
        .collect();
    let (mut det, mut typed, mut all_gold) = (Vec::new(), Vec::new(), Vec::new());
    for r in per {
        let (d, t, g) = r?;
        det.extend(d);
        typed.extend(t.unwrap_or_default());
        all_gold.extend(g);
    }
    let (typed, typed_gold_spans) = match classifier {
        Some((c, refs)) => (
            Some(micro_f1(&typed, &all_gold)?),
            Some(
                typed_on_gold(c, episodes, refs, &config.classifier, config.objective).context("typing gold spans")?,
            ),
        ),
        None => (None, None),
    };
    Ok(PipelineScores { span: span_f1(&det, &all_gold)?, typed, typed_gold_spans })
}
