//! Referent ablation: the classifier under each referent variant, over
//! several seeds, scored on gold query spans.

use anyhow::Result;
use fewner::classifier::{meta_train_classifier, ClassifierParams};
use fewner::episodes::Episode;
use fewner::metrics::{aggregate_runs, render_table, AggregateReport, EvalReport};
use fewner::referents::ReferentVariant;
use fewner::training::MetaConfig;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::pipeline::{episode_referents, typed_on_gold, Resources};

pub struct AblationInputs<'a> {
    pub variants: &'a [ReferentVariant],
    pub test: &'a [Episode],
    /// When given, a classifier is meta-trained per variant and seed.
    pub train: Option<&'a [Episode]>,
    /// Starting classifier; a fresh one per seed when absent.
    pub classifier: Option<&'a ClassifierParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: ReferentVariant,
    pub runs: Vec<AblationRun>,
    pub aggregate: AggregateReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub meta_trained: bool,
    pub rows: Vec<AblationRow>,
}

fn one_run(
    config: &RunConfig,
    inputs: &AblationInputs<'_>,
    resources: &Resources,
    variant: ReferentVariant,
    seed: u64,
) -> Result<EvalReport> {
    let init = match inputs.classifier {
        Some(c) => c.clone(),
        None => ClassifierParams::random(config.encoder, config.classifier_embedding_std, seed),
    };
    let dim = init.encoder.dim;
    let classifier = match inputs.train {
        Some(train) => {
            let refs = episode_referents(variant, train, resources, seed, dim)?;
            let meta = MetaConfig { eval_interval: 0, ..config.classifier };
            meta_train_classifier(&init, train, &refs, &[], &[], &meta, config.objective, seed)?.0
        }
        None => init,
    };
    let refs = episode_referents(variant, inputs.test, resources, seed, dim)?;
    typed_on_gold(&classifier, inputs.test, &refs, &config.classifier, config.objective)
}

/// Every (variant, seed) pair; rows follow `inputs.variants`, runs follow
/// `config.seeds`.
pub fn run_ablation(config: &RunConfig, inputs: &AblationInputs<'_>, resources: &Resources) -> Result<AblationReport> {
    let jobs: Vec<(ReferentVariant, u64)> =
        inputs.variants.iter().flat_map(|&v| config.seeds.iter().map(move |&s| (v, s))).collect();
    let results: Vec<Result<EvalReport>> =
        jobs.par_iter().map(|&(v, s)| one_run(config, inputs, resources, v, s)).collect();
    let mut results = results.into_iter();
    let mut rows = Vec::with_capacity(inputs.variants.len());
    for &variant in inputs.variants {
        let mut runs = Vec::with_capacity(config.seeds.len());
        for &seed in &config.seeds {
            let report = results.next().expect("one result per job")?;
            eprintln!("[ablation] {variant} seed {seed}: typed F1 {:.4}", report.f1());
            runs.push(AblationRun { seed, report });
        }
        let reports: Vec<EvalReport> = runs.iter().map(|r| r.report.clone()).collect();
        rows.push(AblationRow { variant, aggregate: aggregate_runs(&reports)?, runs });
    }
    Ok(AblationReport { seeds: config.seeds.clone(), meta_trained: inputs.train.is_some(), rows })
}

/// One row per variant; precision, recall and F1 as percentage `mean±std`.
pub fn render_ablation(report: &AblationReport) -> String {
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.variant.to_string(),
                r.aggregate.precision.format_scaled(100.0),
                r.aggregate.recall.format_scaled(100.0),
                r.aggregate.f1.format_scaled(100.0),
            ]
        })
        .collect();
    let seeds: Vec<String> = report.seeds.iter().map(u64::to_string).collect();
    format!(
        "referent ablation, typed scores on gold spans, {} runs (seeds {})\n\n{}",
        report.seeds.len(),
        seeds.join(", "),
        render_table(&["referent", "precision", "recall", "F1"], &rows)
    )
}
