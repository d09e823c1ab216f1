//! The full synthetic experiment: pretrain → meta-train detector →
//! meta-train classifier → evaluate, per seed, then aggregate.
//!
//! Every stage leaves a `.done-<stage>` marker after its artifacts are
//! written; a rerun over the same directory loads finished stages instead of
//! recomputing them.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use fewner::classifier::{meta_train_classifier, ClassifierParams};
use fewner::detector::{meta_train_detector, pretrain_steppingstone, SpanDetectorParams};
use fewner::episodes::{load_episodes, persist_episodes, Episode};
use fewner::metrics::{convergence_steps, render_table, EvalReport, MeanStd, RunCurve};
use fewner::neural::{load_checkpoint, save_checkpoint};
use fewner::training::LogEntry;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::pipeline::{episode_referents, evaluate_pipeline, sample_sets, synthetic_world, EpisodeSets, PipelineScores, Resources, World};

pub const STEPPINGSTONE: &str = "steppingstone";
pub const RANDOM_INIT: &str = "random init";

/// One `--grid key=v1,v2,…` axis. Keys are config paths (`detector.alpha`);
/// a bare meta-learning key (`alpha`) sets both the detector and the
/// classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<serde_json::Value>,
}

const SHARED_META_KEYS: [&str; 7] =
    ["alpha", "beta", "inner_steps", "batch_episodes", "total_steps", "zeta_support", "zeta_query"];

impl FromStr for GridAxis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (key, values) = s.split_once('=').ok_or_else(|| anyhow!("grid axis {s:?} is not key=v1,v2"))?;
        let values: Vec<serde_json::Value> = values
            .split(',')
            .map(|v| serde_json::from_str(v.trim()).unwrap_or_else(|_| serde_json::Value::String(v.trim().to_string())))
            .collect();
        if key.is_empty() || values.is_empty() {
            bail!("grid axis {s:?} is empty");
        }
        Ok(Self { key: key.trim().to_string(), values })
    }
}

fn set_path(value: &mut serde_json::Value, path: &str, v: serde_json::Value) -> Result<()> {
    let mut slot = value;
    for part in path.split('.') {
        slot = slot.get_mut(part).ok_or_else(|| anyhow!("unknown config key {path:?}"))?;
    }
    *slot = v;
    Ok(())
}

/// `config` with `key` set to `value`.
pub fn with_value(config: &RunConfig, key: &str, value: &serde_json::Value) -> Result<RunConfig> {
    let mut json = serde_json::to_value(config)?;
    if SHARED_META_KEYS.contains(&key) {
        set_path(&mut json, &format!("detector.{key}"), value.clone())?;
        set_path(&mut json, &format!("classifier.{key}"), value.clone())?;
    } else {
        set_path(&mut json, key, value.clone())?;
    }
    if key == "encoder" || key.starts_with("encoder.") {
        json["pretrain"]["encoder"] = json["encoder"].clone();
    }
    let out: RunConfig = serde_json::from_value(json).with_context(|| format!("bad value {value} for {key}"))?;
    out.validate()?;
    Ok(out)
}

/// Cross product of the axes, in axis order with the last axis varying fastest.
pub fn grid_points(axes: &[GridAxis]) -> Vec<Vec<(String, serde_json::Value)>> {
    let mut points = vec![Vec::new()];
    for axis in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((axis.key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOptions {
    pub out: PathBuf,
    /// Train both a steppingstone and a random-init detector per seed.
    pub compare_init: bool,
    /// Stop after the detectors (span-only report).
    pub skip_classifier: bool,
    pub grid: Vec<GridAxis>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEval {
    pub seed: u64,
    /// Convergence steps of each trained detector, keyed by init.
    pub convergence: BTreeMap<String, u64>,
    pub dev: PipelineScores,
    /// Train classes, held-out sentences.
    pub seen: PipelineScores,
    /// Test classes.
    pub novel: PipelineScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub episodes: String,
    pub metric: String,
    pub value: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceColumn {
    pub init: String,
    pub steps: Vec<u64>,
    pub median: f64,
    pub value: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seeds: Vec<u64>,
    pub n_way: usize,
    pub k_shot: usize,
    pub runs: Vec<SeedEval>,
    pub summary: Vec<SummaryRow>,
    pub convergence_epsilon: f64,
    pub convergence_patience: u64,
    pub convergence: Vec<ConvergenceColumn>,
}

pub fn median(values: &[u64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_unstable();
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2] as f64,
        n => (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0,
    }
}

/// Write `value` as pretty JSON followed by a newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_log(path: &Path, log: &[LogEntry]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("writing {}", path.display()))?);
    for entry in log {
        serde_json::to_writer(&mut w, entry)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Run `run` unless the stage marker exists, in which case `load`.
fn stage<T>(dir: &Path, name: &str, load: impl FnOnce() -> Result<T>, run: impl FnOnce() -> Result<T>) -> Result<T> {
    let marker = dir.join(format!(".done-{name}"));
    if marker.exists() {
        return load().with_context(|| format!("resuming stage {name} in {}", dir.display()));
    }
    let value = run().with_context(|| format!("stage {name} in {}", dir.display()))?;
    fs::write(&marker, b"")?;
    Ok(value)
}

fn progress(seed: u64, message: &str) {
    eprintln!("[seed {seed}] {message}");
}

struct Job<'a> {
    config: &'a RunConfig,
    world: &'a World,
    resources: &'a Resources,
    options: &'a ExperimentOptions,
}

fn save_detector(dir: &Path, name: &str, params: &SpanDetectorParams, kind: &str) -> Result<()> {
    save_checkpoint(dir.join(format!("{name}.ckpt")), &params.to_checkpoint(kind))?;
    Ok(())
}

fn load_detector(path: &Path) -> Result<SpanDetectorParams> {
    Ok(SpanDetectorParams::from_checkpoint(load_checkpoint(path)?)?)
}

const EPISODE_FILES: [&str; 5] = ["train", "validation", "dev", "seen-test", "test"];

fn run_seed(ctx: &Job<'_>, dir: &Path, seed: u64) -> Result<SeedEval> {
    let config = ctx.config;
    let enc = config.encoder;
    fs::create_dir_all(dir)?;

    let sets = stage(
        dir,
        "episodes",
        || {
            let mut loaded: Vec<Vec<Episode>> = Vec::new();
            for f in EPISODE_FILES {
                loaded.push(load_episodes(dir.join(format!("episodes-{f}.jsonl")))?);
            }
            let mut it = loaded.into_iter();
            let mut next = || it.next().expect("five sets");
            Ok(EpisodeSets { train: next(), validation: next(), dev: next(), seen_test: next(), test: next() })
        },
        || {
            let sets = sample_sets(ctx.world, config, seed)?;
            for (f, eps) in EPISODE_FILES.iter().zip([&sets.train, &sets.validation, &sets.dev, &sets.seen_test, &sets.test]) {
                persist_episodes(eps, dir.join(format!("episodes-{f}.jsonl")))?;
            }
            Ok(sets)
        },
    )?;

    let use_ss = config.steppingstone || ctx.options.compare_init;
    let use_random = !config.steppingstone || ctx.options.compare_init;
    let mut inits: Vec<(&str, SpanDetectorParams)> = Vec::new();
    if use_ss {
        let ss = stage(
            dir,
            "pretrain",
            || load_detector(&dir.join("steppingstone.ckpt")),
            || {
                let t = Instant::now();
                let (p, log) = pretrain_steppingstone(&ctx.world.pretrain, &config.pretrain, seed)?;
                save_detector(dir, "steppingstone", &p, "steppingstone")?;
                write_log(&dir.join("pretrain-log.jsonl"), &log)?;
                let last = log.last().map_or(f64::NAN, |e| e.loss);
                progress(seed, &format!("pretrained steppingstone detector, loss {last:.4} ({:.1?})", t.elapsed()));
                Ok(p)
            },
        )?;
        inits.push((STEPPINGSTONE, ss));
    }
    if use_random {
        inits.push((RANDOM_INIT, SpanDetectorParams::random(enc, config.pretrain.embedding_std, seed)));
    }

    let mut detectors: BTreeMap<String, (SpanDetectorParams, RunCurve)> = BTreeMap::new();
    for (init_name, init) in inits {
        let file = if init_name == STEPPINGSTONE { "detector-steppingstone" } else { "detector-random" };
        let trained = stage(
            dir,
            file,
            || Ok((load_detector(&dir.join(format!("{file}.ckpt")))?, read_json(&dir.join(format!("{file}-curve.json")))?)),
            || {
                let t = Instant::now();
                let (p, out) = meta_train_detector(&init, &sets.train, &sets.dev, &config.detector, seed)?;
                save_detector(dir, file, &p, "meta-trained")?;
                write_log(&dir.join(format!("{file}-log.jsonl")), &out.log)?;
                write_json(&dir.join(format!("{file}-curve.json")), &out.curve)?;
                let last = out.curve.points.last().map_or(f64::NAN, |p| p.1);
                progress(seed, &format!("meta-trained detector ({init_name}), dev span F1 {last:.3} ({:.1?})", t.elapsed()));
                Ok((p, out.curve))
            },
        )?;
        detectors.insert(init_name.to_string(), trained);
    }

    let classifier = if ctx.options.skip_classifier {
        None
    } else {
        let variant = config.referent_variant;
        let train_refs = episode_referents(variant, &sets.train, ctx.resources, seed, enc.dim)?;
        let val_refs = episode_referents(variant, &sets.validation, ctx.resources, seed, enc.dim)?;
        Some(stage(
            dir,
            "classifier",
            || Ok(ClassifierParams::from_checkpoint(load_checkpoint(dir.join("classifier.ckpt"))?)?),
            || {
                let t = Instant::now();
                let init = ClassifierParams::random(enc, config.classifier_embedding_std, seed);
                let (p, out) = meta_train_classifier(
                    &init,
                    &sets.train,
                    &train_refs,
                    &sets.validation,
                    &val_refs,
                    &config.classifier,
                    config.objective,
                    seed,
                )?;
                save_checkpoint(dir.join("classifier.ckpt"), &p.to_checkpoint("meta-trained"))?;
                write_log(&dir.join("classifier-log.jsonl"), &out.log)?;
                write_json(&dir.join("classifier-curve.json"), &out.curve)?;
                let last = out.curve.points.last().map_or(f64::NAN, |p| p.1);
                progress(seed, &format!("meta-trained classifier, validation typed F1 {last:.3} ({:.1?})", t.elapsed()));
                Ok(p)
            },
        )?)
    };

    stage(
        dir,
        "evaluate",
        || read_json(&dir.join("eval.json")),
        || {
            let main = if config.steppingstone { STEPPINGSTONE } else { RANDOM_INIT };
            let detector = &detectors[main].0;
            let score = |episodes: &[Episode]| -> Result<PipelineScores> {
                match &classifier {
                    Some(c) => {
                        let refs = episode_referents(config.referent_variant, episodes, ctx.resources, seed, enc.dim)?;
                        evaluate_pipeline(detector, Some((c, &refs)), episodes, config)
                    }
                    None => evaluate_pipeline(detector, None, episodes, config),
                }
            };
            let convergence = detectors
                .iter()
                .map(|(k, (_, curve))| {
                    let steps = convergence_steps(curve, config.convergence_epsilon, config.convergence_patience)
                        .unwrap_or(config.detector.total_steps);
                    (k.clone(), steps)
                })
                .collect();
            let eval = SeedEval { seed, convergence, dev: score(&sets.dev)?, seen: score(&sets.seen_test)?, novel: score(&sets.test)? };
            write_json(&dir.join("eval.json"), &eval)?;
            Ok(eval)
        },
    )
}

fn check_snapshot(out: &Path, config: &RunConfig) -> Result<()> {
    let path = out.join("config.json");
    if path.exists() {
        let previous: serde_json::Value = read_json(&path)?;
        if previous != serde_json::to_value(config)? {
            bail!("{} holds a different configuration; use a fresh directory", path.display());
        }
    } else {
        write_json(&path, config)?;
    }
    Ok(())
}

fn run_seeds(ctx: &Job<'_>, root: &Path) -> Result<Vec<SeedEval>> {
    ctx.config.seeds.par_iter().map(|&seed| run_seed(ctx, &root.join(format!("seed-{seed}")), seed)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub point: Vec<(String, serde_json::Value)>,
    pub dev_score: f64,
}

fn dev_score(eval: &SeedEval) -> f64 {
    eval.dev.typed.as_ref().unwrap_or(&eval.dev.span).f1()
}

/// Try every grid point on the first seed's dev episodes and return the
/// best configuration (ties: earliest point).
fn grid_search(base: &RunConfig, world: &World, resources: &Resources, options: &ExperimentOptions) -> Result<RunConfig> {
    let points = grid_points(&options.grid);
    let root = options.out.join("grid");
    let mut results = Vec::with_capacity(points.len());
    let mut best: Option<(f64, RunConfig)> = None;
    for (i, point) in points.iter().enumerate() {
        let mut config = base.clone();
        for (k, v) in point {
            config = with_value(&config, k, v)?;
        }
        config.seeds.truncate(1);
        let dir = root.join(format!("point-{i}"));
        fs::create_dir_all(&dir)?;
        check_snapshot(&dir, &config)?;
        let ctx = Job { config: &config, world, resources, options };
        let eval = run_seeds(&ctx, &dir)?.remove(0);
        let score = dev_score(&eval);
        eprintln!("[grid] point {i} {point:?}: dev F1 {score:.4}");
        results.push(GridResult { point: point.clone(), dev_score: score });
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            let mut chosen = config;
            chosen.seeds = base.seeds.clone();
            best = Some((score, chosen));
        }
    }
    write_json(&root.join("grid.json"), &results)?;
    Ok(best.expect("non-empty grid").1)
}

/// Run (or resume) the whole experiment in `options.out`.
pub fn run_full_experiment(config: &RunConfig, options: &ExperimentOptions) -> Result<ExperimentReport> {
    config.validate()?;
    fs::create_dir_all(&options.out).with_context(|| format!("creating {}", options.out.display()))?;
    let world = synthetic_world(&config.synthetic)?;
    let resources = Resources::new(config)?;
    let config = if options.grid.is_empty() { config.clone() } else { grid_search(config, &world, &resources, options)? };
    check_snapshot(&options.out, &config)?;
    let ctx = Job { config: &config, world: &world, resources: &resources, options };
    let runs = run_seeds(&ctx, &options.out)?;
    let report = build_report(&config, runs)?;
    write_json(&options.out.join("report.json"), &report)?;
    fs::write(options.out.join("report.txt"), render_report(&report))?;
    Ok(report)
}

fn build_report(config: &RunConfig, runs: Vec<SeedEval>) -> Result<ExperimentReport> {
    let mut summary = Vec::new();
    let sets: [(&str, fn(&SeedEval) -> &PipelineScores); 3] = [
        ("seen classes, held-out sentences", |e| &e.seen),
        ("dev classes", |e| &e.dev),
        ("test classes", |e| &e.novel),
    ];
    let metrics: [(&str, fn(&PipelineScores) -> Option<&EvalReport>); 3] = [
        ("span F1", |s| Some(&s.span)),
        ("typed F1", |s| s.typed.as_ref()),
        ("typed F1 (gold spans)", |s| s.typed_gold_spans.as_ref()),
    ];
    for (set_name, set) in sets {
        for (metric_name, metric) in metrics {
            let values: Option<Vec<f64>> = runs.iter().map(|r| metric(set(r)).map(EvalReport::f1)).collect();
            if let Some(values) = values {
                summary.push(SummaryRow {
                    episodes: set_name.to_string(),
                    metric: metric_name.to_string(),
                    value: MeanStd::of(&values)?,
                });
            }
        }
    }
    let mut convergence = Vec::new();
    for init in [STEPPINGSTONE, RANDOM_INIT] {
        let steps: Option<Vec<u64>> = runs.iter().map(|r| r.convergence.get(init).copied()).collect();
        if let Some(steps) = steps.filter(|s| !s.is_empty()) {
            let as_f: Vec<f64> = steps.iter().map(|&s| s as f64).collect();
            convergence.push(ConvergenceColumn {
                init: init.to_string(),
                median: median(&steps),
                value: MeanStd::of(&as_f)?,
                steps,
            });
        }
    }
    Ok(ExperimentReport {
        seeds: config.seeds.clone(),
        n_way: config.n_way,
        k_shot: config.k_shot,
        runs,
        summary,
        convergence_epsilon: config.convergence_epsilon,
        convergence_patience: config.convergence_patience,
        convergence,
    })
}

/// Plain-text tables: F1 cells as percentage `mean±std`, and convergence
/// steps per seed with median and `mean±std`.
pub fn render_report(report: &ExperimentReport) -> String {
    let seeds: Vec<String> = report.seeds.iter().map(u64::to_string).collect();
    let mut out = format!(
        "{}-way {}-shot, {} runs (seeds {})\n\n",
        report.n_way,
        report.k_shot,
        report.runs.len(),
        seeds.join(", ")
    );
    let metric_names: Vec<&str> = {
        let mut v: Vec<&str> = Vec::new();
        for r in &report.summary {
            if !v.contains(&r.metric.as_str()) {
                v.push(&r.metric);
            }
        }
        v
    };
    let mut headers = vec!["episodes"];
    headers.extend(&metric_names);
    let mut rows: Vec<Vec<String>> = Vec::new();
    for r in &report.summary {
        if rows.last().is_none_or(|row| row[0] != r.episodes) {
            rows.push(vec![r.episodes.clone()]);
        }
        rows.last_mut().expect("row").push(r.value.format_scaled(100.0));
    }
    out.push_str(&render_table(&headers, &rows));
    if !report.convergence.is_empty() {
        out.push_str(&format!(
            "\nconvergence steps (epsilon {}, patience {})\n",
            report.convergence_epsilon, report.convergence_patience
        ));
        let mut headers = vec!["seed"];
        headers.extend(report.convergence.iter().map(|c| c.init.as_str()));
        let mut rows: Vec<Vec<String>> = report
            .seeds
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut row = vec![s.to_string()];
                row.extend(report.convergence.iter().map(|c| c.steps[i].to_string()));
                row
            })
            .collect();
        let mut med = vec!["median".to_string()];
        med.extend(report.convergence.iter().map(|c| format!("{}", c.median)));
        rows.push(med);
        let mut ms = vec!["mean±std".to_string()];
        ms.extend(report.convergence.iter().map(|c| c.value.format_scaled(1.0)));
        rows.push(ms);
        out.push_str(&render_table(&headers, &rows));
    }
    out
}
