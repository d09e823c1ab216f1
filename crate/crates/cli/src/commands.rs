//! Command-line surface and dispatch.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fewner::classifier::{meta_train_classifier, ClassifierParams, Objective};
use fewner::corpus::{annotate_documents, load_dataset, write_dataset, Dataset, MarkupDocument};
use fewner::detector::{meta_train_detector, train_supervised, SpanDetectorParams};
use fewner::episodes::{load_episodes, partition_classes, persist_episodes, sample_episodes, Episode};
use fewner::llm::{evaluate_llm_baseline, load_response_fixture, ResponseSource};
use fewner::neural::{load_checkpoint, save_checkpoint, GradCheckConfig};
use fewner::referents::ReferentVariant;
use fewner::synthetic::{generate, synthetic_markup_documents, SyntheticConfig};

use crate::ablation::{render_ablation, run_ablation, AblationInputs};
use crate::config::{parse_seeds, RunConfig};
use crate::experiment::{render_report, run_full_experiment, write_json, write_log, ExperimentOptions, GridAxis};
use crate::gradcheck::run_suite;
use crate::pipeline::{episode_referents, evaluate_pipeline, make_client, Resources};
use crate::UsageError;

#[derive(Debug, Parser)]
#[command(name = "fewner", version, about = "Few-shot NER: span detection, type referents and episodic meta-learning")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Overrides applied on top of the config file. Meta-learning flags set
/// the detector and the classifier alike.
#[derive(Debug, Default, Args)]
pub struct GlobalArgs {
    /// JSON config file; keys it omits keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Never contact the LLM service.
    #[arg(long, global = true)]
    pub offline: bool,
    /// A count (first N default seeds) or a comma-separated list; a single
    /// literal seed is written with a trailing comma, e.g. `42,`.
    #[arg(long, global = true)]
    pub seeds: Option<String>,
    #[arg(long, global = true)]
    pub n_way: Option<usize>,
    #[arg(long, global = true)]
    pub k_shot: Option<usize>,
    #[arg(long, global = true)]
    pub query_shots: Option<usize>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    #[arg(long, global = true)]
    pub inner_steps: Option<usize>,
    #[arg(long, global = true)]
    pub batch_episodes: Option<usize>,
    #[arg(long, global = true)]
    pub total_steps: Option<u64>,
    #[arg(long, global = true)]
    pub zeta_support: Option<f64>,
    #[arg(long, global = true)]
    pub zeta_query: Option<f64>,
    /// mcs | random | name | example
    #[arg(long, global = true)]
    pub variant: Option<ReferentVariant>,
    /// one-vs-rest | softmax
    #[arg(long, global = true, value_parser = parse_objective)]
    pub objective: Option<Objective>,
}

fn parse_objective(s: &str) -> Result<Objective, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown objective {s:?}"))
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Hyperlink-marked text (documents separated by blank lines) to a span-only dataset.
    Ingest {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic labelled corpus, or its hyperlink-markup form.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 36)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        first_class: usize,
        #[arg(long, default_value_t = 20)]
        sentences_per_class: usize,
        #[arg(long, default_value_t = 7)]
        corpus_seed: u64,
        /// Emit markup text for `ingest` instead of a dataset.
        #[arg(long)]
        markup: bool,
    },
    /// Pretrain the steppingstone span detector on a span-only dataset.
    PretrainSsd {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Split the classes and sample train/dev/test episodes into a directory.
    SampleEpisodes {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seed of the class split.
        #[arg(long, default_value_t = 7)]
        split_seed: u64,
    },
    /// First-order MAML for the span detector over training episodes.
    MetaTrainDetector {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Starting checkpoint (e.g. the steppingstone); random when absent.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// First-order MAML for the entity classifier over training episodes.
    MetaTrainClassifier {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Span-only and typed scores of a detector (and classifier) on episodes.
    Evaluate {
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classifier scores under each referent variant over several seeds.
    AblateReferents {
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "mcs,random,name,example")]
        variants: Vec<ReferentVariant>,
        /// Meta-train a classifier per variant and seed on these episodes.
        #[arg(long)]
        train_episodes: Option<PathBuf>,
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// Directory for ablation.json and ablation.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// In-context-learning baseline from canned responses (or the live service).
    LlmBaseline {
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long)]
        responses: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of every hand-written gradient.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the resolved configuration (defaults < config file < flags).
    Config,
    /// Pretrain → meta-train both learners → evaluate, per seed; resumable.
    Experiment {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_steppingstone: bool,
        /// Train steppingstone and random-init detectors side by side.
        #[arg(long)]
        compare_init: bool,
        #[arg(long)]
        skip_classifier: bool,
        /// `key=v1,v2,…`; repeat for a cross product on the dev episodes.
        #[arg(long)]
        grid: Vec<GridAxis>,
    },
}

fn usage(message: impl Into<String>) -> anyhow::Error {
    UsageError(message.into()).into()
}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(usage(format!("input path {} does not exist", path.display())));
    }
    Ok(())
}

/// Defaults, then the config file, then flags.
pub fn resolve_config(g: &GlobalArgs) -> Result<RunConfig> {
    if let Some(p) = &g.config {
        require(p)?;
    }
    let mut c = RunConfig::from_file(g.config.as_deref()).map_err(|e| usage(format!("{e:#}")))?;
    if g.offline {
        c.offline = true;
    }
    if let Some(s) = &g.seeds {
        c.seeds = parse_seeds(s).map_err(|e| usage(format!("{e:#}")))?;
    }
    macro_rules! set {
        ($($flag:ident => $($field:ident).+;)*) => {$(
            if let Some(v) = g.$flag {
                c.$($field).+ = v;
            }
        )*};
    }
    set! {
        n_way => n_way;
        k_shot => k_shot;
        query_shots => query_shots;
        alpha => detector.alpha;
        alpha => classifier.alpha;
        beta => detector.beta;
        beta => classifier.beta;
        inner_steps => detector.inner_steps;
        inner_steps => classifier.inner_steps;
        batch_episodes => detector.batch_episodes;
        batch_episodes => classifier.batch_episodes;
        total_steps => detector.total_steps;
        total_steps => classifier.total_steps;
        zeta_support => detector.zeta_support;
        zeta_support => classifier.zeta_support;
        zeta_query => detector.zeta_query;
        zeta_query => classifier.zeta_query;
        variant => referent_variant;
        objective => objective;
    }
    c.validate().map_err(|e| usage(format!("{e:#}")))?;
    Ok(c)
}

fn first_seed(c: &RunConfig) -> u64 {
    c.seeds[0]
}

fn episodes_at(path: &Path) -> Result<Vec<Episode>> {
    require(path)?;
    load_episodes(path).with_context(|| format!("loading episodes from {}", path.display()))
}

fn load_detector(path: &Path) -> Result<SpanDetectorParams> {
    require(path)?;
    Ok(SpanDetectorParams::from_checkpoint(load_checkpoint(path)?)?)
}

fn load_classifier(path: &Path) -> Result<ClassifierParams> {
    require(path)?;
    Ok(ClassifierParams::from_checkpoint(load_checkpoint(path)?)?)
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    out.with_file_name(format!("{stem}{suffix}"))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

/// Markup documents are separated by blank lines.
pub fn split_documents(text: &str) -> Vec<MarkupDocument> {
    let mut docs = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines().chain(std::iter::once("")) {
        if line.trim().is_empty() {
            if !current.is_empty() {
                docs.push(MarkupDocument { doc_id: format!("doc-{}", docs.len()), text: current.join("\n") });
                current.clear();
            }
        } else {
            current.push(line);
        }
    }
    docs
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let config = resolve_config(&cli.global)?;
    let t = Instant::now();
    match cli.command {
        Command::Ingest { input, out } => {
            require(&input)?;
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let docs = split_documents(&text);
            let annotation = annotate_documents(&docs)?;
            ensure_parent(&out)?;
            write_dataset(&Dataset::new(annotation.sentences.clone()), &out)?;
            println!(
                "ingested {} documents: {} sentences kept, {} discarded without anchors -> {}",
                docs.len(),
                annotation.sentences.len(),
                annotation.discarded,
                out.display()
            );
        }
        Command::Synth { out, classes, first_class, sentences_per_class, corpus_seed, markup } => {
            let sc = SyntheticConfig { n_types: classes, sentences_per_type: sentences_per_class, first_class, seed: corpus_seed };
            ensure_parent(&out)?;
            if markup {
                let docs = synthetic_markup_documents(sc);
                let text: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
                fs::write(&out, text.join("\n\n") + "\n")?;
                println!("wrote {} markup documents -> {}", docs.len(), out.display());
            } else {
                let data = generate(sc);
                write_dataset(&data, &out)?;
                println!("wrote {} sentences over {classes} classes -> {}", data.len(), out.display());
            }
        }
        Command::PretrainSsd { data, out, steps } => {
            require(&data)?;
            let dataset = load_dataset(&data)?.span_only()?;
            let mut pc = config.pretrain;
            if let Some(s) = steps {
                pc.steps = s;
            }
            let seed = first_seed(&config);
            let init = SpanDetectorParams::random(pc.encoder, pc.embedding_std, seed);
            let (params, log) = train_supervised(init, &dataset.sentences, &pc, seed)?;
            ensure_parent(&out)?;
            save_checkpoint(&out, &params.to_checkpoint("steppingstone"))?;
            write_log(&sibling(&out, ".log.jsonl"), &log)?;
            let (first, last) = (log.first().map_or(f64::NAN, |e| e.loss), log.last().map_or(f64::NAN, |e| e.loss));
            println!("pretrained {} steps on {} sentences, loss {first:.4} -> {last:.4} -> {}", pc.steps, dataset.len(), out.display());
        }
        Command::SampleEpisodes { data, out, split_seed } => {
            require(&data)?;
            let dataset = load_dataset(&data)?;
            let inventory = dataset.class_inventory.clone();
            let split = partition_classes(&inventory, config.synthetic.split, split_seed)?;
            let seed = first_seed(&config);
            let shape = config.shape();
            fs::create_dir_all(&out)?;
            write_json(&out.join("split.json"), &split)?;
            let mut counts = Vec::new();
            for (name, classes, n, tag) in [
                ("train", &split.train, config.train_episodes, 1u64),
                ("dev", &split.dev, config.dev_episodes, 3),
                ("test", &split.test, config.test_episodes, 5),
            ] {
                let eps = sample_episodes(&dataset, classes, shape, n, seed.wrapping_mul(1_000_003).wrapping_add(tag * 100_000))?;
                persist_episodes(&eps, out.join(format!("{name}.jsonl")))?;
                counts.push(format!("{name} {}", eps.len()));
            }
            println!(
                "sampled {}-way {}-shot episodes ({}) over {}/{}/{} classes -> {}",
                shape.n_way,
                shape.k_shot,
                counts.join(", "),
                split.train.len(),
                split.dev.len(),
                split.test.len(),
                out.display()
            );
        }
        Command::MetaTrainDetector { train, val, init, out } => {
            let train = episodes_at(&train)?;
            let val = val.as_deref().map(episodes_at).transpose()?.unwrap_or_default();
            let seed = first_seed(&config);
            let init = match init {
                Some(p) => load_detector(&p)?,
                None => SpanDetectorParams::random(config.encoder, config.pretrain.embedding_std, seed),
            };
            let (params, outcome) = meta_train_detector(&init, &train, &val, &config.detector, seed)?;
            ensure_parent(&out)?;
            save_checkpoint(&out, &params.to_checkpoint("meta-trained"))?;
            write_log(&sibling(&out, ".log.jsonl"), &outcome.log)?;
            write_json(&sibling(&out, ".curve.json"), &outcome.curve)?;
            let last = outcome.log.last().map_or(f64::NAN, |e| e.loss);
            let val_f1 = outcome.curve.points.last().map(|p| format!(", validation span F1 {:.4}", p.1)).unwrap_or_default();
            println!("meta-trained detector for {} steps, query loss {last:.4}{val_f1} -> {}", config.detector.total_steps, out.display());
        }
        Command::MetaTrainClassifier { train, val, init, out } => {
            let train = episodes_at(&train)?;
            let val = val.as_deref().map(episodes_at).transpose()?.unwrap_or_default();
            let seed = first_seed(&config);
            let init = match init {
                Some(p) => load_classifier(&p)?,
                None => ClassifierParams::random(config.encoder, config.classifier_embedding_std, seed),
            };
            let resources = Resources::new(&config)?;
            let dim = init.encoder.dim;
            let train_refs = episode_referents(config.referent_variant, &train, &resources, seed, dim)?;
            let val_refs = episode_referents(config.referent_variant, &val, &resources, seed, dim)?;
            let (params, outcome) =
                meta_train_classifier(&init, &train, &train_refs, &val, &val_refs, &config.classifier, config.objective, seed)?;
            ensure_parent(&out)?;
            save_checkpoint(&out, &params.to_checkpoint("meta-trained"))?;
            write_log(&sibling(&out, ".log.jsonl"), &outcome.log)?;
            write_json(&sibling(&out, ".curve.json"), &outcome.curve)?;
            let last = outcome.log.last().map_or(f64::NAN, |e| e.loss);
            let val_f1 = outcome.curve.points.last().map(|p| format!(", validation typed F1 {:.4}", p.1)).unwrap_or_default();
            println!(
                "meta-trained classifier ({} referents) for {} steps, query loss {last:.4}{val_f1} -> {}",
                config.referent_variant,
                config.classifier.total_steps,
                out.display()
            );
        }
        Command::Evaluate { detector, classifier, episodes, out } => {
            let detector = load_detector(&detector)?;
            let classifier = classifier.as_deref().map(load_classifier).transpose()?;
            let episodes = episodes_at(&episodes)?;
            let scores = match &classifier {
                Some(c) => {
                    let resources = Resources::new(&config)?;
                    let refs = episode_referents(config.referent_variant, &episodes, &resources, first_seed(&config), c.encoder.dim)?;
                    evaluate_pipeline(&detector, Some((c, &refs)), &episodes, &config)?
                }
                None => evaluate_pipeline(&detector, None, &episodes, &config)?,
            };
            match &out {
                Some(p) => {
                    ensure_parent(p)?;
                    write_json(p, &scores)?;
                }
                None => println!("{}", serde_json::to_string_pretty(&scores)?),
            }
            let typed = scores.typed.as_ref().map(|t| format!(", typed F1 {:.4}", t.f1())).unwrap_or_default();
            println!("evaluated {} episodes: span F1 {:.4}{typed}", episodes.len(), scores.span.f1());
        }
        Command::AblateReferents { episodes, variants, train_episodes, classifier, out } => {
            let test = episodes_at(&episodes)?;
            let train = train_episodes.as_deref().map(episodes_at).transpose()?;
            let classifier = classifier.as_deref().map(load_classifier).transpose()?;
            if variants.is_empty() {
                return Err(usage("no referent variants given"));
            }
            let resources = Resources::new(&config)?;
            let inputs =
                AblationInputs { variants: &variants, test: &test, train: train.as_deref(), classifier: classifier.as_ref() };
            let report = run_ablation(&config, &inputs, &resources)?;
            let table = render_ablation(&report);
            match &out {
                Some(dir) => {
                    fs::create_dir_all(dir)?;
                    write_json(&dir.join("ablation.json"), &report)?;
                    fs::write(dir.join("ablation.txt"), &table)?;
                }
                None => print!("{table}"),
            }
            println!("ablated {} referent variants over {} seeds on {} episodes", variants.len(), config.seeds.len(), test.len());
        }
        Command::LlmBaseline { episodes, responses, out } => {
            let episodes = episodes_at(&episodes)?;
            let eval = match &responses {
                Some(p) => {
                    require(p)?;
                    let fixture = load_response_fixture(p)?;
                    evaluate_llm_baseline(&episodes, ResponseSource::Fixture(&fixture))?
                }
                None => {
                    let client = make_client(config.offline)?;
                    if !client.is_live() {
                        return Err(usage("llm-baseline needs --responses when offline or built without the live feature"));
                    }
                    evaluate_llm_baseline(&episodes, ResponseSource::Client(&client))?
                }
            };
            match &out {
                Some(p) => {
                    ensure_parent(p)?;
                    write_json(p, &eval)?;
                }
                None => println!("{}", serde_json::to_string_pretty(&eval)?),
            }
            println!(
                "llm baseline on {} sentences: typed F1 {:.4}, span F1 {:.4}, {} flagged, {} unparsable",
                eval.sentences,
                eval.typed.f1(),
                eval.span_only.f1(),
                eval.flagged,
                eval.failed
            );
        }
        Command::Gradcheck { points, seed, out } => {
            let results = run_suite(points, seed, GradCheckConfig::default())?;
            if let Some(p) = &out {
                ensure_parent(p)?;
                write_json(p, &results)?;
            }
            let parts: Vec<String> =
                results.iter().map(|r| format!("{} {:.2e}{}", r.target, r.max_rel_error, if r.passed { "" } else { " FAIL" })).collect();
            println!("gradcheck at {points} points each, max relative error: {}", parts.join(", "));
            if results.iter().any(|r| !r.passed) {
                bail!("gradient check failed");
            }
        }
        Command::Config => println!("{}", serde_json::to_string_pretty(&config)?),
        Command::Experiment { out, no_steppingstone, compare_init, skip_classifier, grid } => {
            let mut config = config;
            if no_steppingstone {
                config.steppingstone = false;
            }
            let options = ExperimentOptions { out: out.clone(), compare_init, skip_classifier, grid };
            let report = run_full_experiment(&config, &options)?;
            eprint!("{}", render_report(&report));
            let best = report.summary.iter().filter(|r| r.episodes.starts_with("seen")).map(|r| format!("{} {}", r.metric, r.value.format_scaled(100.0)));
            println!(
                "experiment over {} seeds finished in {:.1?}: seen classes {} -> {}",
                report.runs.len(),
                t.elapsed(),
                best.collect::<Vec<_>>().join(", "),
                out.display()
            );
        }
    }
    Ok(())
}
