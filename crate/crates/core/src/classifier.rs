//! Span typing against type referents.
//!
//! A span is the mean of its token rows under the span encoder `κ`; a type
//! referent is the mean of its definition's token rows under the sentence
//! encoder `τ`. Each (span, type) pair gets the logit
//! `w · [s; V; |s − V|] + b`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabeledSentence;
use crate::episodes::Episode;
use crate::metrics::{micro_f1, MetricsError};
use crate::neural::{
    maml_inner_update, sigmoid, softplus, Checkpoint, EncoderConfig, EncoderGrad, EncoderParams, EncoderTrace,
    EncoderView, LossFunctional, Matrix, NamedArray, NeuralError, ParamVector,
};
use crate::referents::{ReferentError, ReferentInput, ReferentSource};
use crate::tagging::Span;
use crate::training::{meta_train, MetaConfig, MetaTrainOutcome};

pub const SPAN_ENCODER: &str = "span_encoder";
pub const SENTENCE_ENCODER: &str = "sentence_encoder";
pub const SCORER_WEIGHT: &str = "scorer.weight";
pub const SCORER_BIAS: &str = "scorer.bias";

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("span [{start}, {end}] outside a sentence of length {len}")]
    SpanOutOfRange { start: usize, end: usize, len: usize },
    #[error("no referent for label {0:?}")]
    MissingReferent(String),
    #[error("sentence has no entity spans")]
    NoSpans,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("checkpoint is not an entity classifier: {0}")]
    WrongCheckpoint(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Referent(#[from] ReferentError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl From<ClassifierError> for NeuralError {
    fn from(e: ClassifierError) -> Self {
        match e {
            ClassifierError::Neural(n) => n,
            other => NeuralError::Invalid(other.to_string()),
        }
    }
}

/// How per-type logits become a span loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Independent sigmoid per type: `−log p` for the gold type and
    /// `−log(1 − p)` for every other type.
    #[default]
    OneVsRest,
    /// Cross-entropy of a softmax over the type logits.
    Softmax,
}

/// Span encoder `κ`, sentence encoder `τ` and the scorer `(w, b)`, `w ∈ R^{3d}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub encoder: EncoderConfig,
    pub params: ParamVector,
}

impl ClassifierParams {
    pub fn zeros(encoder: EncoderConfig) -> Self {
        Self::assemble(EncoderParams::zeros(encoder), EncoderParams::zeros(encoder))
    }

    /// Both encoders start from the same random draw; the scorer is zero.
    pub fn random(encoder: EncoderConfig, embedding_std: f64, seed: u64) -> Self {
        let e = EncoderParams::random(encoder, embedding_std, &mut ChaCha8Rng::seed_from_u64(seed));
        Self::assemble(e.clone(), e)
    }

    pub fn assemble(span: EncoderParams, sentence: EncoderParams) -> Self {
        let config = span.config;
        let mut params = ParamVector::new();
        span.push_into(SPAN_ENCODER, &mut params);
        sentence.push_into(SENTENCE_ENCODER, &mut params);
        params.push(NamedArray::zeros(SCORER_WEIGHT, &[3 * config.dim]));
        params.push(NamedArray::zeros(SCORER_BIAS, &[1]));
        Self { encoder: config, params }
    }

    pub fn from_param_vector(encoder: EncoderConfig, params: ParamVector) -> Result<Self, ClassifierError> {
        params.check_same_layout(&Self::zeros(encoder).params)?;
        if !params.all_finite() {
            return Err(NeuralError::Invalid("non-finite classifier parameters".into()).into());
        }
        Ok(Self { encoder, params })
    }

    pub fn span_encoder(&self) -> EncoderView<'_> {
        EncoderView::from_params(&self.params, SPAN_ENCODER, self.encoder).expect("validated layout")
    }

    pub fn sentence_encoder(&self) -> EncoderView<'_> {
        EncoderView::from_params(&self.params, SENTENCE_ENCODER, self.encoder).expect("validated layout")
    }

    pub fn scorer(&self) -> Scorer<'_> {
        Scorer { weight: self.params.expect(SCORER_WEIGHT), bias: self.params.expect(SCORER_BIAS)[0] }
    }

    pub fn to_checkpoint(&self, kind: &str) -> Checkpoint {
        Checkpoint {
            kind: kind.to_string(),
            meta: serde_json::json!({ "component": "entity-classifier", "encoder": self.encoder }),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, ClassifierError> {
        if ckpt.meta.get("component").and_then(|c| c.as_str()) != Some("entity-classifier") {
            return Err(ClassifierError::WrongCheckpoint(ckpt.kind));
        }
        let encoder: EncoderConfig = serde_json::from_value(ckpt.meta["encoder"].clone())
            .map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
        Self::from_param_vector(encoder, ckpt.params)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Scorer<'a> {
    pub weight: &'a [f64],
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanRep {
    pub vector: Vec<f64>,
    pub start: usize,
    pub end: usize,
}

/// Mean of rows `start..=end` of `h`.
pub fn span_representation(h: &Matrix, start: usize, end: usize) -> Result<SpanRep, ClassifierError> {
    if start > end || end >= h.rows {
        return Err(ClassifierError::SpanOutOfRange { start, end, len: h.rows });
    }
    let mut v = vec![0.0; h.cols];
    for i in start..=end {
        for (a, b) in v.iter_mut().zip(h.row(i)) {
            *a += b;
        }
    }
    let n = (end - start + 1) as f64;
    v.iter_mut().for_each(|x| *x /= n);
    Ok(SpanRep { vector: v, start, end })
}

fn logit(scorer: Scorer<'_>, s: &[f64], v: &[f64]) -> f64 {
    let d = s.len();
    let w = scorer.weight;
    let mut z = scorer.bias;
    for j in 0..d {
        z += w[j] * s[j] + w[d + j] * v[j] + w[2 * d + j] * (s[j] - v[j]).abs();
    }
    z
}

/// `(logit, sigmoid(logit))` of a span against one referent vector.
pub fn type_score(scorer: Scorer<'_>, span: &[f64], referent: &[f64]) -> Result<(f64, f64), ClassifierError> {
    if span.len() != referent.len() || scorer.weight.len() != 3 * span.len() {
        return Err(ClassifierError::Dimension(format!(
            "span {}, referent {}, scorer {}",
            span.len(),
            referent.len(),
            scorer.weight.len()
        )));
    }
    let z = logit(scorer, span, referent);
    Ok((z, sigmoid(z)))
}

/// Support or query sentences of one episode together with the episode's
/// referents, in class order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierTask {
    pub sentences: Vec<LabeledSentence>,
    pub referents: Vec<ReferentInput>,
}

struct Referents {
    vectors: Vec<Vec<f64>>,
    /// Sentence-encoder traces of text referents.
    traces: Vec<Option<EncoderTrace>>,
}

fn compute_referents(tau: &EncoderView<'_>, inputs: &[ReferentInput]) -> Referents {
    let mut vectors = Vec::with_capacity(inputs.len());
    let mut traces = Vec::with_capacity(inputs.len());
    for inp in inputs {
        match &inp.source {
            ReferentSource::Text { tokens, .. } => {
                let trace = tau.forward(tokens);
                let rep = span_representation(&trace.outputs, 0, tokens.len() - 1).expect("non-empty definition");
                vectors.push(rep.vector);
                traces.push(Some(trace));
            }
            ReferentSource::Fixed { vector, .. } => {
                vectors.push(vector.clone());
                traces.push(None);
            }
        }
    }
    Referents { vectors, traces }
}

/// Loss over the typed spans of `sentences` (mean over sentences that
/// carry spans), accumulating the gradient when `grad` is given.
fn task_loss(
    params: &ParamVector,
    encoder: EncoderConfig,
    task: &ClassifierTask,
    zeta: f64,
    objective: Objective,
    mut grad: Option<&mut ParamVector>,
) -> Result<f64, ClassifierError> {
    let d = encoder.dim;
    let kappa = EncoderView::from_params(params, SPAN_ENCODER, encoder)?;
    let tau = EncoderView::from_params(params, SENTENCE_ENCODER, encoder)?;
    let scorer = Scorer { weight: params.expect(SCORER_WEIGHT), bias: params.expect(SCORER_BIAS)[0] };
    let refs = compute_referents(&tau, &task.referents);
    let n_types = refs.vectors.len();
    for v in &refs.vectors {
        if v.len() != d {
            return Err(ClassifierError::Dimension(format!("referent width {} != {d}", v.len())));
        }
    }

    let labeled: Vec<&LabeledSentence> =
        task.sentences.iter().filter(|s| !s.spans.as_deref().unwrap_or_default().is_empty()).collect();
    if labeled.is_empty() {
        return Err(ClassifierError::NoSpans);
    }
    let sentence_weight = 1.0 / labeled.len() as f64;

    let mut d_scorer = vec![0.0; 3 * d + 1];
    let mut d_refs = vec![vec![0.0; d]; n_types];
    let mut total = 0.0;

    for s in labeled {
        let spans = s.spans.as_deref().unwrap_or_default();
        let trace = kappa.forward(&s.tokens);
        // Per span: loss, representation, gold index and dL/dz per type.
        let mut per_span = Vec::with_capacity(spans.len());
        for sp in spans {
            let label = sp.label.as_deref().unwrap_or_default();
            let gold = task
                .referents
                .iter()
                .position(|r| r.type_name == label)
                .ok_or_else(|| ClassifierError::MissingReferent(label.to_string()))?;
            let rep = span_representation(&trace.outputs, sp.start, sp.end)?;
            let z: Vec<f64> = refs.vectors.iter().map(|v| logit(scorer, &rep.vector, v)).collect();
            let (loss, dz) = match objective {
                Objective::OneVsRest => {
                    let mut loss = 0.0;
                    let mut dz = vec![0.0; n_types];
                    for (n, &zn) in z.iter().enumerate() {
                        if n == gold {
                            loss += softplus(-zn);
                            dz[n] = sigmoid(zn) - 1.0;
                        } else {
                            loss += softplus(zn);
                            dz[n] = sigmoid(zn);
                        }
                    }
                    (loss, dz)
                }
                Objective::Softmax => {
                    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                    let dz: Vec<f64> =
                        z.iter().enumerate().map(|(n, x)| (x - lse).exp() - if n == gold { 1.0 } else { 0.0 }).collect();
                    (lse - z[gold], dz)
                }
            };
            per_span.push((loss, rep, dz));
        }
        let count = per_span.len() as f64;
        let mut arg = 0;
        for (i, p) in per_span.iter().enumerate() {
            if p.0 > per_span[arg].0 {
                arg = i;
            }
        }
        let mean = per_span.iter().map(|p| p.0).sum::<f64>() / count;
        total += sentence_weight * (mean + zeta * per_span[arg].0);

        let Some(grad) = grad.as_deref_mut() else { continue };
        let mut d_h = Matrix::zeros(s.tokens.len(), d);
        for (i, (_, rep, dz)) in per_span.iter().enumerate() {
            let c = sentence_weight * (1.0 / count + if i == arg { zeta } else { 0.0 });
            let sv = &rep.vector;
            let mut d_s = vec![0.0; d];
            for (n, v) in refs.vectors.iter().enumerate() {
                let g = c * dz[n];
                if g == 0.0 {
                    continue;
                }
                d_scorer[3 * d] += g;
                for j in 0..d {
                    let diff = sv[j] - v[j];
                    let sign = if diff > 0.0 { 1.0 } else if diff < 0.0 { -1.0 } else { 0.0 };
                    d_scorer[j] += g * sv[j];
                    d_scorer[d + j] += g * v[j];
                    d_scorer[2 * d + j] += g * diff.abs();
                    let w3 = scorer.weight[2 * d + j];
                    d_s[j] += g * (scorer.weight[j] + w3 * sign);
                    d_refs[n][j] += g * (scorer.weight[d + j] - w3 * sign);
                }
            }
            let width = (rep.end - rep.start + 1) as f64;
            for k in rep.start..=rep.end {
                for (a, b) in d_h.row_mut(k).iter_mut().zip(&d_s) {
                    *a += b / width;
                }
            }
        }
        kappa.backward(&trace, &d_h, &mut EncoderGrad::from_params(grad, SPAN_ENCODER));
    }

    if let Some(grad) = grad {
        {
            let [gw, gb] = grad.get_many_mut([SCORER_WEIGHT, SCORER_BIAS]);
            for (a, b) in gw.iter_mut().zip(&d_scorer[..3 * d]) {
                *a += b;
            }
            gb[0] += d_scorer[3 * d];
        }
        for (n, trace) in refs.traces.iter().enumerate() {
            let Some(trace) = trace else { continue };
            let rows = trace.outputs.rows;
            let mut d_h = Matrix::zeros(rows, d);
            for k in 0..rows {
                for (a, b) in d_h.row_mut(k).iter_mut().zip(&d_refs[n]) {
                    *a = b / rows as f64;
                }
            }
            tau.backward(trace, &d_h, &mut EncoderGrad::from_params(grad, SENTENCE_ENCODER));
        }
    }
    Ok(total)
}

/// Classification loss on one sentence (mean over its spans plus `ζ` times
/// the largest span loss) and its gradient.
pub fn classifier_loss(
    params: &ClassifierParams,
    sentence: &LabeledSentence,
    referents: &[ReferentInput],
    zeta: f64,
    objective: Objective,
) -> Result<(f64, ParamVector), ClassifierError> {
    if sentence.spans.as_deref().unwrap_or_default().is_empty() {
        return Err(ClassifierError::NoSpans);
    }
    let task = ClassifierTask { sentences: vec![sentence.clone()], referents: referents.to_vec() };
    let mut grad = params.params.zeros_like();
    let loss = task_loss(&params.params, params.encoder, &task, zeta, objective, Some(&mut grad))?;
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierLoss {
    pub encoder: EncoderConfig,
    pub zeta: f64,
    pub objective: Objective,
}

impl LossFunctional for ClassifierLoss {
    type Data = ClassifierTask;

    fn loss_and_grad(&self, params: &ParamVector, task: &ClassifierTask) -> Result<(f64, ParamVector), NeuralError> {
        let mut grad = params.zeros_like();
        let loss = task_loss(params, self.encoder, task, self.zeta, self.objective, Some(&mut grad))?;
        Ok((loss, grad))
    }
}

/// Type logits of `spans` in `tokens` against precomputed referent vectors.
fn span_logits(
    params: &ParamVector,
    encoder: EncoderConfig,
    tokens: &[String],
    spans: &[Span],
    referents: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>, ClassifierError> {
    if spans.is_empty() {
        return Ok(Vec::new());
    }
    let kappa = EncoderView::from_params(params, SPAN_ENCODER, encoder)?;
    let scorer = Scorer { weight: params.expect(SCORER_WEIGHT), bias: params.expect(SCORER_BIAS)[0] };
    let h = kappa.forward(tokens).outputs;
    spans
        .iter()
        .map(|sp| {
            let rep = span_representation(&h, sp.start, sp.end)?;
            Ok(referents.iter().map(|v| logit(scorer, &rep.vector, v)).collect())
        })
        .collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

fn classify_with(
    params: &ParamVector,
    encoder: EncoderConfig,
    referents: &[ReferentInput],
    sentences: &[LabeledSentence],
    spans: &[Vec<Span>],
) -> Result<Vec<Vec<Span>>, ClassifierError> {
    if sentences.len() != spans.len() {
        return Err(ClassifierError::Dimension(format!("{} sentences, {} span lists", sentences.len(), spans.len())));
    }
    let tau = EncoderView::from_params(params, SENTENCE_ENCODER, encoder)?;
    let vectors = compute_referents(&tau, referents).vectors;
    sentences
        .par_iter()
        .zip(spans)
        .map(|(s, sps)| {
            let logits = span_logits(params, encoder, &s.tokens, sps, &vectors)?;
            Ok(sps
                .iter()
                .zip(logits)
                .filter_map(|(sp, z)| argmax(&z).map(|n| Span::typed(sp.start, sp.end, referents[n].type_name.clone())))
                .collect())
        })
        .collect()
}

fn adapt(
    params: &ParamVector,
    encoder: EncoderConfig,
    support: &ClassifierTask,
    config: &MetaConfig,
    objective: Objective,
) -> Result<ParamVector, ClassifierError> {
    let has_spans = support.sentences.iter().any(|s| !s.spans.as_deref().unwrap_or_default().is_empty());
    if config.inner_steps == 0 || !has_spans {
        return Ok(params.clone());
    }
    let loss = ClassifierLoss { encoder, zeta: config.zeta_support, objective };
    Ok(maml_inner_update(params, &loss, support, config.alpha, config.inner_steps)?)
}

/// Fine-tune on the episode's support spans, then give every detected span
/// in the query sentences its highest-scoring type (ties: episode class
/// order).
pub fn adapt_and_classify(
    params: &ClassifierParams,
    episode: &Episode,
    referents: &[ReferentInput],
    detected: &[Vec<Span>],
    config: &MetaConfig,
    objective: Objective,
) -> Result<Vec<Vec<Span>>, ClassifierError> {
    let support = ClassifierTask { sentences: episode.support.clone(), referents: referents.to_vec() };
    let adapted = adapt(&params.params, params.encoder, &support, config, objective)?;
    classify_with(&adapted, params.encoder, referents, &episode.query, detected)
}

/// Typed micro F1 on query gold spans, over all episodes.
pub fn evaluate_classifier(
    params: &ParamVector,
    encoder: EncoderConfig,
    episodes: &[Episode],
    referents: &[Vec<ReferentInput>],
    config: &MetaConfig,
    objective: Objective,
) -> Result<f64, ClassifierError> {
    let results: Vec<Result<(Vec<Vec<Span>>, Vec<Vec<Span>>), ClassifierError>> = episodes
        .par_iter()
        .zip(referents)
        .map(|(ep, refs)| {
            let support = ClassifierTask { sentences: ep.support.clone(), referents: refs.clone() };
            let adapted = adapt(params, encoder, &support, config, objective)?;
            let gold: Vec<Vec<Span>> = ep.query.iter().map(LabeledSentence::entity_spans).collect();
            let untyped: Vec<Vec<Span>> = gold.iter().map(|g| g.iter().map(Span::untyped).collect()).collect();
            Ok((classify_with(&adapted, encoder, refs, &ep.query, &untyped)?, gold))
        })
        .collect();
    let (mut pred, mut gold) = (Vec::new(), Vec::new());
    for r in results {
        let (p, g) = r?;
        pred.extend(p);
        gold.extend(g);
    }
    Ok(micro_f1(&pred, &gold)?.f1())
}

/// Support and query tasks of an episode.
pub fn episode_tasks(episode: &Episode, referents: &[ReferentInput]) -> (ClassifierTask, ClassifierTask) {
    (
        ClassifierTask { sentences: episode.support.clone(), referents: referents.to_vec() },
        ClassifierTask { sentences: episode.query.clone(), referents: referents.to_vec() },
    )
}

/// First-order MAML over episodes with per-episode referents; validation
/// is typed F1 on gold query spans.
#[allow(clippy::too_many_arguments)]
pub fn meta_train_classifier(
    init: &ClassifierParams,
    train: &[Episode],
    train_referents: &[Vec<ReferentInput>],
    validation: &[Episode],
    validation_referents: &[Vec<ReferentInput>],
    config: &MetaConfig,
    objective: Objective,
    seed: u64,
) -> Result<(ClassifierParams, MetaTrainOutcome), ClassifierError> {
    let encoder = init.encoder;
    let tasks: Vec<(ClassifierTask, ClassifierTask)> =
        train.iter().zip(train_referents).map(|(e, r)| episode_tasks(e, r)).collect();
    let pairs: Vec<(&ClassifierTask, &ClassifierTask)> = tasks.iter().map(|(s, q)| (s, q)).collect();
    let inner = ClassifierLoss { encoder, zeta: config.zeta_support, objective };
    let outer = ClassifierLoss { encoder, zeta: config.zeta_query, objective };
    let mut validate = |p: &ParamVector| -> Result<f64, NeuralError> {
        Ok(evaluate_classifier(p, encoder, validation, validation_referents, config, objective)?)
    };
    let hook: Option<&mut dyn FnMut(&ParamVector) -> Result<f64, NeuralError>> =
        if validation.is_empty() { None } else { Some(&mut validate) };
    let outcome = meta_train(init.params.clone(), &pairs, &inner, &outer, config, seed, hook)?;
    Ok((ClassifierParams { encoder, params: outcome.params.clone() }, outcome))
}
