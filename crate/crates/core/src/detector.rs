//! BIOES span detector: token encoder, per-token softmax head, constrained
//! Viterbi decoding.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, Dataset, LabeledSentence};
use crate::episodes::Episode;
use crate::metrics::{span_f1, MetricsError};
use crate::neural::{
    log_softmax, maml_inner_update, AdamWConfig, Checkpoint, EncoderConfig, EncoderGrad, EncoderParams, EncoderView,
    LossFunctional, Matrix, NamedArray, NeuralError, OptimizerState, ParamVector,
};
use crate::tagging::{build_transition_mask, decode_bioes_to_spans, viterbi_decode, Span, Tag, TagError, NUM_TAGS};
use crate::training::{meta_train, LogEntry, MetaConfig, MetaTrainOutcome};

pub const ENCODER: &str = "encoder";
pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("sentence {0} has no tags")]
    MissingTags(usize),
    #[error("no training sentences")]
    EmptyDataset,
    #[error("checkpoint is not a span detector: {0}")]
    WrongCheckpoint(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tag(#[from] TagError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Encoder `ω`, head weight `W` (`dim × 5`) and bias `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanDetectorParams {
    pub encoder: EncoderConfig,
    pub params: ParamVector,
}

impl SpanDetectorParams {
    pub fn zeros(encoder: EncoderConfig) -> Self {
        Self::assemble(EncoderParams::zeros(encoder))
    }

    /// Encoder per [`EncoderParams::random`], zero head.
    pub fn random(encoder: EncoderConfig, embedding_std: f64, seed: u64) -> Self {
        Self::assemble(EncoderParams::random(encoder, embedding_std, &mut ChaCha8Rng::seed_from_u64(seed)))
    }

    fn assemble(enc: EncoderParams) -> Self {
        let config = enc.config;
        let mut params = ParamVector::new();
        enc.push_into(ENCODER, &mut params);
        params.push(NamedArray::zeros(HEAD_WEIGHT, &[config.dim, NUM_TAGS]));
        params.push(NamedArray::zeros(HEAD_BIAS, &[NUM_TAGS]));
        Self { encoder: config, params }
    }

    pub fn from_param_vector(encoder: EncoderConfig, params: ParamVector) -> Result<Self, DetectorError> {
        params.check_same_layout(&Self::zeros(encoder).params)?;
        if !params.all_finite() {
            return Err(NeuralError::Invalid("non-finite detector parameters".into()).into());
        }
        Ok(Self { encoder, params })
    }

    pub fn encoder_view(&self) -> EncoderView<'_> {
        EncoderView::from_params(&self.params, ENCODER, self.encoder).expect("validated layout")
    }

    pub fn to_checkpoint(&self, kind: &str) -> Checkpoint {
        Checkpoint {
            kind: kind.to_string(),
            meta: serde_json::json!({ "component": "span-detector", "encoder": self.encoder }),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, DetectorError> {
        if ckpt.meta.get("component").and_then(|c| c.as_str()) != Some("span-detector") {
            return Err(DetectorError::WrongCheckpoint(ckpt.kind));
        }
        let encoder: EncoderConfig = serde_json::from_value(ckpt.meta["encoder"].clone())
            .map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
        Self::from_param_vector(encoder, ckpt.params)
    }
}

struct Forward {
    trace: crate::neural::EncoderTrace,
    /// `L × 5` log-probabilities.
    log_probs: Matrix,
}

fn forward(params: &ParamVector, config: EncoderConfig, tokens: &[String]) -> Result<Forward, NeuralError> {
    let enc = EncoderView::from_params(params, ENCODER, config)?;
    let w = params.expect(HEAD_WEIGHT);
    let b = params.expect(HEAD_BIAS);
    let trace = enc.forward(tokens);
    let mut log_probs = Matrix::zeros(tokens.len(), NUM_TAGS);
    for i in 0..tokens.len() {
        let h = trace.outputs.row(i);
        let row = log_probs.row_mut(i);
        row.copy_from_slice(b);
        for (j, &hj) in h.iter().enumerate() {
            for (t, r) in row.iter_mut().enumerate() {
                *r += hj * w[j * NUM_TAGS + t];
            }
        }
        log_softmax(row);
    }
    Ok(Forward { trace, log_probs })
}

/// Per-token tag log-probabilities, `L × 5` in tag order B, I, O, E, S.
pub fn emission_log_probs(params: &SpanDetectorParams, tokens: &[String]) -> Matrix {
    forward(&params.params, params.encoder, tokens).expect("validated layout").log_probs
}

/// `mean_i CE_i + ζ · max_i CE_i` for one sentence, accumulating
/// `weight · ∂loss/∂θ` into `grad` when given. The max term's subgradient
/// goes to the first token attaining the maximum.
fn sentence_loss(
    params: &ParamVector,
    config: EncoderConfig,
    tokens: &[String],
    tags: &[Tag],
    zeta: f64,
    weight: f64,
    grad: Option<&mut ParamVector>,
) -> Result<f64, NeuralError> {
    let len = tokens.len();
    if len == 0 || tags.len() != len {
        return Err(NeuralError::ShapeMismatch(format!("{} tokens, {} tags", len, tags.len())));
    }
    let fw = forward(params, config, tokens)?;
    let ce: Vec<f64> = (0..len).map(|i| -fw.log_probs.row(i)[tags[i].index()]).collect();
    let mut arg = 0;
    for (i, &c) in ce.iter().enumerate() {
        if c > ce[arg] {
            arg = i;
        }
    }
    let mean = ce.iter().sum::<f64>() / len as f64;
    let loss = mean + zeta * ce[arg];

    if let Some(grad) = grad {
        let dim = config.dim;
        let w = params.expect(HEAD_WEIGHT);
        let mut d_logits = Matrix::zeros(len, NUM_TAGS);
        for i in 0..len {
            let c = weight * (1.0 / len as f64 + if i == arg { zeta } else { 0.0 });
            let lp = fw.log_probs.row(i);
            let row = d_logits.row_mut(i);
            for t in 0..NUM_TAGS {
                let target = if t == tags[i].index() { 1.0 } else { 0.0 };
                row[t] = c * (lp[t].exp() - target);
            }
        }
        let mut d_h = Matrix::zeros(len, dim);
        {
            let [gw, gb] = grad.get_many_mut([HEAD_WEIGHT, HEAD_BIAS]);
            for i in 0..len {
                let h = fw.trace.outputs.row(i);
                let dl = d_logits.row(i);
                let dh = d_h.row_mut(i);
                for j in 0..dim {
                    let mut acc = 0.0;
                    for t in 0..NUM_TAGS {
                        gw[j * NUM_TAGS + t] += h[j] * dl[t];
                        acc += w[j * NUM_TAGS + t] * dl[t];
                    }
                    dh[j] = acc;
                }
                for t in 0..NUM_TAGS {
                    gb[t] += dl[t];
                }
            }
        }
        let enc = EncoderView::from_params(params, ENCODER, config)?;
        enc.backward(&fw.trace, &d_h, &mut EncoderGrad::from_params(grad, ENCODER));
    }
    Ok(loss)
}

fn tags_of(s: &LabeledSentence, index: usize) -> Result<Vec<Tag>, NeuralError> {
    s.bioes().map_err(|_| NeuralError::Invalid(format!("sentence {index} has no tags")))
}

/// Detector loss on one sentence and its gradient.
pub fn detector_loss(
    params: &SpanDetectorParams,
    sentence: &LabeledSentence,
    zeta: f64,
) -> Result<(f64, ParamVector), DetectorError> {
    let tags = sentence.bioes().map_err(|_| DetectorError::MissingTags(0))?;
    let mut grad = params.params.zeros_like();
    let loss = sentence_loss(&params.params, params.encoder, &sentence.tokens, &tags, zeta, 1.0, Some(&mut grad))?;
    Ok((loss, grad))
}

/// Mean detector loss over a set of sentences.
#[derive(Debug, Clone, Copy)]
pub struct DetectorLoss {
    pub encoder: EncoderConfig,
    pub zeta: f64,
}

impl LossFunctional for DetectorLoss {
    type Data = [LabeledSentence];

    fn loss_and_grad(&self, params: &ParamVector, data: &[LabeledSentence]) -> Result<(f64, ParamVector), NeuralError> {
        if data.is_empty() {
            return Err(NeuralError::EmptyBatch);
        }
        let w = 1.0 / data.len() as f64;
        let mut grad = params.zeros_like();
        let mut total = 0.0;
        for (i, s) in data.iter().enumerate() {
            let tags = tags_of(s, i)?;
            total += w * sentence_loss(params, self.encoder, &s.tokens, &tags, self.zeta, w, Some(&mut grad))?;
        }
        Ok((total, grad))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub embedding_std: f64,
    pub adamw: AdamWConfig,
    pub batch_size: usize,
    pub steps: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            embedding_std: 0.1,
            adamw: AdamWConfig::default(),
            batch_size: 16,
            steps: 300,
        }
    }
}

/// Train a freshly initialized detector on span-only data with the plain
/// mean cross-entropy (no max term), AdamW with warm-up, shuffled
/// mini-batches.
pub fn pretrain_steppingstone(
    dataset: &Dataset,
    config: &PretrainConfig,
    seed: u64,
) -> Result<(SpanDetectorParams, Vec<LogEntry>), DetectorError> {
    let init = SpanDetectorParams::random(config.encoder, config.embedding_std, seed);
    train_supervised(init, &dataset.sentences, config, seed)
}

/// Supervised AdamW training from given initial parameters.
pub fn train_supervised(
    init: SpanDetectorParams,
    sentences: &[LabeledSentence],
    config: &PretrainConfig,
    seed: u64,
) -> Result<(SpanDetectorParams, Vec<LogEntry>), DetectorError> {
    let sentences: Vec<LabeledSentence> = sentences.iter().filter(|s| !s.is_empty()).cloned().collect();
    if sentences.is_empty() {
        return Err(DetectorError::EmptyDataset);
    }
    for (i, s) in sentences.iter().enumerate() {
        tags_of(s, i).map_err(|_| DetectorError::MissingTags(i))?;
    }
    let SpanDetectorParams { encoder, mut params } = init;
    let loss = DetectorLoss { encoder, zeta: 0.0 };
    let mut opt = OptimizerState::new(AdamWConfig { total_steps: config.steps, ..config.adamw }, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut log = Vec::with_capacity(config.steps as usize);
    let batch_size = config.batch_size.clamp(1, sentences.len());
    for step in 1..=config.steps {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(sentences[order[cursor]].clone());
            cursor += 1;
        }
        let (value, grad) = loss.loss_and_grad(&params, &batch)?;
        opt.apply(&mut params, &grad)?;
        log.push(LogEntry { step, loss: value, val_f1: None });
    }
    Ok((SpanDetectorParams { encoder, params }, log))
}

/// Fine-tune on the support set, then Viterbi-decode every query sentence.
/// Returns untyped spans per query sentence.
pub fn adapt_and_detect(
    params: &SpanDetectorParams,
    episode: &Episode,
    config: &MetaConfig,
) -> Result<Vec<Vec<Span>>, DetectorError> {
    let adapted = adapt(&params.params, params.encoder, &episode.support, config)?;
    detect_all(&adapted, params.encoder, &episode.query)
}

fn adapt(
    params: &ParamVector,
    encoder: EncoderConfig,
    support: &[LabeledSentence],
    config: &MetaConfig,
) -> Result<ParamVector, NeuralError> {
    if config.inner_steps == 0 || support.is_empty() {
        return Ok(params.clone());
    }
    maml_inner_update(params, &DetectorLoss { encoder, zeta: config.zeta_support }, support, config.alpha, config.inner_steps)
}

fn detect_all(params: &ParamVector, encoder: EncoderConfig, query: &[LabeledSentence]) -> Result<Vec<Vec<Span>>, DetectorError> {
    let mask = build_transition_mask();
    query
        .par_iter()
        .map(|s| {
            if s.is_empty() {
                return Ok(Vec::new());
            }
            let lp = forward(params, encoder, &s.tokens)?.log_probs;
            let rows: Vec<[f64; NUM_TAGS]> =
                (0..lp.rows).map(|i| lp.row(i).try_into().expect("five columns")).collect();
            let path = viterbi_decode(&rows, &mask)?;
            Ok(decode_bioes_to_spans(&path).spans)
        })
        .collect()
}

/// Decode without adaptation.
pub fn detect(params: &SpanDetectorParams, sentences: &[LabeledSentence]) -> Result<Vec<Vec<Span>>, DetectorError> {
    detect_all(&params.params, params.encoder, sentences)
}

/// Span-only micro F1 over the query sets of `episodes` after adaptation.
pub fn evaluate_detector(
    params: &ParamVector,
    encoder: EncoderConfig,
    episodes: &[Episode],
    config: &MetaConfig,
) -> Result<f64, DetectorError> {
    let per_episode: Vec<Result<(Vec<Vec<Span>>, Vec<Vec<Span>>), DetectorError>> = episodes
        .par_iter()
        .map(|ep| {
            let adapted = adapt(params, encoder, &ep.support, config)?;
            let pred = detect_all(&adapted, encoder, &ep.query)?;
            Ok((pred, ep.query.iter().map(LabeledSentence::entity_spans).collect()))
        })
        .collect();
    let (mut pred, mut gold) = (Vec::new(), Vec::new());
    for r in per_episode {
        let (p, g) = r?;
        pred.extend(p);
        gold.extend(g);
    }
    Ok(span_f1(&pred, &gold)?.f1())
}

/// First-order MAML over training episodes, validating span F1 on
/// `validation` every `eval_interval` steps.
pub fn meta_train_detector(
    init: &SpanDetectorParams,
    train: &[Episode],
    validation: &[Episode],
    config: &MetaConfig,
    seed: u64,
) -> Result<(SpanDetectorParams, MetaTrainOutcome), DetectorError> {
    let encoder = init.encoder;
    let tasks: Vec<(&[LabeledSentence], &[LabeledSentence])> =
        train.iter().map(|e| (e.support.as_slice(), e.query.as_slice())).collect();
    let inner = DetectorLoss { encoder, zeta: config.zeta_support };
    let outer = DetectorLoss { encoder, zeta: config.zeta_query };
    let mut validate = |p: &ParamVector| -> Result<f64, NeuralError> {
        evaluate_detector(p, encoder, validation, config).map_err(|e| NeuralError::Invalid(e.to_string()))
    };
    let hook: Option<&mut dyn FnMut(&ParamVector) -> Result<f64, NeuralError>> =
        if validation.is_empty() { None } else { Some(&mut validate) };
    let outcome = meta_train(init.params.clone(), &tasks, &inner, &outer, config, seed, hook)?;
    Ok((SpanDetectorParams { encoder, params: outcome.params.clone() }, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::generate_synthetic_corpus;

    fn small() -> EncoderConfig {
        EncoderConfig { vocab_size: 256, dim: 6, radius: 1 }
    }

    fn sentence(words: &str, tags: &str) -> LabeledSentence {
        LabeledSentence::from_tags(
            words.split_whitespace().map(String::from).collect(),
            tags.split_whitespace().map(|t| t.parse().unwrap()).collect(),
        )
    }

    #[test]
    fn zero_params_are_uniform() {
        let lp = emission_log_probs(&SpanDetectorParams::zeros(small()), &vec!["x".to_string(); 7]);
        assert_eq!((lp.rows, lp.cols), (7, 5));
        assert!(lp.data.iter().all(|&x| (x + 5f64.ln()).abs() < 1e-15));
        let (l, _) = detector_loss(&SpanDetectorParams::zeros(small()), &sentence("a b c", "B E O"), 0.0).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        let (l2, _) = detector_loss(&SpanDetectorParams::zeros(small()), &sentence("a b c", "B E O"), 2.0).unwrap();
        assert!((l2 - 3.0 * 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rows_normalize() {
        let p = SpanDetectorParams::random(small(), 1.0, 4);
        let mut p = p;
        p.params.get_mut(HEAD_WEIGHT).unwrap().iter_mut().enumerate().for_each(|(i, w)| *w = (i as f64).sin());
        let lp = emission_log_probs(&p, &["a", "b", "c"].map(String::from));
        for i in 0..3 {
            let s: f64 = lp.row(i).iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn missing_tags_rejected() {
        let s = LabeledSentence { tokens: vec!["a".into()], tags: None, spans: None };
        assert!(detector_loss(&SpanDetectorParams::zeros(small()), &s, 0.0).is_err());
    }

    #[test]
    fn pretraining_descends_and_is_deterministic() {
        let data = generate_synthetic_corpus(10, 20, 3).span_only().unwrap();
        let config = PretrainConfig { encoder: small(), steps: 60, ..Default::default() };
        let (a, log) = pretrain_steppingstone(&data, &config, 1).unwrap();
        let (b, _) = pretrain_steppingstone(&data, &config, 1).unwrap();
        assert_eq!(a, b);
        let head: f64 = log[..5].iter().map(|e| e.loss).sum();
        let tail: f64 = log[log.len() - 5..].iter().map(|e| e.loss).sum();
        assert!(tail < head, "{head} -> {tail}");
        let back = SpanDetectorParams::from_checkpoint(a.to_checkpoint("steppingstone")).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn dominant_emissions_decode_directly() {
        let mut p = SpanDetectorParams::zeros(EncoderConfig { vocab_size: 64, dim: 2, radius: 0 });
        // Zero encoder gives h = tanh(bias); drive logits through the head bias.
        p.params.get_mut(HEAD_BIAS).unwrap().copy_from_slice(&[0.0, 0.0, 5.0, 0.0, 0.0]);
        let ep = Episode {
            classes: vec!["a".into()],
            support: vec![],
            query: vec![sentence("x y", "O O")],
            support_ids: vec![],
            query_ids: vec![],
        };
        let cfg = MetaConfig { inner_steps: 0, ..Default::default() };
        assert_eq!(adapt_and_detect(&p, &ep, &cfg).unwrap(), vec![Vec::<Span>::new()]);
    }
}
