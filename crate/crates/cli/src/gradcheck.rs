//! Finite-difference checks of the three hand-written backward passes at
//! random parameter points.

use anyhow::Result;
use fewner::classifier::{ClassifierLoss, ClassifierParams, ClassifierTask, Objective};
use fewner::corpus::LabeledSentence;
use fewner::detector::{DetectorLoss, SpanDetectorParams};
use fewner::neural::{
    finite_diff_check, EncoderConfig, EncoderGrad, EncoderParams, EncoderView, GradCheckConfig, GradCoordinate,
    LossFunctional, Matrix, NeuralError, ParamVector,
};
use fewner::classifier::span_representation;
use fewner::referents::{DefinitionSource, ReferentInput, ReferentSource, TypeDefinition};
use fewner::tagging::Span;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub target: &'static str,
    pub points: usize,
    pub max_rel_error: f64,
    pub worst: Option<GradCoordinate>,
    pub passed: bool,
}

fn small() -> EncoderConfig {
    EncoderConfig { vocab_size: 64, dim: 5, radius: 1 }
}

fn jitter(p: &mut ParamVector, rng: &mut ChaCha8Rng, scale: f64) {
    for i in 0..p.len() {
        let z: f64 = StandardNormal.sample(rng);
        p.flat_set(i, scale * z);
    }
}

fn words(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    (0..n).map(|_| format!("w{}", rng.random_range(0..40))).collect()
}

/// `Σ c ⊙ H` for a random `c`, so every encoder output carries gradient.
struct Projected {
    encoder: EncoderConfig,
}

impl LossFunctional for Projected {
    type Data = (Vec<String>, Matrix);

    fn loss_and_grad(&self, p: &ParamVector, (tokens, c): &Self::Data) -> Result<(f64, ParamVector), NeuralError> {
        let view = EncoderView::from_params(p, "enc", self.encoder)?;
        let trace = view.forward(tokens);
        let loss = trace.outputs.data.iter().zip(&c.data).map(|(h, c)| h * c).sum();
        let mut g = p.zeros_like();
        view.backward(&trace, c, &mut EncoderGrad::from_params(&mut g, "enc"));
        Ok((loss, g))
    }
}

struct Tally {
    target: &'static str,
    points: usize,
    max: f64,
    worst: Option<GradCoordinate>,
    passed: bool,
}

impl Tally {
    fn new(target: &'static str) -> Self {
        Self { target, points: 0, max: 0.0, worst: None, passed: true }
    }

    fn check<L: LossFunctional>(&mut self, loss: &L, p: &ParamVector, data: &L::Data, config: GradCheckConfig) -> Result<()> {
        let r = finite_diff_check(loss, p, data, config)?;
        self.points += 1;
        self.passed &= r.passed;
        if r.max_rel_error >= self.max {
            self.max = r.max_rel_error;
            self.worst = r.worst;
        }
        Ok(())
    }

    fn finish(self) -> SuiteResult {
        SuiteResult { target: self.target, points: self.points, max_rel_error: self.max, worst: self.worst, passed: self.passed }
    }
}

fn referent(name: &str, rng: &mut ChaCha8Rng) -> ReferentInput {
    ReferentInput::from_definition(TypeDefinition {
        type_name: name.into(),
        definition_text: words(rng, 4).join(" "),
        source: DefinitionSource::Fixture,
        config: None,
    })
    .expect("non-empty definition")
}

/// Classifier draws closer than this to a kink of the `|s − V|` features
/// are redrawn: central differences straddling the kink are meaningless.
pub const KINK_MARGIN: f64 = 1e-2;

fn kink_gap(p: &ParamVector, task: &ClassifierTask) -> Result<f64> {
    let params = ClassifierParams::from_param_vector(small(), p.clone())?;
    let mut vs = Vec::new();
    for r in &task.referents {
        vs.push(match &r.source {
            ReferentSource::Text { tokens, .. } => {
                let h = params.sentence_encoder().forward(tokens).outputs;
                span_representation(&h, 0, tokens.len() - 1)?.vector
            }
            ReferentSource::Fixed { vector, .. } => vector.clone(),
        });
    }
    let mut gap = f64::INFINITY;
    for s in &task.sentences {
        let h = params.span_encoder().forward(&s.tokens).outputs;
        for sp in s.entity_spans() {
            let rep = span_representation(&h, sp.start, sp.end)?.vector;
            for v in &vs {
                gap = rep.iter().zip(v).map(|(a, b)| (a - b).abs()).fold(gap, f64::min);
            }
        }
    }
    Ok(gap)
}

/// Detector loss, classifier loss and the token encoder, `points` random
/// parameter points each.
pub fn run_suite(points: usize, seed: u64, config: GradCheckConfig) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zetas = [0.0, 2.0, 5.0];

    let mut det = Tally::new("detector_loss");
    for point in 0..points {
        let mut p = SpanDetectorParams::zeros(small()).params;
        jitter(&mut p, &mut rng, 0.5);
        let data: Vec<LabeledSentence> = (0..2)
            .map(|_| {
                let n = rng.random_range(3..8);
                let s = rng.random_range(0..n - 1);
                let e = rng.random_range(s..n);
                LabeledSentence::from_spans(words(&mut rng, n), vec![Span::new(s, e)])
            })
            .collect::<Result<_, _>>()?;
        det.check(&DetectorLoss { encoder: small(), zeta: zetas[point % 3] }, &p, &data, config)?;
    }

    let mut cls = Tally::new("classifier_loss");
    let mut point = 0;
    while point < points {
        let mut p = ClassifierParams::zeros(small()).params;
        jitter(&mut p, &mut rng, 0.5);
        let referents = vec![referent("a", &mut rng), referent("b", &mut rng), referent("c", &mut rng)];
        let sentences = (0..2)
            .map(|_| {
                let tokens = words(&mut rng, 7);
                let spans = vec![Span::typed(0, rng.random_range(0..2), "a"), Span::typed(3, rng.random_range(3..6), "c")];
                LabeledSentence::from_spans(tokens, spans)
            })
            .collect::<Result<_, _>>()?;
        let task = ClassifierTask { sentences, referents };
        if kink_gap(&p, &task)? < KINK_MARGIN {
            continue;
        }
        let objective = if point % 4 == 3 { Objective::Softmax } else { Objective::OneVsRest };
        let loss = ClassifierLoss { encoder: small(), zeta: zetas[point % 3], objective };
        cls.check(&loss, &p, &task, config)?;
        point += 1;
    }

    let mut enc = Tally::new("encode_tokens");
    for _ in 0..points {
        let mut p = ParamVector::new();
        EncoderParams::zeros(small()).push_into("enc", &mut p);
        jitter(&mut p, &mut rng, 0.5);
        let n = rng.random_range(1..7);
        let tokens = words(&mut rng, n);
        let mut c = Matrix::zeros(n, small().dim);
        c.data.iter_mut().for_each(|x| *x = StandardNormal.sample(&mut rng));
        enc.check(&Projected { encoder: small() }, &p, &(tokens, c), config)?;
    }

    Ok(vec![det.finish(), cls.finish(), enc.finish()])
}
