//! Analytic gradients against central differences at random points.

use fewner::classifier::{ClassifierLoss, ClassifierParams, ClassifierTask, Objective};
use fewner::corpus::LabeledSentence;
use fewner::detector::{DetectorLoss, SpanDetectorParams};
use fewner::neural::{
    finite_diff_check, EncoderConfig, EncoderGrad, EncoderParams, EncoderView, GradCheckConfig, LossFunctional,
    Matrix, NeuralError, ParamVector,
};
use fewner::referents::{DefinitionSource, ReferentInput, TypeDefinition};
use fewner::tagging::Span;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn config() -> EncoderConfig {
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

fn check<L: LossFunctional>(loss: &L, p: &ParamVector, data: &L::Data, what: &str) -> f64 {
    let r = finite_diff_check(loss, p, data, GradCheckConfig::default()).unwrap();
    assert!(r.passed, "{what}: max rel error {} at {:?}", r.max_rel_error, r.worst);
    r.max_rel_error
}

#[test]
fn detector_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0f64;
    for point in 0..20 {
        let mut p = SpanDetectorParams::zeros(config()).params;
        jitter(&mut p, &mut rng, 0.5);
        let data: Vec<LabeledSentence> = (0..2)
            .map(|_| {
                let n = rng.random_range(3..8);
                let s = rng.random_range(0..n - 1);
                let e = rng.random_range(s..n);
                LabeledSentence::from_spans(words(&mut rng, n), vec![Span::new(s, e)]).unwrap()
            })
            .collect();
        let zeta = [0.0, 2.0, 5.0][point % 3];
        worst = worst.max(check(&DetectorLoss { encoder: config(), zeta }, &p, &data, "detector"));
    }
    println!("detector worst relative error {worst:.3e}");
}

fn referent(name: &str, rng: &mut ChaCha8Rng) -> ReferentInput {
    ReferentInput::from_definition(TypeDefinition {
        type_name: name.into(),
        definition_text: words(rng, 4).join(" "),
        source: DefinitionSource::Fixture,
        config: None,
    })
    .unwrap()
}

#[test]
fn classifier_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0f64;
    for point in 0..20 {
        let mut p = ClassifierParams::zeros(config()).params;
        jitter(&mut p, &mut rng, 0.5);
        let referents = vec![referent("a", &mut rng), referent("b", &mut rng), referent("c", &mut rng)];
        let sentences = (0..2)
            .map(|_| {
                let tokens = words(&mut rng, 7);
                let spans = vec![Span::typed(0, rng.random_range(0..2), "a"), Span::typed(3, rng.random_range(3..6), "c")];
                LabeledSentence::from_spans(tokens, spans).unwrap()
            })
            .collect();
        let task = ClassifierTask { sentences, referents };
        let objective = if point % 4 == 3 { Objective::Softmax } else { Objective::OneVsRest };
        let zeta = [0.0, 2.0, 5.0][point % 3];
        worst = worst.max(check(&ClassifierLoss { encoder: config(), zeta, objective }, &p, &task, "classifier"));
    }
    println!("classifier worst relative error {worst:.3e}");
}

/// `Σ c ⊙ H` for a fixed random `c`, so the gradient exercises every output.
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

#[test]
fn encoder_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0f64;
    for _ in 0..20 {
        let mut p = ParamVector::new();
        EncoderParams::zeros(config()).push_into("enc", &mut p);
        jitter(&mut p, &mut rng, 0.5);
        let n = rng.random_range(1..7);
        let tokens = words(&mut rng, n);
        let mut c = Matrix::zeros(n, config().dim);
        c.data.iter_mut().for_each(|x| *x = StandardNormal.sample(&mut rng));
        worst = worst.max(check(&Projected { encoder: config() }, &p, &(tokens, c), "encoder"));
    }
    println!("encoder worst relative error {worst:.3e}");
}
