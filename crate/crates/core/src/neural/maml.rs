//! First-order MAML.
//!
//! Inner loop: `n` plain gradient steps on the support data. Meta step: the
//! query gradients taken at each episode's adapted parameters are summed in
//! episode order and handed to the meta optimizer; nothing is differentiated
//! through the inner loop.

use rayon::prelude::*;

use super::{NeuralError, OptimizerState, ParamVector};

/// A deterministic map `(params, data) -> (loss, ∂loss/∂params)`.
pub trait LossFunctional: Sync {
    type Data: ?Sized + Sync;

    fn loss_and_grad(&self, params: &ParamVector, data: &Self::Data) -> Result<(f64, ParamVector), NeuralError>;
}

/// `n_steps` of `θ ← θ − α ∇L(θ; support)`.
pub fn maml_inner_update<L: LossFunctional>(
    params: &ParamVector,
    loss: &L,
    support: &L::Data,
    alpha: f64,
    n_steps: usize,
) -> Result<ParamVector, NeuralError> {
    let mut theta = params.clone();
    for step in 0..n_steps {
        let (value, grad) = loss.loss_and_grad(&theta, support)?;
        if !value.is_finite() {
            return Err(NeuralError::NonFiniteInner { step, value });
        }
        theta.axpy(-alpha, &grad)?;
    }
    Ok(theta)
}

#[derive(Debug, Clone, PartialEq)]
pub enum MetaOptimizer {
    /// `θ ← θ − lr · Σ_m g_m`
    Sgd { lr: f64 },
    AdamW(OptimizerState),
}

impl MetaOptimizer {
    pub fn apply(&mut self, params: &mut ParamVector, grad: &ParamVector) -> Result<(), NeuralError> {
        match self {
            MetaOptimizer::Sgd { lr } => params.axpy(-*lr, grad),
            MetaOptimizer::AdamW(state) => state.apply(params, grad),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MetaStepOutcome {
    pub params: ParamVector,
    /// Query loss of each episode at its adapted parameters.
    pub query_losses: Vec<f64>,
}

/// One first-order meta update over a batch of `(support, query)` pairs.
///
/// `inner` is used for adaptation on the support data and `outer` for the
/// query loss, so the two phases may weight their loss terms differently.
/// Episodes are adapted in parallel; gradients are reduced in batch order.
pub fn maml_meta_step<L: LossFunctional>(
    params: &ParamVector,
    batch: &[(&L::Data, &L::Data)],
    inner: &L,
    outer: &L,
    alpha: f64,
    n_steps: usize,
    optimizer: &mut MetaOptimizer,
) -> Result<MetaStepOutcome, NeuralError> {
    if batch.is_empty() {
        return Err(NeuralError::EmptyBatch);
    }
    let per_episode: Vec<Result<(f64, ParamVector), NeuralError>> = batch
        .par_iter()
        .map(|(support, query)| {
            let adapted = maml_inner_update(params, inner, support, alpha, n_steps)?;
            outer.loss_and_grad(&adapted, query)
        })
        .collect();

    let mut total = params.zeros_like();
    let mut query_losses = Vec::with_capacity(batch.len());
    for (episode, r) in per_episode.into_iter().enumerate() {
        let (value, grad) = r?;
        if !value.is_finite() {
            return Err(NeuralError::NonFiniteQuery { episode, value });
        }
        total.axpy(1.0, &grad)?;
        query_losses.push(value);
    }
    let mut next = params.clone();
    optimizer.apply(&mut next, &total)?;
    Ok(MetaStepOutcome { params: next, query_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::NamedArray;

    /// `L(θ) = c · θ²/2` summed over coordinates, data = c.
    struct Quadratic;

    impl LossFunctional for Quadratic {
        type Data = f64;

        fn loss_and_grad(&self, p: &ParamVector, c: &f64) -> Result<(f64, ParamVector), NeuralError> {
            let loss = p.iter().map(|x| c * x * x / 2.0).sum();
            Ok((loss, p.scaled(*c)))
        }
    }

    fn scalar(x: f64) -> ParamVector {
        ParamVector::from_arrays(vec![NamedArray { name: "theta".into(), shape: vec![1], data: vec![x] }])
    }

    #[test]
    fn inner_update_values() {
        let p = scalar(1.0);
        assert_eq!(maml_inner_update(&p, &Quadratic, &1.0, 0.1, 0).unwrap(), p);
        assert_eq!(maml_inner_update(&p, &Quadratic, &1.0, 0.1, 1).unwrap().flat_get(0), 0.9);
        assert_eq!(maml_inner_update(&p, &Quadratic, &1.0, 0.1, 2).unwrap().flat_get(0), 0.81);
        assert_eq!(maml_inner_update(&p, &Quadratic, &1.0, 0.0, 7).unwrap(), p);
    }

    #[test]
    fn meta_step_values() {
        let p = scalar(1.0);
        let mut sgd = MetaOptimizer::Sgd { lr: 0.1 };
        let one = maml_meta_step(&p, &[(&1.0, &1.0)], &Quadratic, &Quadratic, 0.1, 1, &mut sgd).unwrap();
        assert_eq!(one.params.flat_get(0), 0.91);
        let two =
            maml_meta_step(&p, &[(&1.0, &1.0), (&1.0, &1.0)], &Quadratic, &Quadratic, 0.1, 1, &mut sgd).unwrap();
        assert_eq!(two.params.flat_get(0), 0.82);
        // Zero query gradient leaves parameters unchanged.
        let zero = maml_meta_step(&p, &[(&1.0, &0.0)], &Quadratic, &Quadratic, 0.1, 1, &mut sgd).unwrap();
        assert_eq!(zero.params, p);
    }

    #[test]
    fn empty_batch_and_non_finite_rejected() {
        let p = scalar(1.0);
        let mut sgd = MetaOptimizer::Sgd { lr: 0.1 };
        assert!(matches!(
            maml_meta_step(&p, &[], &Quadratic, &Quadratic, 0.1, 1, &mut sgd),
            Err(NeuralError::EmptyBatch)
        ));
        assert!(matches!(
            maml_inner_update(&p, &Quadratic, &f64::INFINITY, 0.1, 3),
            Err(NeuralError::NonFiniteInner { step: 0, .. })
        ));
        assert!(matches!(
            maml_meta_step(&p, &[(&1.0, &f64::NAN)], &Quadratic, &Quadratic, 0.1, 1, &mut sgd),
            Err(NeuralError::NonFiniteQuery { episode: 0, .. })
        ));
    }
}
