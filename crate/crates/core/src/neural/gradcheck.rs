use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{LossFunctional, NeuralError, ParamVector};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference half step.
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is (numerically) zero are judged on absolute error.
    pub abs_floor: f64,
    /// Models with more scalars than this are checked on a random subset.
    pub full_check_limit: usize,
    /// Subset size above `full_check_limit`.
    pub sample_size: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-4, tolerance: 1e-4, abs_floor: 1e-6, full_check_limit: 10_000, sample_size: 400, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCoordinate {
    pub flat_index: usize,
    pub name: String,
    pub offset: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<GradCoordinate>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compare the analytic gradient against central differences.
///
/// Above `full_check_limit` scalars, half the subset is drawn from
/// coordinates with a non-zero analytic gradient and half uniformly.
pub fn finite_diff_check<L: LossFunctional>(
    loss: &L,
    params: &ParamVector,
    data: &L::Data,
    config: GradCheckConfig,
) -> Result<GradCheckReport, NeuralError> {
    let n = params.len();
    let (_, analytic) = loss.loss_and_grad(params, data)?;
    analytic.check_same_layout(params)?;

    let coords: Vec<usize> = if n <= config.full_check_limit {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let support: Vec<usize> = analytic.iter().enumerate().filter(|(_, g)| **g != 0.0).map(|(i, _)| i).collect();
        let half = config.sample_size / 2;
        let mut picked: Vec<usize> = support.choose_multiple(&mut rng, half.min(support.len())).copied().collect();
        while picked.len() < config.sample_size {
            picked.push(rng.random_range(0..n));
        }
        picked.sort_unstable();
        picked.dedup();
        picked
    };

    let mut probe = params.clone();
    let mut worst: Option<GradCoordinate> = None;
    let mut max_rel = 0.0f64;
    for &i in &coords {
        let x = params.flat_get(i);
        probe.flat_set(i, x + config.step);
        let (plus, _) = loss.loss_and_grad(&probe, data)?;
        probe.flat_set(i, x - config.step);
        let (minus, _) = loss.loss_and_grad(&probe, data)?;
        probe.flat_set(i, x);
        let numeric = (plus - minus) / (2.0 * config.step);
        let a = analytic.flat_get(i);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(config.abs_floor);
        let rel = if rel.is_nan() { f64::INFINITY } else { rel };
        if worst.is_none() || rel > max_rel {
            max_rel = rel;
            let (name, offset) = params.locate(i).expect("in range");
            worst = Some(GradCoordinate { flat_index: i, name: name.to_string(), offset, analytic: a, numeric });
        }
    }
    Ok(GradCheckReport {
        checked: coords.len(),
        max_rel_error: max_rel,
        worst,
        tolerance: config.tolerance,
        passed: max_rel <= config.tolerance,
    })
}
