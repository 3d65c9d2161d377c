//! Sampled versus expected prices for a fixed fishing control: how far the minibatch
//! objective and its gradient move when the price paths are replaced by their mean.

use ccsgd::apps::fishing::{sample_fishing_from, FishingDistribution, FishingModel, FishingParams};
use ccsgd::{Error, ScenarioModel};
use rayon::prelude::*;

use crate::experiment::stream_rng;

pub const PRICE_STREAM: u64 = 4;

#[derive(Debug, Clone)]
pub struct PriceComparison {
    pub size: usize,
    pub objective_sampled: f64,
    pub objective_expected: f64,
    pub grad_sampled: Vec<f64>,
    pub grad_expected: Vec<f64>,
}

impl PriceComparison {
    /// `|G_s − G_e| / |G_s|` per coordinate (zero where both vanish).
    pub fn relative_errors(&self) -> Vec<f64> {
        self.grad_sampled
            .iter()
            .zip(&self.grad_expected)
            .map(|(&s, &e)| {
                let d = (s - e).abs();
                if d == 0.0 {
                    0.0
                } else {
                    d / s.abs()
                }
            })
            .collect()
    }

    pub fn objective_gap(&self) -> f64 {
        (self.objective_sampled - self.objective_expected).abs()
    }
}

fn mean_value_and_grad(model: &FishingModel<f64>, scenarios: &[ccsgd::apps::fishing::FishingScenario<f64>], u: &[f64]) -> (f64, Vec<f64>) {
    let n = u.len();
    let parts: Vec<(f64, Vec<f64>)> = scenarios
        .par_iter()
        .map(|s| {
            let mut g = vec![0.0; n];
            let f = model.objective_grad(u, s, &mut g);
            (f, g)
        })
        .collect();
    let m = scenarios.len() as f64;
    let f: Vec<f64> = parts.iter().map(|p| p.0).collect();
    let grad = (0..n)
        .map(|t| {
            let col: Vec<f64> = parts.iter().map(|p| p.1[t]).collect();
            ccsgd::scalar::pairwise_sum(&col) / m
        })
        .collect();
    (ccsgd::scalar::pairwise_sum(&f) / m, grad)
}

/// For each size, one minibatch drawn from its own stream; the same scenarios are evaluated
/// with their sampled price paths and with the expected constant prices.
pub fn compare_prices(
    params: &FishingParams<f64>,
    dist: &FishingDistribution,
    u: &[f64],
    sizes: &[usize],
    seed: u64,
) -> Result<Vec<PriceComparison>, Error> {
    if u.len() != params.steps {
        return Err(Error::Contract(format!("control has {} entries, horizon has {}", u.len(), params.steps)));
    }
    let model = FishingModel { params: params.clone() };
    let expected = dist.expected_prices();
    sizes
        .iter()
        .enumerate()
        .map(|(k, &size)| {
            let mut rng = stream_rng(seed, PRICE_STREAM + k as u64);
            let sampled = sample_fishing_from(params, dist, size, &mut rng)?.into_inner();
            let flat: Vec<_> = sampled.iter().map(|s| s.with_constant_prices(expected)).collect();
            let (fs, gs) = mean_value_and_grad(&model, &sampled, u);
            let (fe, ge) = mean_value_and_grad(&model, &flat, u);
            Ok(PriceComparison {
                size,
                objective_sampled: fs,
                objective_expected: fe,
                grad_sampled: gs,
                grad_expected: ge,
            })
        })
        .collect()
}
