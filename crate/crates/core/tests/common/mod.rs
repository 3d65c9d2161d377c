#![allow(dead_code)]

use ccsgd::{BoxSet, ProblemInstance, ScenarioModel, ScenarioSet};

/// `f(x, ξ) = ½ ‖x − a‖²` and `g(x, ξ) = w·x − b` with scenario `ξ = (a, w, b)` flattened.
pub struct QuadLinear {
    pub dim: usize,
}

impl ScenarioModel<f64> for QuadLinear {
    type Scenario = Vec<f64>;

    fn dim(&self) -> usize {
        self.dim
    }
    fn objective(&self, x: &[f64], s: &Vec<f64>) -> f64 {
        x.iter().zip(&s[..self.dim]).map(|(x, a)| 0.5 * (x - a) * (x - a)).sum()
    }
    fn objective_grad(&self, x: &[f64], s: &Vec<f64>, grad: &mut [f64]) -> f64 {
        for ((g, x), a) in grad.iter_mut().zip(x).zip(&s[..self.dim]) {
            *g = x - a;
        }
        self.objective(x, s)
    }
    fn constraint(&self, x: &[f64], s: &Vec<f64>) -> f64 {
        let d = self.dim;
        x.iter().zip(&s[d..2 * d]).map(|(x, w)| x * w).sum::<f64>() - s[2 * d]
    }
    fn constraint_grad(&self, x: &[f64], s: &Vec<f64>, grad: &mut [f64]) -> f64 {
        grad.copy_from_slice(&s[self.dim..2 * self.dim]);
        self.constraint(x, s)
    }
}

pub type Toy = ProblemInstance<f64, QuadLinear>;

/// Scalar instance: `a = (1, 2, 3)`, `w = 1`, `b = (0.5, −1, 0.2)`, ε = 0.5.
pub fn three_scenarios(lower: f64, upper: f64) -> Toy {
    let scen = vec![vec![1.0, 1.0, 0.5], vec![2.0, 1.0, -1.0], vec![3.0, 1.0, 0.2]];
    ProblemInstance::new(
        QuadLinear { dim: 1 },
        ScenarioSet::new(scen).unwrap(),
        BoxSet::uniform(1, lower, upper).unwrap(),
        0.5,
    )
    .unwrap()
}

/// Random instance with `count` scenarios in `dim` dimensions.
pub fn random_toy(dim: usize, count: usize, seed: u64, eps: f64) -> Toy {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let scen = (0..count)
        .map(|_| {
            let mut s: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..2.0)).collect();
            s.extend((0..dim).map(|_| rng.random_range(0.5..1.5)));
            s.push(rng.random_range(0.5..2.0));
            s
        })
        .collect();
    ProblemInstance::new(
        QuadLinear { dim },
        ScenarioSet::new(scen).unwrap(),
        BoxSet::uniform(dim, -5.0, 5.0).unwrap(),
        eps,
    )
    .unwrap()
}

/// Central-difference derivative of a scalar function of a vector.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut y = x.to_vec();
    for i in 0..x.len() {
        y[i] = x[i] + h;
        let up = f(&y);
        y[i] = x[i] - h;
        let down = f(&y);
        y[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// `‖a − b‖∞ / max(‖b‖∞, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs()).fold(floor, f64::max);
    diff / scale
}
