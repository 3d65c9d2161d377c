//! Upper pressure bounds for a tree-shaped gas network with random demand.
//!
//! Node 0 injects gas, nodes `1…n` withdraw `ξ_i`. For each node the potential
//!
//! ```text
//! h_i(ξ) = Σ_{e on the path 0→i} Φ_e (total demand below e)²
//! ```
//!
//! measures the squared-pressure loss from the root. A demand is serviceable iff
//!
//! ```text
//! (p_0^min)² ≤ (p_i^max)² + h_i            for all i
//! (p_i^min)² + h_i ≤ (p_0^max)²            for all i
//! (p_j^min)² + h_j ≤ (p_i^max)² + h_i      for all i ≠ j
//! ```
//!
//! and the constraint is the largest violation `max(...) ≤ 0` over all these terms.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::apps::ScenarioRecord;
use crate::error::{Error, Result};
use crate::problem::{BoxSet, ProblemInstance, ScenarioModel, ScenarioSet};
use crate::scalar::Scalar;

/// Rooted tree on nodes `0…n`; node `i > 0` hangs below `parent[i - 1]` through a pipe with
/// drop coefficient `phi[i - 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "", deserialize = ""))]
pub struct GasNetwork<T: Scalar> {
    pub parent: Vec<usize>,
    pub phi: Vec<T>,
    /// Lower pressure bound of every withdrawal node.
    pub p_min: Vec<T>,
    pub p0_min: T,
    pub p0_max: T,
    #[serde(skip)]
    order: Vec<usize>,
}

impl<T: Scalar> GasNetwork<T> {
    pub fn new(parent: Vec<usize>, phi: Vec<T>, p_min: Vec<T>, p0_min: T, p0_max: T) -> Result<Self> {
        let mut net = Self {
            parent,
            phi,
            p_min,
            p0_min,
            p0_max,
            order: Vec::new(),
        };
        net.finalize()?;
        Ok(net)
    }

    /// Validates the tree and caches a root-first node order. Needed after deserializing.
    pub fn finalize(&mut self) -> Result<()> {
        let n = self.parent.len();
        if n == 0 {
            return Err(Error::Domain("gas network needs at least one withdrawal node".into()));
        }
        if self.phi.len() != n || self.p_min.len() != n {
            return Err(Error::Contract(format!(
                "{n} nodes but {} pipe coefficients and {} lower bounds",
                self.phi.len(),
                self.p_min.len()
            )));
        }
        if self.phi.iter().any(|p| !(p.is_finite() && *p > T::zero())) {
            return Err(Error::Domain("pipe coefficients must be positive".into()));
        }
        if self.p_min.iter().any(|p| !p.is_finite()) || !self.p0_min.is_finite() || self.p0_max.is_nan() {
            return Err(Error::Domain("pressure bounds must be finite".into()));
        }
        let mut children = vec![Vec::new(); n + 1];
        for (i, &p) in self.parent.iter().enumerate() {
            if p > n || p == i + 1 {
                return Err(Error::Domain(format!("node {} has invalid parent {p}", i + 1)));
            }
            children[p].push(i + 1);
        }
        let mut order = Vec::with_capacity(n + 1);
        order.push(0);
        let mut head = 0;
        while head < order.len() {
            let v = order[head];
            order.extend_from_slice(&children[v]);
            head += 1;
        }
        if order.len() != n + 1 {
            return Err(Error::Domain("gas network is not a tree rooted at node 0".into()));
        }
        self.order = order;
        Ok(())
    }

    /// Number of withdrawal nodes `n`.
    pub fn exits(&self) -> usize {
        self.parent.len()
    }

    /// Parent of node `i ≥ 1`.
    pub fn parent_of(&self, i: usize) -> usize {
        self.parent[i - 1]
    }

    /// `h_1 … h_n` by one leaf-to-root pass (subtree demand) and one root-to-leaf pass.
    pub fn potentials(&self, demand: &[T]) -> Vec<T> {
        let n = self.exits();
        let mut load = vec![T::zero(); n + 1];
        load[1..].copy_from_slice(demand);
        for &v in self.order.iter().skip(1).rev() {
            let d = load[v];
            load[self.parent_of(v)] += d;
        }
        let mut h = vec![T::zero(); n + 1];
        for &v in self.order.iter().skip(1) {
            h[v] = h[self.parent_of(v)] + self.phi[v - 1] * load[v] * load[v];
        }
        h.remove(0);
        h
    }

    pub fn read_json(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut net: Self =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        net.finalize()?;
        Ok(net)
    }

    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Which of the three inequality families, and which nodes, attain the maximum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActiveTerm {
    /// `(p_0^min)² − (p_i^max)² − h_i`.
    EntryMin { i: usize },
    /// `(p_i^min)² + h_i − (p_0^max)²`.
    EntryMax { i: usize },
    /// `(p_j^min)² + h_j − (p_i^max)² − h_i`.
    Pair { i: usize, j: usize },
}

/// How the decision vector is laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GasDecision {
    /// `(p_1^max, …, p_n^max)`; the entry bound is fixed by the network.
    ExitsOnly,
    /// `(p_1^max, …, p_n^max, p_0^max)`.
    #[default]
    ExitsAndEntry,
}

impl GasDecision {
    pub fn dim(self, exits: usize) -> usize {
        match self {
            GasDecision::ExitsOnly => exits,
            GasDecision::ExitsAndEntry => exits + 1,
        }
    }
}

/// Largest violation among all serviceability terms, in `O(n)`. Nodes are 0-based here
/// (`i` means node `i + 1`). Ties go to the first term in the order: entry-min terms, entry-max
/// terms, then pairs in lexicographic `(i, j)`.
pub fn max_violation<T: Scalar>(p_max: &[T], p0_max: T, p_min: &[T], p0_min: T, h: &[T]) -> (T, ActiveTerm) {
    let n = h.len();
    let p0min2 = p0_min * p0_min;
    let p0max2 = p0_max * p0_max;
    let mut best = (T::neg_infinity(), ActiveTerm::EntryMin { i: 0 });
    let mut consider = |v: T, term: ActiveTerm| {
        if v > best.0 {
            best = (v, term);
        }
    };
    for i in 0..n {
        consider(p0min2 - p_max[i] * p_max[i] - h[i], ActiveTerm::EntryMin { i });
    }
    for i in 0..n {
        consider(p_min[i] * p_min[i] + h[i] - p0max2, ActiveTerm::EntryMax { i });
    }
    if n >= 2 {
        // Best and runner-up of (p_j^min)² + h_j, lowest index first on ties.
        let need = |j: usize| p_min[j] * p_min[j] + h[j];
        let (mut first, mut second) = if need(1) > need(0) { (1, 0) } else { (0, 1) };
        for j in 2..n {
            if need(j) > need(first) {
                second = first;
                first = j;
            } else if need(j) > need(second) {
                second = j;
            }
        }
        for i in 0..n {
            let j = if i == first { second } else { first };
            consider(need(j) - p_max[i] * p_max[i] - h[i], ActiveTerm::Pair { i, j });
        }
    }
    best
}

/// Scenario model on a fixed network. Demand vectors are the scenarios.
#[derive(Debug, Clone, PartialEq)]
pub struct GasModel<T: Scalar> {
    pub network: GasNetwork<T>,
    pub layout: GasDecision,
}

impl<T: Scalar> GasModel<T> {
    fn entry_bound(&self, x: &[T]) -> T {
        match self.layout {
            GasDecision::ExitsOnly => self.network.p0_max,
            GasDecision::ExitsAndEntry => x[self.network.exits()],
        }
    }

    /// Constraint value and the active term.
    pub fn evaluate(&self, x: &[T], demand: &[T]) -> (T, ActiveTerm) {
        let n = self.network.exits();
        let h = self.network.potentials(demand);
        max_violation(&x[..n], self.entry_bound(x), &self.network.p_min, self.network.p0_min, &h)
    }
}

impl<T: Scalar> ScenarioModel<T> for GasModel<T> {
    type Scenario = Vec<T>;

    fn dim(&self) -> usize {
        self.layout.dim(self.network.exits())
    }
    fn objective(&self, x: &[T], _s: &Vec<T>) -> T {
        x.iter().copied().sum()
    }
    fn objective_grad(&self, x: &[T], _s: &Vec<T>, grad: &mut [T]) -> T {
        grad.fill(T::one());
        x.iter().copied().sum()
    }
    fn constraint(&self, x: &[T], s: &Vec<T>) -> T {
        self.evaluate(x, s).0
    }
    fn constraint_grad(&self, x: &[T], s: &Vec<T>, grad: &mut [T]) -> T {
        let (v, term) = self.evaluate(x, s);
        grad.fill(T::zero());
        let two = T::lit(2.0);
        match term {
            ActiveTerm::EntryMin { i } | ActiveTerm::Pair { i, .. } => grad[i] = -two * x[i],
            ActiveTerm::EntryMax { .. } => {
                if self.layout == GasDecision::ExitsAndEntry {
                    let k = self.network.exits();
                    grad[k] = -two * x[k];
                }
            }
        }
        v
    }
}

impl<T: Scalar> ScenarioRecord for Vec<T> {
    fn field_names(&self) -> Vec<String> {
        (1..=self.len()).map(|i| format!("xi{i}")).collect()
    }
    fn to_row(&self) -> Vec<f64> {
        self.iter().map(|v| v.as_f64()).collect()
    }
}

pub type GasProblem<T> = ProblemInstance<T, GasModel<T>>;

/// Problem over `p ≥ 1` in every decision coordinate.
pub fn gas_problem<T: Scalar>(
    network: GasNetwork<T>,
    layout: GasDecision,
    scenarios: ScenarioSet<Vec<T>>,
    epsilon: f64,
) -> Result<GasProblem<T>> {
    let n = network.exits();
    if scenarios.get(0).len() != n {
        return Err(Error::Contract(format!(
            "demand vectors have {} entries, network has {n} exits",
            scenarios.get(0).len()
        )));
    }
    let dim = layout.dim(n);
    let feasible = BoxSet::new(vec![T::one(); dim], vec![T::infinity(); dim])?;
    ProblemInstance::new(GasModel { network, layout }, scenarios, feasible, epsilon)
}

/// Parameters of a generated network and its demand law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticGasSpec {
    pub exits: usize,
    pub topology_seed: u64,
    /// Pipe coefficients are drawn uniformly from `[phi_scale/2, 3 phi_scale/2]`.
    pub phi_scale: f64,
    pub p_min: f64,
    pub p0_min: f64,
    pub p0_max: f64,
    /// Mean demands drawn uniformly from `[demand_mean/2, 3 demand_mean/2]`.
    pub demand_mean: f64,
    /// Standard deviation as a fraction of each node's mean.
    pub demand_relative_sd: f64,
}

impl Default for SyntheticGasSpec {
    fn default() -> Self {
        Self {
            exits: 11,
            topology_seed: 2016,
            phi_scale: 0.1,
            p_min: 1.0,
            p0_min: 1.0,
            p0_max: 3.0,
            demand_mean: 1.0,
            demand_relative_sd: 0.3,
        }
    }
}

/// Independent normal demands clamped at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GasDemandLaw {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl GasDemandLaw {
    pub fn sample<T: Scalar>(&self, count: usize, seed: u64) -> Result<ScenarioSet<Vec<T>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_from(count, &mut rng)
    }

    pub fn sample_from<T: Scalar, R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<ScenarioSet<Vec<T>>> {
        if count == 0 || self.mean.is_empty() || self.mean.len() != self.sd.len() {
            return Err(Error::Domain("demand law needs matching means and deviations".into()));
        }
        let laws = self
            .mean
            .iter()
            .zip(&self.sd)
            .map(|(&m, &s)| Normal::new(m, s).map_err(|e| Error::Domain(format!("demand law: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let out = (0..count)
            .map(|_| laws.iter().map(|l| T::lit(l.sample(rng).max(0.0))).collect())
            .collect();
        ScenarioSet::new(out)
    }
}

/// Random tree where each new node attaches to a uniformly chosen earlier node, with node
/// labels shuffled so parents are not always smaller.
pub fn build_synthetic_network<T: Scalar>(spec: &SyntheticGasSpec) -> Result<(GasNetwork<T>, GasDemandLaw)> {
    if spec.exits == 0 {
        return Err(Error::Domain("synthetic network needs at least two nodes".into()));
    }
    let n = spec.exits;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.topology_seed);
    let mut labels: Vec<usize> = (1..=n).collect();
    labels.shuffle(&mut rng);
    let mut parent = vec![0usize; n];
    for k in 0..n {
        let attach = rng.random_range(0..=k);
        parent[labels[k] - 1] = if attach == 0 { 0 } else { labels[attach - 1] };
    }
    let phi = (0..n)
        .map(|_| T::lit(spec.phi_scale * rng.random_range(0.5..1.5)))
        .collect();
    let mean: Vec<f64> = (0..n).map(|_| spec.demand_mean * rng.random_range(0.5..1.5)).collect();
    let sd = mean.iter().map(|m| m * spec.demand_relative_sd).collect();
    let network = GasNetwork::new(
        parent,
        phi,
        vec![T::lit(spec.p_min); n],
        T::lit(spec.p0_min),
        T::lit(spec.p0_max),
    )?;
    Ok((network, GasDemandLaw { mean, sd }))
}
