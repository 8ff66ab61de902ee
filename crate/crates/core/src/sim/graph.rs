//! Weighted interaction graphs.

use rand::Rng;

use super::SimError;

/// `n x n` non-negative weights with a zero diagonal, row-major.
///
/// Weights are the unit-range labels; simulators apply their own strength scale.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionGraph {
    n: usize,
    weights: Vec<f64>,
    symmetric: bool,
}

impl InteractionGraph {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            weights: vec![0.0; n * n],
            symmetric: true,
        }
    }

    /// Builds a graph from row-major weights, checking the diagonal, signs and
    /// (when flagged) exact symmetry.
    pub fn from_weights(n: usize, weights: Vec<f64>, symmetric: bool) -> Result<Self, SimError> {
        if n < 2 {
            return Err(SimError::InvalidSize(n));
        }
        if weights.len() != n * n {
            return Err(SimError::Config(format!("{} weights for {n} agents", weights.len())));
        }
        let g = Self { n, weights, symmetric };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for i in 0..self.n {
            if self.get(i, i) != 0.0 {
                return Err(SimError::Config(format!("diagonal entry {i} is {}", self.get(i, i))));
            }
            for j in 0..self.n {
                let w = self.get(i, j);
                if !(w >= 0.0) || !w.is_finite() {
                    return Err(SimError::Config(format!("weight ({i},{j}) = {w}")));
                }
                if self.symmetric && w != self.get(j, i) {
                    return Err(SimError::Config(format!("weight ({i},{j}) breaks symmetry")));
                }
            }
        }
        Ok(())
    }

    pub fn n_agents(&self) -> usize {
        self.n
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n + j]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn set_pair(&mut self, i: usize, j: usize, w: f64) {
        self.weights[i * self.n + j] = w;
        if self.symmetric {
            self.weights[j * self.n + i] = w;
        }
    }

    /// Weights multiplied by `scale`, as used inside an integrator.
    pub fn scaled(&self, scale: f64) -> Vec<f64> {
        self.weights.iter().map(|w| w * scale).collect()
    }
}

/// Every off-diagonal pair (unordered when `symmetric`) becomes an edge with
/// probability `p` and then carries a weight drawn from `U[0, 1)`.
pub fn sample_interaction_graph<R: Rng>(
    n: usize,
    p: f64,
    symmetric: bool,
    rng: &mut R,
) -> Result<InteractionGraph, SimError> {
    if n < 2 {
        return Err(SimError::InvalidSize(n));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(SimError::Config(format!("edge probability {p} outside [0, 1]")));
    }
    let mut g = InteractionGraph::zeros(n);
    g.symmetric = symmetric;
    for i in 0..n {
        let start = if symmetric { i + 1 } else { 0 };
        for j in start..n {
            if i == j {
                continue;
            }
            // Both draws happen for every pair so the stream consumed per pair is fixed.
            let keep = rng.random::<f64>() < p;
            let w = 1.0 - rng.random::<f64>();
            if keep {
                g.set_pair(i, j, w);
            }
        }
    }
    Ok(g)
}

/// Dense layers with weights from `intra_range`, joined only by the listed
/// `(a, b, weight)` links, which must connect different layers.
pub fn build_multilayer_graph<R: Rng>(
    layer_sizes: &[usize],
    intra_range: (f64, f64),
    inter_links: &[(usize, usize, f64)],
    rng: &mut R,
) -> Result<InteractionGraph, SimError> {
    let n: usize = layer_sizes.iter().sum();
    if n < 2 {
        return Err(SimError::InvalidSize(n));
    }
    let (lo, hi) = intra_range;
    if !(lo >= 0.0 && hi >= lo) {
        return Err(SimError::Config(format!("intra-layer range [{lo}, {hi}]")));
    }
    let mut layer_of = Vec::with_capacity(n);
    for (l, &size) in layer_sizes.iter().enumerate() {
        layer_of.extend(std::iter::repeat_n(l, size));
    }
    let mut g = InteractionGraph::zeros(n);
    for i in 0..n {
        for j in i + 1..n {
            if layer_of[i] == layer_of[j] {
                let w = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                g.set_pair(i, j, w);
            }
        }
    }
    for &(a, b, w) in inter_links {
        if a >= n || b >= n {
            return Err(SimError::Topology(format!("link ({a}, {b}) outside {n} agents")));
        }
        if layer_of[a] == layer_of[b] {
            return Err(SimError::Topology(format!(
                "link ({a}, {b}) stays inside layer {}",
                layer_of[a]
            )));
        }
        if !(w >= 0.0) {
            return Err(SimError::Config(format!("link weight {w}")));
        }
        g.set_pair(a, b, w);
    }
    Ok(g)
}

/// The two-layer weak-link preset: layers of five, intra weights in `[0.5, 1]`,
/// a single `0.3` link between agents 3 and 8.
pub fn weak_link_preset<R: Rng>(rng: &mut R) -> InteractionGraph {
    build_multilayer_graph(&[5, 5], (0.5, 1.0), &[(3, 8, 0.3)], rng).expect("preset topology is valid")
}
