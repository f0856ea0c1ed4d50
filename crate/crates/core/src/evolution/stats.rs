use serde::{Deserialize, Serialize};

use super::{EvolutionError, Result};
use crate::search_space::{bandit_softmax, BackboneSpec, KernelDistributions, LayerSpec, OpDistributions, KERNEL_MENU, NUM_OPS};

const MENU: usize = KERNEL_MENU.len();

/// The upper confidence bound `μ + α·√(2 ln N / Nᵢ)`; `+∞` when `Nᵢ = 0`.
pub fn ucb(mu: f64, alpha: f64, total: u64, visits: u64) -> f64 {
    if visits == 0 {
        return f64::INFINITY;
    }
    mu + alpha * (2.0 * (total as f64).ln() / visits as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Arms<const K: usize> {
    #[serde(with = "arr")]
    visits: [u64; K],
    #[serde(with = "arr")]
    sums: [f64; K],
    total: u64,
}

mod arr {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<T: Serialize, S: Serializer, const K: usize>(a: &[T; K], s: S) -> Result<S::Ok, S::Error> {
        a.as_slice().serialize(s)
    }

    pub fn deserialize<'de, T: Deserialize<'de>, D: Deserializer<'de>, const K: usize>(d: D) -> Result<[T; K], D::Error> {
        let v = Vec::<T>::deserialize(d)?;
        let n = v.len();
        v.try_into()
            .map_err(|_| serde::de::Error::invalid_length(n, &"a fixed-size array"))
    }
}

impl<const K: usize> Arms<K> {
    fn new() -> Self {
        Self {
            visits: [0; K],
            sums: [0.0; K],
            total: 0,
        }
    }

    fn record(&mut self, arm: usize, score: f64) {
        self.visits[arm] += 1;
        self.sums[arm] += score;
        self.total += 1;
    }

    fn mean(&self, arm: usize) -> Option<f64> {
        (self.visits[arm] > 0).then(|| self.sums[arm] / self.visits[arm] as f64)
    }

    fn score(&self, arm: usize, alpha: f64) -> f64 {
        ucb(self.mean(arm).unwrap_or(0.0), alpha, self.total, self.visits[arm])
    }

    fn scores(&self, alpha: f64) -> [f64; K] {
        std::array::from_fn(|i| self.score(i, alpha))
    }

    fn distribution(&self, alpha: f64) -> [f64; K] {
        bandit_softmax(&self.scores(alpha)).try_into().expect("K entries")
    }
}

/// Visit counts and score sums per (path position, op) and per (layer, kernel size).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UcbStats {
    positions: Vec<Arms<NUM_OPS>>,
    kernels: Vec<Arms<MENU>>,
}

impl UcbStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Longest attention path recorded so far.
    pub fn n_max(&self) -> usize {
        self.positions.len()
    }

    /// Samples recorded at `position` (`N`).
    pub fn total(&self, position: usize) -> u64 {
        self.positions.get(position).map_or(0, |a| a.total)
    }

    /// `Nᵢ` at `position`.
    pub fn visits(&self, position: usize, op: usize) -> u64 {
        self.positions.get(position).map_or(0, |a| a.visits[op])
    }

    pub fn score_sum(&self, position: usize, op: usize) -> f64 {
        self.positions.get(position).map_or(0.0, |a| a.sums[op])
    }

    /// Mean score of candidates whose path had `op` at `position`.
    pub fn mean(&self, position: usize, op: usize) -> Option<f64> {
        self.positions.get(position)?.mean(op)
    }

    pub fn kernel_visits(&self, layer: usize, kernel_index: usize) -> u64 {
        self.kernels.get(layer).map_or(0, |a| a.visits[kernel_index])
    }

    pub fn ucb_score(&self, position: usize, op: usize, alpha: f64) -> f64 {
        match self.positions.get(position) {
            Some(a) => a.score(op, alpha),
            None => f64::INFINITY,
        }
    }

    /// Sampling distribution over the ten ops at `position`; uniform where
    /// nothing has been recorded.
    pub fn op_distribution(&self, position: usize, alpha: f64) -> [f64; NUM_OPS] {
        self.positions
            .get(position)
            .map_or([1.0 / NUM_OPS as f64; NUM_OPS], |a| a.distribution(alpha))
    }

    pub fn kernel_distribution(&self, layer: usize, alpha: f64) -> [f64; MENU] {
        self.kernels
            .get(layer)
            .map_or([1.0 / MENU as f64; MENU], |a| a.distribution(alpha))
    }

    pub fn op_distributions(&self, alpha: f64) -> OpDistributions {
        OpDistributions::from_scores(self.positions.iter().map(|a| a.scores(alpha)).collect())
    }

    pub fn kernel_distributions(&self, alpha: f64) -> KernelDistributions {
        KernelDistributions::from_scores(self.kernels.iter().map(|a| a.scores(alpha)).collect())
    }

    /// Credits `score` to every (position, op) along each attention path and
    /// to every (layer, kernel) of the conv layers.
    pub fn record_result(&mut self, spec: &BackboneSpec, score: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&score) {
            return Err(EvolutionError::ScoreOutOfRange(score));
        }
        for (l, layer) in spec.layers.iter().enumerate() {
            match layer {
                LayerSpec::Attention(dag) => {
                    if self.positions.len() < dag.len() {
                        self.positions.resize_with(dag.len(), Arms::new);
                    }
                    for (j, node) in dag.nodes().iter().enumerate() {
                        self.positions[j].record(node.op.index(), score);
                    }
                }
                LayerSpec::Conv(k) => {
                    let idx = KERNEL_MENU.iter().position(|m| m == k).ok_or(EvolutionError::Kernel(*k))?;
                    if self.kernels.len() <= l {
                        self.kernels.resize_with(l + 1, Arms::new);
                    }
                    self.kernels[l].record(idx, score);
                }
            }
        }
        Ok(())
    }
}
