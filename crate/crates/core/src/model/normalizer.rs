use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::sim::TrajectoryBatch;

use super::{ModelError, SeqBatch};

/// Per-variable affine standardization applied before the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(vars: usize) -> Self {
        Self {
            mean: vec![0.0; vars],
            std: vec![1.0; vars],
        }
    }

    /// Mean and standard deviation of every variable over all samples, steps
    /// and agents. Constant variables keep a unit scale.
    pub fn fit(data: &TrajectoryBatch) -> Self {
        let s = data.n_vars();
        let mut sum = vec![0.0f64; s];
        let mut sq = vec![0.0f64; s];
        for chunk in data.data.chunks_exact(s) {
            for (k, &v) in chunk.iter().enumerate() {
                sum[k] += v as f64;
            }
        }
        let count = (data.data.len() / s.max(1)) as f64;
        let mean: Vec<f64> = sum.iter().map(|v| v / count).collect();
        for chunk in data.data.chunks_exact(s) {
            for (k, &v) in chunk.iter().enumerate() {
                let d = v as f64 - mean[k];
                sq[k] += d * d;
            }
        }
        let std = sq
            .iter()
            .map(|v| {
                let sd = (v / count).sqrt();
                if sd > 1e-8 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn vars(&self) -> usize {
        self.mean.len()
    }

    pub fn forward(&self, k: usize, v: f64) -> f64 {
        (v - self.mean[k]) / self.std[k]
    }

    pub fn inverse(&self, k: usize, v: f64) -> f64 {
        v * self.std[k] + self.mean[k]
    }

    /// Normalized `[samples, steps, agents, vars]` batch of the first `steps`
    /// steps of the chosen samples.
    pub fn batch<T: Real>(
        &self,
        data: &TrajectoryBatch,
        samples: &[usize],
        steps: usize,
    ) -> Result<SeqBatch<T>, ModelError> {
        let [_, t_all, n, s] = data.dims;
        if s != self.vars() {
            return Err(ModelError::Input(format!(
                "data has {s} variables, normalizer {}",
                self.vars()
            )));
        }
        if steps > t_all {
            return Err(ModelError::Input(format!("{steps} steps requested, data has {t_all}")));
        }
        let mut out = Vec::with_capacity(samples.len() * steps * n * s);
        for &i in samples {
            let x = &data.sample(i)[..steps * n * s];
            for (idx, &v) in x.iter().enumerate() {
                out.push(T::from_f64(self.forward(idx % s, v as f64)));
            }
        }
        SeqBatch::new(samples.len(), steps, n, s, out)
    }
}
