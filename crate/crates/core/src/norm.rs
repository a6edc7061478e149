//! Per-feature standardization applied before diffusion training.

use serde::{Deserialize, Serialize};

/// Features whose spread falls below this are scaled as if they had it.
pub const STD_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    pub fn identity(dim: usize) -> Self {
        FeatureNorm { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Fits mean and (population) standard deviation per column.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Self {
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut n = 0usize;
        for row in rows {
            assert_eq!(row.len(), dim, "feature row width");
            for (i, &v) in row.iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
            n += 1;
        }
        if n == 0 {
            return Self::identity(dim);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n as f64 - m * m).max(0.0).sqrt().max(STD_FLOOR))
            .collect();
        FeatureNorm { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f32> {
        x.iter().enumerate().map(|(i, v)| ((v - self.mean[i % self.dim()]) / self.std[i % self.dim()]) as f32).collect()
    }

    /// Inverse of [`normalize`](Self::normalize); inputs may hold several rows back to back.
    pub fn denormalize(&self, x: &[f32]) -> Vec<f64> {
        x.iter().enumerate().map(|(i, &v)| v as f64 * self.std[i % self.dim()] + self.mean[i % self.dim()]).collect()
    }
}
