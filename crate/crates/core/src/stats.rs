//! Lifelong feature statistics.
//!
//! Each editable module owns one [`RunningMoments`]. A turn's rows are
//! summarized by [`batch_moments`] and folded in with [`merge_turn`], which is
//! the pairwise (Chan et al.) combination of two moment summaries. The state
//! is O(dim) no matter how many rows have been merged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningMoments {
    mu: Vec<f64>,
    m2: Vec<f64>,
    count: u64,
    /// Number of merged turns. `sigma` switches formulas after the first.
    turns: u64,
    eps: f64,
}

impl RunningMoments {
    pub fn new(dim: usize, eps: f64) -> Self {
        RunningMoments {
            mu: vec![0.0; dim],
            m2: vec![0.0; dim],
            count: 0,
            turns: 0,
            eps,
        }
    }

    /// Rebuilds a state from its stored parts (checkpoint loading).
    pub fn from_parts(mu: Vec<f64>, m2: Vec<f64>, count: u64, turns: u64, eps: f64) -> Result<Self> {
        if mu.len() != m2.len() {
            return Err(Error::Shape(format!(
                "mu has {} entries, m2 has {}",
                mu.len(),
                m2.len()
            )));
        }
        if m2.iter().any(|&v| v < 0.0 || !v.is_finite()) || mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("running moments"));
        }
        if (count == 0) != (turns == 0) {
            return Err(Error::Config(format!(
                "inconsistent moments: count {count}, turns {turns}"
            )));
        }
        Ok(RunningMoments {
            mu,
            m2,
            count,
            turns,
            eps,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn m2(&self) -> &[f64] {
        &self.m2
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn turns(&self) -> u64 {
        self.turns
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn is_initialized(&self) -> bool {
        self.count > 0
    }

    /// Bytes held by this state: two `dim`-vectors plus three scalars.
    pub fn byte_size(&self) -> usize {
        2 * self.dim() * std::mem::size_of::<f64>()
            + 2 * std::mem::size_of::<u64>()
            + std::mem::size_of::<f64>()
    }

    /// Folds one turn's summary into the state.
    ///
    /// All ratios use the count from before the merge.
    pub fn merge_turn(&mut self, mean: &[f64], var: &[f64], n: u64) -> Result<()> {
        if n == 0 {
            return Err(Error::EmptyBatch("merge_turn with n = 0"));
        }
        if mean.len() != self.dim() || var.len() != self.dim() {
            return Err(Error::Shape(format!(
                "turn summary has dims ({}, {}), state has {}",
                mean.len(),
                var.len(),
                self.dim()
            )));
        }
        let nf = n as f64;
        if self.count == 0 {
            self.mu.copy_from_slice(mean);
            for (m2, &v) in self.m2.iter_mut().zip(var) {
                *m2 = nf * v;
            }
        } else {
            let prev = self.count as f64;
            let total = prev + nf;
            let cross = prev * nf / total;
            let shift = nf / total;
            for i in 0..self.dim() {
                let delta = mean[i] - self.mu[i];
                self.m2[i] += nf * var[i] + cross * delta * delta;
                self.mu[i] += shift * delta;
            }
        }
        self.count += n;
        self.turns += 1;
        Ok(())
    }

    /// Running standard deviation.
    ///
    /// After exactly one merged turn this is `sqrt(Var + ε)`; afterwards it is
    /// `sqrt(s² / (N − 1 + ε))`.
    pub fn sigma(&self) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Err(Error::Uninitialized);
        }
        let n = self.count as f64;
        let sigma = if self.turns == 1 {
            self.m2.iter().map(|&s| (s / n + self.eps).sqrt()).collect()
        } else {
            self.m2
                .iter()
                .map(|&s| (s / (n - 1.0 + self.eps)).sqrt())
                .collect()
        };
        Ok(sigma)
    }

    /// `(z − μ) / (σ + ε)`.
    pub fn normalize(&self, z: &[f64]) -> Result<Vec<f64>> {
        let sigma = self.sigma()?;
        self.normalize_with(&sigma, z)
    }

    /// Same as [`normalize`](Self::normalize) with a precomputed `sigma`, so a
    /// whole turn can share one evaluation.
    pub fn normalize_with(&self, sigma: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Err(Error::Uninitialized);
        }
        if z.len() != self.dim() || sigma.len() != self.dim() {
            return Err(Error::Shape(format!(
                "vector of dim {} against state of dim {}",
                z.len(),
                self.dim()
            )));
        }
        Ok(z.iter()
            .zip(&self.mu)
            .zip(sigma)
            .map(|((&z, &mu), &s)| (z - mu) / (s + self.eps))
            .collect())
    }
}

/// Per-coordinate mean and population variance of a batch of rows.
pub fn batch_moments<R: AsRef<[f64]>>(rows: &[R]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = rows
        .first()
        .ok_or(Error::EmptyBatch("batch_moments over zero rows"))?;
    let dim = first.as_ref().len();
    let mut mean = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    for (k, row) in rows.iter().enumerate() {
        let row = row.as_ref();
        if row.len() != dim {
            return Err(Error::Shape(format!(
                "row {k} has dim {}, expected {dim}",
                row.len()
            )));
        }
        let seen = (k + 1) as f64;
        for i in 0..dim {
            let delta = row[i] - mean[i];
            mean[i] += delta / seen;
            m2[i] += delta * (row[i] - mean[i]);
        }
    }
    let n = rows.len() as f64;
    let var = m2.into_iter().map(|s| (s / n).max(0.0)).collect();
    Ok((mean, var))
}
