//! Noisy checkerboard matrices with known row and column blocks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::DataMatrix;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    pub g: usize,
    pub m: usize,
    /// Gap between adjacent block levels.
    pub separation: f64,
    /// Noise std as a fraction of `separation`.
    pub noise_level: f64,
    pub missing_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 200,
            d: 100,
            g: 4,
            m: 3,
            separation: 1.0,
            noise_level: 0.3,
            missing_fraction: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Synthetic {
    pub matrix: DataMatrix,
    pub row_labels: Vec<usize>,
    pub col_labels: Vec<usize>,
    /// `g × m` block means.
    pub block_means: Vec<Vec<f64>>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.g == 0 || self.m == 0 || self.g > self.n || self.m > self.d {
            return Err(Error::InvalidConfig(format!(
                "need 1 ≤ g ≤ n and 1 ≤ m ≤ d, got g={} n={} m={} d={}",
                self.g, self.n, self.m, self.d
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::InvalidConfig("noise_level must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.missing_fraction) {
            return Err(Error::InvalidConfig("missing_fraction must lie in [0, 1)".into()));
        }
        if !(self.separation > 0.0) || !self.separation.is_finite() {
            return Err(Error::InvalidConfig("separation must be positive".into()));
        }
        Ok(())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Distinct level for every block, spread so that neighbouring blocks do
/// not get neighbouring levels.
fn block_levels(g: usize, m: usize, sep: f64) -> Vec<Vec<f64>> {
    let total = g * m;
    let mult = (2..=total).find(|&k| gcd(k, total) == 1).unwrap_or(1);
    (0..g)
        .map(|a| (0..m).map(|b| ((a * m + b) * mult % total) as f64 * sep).collect())
        .collect()
}

fn balanced_labels(count: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..count).map(|i| i * k / count).collect();
    labels.shuffle(rng);
    labels
}

pub fn synth_checkerboard(spec: &SyntheticSpec) -> Result<Synthetic> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let row_labels = balanced_labels(spec.n, spec.g, &mut rng);
    let col_labels = balanced_labels(spec.d, spec.m, &mut rng);
    let block_means = block_levels(spec.g, spec.m, spec.separation);
    let noise =
        Normal::new(0.0, spec.noise_level * spec.separation).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut values = Vec::with_capacity(spec.n * spec.d);
    let mut mask = Vec::with_capacity(spec.n * spec.d);
    for &a in &row_labels {
        for &b in &col_labels {
            values.push(block_means[a][b] + noise.sample(&mut rng));
            mask.push(rng.random::<f64>() >= spec.missing_fraction);
        }
    }
    let matrix = DataMatrix::new(spec.n, spec.d, values, mask)?;
    Ok(Synthetic {
        matrix,
        row_labels,
        col_labels,
        block_means,
    })
}
