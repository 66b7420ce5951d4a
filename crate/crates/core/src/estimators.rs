//! Importance-weighted gradient estimators for a diagonal Gaussian encoder
//! `q(z | x) = N(μ', σ²)` with a mixture prior.
//!
//! Every function returns gradients of the *loss*, i.e. the negated
//! objective. The reconstruction path may use a scaled latent
//! `f ⊙ μ' + σ ⊙ ε` while the prior and `q` see `z' = μ' + σ ⊙ ε`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{GaussianMixture, MixtureGrad};
use crate::linalg::log_sum_exp;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Per-sample quantities of one importance sample.
#[derive(Clone, Debug)]
pub struct ImportanceSample {
    /// Encoder noise ε.
    pub epsilon: Vec<f64>,
    /// Latent on the prior path, `μ' + σ ⊙ ε`.
    pub z: Vec<f64>,
    pub log_lik: f64,
    pub log_prior: f64,
    pub log_q: f64,
    /// `∂ log p(x | ·) / ∂ z` at the reconstruction latent.
    pub grad_lik: Vec<f64>,
    /// `∇ log p(z)`.
    pub grad_prior: Vec<f64>,
    /// Prior responsibilities at `z`.
    pub responsibilities: Vec<f64>,
    /// Uniform draw used only by [`Attribution::Sampled`].
    pub attribution_u: f64,
}

impl ImportanceSample {
    pub fn log_weight(&self) -> f64 {
        self.log_lik + self.log_prior - self.log_q
    }

    /// `∂ log w / ∂ z` with the encoder parameters held fixed.
    pub fn grad_log_weight(&self, sigma: &[f64]) -> Vec<f64> {
        (0..self.z.len())
            .map(|d| self.grad_lik[d] + self.grad_prior[d] + self.epsilon[d] / sigma[d])
            .collect()
    }
}

/// `log N(μ + σ ⊙ ε; μ, σ²)`, which depends on σ and ε only.
pub fn gaussian_log_q(epsilon: &[f64], sigma: &[f64]) -> f64 {
    epsilon
        .iter()
        .zip(sigma)
        .map(|(e, s)| -0.5 * e * e - s.ln() - 0.5 * LN_2PI)
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet {
    pub log_weights: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl WeightSet {
    /// `log (1/K Σ w_k)`, the importance-weighted bound.
    pub fn log_mean_weight(&self) -> f64 {
        log_sum_exp(&self.log_weights) - (self.log_weights.len() as f64).ln()
    }

    /// Equal weights `1/K`, which turn every estimator below into the
    /// plain Monte-Carlo ELBO gradient.
    pub fn uniform(log_weights: Vec<f64>) -> Self {
        let k = log_weights.len();
        Self {
            log_weights,
            normalized: vec![1.0 / k as f64; k],
        }
    }
}

pub fn normalize_weights(log_weights: &[f64]) -> Result<WeightSet> {
    if log_weights.is_empty() {
        return Err(Error::InvalidArgument("no importance samples".into()));
    }
    if let Some(i) = log_weights.iter().position(|w| !w.is_finite()) {
        return Err(Error::NonFinite(format!("log-weight {i}")));
    }
    let lse = log_sum_exp(log_weights);
    Ok(WeightSet {
        log_weights: log_weights.to_vec(),
        normalized: log_weights.iter().map(|w| (w - lse).exp()).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderEstimator {
    /// Doubly reparameterized: squared weights, no score term.
    Dreg,
    /// Exact gradient of the Monte-Carlo bound under frozen noise.
    TotalDerivative,
    /// REINFORCE with the bound itself as the reward.
    Score,
}

/// How a latent drawn from `q` is attributed to prior components when it
/// is reinterpreted as a reparameterized prior sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribution {
    /// Spread over components by responsibility.
    Weighted,
    /// All mass on the most responsible component.
    Argmax,
    /// One component drawn from the responsibilities.
    Sampled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "attribution")]
pub enum PriorEstimator {
    /// Generalized doubly reparameterized gradient for means and log-stds.
    Gdreg(Attribution),
    /// `Σ w̃_k ∇ log p(z_k)`, the score of the prior density.
    Direct,
}

/// Loss gradient with respect to the Gaussian head `(μ', σ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrad {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl HeadGrad {
    pub fn zeros(dim: usize) -> Self {
        Self {
            mu: vec![0.0; dim],
            sigma: vec![0.0; dim],
        }
    }
}

/// Encoder head gradient. `scale` is the reconstruction-path factor `f`
/// (all ones when the reconstruction latent equals `z`).
pub fn encoder_head_grad(
    samples: &[ImportanceSample],
    weights: &WeightSet,
    sigma: &[f64],
    scale: &[f64],
    kind: EncoderEstimator,
) -> HeadGrad {
    let dim = sigma.len();
    let mut g = HeadGrad::zeros(dim);
    let bound = weights.log_mean_weight();
    for (s, &wk) in samples.iter().zip(&weights.normalized) {
        let gw = s.grad_log_weight(sigma);
        for d in 0..dim {
            let shift = (scale[d] - 1.0) * s.grad_lik[d];
            let e = s.epsilon[d];
            let (gm, gs) = match kind {
                EncoderEstimator::Dreg => (wk * wk * gw[d] + wk * shift, wk * wk * gw[d] * e),
                EncoderEstimator::TotalDerivative => (
                    wk * (gw[d] + shift - e / sigma[d]),
                    wk * (gw[d] * e - (e * e - 1.0) / sigma[d]),
                ),
                EncoderEstimator::Score => (
                    bound * e / sigma[d] + wk * (shift - e / sigma[d]),
                    (bound - wk) * (e * e - 1.0) / sigma[d],
                ),
            };
            g.mu[d] -= gm;
            g.sigma[d] -= gs;
        }
    }
    g
}

/// Loss gradient of the prior parameters.
pub fn prior_grad(
    samples: &[ImportanceSample],
    weights: &WeightSet,
    sigma: &[f64],
    prior: &GaussianMixture,
    kind: PriorEstimator,
) -> MixtureGrad {
    let mut out = MixtureGrad::zeros(prior.num_components(), prior.dim());
    accumulate_prior_grad(samples, weights, sigma, prior, kind, 1.0, &mut out);
    out
}

pub(crate) fn accumulate_prior_grad(
    samples: &[ImportanceSample],
    weights: &WeightSet,
    sigma: &[f64],
    prior: &GaussianMixture,
    kind: PriorEstimator,
    scale: f64,
    out: &mut MixtureGrad,
) {
    match kind {
        PriorEstimator::Direct => {
            for (s, &wk) in samples.iter().zip(&weights.normalized) {
                prior.accumulate_grad_params(&s.z, &s.responsibilities, -scale * wk, out);
            }
        }
        PriorEstimator::Gdreg(attribution) => {
            let k = prior.num_components();
            let dim = prior.dim();
            let pi = prior.weights();
            for (s, &wk) in samples.iter().zip(&weights.normalized) {
                // Logits cannot be reached by reparameterization; use the
                // direct term for them.
                for c in 0..k {
                    out.logits[c] -= scale * wk * (s.responsibilities[c] - pi[c]);
                }
                let gw = s.grad_log_weight(sigma);
                let coeff: Vec<f64> = (0..dim).map(|d| wk * s.grad_lik[d] - wk * wk * gw[d]).collect();
                let attributed = attribute(&s.responsibilities, s.attribution_u, attribution);
                for (c, a) in attributed {
                    let mu = prior.mean(c);
                    for d in 0..dim {
                        out.means.data_mut()[c * dim + d] -= scale * a * coeff[d];
                        out.log_stds.data_mut()[c * dim + d] -= scale * a * coeff[d] * (s.z[d] - mu[d]);
                    }
                }
            }
        }
    }
}

fn attribute(gamma: &[f64], u: f64, mode: Attribution) -> Vec<(usize, f64)> {
    match mode {
        Attribution::Weighted => gamma.iter().copied().enumerate().filter(|(_, g)| *g > 0.0).collect(),
        Attribution::Argmax => vec![(argmax(gamma), 1.0)],
        Attribution::Sampled => {
            let mut acc = 0.0;
            for (c, &g) in gamma.iter().enumerate() {
                acc += g;
                if u < acc {
                    return vec![(c, 1.0)];
                }
            }
            vec![(gamma.len() - 1, 1.0)]
        }
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-sample multipliers on `∇_θ log p(x | z_k)` for the decoder loss
/// gradient, i.e. `−w̃_k`.
pub fn decoder_sample_weights(weights: &WeightSet) -> Vec<f64> {
    weights.normalized.iter().map(|w| -w).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreTarget {
    Encoder,
    Prior,
}

/// Gradients as [`encoder_head_grad`] / [`prior_grad`] would give them,
/// but computed with the score-function baseline estimators.
#[derive(Clone, Debug)]
pub enum ScoreGrad {
    Encoder(HeadGrad),
    Prior(MixtureGrad),
}

pub fn naive_score_grad(
    samples: &[ImportanceSample],
    weights: &WeightSet,
    sigma: &[f64],
    scale: &[f64],
    prior: &GaussianMixture,
    target: ScoreTarget,
) -> ScoreGrad {
    match target {
        ScoreTarget::Encoder => ScoreGrad::Encoder(encoder_head_grad(
            samples,
            weights,
            sigma,
            scale,
            EncoderEstimator::Score,
        )),
        ScoreTarget::Prior => ScoreGrad::Prior(prior_grad(samples, weights, sigma, prior, PriorEstimator::Direct)),
    }
}
