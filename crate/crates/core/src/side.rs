//! One side of the co-clustering model: a VAE over rows (instances) or
//! columns (features) with a Gaussian-mixture prior and a per-dimension
//! scale vector on the reconstruction path.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{
    accumulate_prior_grad, encoder_head_grad, gaussian_log_q, normalize_weights, EncoderEstimator, HeadGrad,
    ImportanceSample, PriorEstimator, WeightSet,
};
use crate::gmm::{GaussianMixture, MixtureGrad};
use crate::linalg::{gaussian_head, gaussian_head_backward, sigmoid, softplus, Activation, Mlp, Parameterized, Trace};

pub const SIGMA_FLOOR: f64 = 1e-6;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Row,
    Column,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    #[default]
    GaussianUnitVariance,
    /// Decoder outputs are logits squashed through a sigmoid.
    Bernoulli,
}

impl Likelihood {
    /// Log-likelihood of `x` given raw decoder outputs, and its gradient
    /// with respect to those outputs. Absent entries contribute nothing.
    pub fn log_lik(self, x: &[f64], present: &[bool], out: &[f64]) -> Result<(f64, Vec<f64>)> {
        if x.len() != out.len() || present.len() != out.len() {
            return Err(Error::dim("reconstruction target", out.len(), x.len()));
        }
        let mut total = 0.0;
        let mut grad = vec![0.0; out.len()];
        for d in 0..out.len() {
            if !present[d] {
                continue;
            }
            match self {
                Likelihood::GaussianUnitVariance => {
                    let r = x[d] - out[d];
                    total += -0.5 * r * r - 0.5 * LN_2PI;
                    grad[d] = r;
                }
                Likelihood::Bernoulli => {
                    if !(0.0..=1.0).contains(&x[d]) {
                        return Err(Error::InvalidData(format!(
                            "bernoulli likelihood needs values in [0, 1], got {}",
                            x[d]
                        )));
                    }
                    // x log σ(o) + (1 − x) log(1 − σ(o)) = x o − softplus(o)
                    total += x[d] * out[d] - softplus(out[d]);
                    grad[d] = x[d] - sigmoid(out[d]);
                }
            }
        }
        Ok((total, grad))
    }

    /// Maps raw decoder outputs to the reconstruction mean.
    pub fn mean(self, out: f64) -> f64 {
        match self {
            Likelihood::GaussianUnitVariance => out,
            Likelihood::Bernoulli => sigmoid(out),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorParams {
    pub mu_raw: Vec<f64>,
    pub mu_scaled: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// One data item as seen by a side VAE: the encoder input (missing entries
/// imputed), the reconstruction target and its presence mask.
#[derive(Clone, Copy, Debug)]
pub struct SideItem<'a> {
    pub input: &'a [f64],
    pub target: &'a [f64],
    pub present: &'a [bool],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SideVae {
    pub side: Side,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub prior: GaussianMixture,
    pub scale: Vec<f64>,
    pub likelihood: Likelihood,
}

/// Which gradient the side objective produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// Exact gradient of the Monte-Carlo negative ELBO under frozen noise.
    Elbo,
    /// Importance-weighted bound with the given estimators.
    Iwae {
        encoder: EncoderEstimator,
        prior: PriorEstimator,
    },
}

/// Everything computed for one item under fixed noise, reused by the
/// gradient routines.
#[derive(Clone, Debug)]
pub struct SideEval {
    pub post: PosteriorParams,
    pub enc_trace: Trace,
    pub samples: Vec<ImportanceSample>,
    dec_traces: Vec<Trace>,
    dec_out_grads: Vec<Vec<f64>>,
}

impl SideEval {
    pub fn log_weights(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.log_weight()).collect()
    }

    /// Mean reconstruction log-likelihood over samples.
    pub fn reconstruction(&self) -> f64 {
        self.samples.iter().map(|s| s.log_lik).sum::<f64>() / self.samples.len() as f64
    }

    /// Monte-Carlo KL estimate, mean of `log q(z') − log p(z')`.
    pub fn kl(&self) -> f64 {
        self.samples.iter().map(|s| s.log_q - s.log_prior).sum::<f64>() / self.samples.len() as f64
    }

    pub fn negative_elbo(&self) -> f64 {
        self.kl() - self.reconstruction()
    }

    /// Negated importance-weighted bound `−log (1/K Σ w_k)`.
    pub fn negative_iwae(&self) -> Result<f64> {
        Ok(-normalize_weights(&self.log_weights())?.log_mean_weight())
    }

    pub fn weights(&self, mode: GradMode) -> Result<WeightSet> {
        match mode {
            GradMode::Elbo => Ok(WeightSet::uniform(self.log_weights())),
            GradMode::Iwae { .. } => normalize_weights(&self.log_weights()),
        }
    }
}

/// Gradient container shaped like a [`SideVae`]'s trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SideGrads {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub prior: MixtureGrad,
}

impl SideGrads {
    pub fn add_scaled(&mut self, a: f64, other: &SideGrads) {
        self.encoder.add_scaled(a, &other.encoder);
        self.decoder.add_scaled(a, &other.decoder);
        self.prior.add_scaled(a, &other.prior);
    }
}

impl Parameterized for SideGrads {
    fn num_params(&self) -> usize {
        self.encoder.num_params() + self.decoder.num_params() + self.prior.num_params()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        self.encoder.write_params(out);
        self.decoder.write_params(out);
        self.prior.write_params(out);
    }

    fn read_params(&mut self, src: &mut &[f64]) {
        self.encoder.read_params(src);
        self.decoder.read_params(src);
        self.prior.read_params(src);
    }
}

impl Parameterized for SideVae {
    fn num_params(&self) -> usize {
        self.encoder.num_params() + self.decoder.num_params() + self.prior.num_params()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        self.encoder.write_params(out);
        self.decoder.write_params(out);
        self.prior.write_params(out);
    }

    fn read_params(&mut self, src: &mut &[f64]) {
        self.encoder.read_params(src);
        self.decoder.read_params(src);
        self.prior.read_params(src);
    }
}

/// Draws `k` standard-normal vectors of length `dim`.
pub fn draw_noise<R: Rng + ?Sized>(rng: &mut R, k: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

impl SideVae {
    /// `hidden` lists encoder hidden widths; the decoder mirrors them.
    pub fn new<R: Rng + ?Sized>(
        side: Side,
        input_dim: usize,
        latent_dim: usize,
        hidden: &[usize],
        components: usize,
        likelihood: Likelihood,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || latent_dim == 0 || components == 0 {
            return Err(Error::InvalidConfig(
                "side dimensions and component count must be ≥ 1".into(),
            ));
        }
        let mut enc_dims = vec![input_dim];
        enc_dims.extend_from_slice(hidden);
        enc_dims.push(2 * latent_dim);
        let mut dec_dims = vec![latent_dim];
        dec_dims.extend(hidden.iter().rev());
        dec_dims.push(input_dim);
        let encoder = Mlp::new(&enc_dims, Activation::Tanh, Activation::Identity, rng)?;
        let decoder = Mlp::new(&dec_dims, Activation::Tanh, Activation::Identity, rng)?;
        // Components spread on a small random layout until EM replaces them.
        let prior = GaussianMixture::from_logits(
            vec![0.0; components],
            crate::linalg::Tensor2::from_fn(components, latent_dim, |_, _| rng.random_range(-1.0..1.0)),
            crate::linalg::Tensor2::zeros(components, latent_dim),
        )?;
        Self::from_parts(side, encoder, decoder, prior, vec![1.0; latent_dim], likelihood)
    }

    pub fn from_parts(
        side: Side,
        encoder: Mlp,
        decoder: Mlp,
        prior: GaussianMixture,
        scale: Vec<f64>,
        likelihood: Likelihood,
    ) -> Result<Self> {
        let latent = prior.dim();
        if encoder.output_dim() != 2 * latent {
            return Err(Error::dim("encoder output", 2 * latent, encoder.output_dim()));
        }
        if decoder.input_dim() != latent {
            return Err(Error::dim("decoder input", latent, decoder.input_dim()));
        }
        if decoder.output_dim() != encoder.input_dim() {
            return Err(Error::dim("decoder output", encoder.input_dim(), decoder.output_dim()));
        }
        if scale.len() != latent {
            return Err(Error::dim("scale vector", latent, scale.len()));
        }
        if scale.iter().any(|f| !(*f >= 1.0) || !f.is_finite()) {
            return Err(Error::InvalidArgument("scale entries must be finite and ≥ 1".into()));
        }
        Ok(Self {
            side,
            encoder,
            decoder,
            prior,
            scale,
            likelihood,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    fn posterior_from(&self, out: &[f64]) -> Result<PosteriorParams> {
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{:?} encoder activations", self.side)));
        }
        let (mu_raw, sigma) = gaussian_head(out, SIGMA_FLOOR);
        let mu_scaled = mu_raw.iter().zip(&self.scale).map(|(m, f)| m * f).collect();
        Ok(PosteriorParams {
            mu_raw,
            mu_scaled,
            sigma,
        })
    }

    pub fn encode(&self, x: &[f64]) -> Result<PosteriorParams> {
        let out = self.encoder.predict(x)?;
        self.posterior_from(&out)
    }

    pub fn encode_traced(&self, x: &[f64]) -> Result<(PosteriorParams, Trace)> {
        let trace = self.encoder.forward(x)?;
        let post = self.posterior_from(trace.output())?;
        Ok((post, trace))
    }

    /// Reconstruction mean for latent `z`.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .decoder
            .predict(z)?
            .into_iter()
            .map(|o| self.likelihood.mean(o))
            .collect())
    }

    pub fn reconstruction_log_likelihood(&self, x: &[f64], present: &[bool], z: &[f64]) -> Result<f64> {
        let out = self.decoder.predict(z)?;
        Ok(self.likelihood.log_lik(x, present, &out)?.0)
    }

    /// Evaluates all per-sample terms for one item under frozen noise.
    /// `attribution_u` may be empty when sampled attribution is unused.
    pub fn evaluate(&self, item: SideItem<'_>, noise: &[Vec<f64>], attribution_u: &[f64]) -> Result<SideEval> {
        if noise.is_empty() {
            return Err(Error::InvalidArgument("need at least one importance sample".into()));
        }
        let (post, enc_trace) = self.encode_traced(item.input)?;
        let dim = self.latent_dim();
        let mut samples = Vec::with_capacity(noise.len());
        let mut dec_traces = Vec::with_capacity(noise.len());
        let mut dec_out_grads = Vec::with_capacity(noise.len());
        for (k, eps) in noise.iter().enumerate() {
            if eps.len() != dim {
                return Err(Error::dim("encoder noise", dim, eps.len()));
            }
            let z_recon: Vec<f64> = (0..dim).map(|d| post.mu_scaled[d] + post.sigma[d] * eps[d]).collect();
            let z: Vec<f64> = (0..dim).map(|d| post.mu_raw[d] + post.sigma[d] * eps[d]).collect();
            let trace = self.decoder.forward(&z_recon)?;
            let (log_lik, out_grad) = self.likelihood.log_lik(item.target, item.present, trace.output())?;
            let grad_lik = self.decoder.backward_into(&trace, &out_grad, 0.0, None)?;
            let (log_prior, grad_prior, responsibilities) = self.prior.log_density_and_grad(&z)?;
            let log_q = gaussian_log_q(eps, &post.sigma);
            samples.push(ImportanceSample {
                epsilon: eps.clone(),
                z,
                log_lik,
                log_prior,
                log_q,
                grad_lik,
                grad_prior,
                responsibilities,
                attribution_u: attribution_u.get(k).copied().unwrap_or(0.5),
            });
            dec_traces.push(trace);
            dec_out_grads.push(out_grad);
        }
        let eval = SideEval {
            post,
            enc_trace,
            samples,
            dec_traces,
            dec_out_grads,
        };
        if !eval.negative_elbo().is_finite() {
            return Err(Error::NonFinite(format!("{:?} negative ELBO", self.side)));
        }
        Ok(eval)
    }

    /// Monte-Carlo negative ELBO with `k` fresh samples.
    pub fn negative_elbo<R: Rng + ?Sized>(&self, item: SideItem<'_>, k: usize, rng: &mut R) -> Result<(f64, SideEval)> {
        let noise = draw_noise(rng, k, self.latent_dim());
        let eval = self.evaluate(item, &noise, &[])?;
        Ok((eval.negative_elbo(), eval))
    }

    pub fn zero_grads(&self) -> SideGrads {
        SideGrads {
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
            prior: MixtureGrad::zeros(self.prior.num_components(), self.latent_dim()),
        }
    }

    /// Accumulates `scale ·` (loss gradient of this item's objective) into
    /// `acc`, plus any extra head gradient from other terms.
    pub fn accumulate_grads(
        &self,
        eval: &SideEval,
        mode: GradMode,
        scale: f64,
        extra_head: Option<&HeadGrad>,
        acc: &mut SideGrads,
    ) -> Result<()> {
        let weights = eval.weights(mode)?;
        let (enc_kind, prior_kind) = match mode {
            GradMode::Elbo => (EncoderEstimator::TotalDerivative, PriorEstimator::Direct),
            GradMode::Iwae { encoder, prior } => (encoder, prior),
        };
        // decoder: −Σ w̃_k ∇ log p(x | z_k)
        for ((trace, og), &wk) in eval.dec_traces.iter().zip(&eval.dec_out_grads).zip(&weights.normalized) {
            self.decoder
                .backward_into(trace, og, -scale * wk, Some(&mut acc.decoder))?;
        }
        let mut head = encoder_head_grad(&eval.samples, &weights, &eval.post.sigma, &self.scale, enc_kind);
        if let Some(extra) = extra_head {
            for d in 0..head.mu.len() {
                head.mu[d] += extra.mu[d];
                head.sigma[d] += extra.sigma[d];
            }
        }
        self.encoder_backward(eval, &head, scale, &mut acc.encoder)?;
        accumulate_prior_grad(
            &eval.samples,
            &weights,
            &eval.post.sigma,
            &self.prior,
            prior_kind,
            scale,
            &mut acc.prior,
        );
        Ok(())
    }

    /// Backpropagates a head gradient `(∂/∂μ', ∂/∂σ)` through the encoder,
    /// accumulating `scale ·` the result.
    pub fn encoder_backward(&self, eval: &SideEval, head: &HeadGrad, scale: f64, acc: &mut Mlp) -> Result<()> {
        self.encoder_backward_trace(&eval.enc_trace, head, scale, acc)
    }

    /// Same as [`SideVae::encoder_backward`] from a bare encoder trace.
    pub fn encoder_backward_trace(&self, trace: &Trace, head: &HeadGrad, scale: f64, acc: &mut Mlp) -> Result<()> {
        let raw = gaussian_head_backward(trace.output(), &head.mu, &head.sigma);
        self.encoder.backward_into(trace, &raw, scale, Some(acc))?;
        Ok(())
    }

    /// Head gradient induced by a gradient `g` on the reconstruction-path
    /// latent of sample `k`.
    pub fn recon_latent_head(&self, eval: &SideEval, k: usize, g: &[f64]) -> HeadGrad {
        let eps = &eval.samples[k].epsilon;
        HeadGrad {
            mu: g.iter().zip(&self.scale).map(|(gi, f)| gi * f).collect(),
            sigma: g.iter().zip(eps).map(|(gi, e)| gi * e).collect(),
        }
    }

    /// Head gradient induced by a gradient `g` on the prior-path latent
    /// `z'` of sample `k`.
    pub fn prior_latent_head(&self, eval: &SideEval, k: usize, g: &[f64]) -> HeadGrad {
        let eps = &eval.samples[k].epsilon;
        HeadGrad {
            mu: g.to_vec(),
            sigma: g.iter().zip(eps).map(|(gi, e)| gi * e).collect(),
        }
    }

    /// Per-dimension rule `f_d = clamp(τ / (std_d(μ') + 1e-8), 1, f_max)`.
    pub fn compute_scale(mu_raw: &[Vec<f64>], tau: f64, f_max: f64) -> Result<Vec<f64>> {
        if mu_raw.len() < 2 {
            return Err(Error::InvalidArgument("scale update needs at least two items".into()));
        }
        let dim = mu_raw[0].len();
        let n = mu_raw.len() as f64;
        Ok((0..dim)
            .map(|d| {
                let mean = mu_raw.iter().map(|m| m[d]).sum::<f64>() / n;
                let var = mu_raw.iter().map(|m| (m[d] - mean).powi(2)).sum::<f64>() / n;
                (tau / (var.sqrt() + 1e-8)).clamp(1.0, f_max)
            })
            .collect())
    }

    /// Recomputes the scale vector from the encoder means of `inputs`.
    pub fn update_scale(&mut self, inputs: &[&[f64]], tau: f64, f_max: f64) -> Result<Vec<f64>> {
        let mus = inputs
            .iter()
            .map(|x| self.encode(x).map(|p| p.mu_raw))
            .collect::<Result<Vec<_>>>()?;
        self.scale = Self::compute_scale(&mus, tau, f_max)?;
        Ok(self.scale.clone())
    }

    /// Soft cluster membership from the unscaled posterior mean.
    pub fn cluster_assign(&self, x: &[f64]) -> Result<Vec<f64>> {
        let post = self.encode(x)?;
        self.prior.responsibilities(&post.mu_raw)
    }

    /// Soft cluster membership from one posterior sample.
    pub fn cluster_assign_sampled<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let post = self.encode(x)?;
        let z: Vec<f64> = post
            .mu_raw
            .iter()
            .zip(&post.sigma)
            .map(|(m, s)| {
                let e: f64 = StandardNormal.sample(rng);
                m + s * e
            })
            .collect();
        self.prior.responsibilities(&z)
    }
}
