//! Cell-level latent model: an encoder over concatenated row and column
//! latents, a decoder that reconstructs a single cell from all three
//! latents, and a mixture prior over cell latents.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{
    accumulate_prior_grad, encoder_head_grad, gaussian_log_q, normalize_weights, EncoderEstimator, HeadGrad,
    ImportanceSample, PriorEstimator, WeightSet,
};
use crate::gmm::{GaussianMixture, MixtureGrad};
use crate::linalg::{gaussian_head, gaussian_head_backward, Activation, Mlp, Parameterized, Tensor2, Trace};
use crate::side::{GradMode, Likelihood, SIGMA_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
    pub value: f64,
    pub present: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellBatch {
    cells: Vec<Cell>,
}

impl CellBatch {
    pub fn new(cells: Vec<Cell>, n: usize, d: usize) -> Result<Self> {
        for c in &cells {
            if c.row >= n || c.col >= d {
                return Err(Error::InvalidArgument(format!(
                    "cell ({}, {}) outside a {n}×{d} matrix",
                    c.row, c.col
                )));
            }
            if c.present && !c.value.is_finite() {
                return Err(Error::NonFinite(format!("cell ({}, {})", c.row, c.col)));
            }
        }
        Ok(Self { cells })
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointVae {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub prior: GaussianMixture,
    pub likelihood: Likelihood,
    row_latent: usize,
    col_latent: usize,
}

#[derive(Clone, Debug)]
pub struct JointEval {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub samples: Vec<ImportanceSample>,
    enc_trace: Trace,
    dec_traces: Vec<Trace>,
    dec_out_grads: Vec<Vec<f64>>,
}

impl JointEval {
    pub fn log_weights(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.log_weight()).collect()
    }

    pub fn reconstruction(&self) -> f64 {
        self.samples.iter().map(|s| s.log_lik).sum::<f64>() / self.samples.len() as f64
    }

    pub fn kl(&self) -> f64 {
        self.samples.iter().map(|s| s.log_q - s.log_prior).sum::<f64>() / self.samples.len() as f64
    }

    pub fn negative_elbo(&self) -> f64 {
        self.kl() - self.reconstruction()
    }

    pub fn negative_iwae(&self) -> Result<f64> {
        Ok(-normalize_weights(&self.log_weights())?.log_mean_weight())
    }

    fn weights(&self, mode: GradMode) -> Result<WeightSet> {
        match mode {
            GradMode::Elbo => Ok(WeightSet::uniform(self.log_weights())),
            GradMode::Iwae { .. } => normalize_weights(&self.log_weights()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointGrads {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub prior: MixtureGrad,
}

impl JointGrads {
    pub fn add_scaled(&mut self, a: f64, other: &JointGrads) {
        self.encoder.add_scaled(a, &other.encoder);
        self.decoder.add_scaled(a, &other.decoder);
        self.prior.add_scaled(a, &other.prior);
    }
}

impl Parameterized for JointGrads {
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

impl Parameterized for JointVae {
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

/// Loss gradients on the row and column latents fed into the joint model.
#[derive(Clone, Debug, PartialEq)]
pub struct UpstreamGrad {
    pub z_row: Vec<f64>,
    pub z_col: Vec<f64>,
}

impl JointVae {
    pub fn new<R: Rng + ?Sized>(
        row_latent: usize,
        col_latent: usize,
        latent: usize,
        hidden: usize,
        components: usize,
        likelihood: Likelihood,
        rng: &mut R,
    ) -> Result<Self> {
        if latent == 0 || components == 0 || hidden == 0 {
            return Err(Error::InvalidConfig(
                "joint dimensions and component count must be ≥ 1".into(),
            ));
        }
        let side = row_latent + col_latent;
        let encoder = Mlp::new(&[side, hidden, 2 * latent], Activation::Tanh, Activation::Identity, rng)?;
        let decoder = Mlp::new(&[latent + side, hidden, 1], Activation::Tanh, Activation::Identity, rng)?;
        let prior = GaussianMixture::from_logits(
            vec![0.0; components],
            Tensor2::from_fn(components, latent, |_, _| rng.random_range(-1.0..1.0)),
            Tensor2::zeros(components, latent),
        )?;
        Self::from_parts(encoder, decoder, prior, likelihood, row_latent, col_latent)
    }

    pub fn from_parts(
        encoder: Mlp,
        decoder: Mlp,
        prior: GaussianMixture,
        likelihood: Likelihood,
        row_latent: usize,
        col_latent: usize,
    ) -> Result<Self> {
        let latent = prior.dim();
        if encoder.input_dim() != row_latent + col_latent {
            return Err(Error::dim(
                "joint encoder input",
                row_latent + col_latent,
                encoder.input_dim(),
            ));
        }
        if encoder.output_dim() != 2 * latent {
            return Err(Error::dim("joint encoder output", 2 * latent, encoder.output_dim()));
        }
        if decoder.input_dim() != latent + row_latent + col_latent {
            return Err(Error::dim(
                "joint decoder input",
                latent + row_latent + col_latent,
                decoder.input_dim(),
            ));
        }
        if decoder.output_dim() != 1 {
            return Err(Error::dim("joint decoder output", 1, decoder.output_dim()));
        }
        Ok(Self {
            encoder,
            decoder,
            prior,
            likelihood,
            row_latent,
            col_latent,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn row_latent(&self) -> usize {
        self.row_latent
    }

    pub fn col_latent(&self) -> usize {
        self.col_latent
    }

    fn encoder_input(&self, z_row: &[f64], z_col: &[f64]) -> Result<Vec<f64>> {
        if z_row.len() != self.row_latent {
            return Err(Error::dim("row latent", self.row_latent, z_row.len()));
        }
        if z_col.len() != self.col_latent {
            return Err(Error::dim("column latent", self.col_latent, z_col.len()));
        }
        let mut v = Vec::with_capacity(z_row.len() + z_col.len());
        v.extend_from_slice(z_row);
        v.extend_from_slice(z_col);
        Ok(v)
    }

    /// Mean and std of `q(z_rc | z_r, z_c)`.
    pub fn joint_encode(&self, z_row: &[f64], z_col: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.encoder.predict(&self.encoder_input(z_row, z_col)?)?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("joint encoder activations".into()));
        }
        Ok(gaussian_head(&out, SIGMA_FLOOR))
    }

    fn decoder_input(&self, z_rc: &[f64], z_row: &[f64], z_col: &[f64]) -> Result<Vec<f64>> {
        if z_rc.len() != self.latent_dim() {
            return Err(Error::dim("cell latent", self.latent_dim(), z_rc.len()));
        }
        let mut v = Vec::with_capacity(self.decoder.input_dim());
        v.extend_from_slice(z_rc);
        v.extend(self.encoder_input(z_row, z_col)?);
        Ok(v)
    }

    /// Reconstructed cell value (a probability under the Bernoulli likelihood).
    pub fn joint_decode(&self, z_rc: &[f64], z_row: &[f64], z_col: &[f64]) -> Result<f64> {
        let out = self.decoder.predict(&self.decoder_input(z_rc, z_row, z_col)?)?;
        Ok(self.likelihood.mean(out[0]))
    }

    pub fn joint_responsibilities(&self, z_rc: &[f64]) -> Result<Vec<f64>> {
        self.prior.responsibilities(z_rc)
    }

    pub fn evaluate(
        &self,
        value: f64,
        present: bool,
        z_row: &[f64],
        z_col: &[f64],
        noise: &[Vec<f64>],
        attribution_u: &[f64],
    ) -> Result<JointEval> {
        if noise.is_empty() {
            return Err(Error::InvalidArgument("need at least one importance sample".into()));
        }
        let enc_trace = self.encoder.forward(&self.encoder_input(z_row, z_col)?)?;
        if enc_trace.output().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("joint encoder activations".into()));
        }
        let (mu, sigma) = gaussian_head(enc_trace.output(), SIGMA_FLOOR);
        let dim = self.latent_dim();
        let mut samples = Vec::with_capacity(noise.len());
        let mut dec_traces = Vec::with_capacity(noise.len());
        let mut dec_out_grads = Vec::with_capacity(noise.len());
        for (k, eps) in noise.iter().enumerate() {
            if eps.len() != dim {
                return Err(Error::dim("joint noise", dim, eps.len()));
            }
            let z: Vec<f64> = (0..dim).map(|d| mu[d] + sigma[d] * eps[d]).collect();
            let trace = self.decoder.forward(&self.decoder_input(&z, z_row, z_col)?)?;
            let (log_lik, out_grad) = self.likelihood.log_lik(&[value], &[present], trace.output())?;
            let input_grad = self.decoder.backward_into(&trace, &out_grad, 0.0, None)?;
            let (log_prior, grad_prior, responsibilities) = self.prior.log_density_and_grad(&z)?;
            samples.push(ImportanceSample {
                epsilon: eps.clone(),
                log_q: gaussian_log_q(eps, &sigma),
                z,
                log_lik,
                log_prior,
                grad_lik: input_grad[..dim].to_vec(),
                grad_prior,
                responsibilities,
                attribution_u: attribution_u.get(k).copied().unwrap_or(0.5),
            });
            dec_traces.push(trace);
            dec_out_grads.push(out_grad);
        }
        let eval = JointEval {
            mu,
            sigma,
            samples,
            enc_trace,
            dec_traces,
            dec_out_grads,
        };
        if !eval.negative_elbo().is_finite() {
            return Err(Error::NonFinite("joint negative ELBO".into()));
        }
        Ok(eval)
    }

    pub fn zero_grads(&self) -> JointGrads {
        JointGrads {
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
            prior: MixtureGrad::zeros(self.prior.num_components(), self.latent_dim()),
        }
    }

    /// Backpropagates a head gradient on `(μ_rc, σ_rc)` through the joint
    /// encoder into `acc`; returns the `scale`d gradient on the side latents.
    pub fn encoder_backward(
        &self,
        eval: &JointEval,
        head: &HeadGrad,
        scale: f64,
        acc: &mut Mlp,
    ) -> Result<UpstreamGrad> {
        let raw = gaussian_head_backward(eval.enc_trace.output(), &head.mu, &head.sigma);
        let mut gin = self.encoder.backward_into(&eval.enc_trace, &raw, scale, Some(acc))?;
        for g in &mut gin {
            *g *= scale;
        }
        Ok(UpstreamGrad {
            z_col: gin.split_off(self.row_latent),
            z_row: gin,
        })
    }

    /// Accumulates `scale ·` the loss gradient of one cell into `acc` and
    /// returns the (scaled) gradient on the side latents.
    pub fn accumulate_grads(
        &self,
        eval: &JointEval,
        mode: GradMode,
        scale: f64,
        acc: &mut JointGrads,
    ) -> Result<UpstreamGrad> {
        let weights = eval.weights(mode)?;
        let (enc_kind, prior_kind) = match mode {
            GradMode::Elbo => (EncoderEstimator::TotalDerivative, PriorEstimator::Direct),
            GradMode::Iwae { encoder, prior } => (encoder, prior),
        };
        let dim = self.latent_dim();
        let side = self.row_latent + self.col_latent;
        let mut upstream = vec![0.0; side];
        for ((trace, og), &wk) in eval.dec_traces.iter().zip(&eval.dec_out_grads).zip(&weights.normalized) {
            let gin = self
                .decoder
                .backward_into(trace, og, -scale * wk, Some(&mut acc.decoder))?;
            // direct conditioning of the decoder on the side latents
            for (u, g) in upstream.iter_mut().zip(&gin[dim..]) {
                *u -= scale * wk * g;
            }
        }
        let ones = vec![1.0; dim];
        let head = encoder_head_grad(&eval.samples, &weights, &eval.sigma, &ones, enc_kind);
        let raw = gaussian_head_backward(eval.enc_trace.output(), &head.mu, &head.sigma);
        let gin = self
            .encoder
            .backward_into(&eval.enc_trace, &raw, scale, Some(&mut acc.encoder))?;
        for (u, g) in upstream.iter_mut().zip(&gin) {
            *u += scale * g;
        }
        accumulate_prior_grad(
            &eval.samples,
            &weights,
            &eval.sigma,
            &self.prior,
            prior_kind,
            scale,
            &mut acc.prior,
        );
        Ok(UpstreamGrad {
            z_col: upstream.split_off(self.row_latent),
            z_row: upstream,
        })
    }
}
