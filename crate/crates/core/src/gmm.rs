//! Diagonal Gaussian mixtures used as latent priors.
//!
//! Weights are stored as unconstrained logits and standard deviations as
//! log-stds so that gradient steps keep the mixture valid.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, log_sum_exp, take, Parameterized, Tensor2};

pub const STD_FLOOR: f64 = 1e-4;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMixture")]
pub struct GaussianMixture {
    logits: Vec<f64>,
    means: Tensor2,
    log_stds: Tensor2,
    #[serde(skip)]
    log_weights: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMixture {
    logits: Vec<f64>,
    means: Tensor2,
    log_stds: Tensor2,
}

impl TryFrom<RawMixture> for GaussianMixture {
    type Error = Error;

    fn try_from(raw: RawMixture) -> Result<Self> {
        GaussianMixture::from_logits(raw.logits, raw.means, raw.log_stds)
    }
}

/// Draw from the mixture; `z == μ_c + σ_c ⊙ ε` exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSample {
    pub z: Vec<f64>,
    pub component: usize,
    pub epsilon: Vec<f64>,
}

/// Gradient with respect to the mixture parameters (logits, means, log-stds).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureGrad {
    pub logits: Vec<f64>,
    pub means: Tensor2,
    pub log_stds: Tensor2,
}

impl MixtureGrad {
    pub fn zeros(k: usize, dim: usize) -> Self {
        Self {
            logits: vec![0.0; k],
            means: Tensor2::zeros(k, dim),
            log_stds: Tensor2::zeros(k, dim),
        }
    }

    pub fn add_scaled(&mut self, a: f64, other: &MixtureGrad) {
        axpy(&mut self.logits, a, &other.logits);
        axpy(self.means.data_mut(), a, other.means.data());
        axpy(self.log_stds.data_mut(), a, other.log_stds.data());
    }
}

impl Parameterized for MixtureGrad {
    fn num_params(&self) -> usize {
        self.logits.len() + self.means.data().len() + self.log_stds.data().len()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.logits);
        out.extend_from_slice(self.means.data());
        out.extend_from_slice(self.log_stds.data());
    }

    fn read_params(&mut self, src: &mut &[f64]) {
        let k = self.logits.len();
        self.logits.copy_from_slice(take(src, k));
        let n = self.means.data().len();
        self.means.data_mut().copy_from_slice(take(src, n));
        self.log_stds.data_mut().copy_from_slice(take(src, n));
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| l - lse).collect()
}

impl GaussianMixture {
    pub fn from_logits(logits: Vec<f64>, means: Tensor2, log_stds: Tensor2) -> Result<Self> {
        let k = logits.len();
        if k == 0 {
            return Err(Error::InvalidMixture("no components".into()));
        }
        if means.rows() != k {
            return Err(Error::dim("mixture means", k, means.rows()));
        }
        if log_stds.rows() != k || log_stds.cols() != means.cols() {
            return Err(Error::dim("mixture log-stds", k * means.cols(), log_stds.data().len()));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidMixture("non-finite logit".into()));
        }
        let log_weights = log_softmax(&logits);
        Ok(Self {
            logits,
            means,
            log_stds,
            log_weights,
        })
    }

    /// Builds a mixture from weights, means (`K × D`) and stds (`K × D`).
    /// Zero weights are clamped to `1e-300` so their logits stay finite.
    pub fn new(weights: &[f64], means: Tensor2, stds: Tensor2) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidMixture(format!(
                "weights must be a probability vector (sum {total})"
            )));
        }
        if stds.data().iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidMixture("stds must be positive".into()));
        }
        let logits = weights.iter().map(|w| w.max(1e-300).ln()).collect();
        let log_stds = Tensor2::from_fn(stds.rows(), stds.cols(), |r, c| stds.get(r, c).ln());
        Self::from_logits(logits, means, log_stds)
    }

    /// Single standard-normal component.
    pub fn standard_normal(dim: usize) -> Self {
        Self::from_logits(vec![0.0], Tensor2::zeros(1, dim), Tensor2::zeros(1, dim)).expect("standard normal is valid")
    }

    pub fn num_components(&self) -> usize {
        self.logits.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|l| l.exp()).collect()
    }

    pub fn means(&self) -> &Tensor2 {
        &self.means
    }

    pub fn log_stds(&self) -> &Tensor2 {
        &self.log_stds
    }

    pub fn mean(&self, c: usize) -> &[f64] {
        self.means.row(c)
    }

    pub fn std(&self, c: usize, d: usize) -> f64 {
        self.log_stds.get(c, d).exp()
    }

    pub fn stds(&self, c: usize) -> Vec<f64> {
        self.log_stds.row(c).iter().map(|l| l.exp()).collect()
    }

    /// Adds `shift` to every logit; the mixture itself is unchanged.
    pub fn shift_logits(&mut self, shift: f64) {
        for l in &mut self.logits {
            *l += shift;
        }
        self.log_weights = log_softmax(&self.logits);
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::dim("latent vector", self.dim(), z.len()));
        }
        Ok(())
    }

    /// `log π_k + log N(z; μ_k, σ_k)` for each component.
    pub fn component_log_joint(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z)?;
        Ok((0..self.num_components())
            .map(|k| {
                let mut s = self.log_weights[k];
                for (d, &zd) in z.iter().enumerate() {
                    let ls = self.log_stds.get(k, d);
                    let u = (zd - self.means.get(k, d)) * (-ls).exp();
                    s += -0.5 * u * u - ls - 0.5 * LN_2PI;
                }
                s
            })
            .collect())
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        let lj = self.component_log_joint(z)?;
        let v = log_sum_exp(&lj);
        if !v.is_finite() {
            return Err(Error::NonFinite("mixture log-density".into()));
        }
        Ok(v)
    }

    pub fn responsibilities(&self, z: &[f64]) -> Result<Vec<f64>> {
        let lj = self.component_log_joint(z)?;
        let lse = log_sum_exp(&lj);
        if !lse.is_finite() {
            return Err(Error::NonFinite("all component densities underflow".into()));
        }
        Ok(lj.iter().map(|l| (l - lse).exp()).collect())
    }

    /// `∇_z log p(z)`.
    pub fn grad_z(&self, z: &[f64]) -> Result<Vec<f64>> {
        let gamma = self.responsibilities(z)?;
        Ok(self.grad_z_with(z, &gamma))
    }

    fn grad_z_with(&self, z: &[f64], gamma: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; z.len()];
        for (k, &gk) in gamma.iter().enumerate() {
            for (d, gd) in g.iter_mut().enumerate() {
                let var = (2.0 * self.log_stds.get(k, d)).exp();
                *gd += gk * (self.means.get(k, d) - z[d]) / var;
            }
        }
        g
    }

    /// `log p(z)`, `∇_z log p(z)` and responsibilities in one pass.
    pub fn log_density_and_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let lj = self.component_log_joint(z)?;
        let lse = log_sum_exp(&lj);
        if !lse.is_finite() {
            return Err(Error::NonFinite("mixture log-density".into()));
        }
        let gamma: Vec<f64> = lj.iter().map(|l| (l - lse).exp()).collect();
        let g = self.grad_z_with(z, &gamma);
        Ok((lse, g, gamma))
    }

    /// Gradient of `log p(z)` with respect to the mixture parameters.
    pub fn grad_params(&self, z: &[f64]) -> Result<MixtureGrad> {
        let gamma = self.responsibilities(z)?;
        let mut out = MixtureGrad::zeros(self.num_components(), self.dim());
        self.accumulate_grad_params(z, &gamma, 1.0, &mut out);
        Ok(out)
    }

    pub(crate) fn accumulate_grad_params(&self, z: &[f64], gamma: &[f64], scale: f64, out: &mut MixtureGrad) {
        for (k, &gk) in gamma.iter().enumerate() {
            out.logits[k] += scale * (gk - self.log_weights[k].exp());
            let w = scale * gk;
            if w == 0.0 {
                continue;
            }
            for (d, &zd) in z.iter().enumerate() {
                let inv_var = (-2.0 * self.log_stds.get(k, d)).exp();
                let diff = zd - self.means.get(k, d);
                out.means.data_mut()[k * z.len() + d] += w * diff * inv_var;
                out.log_stds.data_mut()[k * z.len() + d] += w * (diff * diff * inv_var - 1.0);
            }
        }
    }

    /// Backpropagates a gradient on the responsibility vector `γ(z)` to `z`
    /// and to the mixture parameters. Returns `(dz, dparams)`.
    pub fn responsibilities_backward(&self, z: &[f64], grad_gamma: &[f64]) -> Result<(Vec<f64>, MixtureGrad)> {
        let gamma = self.responsibilities(z)?;
        if grad_gamma.len() != gamma.len() {
            return Err(Error::dim("responsibility gradient", gamma.len(), grad_gamma.len()));
        }
        let inner: f64 = gamma.iter().zip(grad_gamma).map(|(g, gg)| g * gg).sum();
        // gradient w.r.t. the unnormalized component log-joints
        let da: Vec<f64> = gamma.iter().zip(grad_gamma).map(|(g, gg)| g * (gg - inner)).collect();
        let dim = self.dim();
        let mut dz = vec![0.0; dim];
        let mut dp = MixtureGrad::zeros(self.num_components(), dim);
        let sum_da: f64 = da.iter().sum();
        for (k, &dak) in da.iter().enumerate() {
            dp.logits[k] = dak - self.log_weights[k].exp() * sum_da;
            for d in 0..dim {
                let inv_var = (-2.0 * self.log_stds.get(k, d)).exp();
                let diff = z[d] - self.means.get(k, d);
                dz[d] -= dak * diff * inv_var;
                dp.means.data_mut()[k * dim + d] = dak * diff * inv_var;
                dp.log_stds.data_mut()[k * dim + d] = dak * (diff * diff * inv_var - 1.0);
            }
        }
        Ok((dz, dp))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> MixtureSample {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut component = self.num_components() - 1;
        for (k, lw) in self.log_weights.iter().enumerate() {
            acc += lw.exp();
            if u < acc {
                component = k;
                break;
            }
        }
        let epsilon: Vec<f64> = (0..self.dim()).map(|_| StandardNormal.sample(rng)).collect();
        let z = self.reparam(component, &epsilon);
        MixtureSample { z, component, epsilon }
    }

    /// `T_p(ε; c) = μ_c + σ_c ⊙ ε`.
    pub fn reparam(&self, component: usize, epsilon: &[f64]) -> Vec<f64> {
        epsilon
            .iter()
            .enumerate()
            .map(|(d, e)| self.means.get(component, d) + self.std(component, d) * e)
            .collect()
    }

    /// `T_p⁻¹(z; c) = (z − μ_c) / σ_c`.
    pub fn inverse_reparam(&self, z: &[f64], component: usize) -> Result<Vec<f64>> {
        self.check_dim(z)?;
        if component >= self.num_components() {
            return Err(Error::InvalidArgument(format!(
                "component {component} out of range for {} components",
                self.num_components()
            )));
        }
        Ok(z.iter()
            .enumerate()
            .map(|(d, zd)| (zd - self.means.get(component, d)) / self.std(component, d))
            .collect())
    }

    /// Clamps every std to at least `floor`.
    pub fn project_std_floor(&mut self, floor: f64) {
        let lf = floor.ln();
        for v in self.log_stds.data_mut() {
            if *v < lf {
                *v = lf;
            }
        }
    }

    /// Total data log-likelihood `Σ_i log p(x_i)`.
    pub fn total_log_likelihood(&self, points: &[Vec<f64>]) -> Result<f64> {
        points.iter().map(|p| self.log_density(p)).sum()
    }
}

impl Parameterized for GaussianMixture {
    fn num_params(&self) -> usize {
        self.logits.len() + 2 * self.means.data().len()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.logits);
        out.extend_from_slice(self.means.data());
        out.extend_from_slice(self.log_stds.data());
    }

    fn read_params(&mut self, src: &mut &[f64]) {
        let k = self.logits.len();
        self.logits.copy_from_slice(take(src, k));
        let n = self.means.data().len();
        self.means.data_mut().copy_from_slice(take(src, n));
        self.log_stds.data_mut().copy_from_slice(take(src, n));
        self.log_weights = log_softmax(&self.logits);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Stop once the per-point log-likelihood improves by less than this.
    pub tol: f64,
    pub restarts: usize,
    pub std_floor: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-8,
            restarts: 3,
            std_floor: STD_FLOOR,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmFit {
    pub mixture: GaussianMixture,
    /// Total log-likelihood after each iteration of the winning restart.
    pub log_likelihoods: Vec<f64>,
    /// Components reseeded because they lost all mass.
    pub reseeds: usize,
}

/// EM with diagonal covariances and default options.
pub fn fit_em(points: &[Vec<f64>], k: usize, seed: u64) -> Result<GaussianMixture> {
    Ok(fit_em_with(points, k, seed, &EmOptions::default())?.mixture)
}

pub fn fit_em_with(points: &[Vec<f64>], k: usize, seed: u64, opts: &EmOptions) -> Result<EmFit> {
    if k == 0 {
        return Err(Error::InvalidArgument("EM needs at least one component".into()));
    }
    let n = points.len();
    if n < k {
        return Err(Error::EmFailure(format!("{n} points for {k} components")));
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::dim("EM point", dim, p.len()));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("EM input".into()));
    }
    let mut distinct: Vec<&Vec<f64>> = points.iter().collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::EmFailure(format!(
            "{} distinct points for {k} components",
            distinct.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<EmFit> = None;
    for _ in 0..opts.restarts.max(1) {
        let fit = em_run(points, k, dim, opts, &mut rng)?;
        let better = match &best {
            None => true,
            Some(b) => fit.log_likelihoods.last() > b.log_likelihoods.last(),
        };
        if better {
            best = Some(fit);
        }
    }
    let best = best.expect("at least one restart");
    if best.reseeds > 0 {
        log::debug!("EM reseeded {} empty components", best.reseeds);
    }
    Ok(best)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            let mut order: Vec<usize> = (0..points.len()).collect();
            order.shuffle(rng);
            order[0]
        };
        centers.push(points[idx].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    centers
}

fn em_run(points: &[Vec<f64>], k: usize, dim: usize, opts: &EmOptions, rng: &mut ChaCha8Rng) -> Result<EmFit> {
    let n = points.len();
    let floor = opts.std_floor;
    // global per-dimension std, used for initialization and reseeding
    let mut gmean = vec![0.0; dim];
    for p in points {
        axpy(&mut gmean, 1.0 / n as f64, p);
    }
    let gstd: Vec<f64> = (0..dim)
        .map(|d| {
            let v = points.iter().map(|p| (p[d] - gmean[d]).powi(2)).sum::<f64>() / n as f64;
            v.sqrt().max(floor)
        })
        .collect();

    let centers = kmeans_pp(points, k, rng);
    let means = Tensor2::from_fn(k, dim, |r, c| centers[r][c]);
    let log_stds = Tensor2::from_fn(k, dim, |_, c| gstd[c].ln());
    let mut gmm = GaussianMixture::from_logits(vec![0.0; k], means, log_stds)?;

    let mut lls = Vec::new();
    let mut reseeds = 0;
    let mut resp = vec![vec![0.0; k]; n];
    for _ in 0..opts.max_iter {
        // E-step
        let mut ll = 0.0;
        for (i, p) in points.iter().enumerate() {
            let lj = gmm.component_log_joint(p)?;
            let lse = log_sum_exp(&lj);
            ll += lse;
            for c in 0..k {
                resp[i][c] = (lj[c] - lse).exp();
            }
        }
        if !ll.is_finite() {
            return Err(Error::EmFailure("non-finite log-likelihood".into()));
        }
        lls.push(ll);
        if lls.len() >= 2 {
            let prev = lls[lls.len() - 2];
            if (ll - prev).abs() <= opts.tol * n as f64 {
                break;
            }
        }

        // M-step
        let mut logits = vec![0.0; k];
        let mut means = Tensor2::zeros(k, dim);
        let mut log_stds = Tensor2::zeros(k, dim);
        for c in 0..k {
            let nk: f64 = resp.iter().map(|r| r[c]).sum();
            if nk < 1e-8 {
                // empty: restart at the point worst explained by the current fit
                reseeds += 1;
                let far = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, gmm.log_density(p).unwrap_or(f64::NEG_INFINITY)))
                    .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite"))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                logits[c] = (1.0 / n as f64).ln();
                for d in 0..dim {
                    means.set(c, d, points[far][d]);
                    log_stds.set(c, d, gstd[d].ln());
                }
                continue;
            }
            logits[c] = (nk / n as f64).ln();
            for d in 0..dim {
                let mu = resp.iter().zip(points).map(|(r, p)| r[c] * p[d]).sum::<f64>() / nk;
                let var = resp
                    .iter()
                    .zip(points)
                    .map(|(r, p)| r[c] * (p[d] - mu).powi(2))
                    .sum::<f64>()
                    / nk;
                means.set(c, d, mu);
                log_stds.set(c, d, var.sqrt().max(floor).ln());
            }
        }
        gmm = GaussianMixture::from_logits(logits, means, log_stds)?;
    }
    let final_ll = gmm.total_log_likelihood(points)?;
    if lls.last() != Some(&final_ll) {
        lls.push(final_ll);
    }
    Ok(EmFit {
        mixture: gmm,
        log_likelihoods: lls,
        reseeds,
    })
}

/// Standard normal log-density of a vector, `Σ_d log N(x_d; 0, 1)`.
pub fn std_normal_log_density(x: &[f64]) -> f64 {
    x.iter().map(|v| -0.5 * v * v).sum::<f64>() - 0.5 * x.len() as f64 * (2.0 * PI).ln()
}
