//! Contrastive (InfoNCE) terms and the mutual-information cross-loss over
//! soft co-cluster memberships.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::DataMatrix;
use crate::error::{Error, Result};
use crate::gmm::{GaussianMixture, MixtureGrad};
use crate::linalg::{axpy, dot, log_sum_exp, take, Activation, Mlp, Parameterized, Tensor2};

/// Below this the data carry no row/column dependence worth preserving.
pub const MI_EPSILON: f64 = 1e-10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticKind {
    #[default]
    Bilinear,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticParams {
    /// `h(x, z) = (W x) · z` with `W` of shape `latent × features`.
    Bilinear(Tensor2),
    /// `h(x, z) = mlp([x, z])`.
    Mlp(Mlp),
}

impl CriticParams {
    fn zeros_like(&self) -> Self {
        match self {
            CriticParams::Bilinear(w) => CriticParams::Bilinear(Tensor2::zeros(w.rows(), w.cols())),
            CriticParams::Mlp(m) => CriticParams::Mlp(m.zeros_like()),
        }
    }

    pub fn add_scaled(&mut self, a: f64, other: &CriticParams) {
        match (self, other) {
            (CriticParams::Bilinear(w), CriticParams::Bilinear(o)) => axpy(w.data_mut(), a, o.data()),
            (CriticParams::Mlp(m), CriticParams::Mlp(o)) => m.add_scaled(a, o),
            _ => panic!("critic kinds differ"),
        }
    }
}

impl Parameterized for CriticParams {
    fn num_params(&self) -> usize {
        match self {
            CriticParams::Bilinear(w) => w.data().len(),
            CriticParams::Mlp(m) => m.num_params(),
        }
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        match self {
            CriticParams::Bilinear(w) => out.extend_from_slice(w.data()),
            CriticParams::Mlp(m) => m.write_params(out),
        }
    }

    fn read_params(&mut self, src: &mut &[f64]) {
        match self {
            CriticParams::Bilinear(w) => {
                let n = w.data().len();
                w.data_mut().copy_from_slice(take(src, n));
            }
            CriticParams::Mlp(m) => m.read_params(src),
        }
    }
}

/// Positive critic `f(x, z) = exp(h(x, z) / temperature)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfoNceCritic {
    pub params: CriticParams,
    pub temperature: f64,
}

/// Loss gradients of `−c` for one batch.
#[derive(Clone, Debug)]
pub struct InfoNceGrads {
    pub critic: CriticParams,
    /// One entry per latent in the batch.
    pub z: Vec<Vec<f64>>,
}

impl InfoNceCritic {
    pub fn new<R: Rng + ?Sized>(
        kind: CriticKind,
        features: usize,
        latent: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidConfig("critic temperature must be positive".into()));
        }
        let params = match kind {
            CriticKind::Bilinear => {
                let limit = 1.0 / (features.max(1) as f64).sqrt();
                CriticParams::Bilinear(Tensor2::from_fn(latent, features, |_, _| {
                    rng.random_range(-limit..=limit)
                }))
            }
            CriticKind::Mlp => CriticParams::Mlp(Mlp::new(
                &[features + latent, 16, 1],
                Activation::Tanh,
                Activation::Identity,
                rng,
            )?),
        };
        Ok(Self { params, temperature })
    }

    pub fn zero_grads(&self) -> CriticParams {
        self.params.zeros_like()
    }

    /// `h(x, z) / temperature`, the log of the critic value.
    pub fn log_score(&self, x: &[f64], z: &[f64]) -> Result<f64> {
        let h = match &self.params {
            CriticParams::Bilinear(w) => {
                if x.len() != w.cols() || z.len() != w.rows() {
                    return Err(Error::dim("critic input", w.cols() + w.rows(), x.len() + z.len()));
                }
                dot(&w.matvec(x), z)
            }
            CriticParams::Mlp(m) => {
                let mut input = x.to_vec();
                input.extend_from_slice(z);
                m.predict(&input)?[0]
            }
        };
        Ok(h / self.temperature)
    }

    /// `S[j][i] = log f(x_j, z_i)`.
    fn score_matrix(&self, xs: &[&[f64]], zs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        xs.iter()
            .map(|x| zs.iter().map(|z| self.log_score(x, z)).collect())
            .collect()
    }

    /// `c = Σ_i log [f(x_i, z_i) / Σ_j f(x_j, z_i)]`.
    pub fn info_nce(&self, xs: &[&[f64]], zs: &[&[f64]]) -> Result<f64> {
        check_batch(xs, zs)?;
        let s = self.score_matrix(xs, zs)?;
        Ok(contrastive_value(&s))
    }

    /// Value of `c` and gradients of the loss `−c`.
    pub fn info_nce_grads(&self, xs: &[&[f64]], zs: &[&[f64]]) -> Result<(f64, InfoNceGrads)> {
        check_batch(xs, zs)?;
        let k = xs.len();
        let s = self.score_matrix(xs, zs)?;
        let value = contrastive_value(&s);
        // dL/dS[j][i] with L = −c
        let mut ds = vec![vec![0.0; k]; k];
        for i in 0..k {
            let col: Vec<f64> = (0..k).map(|j| s[j][i]).collect();
            let lse = log_sum_exp(&col);
            for j in 0..k {
                let soft = (col[j] - lse).exp();
                ds[j][i] = soft - if i == j { 1.0 } else { 0.0 };
            }
        }
        let tau = self.temperature;
        let mut critic = self.params.zeros_like();
        let mut gz: Vec<Vec<f64>> = zs.iter().map(|z| vec![0.0; z.len()]).collect();
        match (&self.params, &mut critic) {
            (CriticParams::Bilinear(w), CriticParams::Bilinear(gw)) => {
                let proj: Vec<Vec<f64>> = xs.iter().map(|x| w.matvec(x)).collect();
                for j in 0..k {
                    for i in 0..k {
                        let a = ds[j][i] / tau;
                        if a != 0.0 {
                            gw.add_outer(a, zs[i], xs[j]);
                            axpy(&mut gz[i], a, &proj[j]);
                        }
                    }
                }
            }
            (CriticParams::Mlp(m), CriticParams::Mlp(gm)) => {
                let fx = xs[0].len();
                for j in 0..k {
                    for i in 0..k {
                        let mut input = xs[j].to_vec();
                        input.extend_from_slice(zs[i]);
                        let trace = m.forward(&input)?;
                        let gin = m.backward_into(&trace, &[ds[j][i] / tau], 1.0, Some(gm))?;
                        axpy(&mut gz[i], 1.0, &gin[fx..]);
                    }
                }
            }
            _ => unreachable!("gradient container mirrors params"),
        }
        Ok((value, InfoNceGrads { critic, z: gz }))
    }
}

fn check_batch(xs: &[&[f64]], zs: &[&[f64]]) -> Result<()> {
    if xs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "InfoNCE needs at least 2 pairs, got {}",
            xs.len()
        )));
    }
    if xs.len() != zs.len() {
        return Err(Error::dim("InfoNCE pairs", xs.len(), zs.len()));
    }
    Ok(())
}

fn contrastive_value(s: &[Vec<f64>]) -> f64 {
    let k = s.len();
    (0..k)
        .map(|i| {
            let col: Vec<f64> = (0..k).map(|j| s[j][i]).collect();
            (s[i][i] - log_sum_exp(&col)).min(0.0)
        })
        .sum()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiBase {
    /// Shifted, normalized data for both mutual informations.
    #[default]
    Data,
    /// Uniform cell weights `1/(nd)` for the co-clustered information.
    Uniform,
}

/// `p(ŝ, t̂)` with its marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct JointPmf {
    pub table: Tensor2,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
}

/// Cell pmf `X' / Σ X'` with `X' = X − min X` over present cells; missing
/// cells get zero mass. `None` when all present values are equal.
pub fn data_pmf(matrix: &DataMatrix) -> Option<Tensor2> {
    let lo = matrix.present_values().fold(f64::INFINITY, f64::min);
    let total: f64 = matrix.present_values().map(|v| v - lo).sum();
    if !(total > 0.0) {
        return None;
    }
    let mut p = Tensor2::zeros(matrix.n(), matrix.d());
    for i in 0..matrix.n() {
        for j in 0..matrix.d() {
            if matrix.is_present(i, j) {
                p.set(i, j, (matrix.get(i, j) - lo) / total);
            }
        }
    }
    Some(p)
}

pub fn uniform_pmf(n: usize, d: usize) -> Tensor2 {
    let v = 1.0 / (n * d) as f64;
    Tensor2::from_fn(n, d, |_, _| v)
}

/// Mutual information (nats) of a two-dimensional pmf.
pub fn mutual_information(p: &Tensor2) -> f64 {
    let rows: Vec<f64> = (0..p.rows()).map(|i| p.row(i).iter().sum()).collect();
    let cols: Vec<f64> = (0..p.cols())
        .map(|j| (0..p.rows()).map(|i| p.get(i, j)).sum())
        .collect();
    let mut mi = 0.0;
    for i in 0..p.rows() {
        for j in 0..p.cols() {
            let v = p.get(i, j);
            if v > 0.0 {
                mi += v * (v / (rows[i] * cols[j])).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Mutual information between row and column index under the shifted data
/// pmf; zero for a constant matrix.
pub fn empirical_mutual_information(matrix: &DataMatrix) -> f64 {
    data_pmf(matrix).map_or(0.0, |p| mutual_information(&p))
}

fn check_memberships(gamma: &Tensor2, what: &str) -> Result<()> {
    for i in 0..gamma.rows() {
        let r = gamma.row(i);
        let s: f64 = r.iter().sum();
        if (s - 1.0).abs() > 1e-9 || r.iter().any(|v| *v < -1e-12) {
            return Err(Error::InvalidArgument(format!(
                "{what} membership row {i} is not a probability vector"
            )));
        }
    }
    Ok(())
}

/// `p(ŝ, t̂) = Σ_ij p(i, j) γ_r(i, ŝ) γ_c(j, t̂)` and its mutual information.
pub fn coclustered_mutual_information(gamma_r: &Tensor2, gamma_c: &Tensor2, base: &Tensor2) -> Result<(f64, JointPmf)> {
    if base.rows() != gamma_r.rows() {
        return Err(Error::dim("row memberships", base.rows(), gamma_r.rows()));
    }
    if base.cols() != gamma_c.rows() {
        return Err(Error::dim("column memberships", base.cols(), gamma_c.rows()));
    }
    check_memberships(gamma_r, "row")?;
    check_memberships(gamma_c, "column")?;
    let (g, m) = (gamma_r.cols(), gamma_c.cols());
    let pc = matmul(base, gamma_c); // n × m
    let mut table = Tensor2::zeros(g, m);
    for i in 0..base.rows() {
        table.add_outer(1.0, gamma_r.row(i), pc.row(i));
    }
    let row_marginal: Vec<f64> = (0..g).map(|s| table.row(s).iter().sum()).collect();
    let col_marginal: Vec<f64> = (0..m).map(|t| (0..g).map(|s| table.get(s, t)).sum()).collect();
    let mi = mutual_information(&table);
    Ok((
        mi,
        JointPmf {
            table,
            row_marginal,
            col_marginal,
        },
    ))
}

fn matmul(a: &Tensor2, b: &Tensor2) -> Tensor2 {
    let mut out = Tensor2::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        let mut acc = vec![0.0; b.cols()];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik != 0.0 {
                axpy(&mut acc, aik, b.row(k));
            }
        }
        out.data_mut()[i * b.cols()..(i + 1) * b.cols()].copy_from_slice(&acc);
    }
    out
}

/// `1 − I_hat / I_orig`, clamped to `[0, 1]`.
pub fn cross_loss(i_hat: f64, i_orig: f64) -> Result<f64> {
    if !(i_orig > MI_EPSILON) {
        return Err(Error::DegenerateMutualInformation(i_orig));
    }
    if i_hat > i_orig + 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "co-clustered information {i_hat} exceeds data information {i_orig}; were different base pmfs used?"
        )));
    }
    Ok((1.0 - i_hat / i_orig).clamp(0.0, 1.0))
}

/// Cross-loss value and its gradients with respect to the membership
/// matrices.
pub fn cross_loss_membership_grads(
    gamma_r: &Tensor2,
    gamma_c: &Tensor2,
    base: &Tensor2,
    i_orig: f64,
) -> Result<(f64, Tensor2, Tensor2)> {
    let (i_hat, joint) = coclustered_mutual_information(gamma_r, gamma_c, base)?;
    let value = cross_loss(i_hat, i_orig)?;
    let (g, m) = (gamma_r.cols(), gamma_c.cols());
    // dI/dp(s, t)
    let gst = Tensor2::from_fn(g, m, |s, t| {
        let p = joint.table.get(s, t).max(1e-300);
        p.ln() - joint.row_marginal[s].max(1e-300).ln() - joint.col_marginal[t].max(1e-300).ln() - 1.0
    });
    let scale = -1.0 / i_orig;
    let pc = matmul(base, gamma_c); // n × m
    let dr = Tensor2::from_fn(gamma_r.rows(), g, |i, s| scale * dot(gst.row(s), pc.row(i)));
    let base_t = Tensor2::from_fn(base.cols(), base.rows(), |j, i| base.get(i, j));
    let pr = matmul(&base_t, gamma_r); // d × g
    let dc = Tensor2::from_fn(gamma_c.rows(), m, |j, t| {
        scale * (0..g).map(|s| gst.get(s, t) * pr.get(j, s)).sum::<f64>()
    });
    Ok((value, dr, dc))
}

/// Cross-loss gradients pushed through the responsibilities onto the
/// posterior means and the prior parameters of each side.
#[derive(Clone, Debug)]
pub struct CrossLossGrads {
    pub value: f64,
    pub row_means: Vec<Vec<f64>>,
    pub row_prior: MixtureGrad,
    pub col_means: Vec<Vec<f64>>,
    pub col_prior: MixtureGrad,
}

fn memberships(prior: &GaussianMixture, means: &[Vec<f64>]) -> Result<Tensor2> {
    let k = prior.num_components();
    let mut t = Tensor2::zeros(means.len(), k);
    for (i, mu) in means.iter().enumerate() {
        let r = prior.responsibilities(mu)?;
        t.data_mut()[i * k..(i + 1) * k].copy_from_slice(&r);
    }
    Ok(t)
}

/// Cross-loss with memberships computed from `responsibilities(prior, μ')`.
pub fn cross_loss_value(
    base: &Tensor2,
    i_orig: f64,
    row_prior: &GaussianMixture,
    row_means: &[Vec<f64>],
    col_prior: &GaussianMixture,
    col_means: &[Vec<f64>],
) -> Result<f64> {
    let gr = memberships(row_prior, row_means)?;
    let gc = memberships(col_prior, col_means)?;
    let (i_hat, _) = coclustered_mutual_information(&gr, &gc, base)?;
    cross_loss(i_hat, i_orig)
}

pub fn cross_loss_gradients(
    base: &Tensor2,
    i_orig: f64,
    row_prior: &GaussianMixture,
    row_means: &[Vec<f64>],
    col_prior: &GaussianMixture,
    col_means: &[Vec<f64>],
) -> Result<CrossLossGrads> {
    let gr = memberships(row_prior, row_means)?;
    let gc = memberships(col_prior, col_means)?;
    let (value, dr, dc) = cross_loss_membership_grads(&gr, &gc, base, i_orig)?;
    let mut row_prior_grad = MixtureGrad::zeros(row_prior.num_components(), row_prior.dim());
    let mut row_grads = Vec::with_capacity(row_means.len());
    for (i, mu) in row_means.iter().enumerate() {
        let (dz, dp) = row_prior.responsibilities_backward(mu, dr.row(i))?;
        row_prior_grad.add_scaled(1.0, &dp);
        row_grads.push(dz);
    }
    let mut col_prior_grad = MixtureGrad::zeros(col_prior.num_components(), col_prior.dim());
    let mut col_grads = Vec::with_capacity(col_means.len());
    for (j, mu) in col_means.iter().enumerate() {
        let (dz, dp) = col_prior.responsibilities_backward(mu, dc.row(j))?;
        col_prior_grad.add_scaled(1.0, &dp);
        col_grads.push(dz);
    }
    Ok(CrossLossGrads {
        value,
        row_means: row_grads,
        row_prior: row_prior_grad,
        col_means: col_grads,
        col_prior: col_prior_grad,
    })
}
