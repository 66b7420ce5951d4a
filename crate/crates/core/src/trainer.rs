//! Alternating mini-batch training of the row, column and cell models.
//!
//! Per-item work inside a batch runs on the rayon pool, but every random
//! draw happens up front on one generator and partial gradients are summed
//! in a fixed chunk order, so results do not depend on the thread count.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Mode, TrainConfig};
use crate::data::{write_atomic, DataMatrix};
use crate::error::{Error, ErrorCategory, Result};
use crate::estimators::HeadGrad;
use crate::gmm::{fit_em_with, EmOptions, GaussianMixture, MixtureGrad, STD_FLOOR};
use crate::info::{
    cross_loss_gradients, cross_loss_value, data_pmf, mutual_information, uniform_pmf, CriticParams, InfoNceCritic,
    MiBase, MI_EPSILON,
};
use crate::joint::{JointEval, JointGrads, JointVae};
use crate::linalg::{adam_step, Mlp, OptimizerState, Parameterized, Trace};
use crate::metrics::hard_labels;
use crate::side::{draw_noise, GradMode, Side, SideEval, SideGrads, SideItem, SideVae};

/// Items per partial gradient sum.
const CHUNK: usize = 8;
/// Cells used to initialize the cell prior.
const JOINT_EM_CELLS: usize = 2000;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoClusterModel {
    pub row: SideVae,
    pub col: SideVae,
    pub joint: JointVae,
    pub row_critic: InfoNceCritic,
    pub col_critic: InfoNceCritic,
    /// Scores a cell value together with its side latents against the cell latent.
    pub joint_critic: InfoNceCritic,
}

impl CoClusterModel {
    pub fn new<R: Rng + ?Sized>(n: usize, d: usize, cfg: &TrainConfig, rng: &mut R) -> Result<Self> {
        let row = SideVae::new(
            Side::Row,
            d,
            cfg.row_latent,
            &cfg.hidden,
            cfg.g,
            cfg.row_likelihood,
            rng,
        )?;
        let col = SideVae::new(
            Side::Column,
            n,
            cfg.col_latent,
            &cfg.hidden,
            cfg.m,
            cfg.col_likelihood,
            rng,
        )?;
        let joint = JointVae::new(
            cfg.row_latent,
            cfg.col_latent,
            cfg.joint_latent,
            cfg.joint_hidden,
            cfg.joint_components(),
            cfg.joint_likelihood,
            rng,
        )?;
        let row_critic = InfoNceCritic::new(cfg.critic, d, cfg.row_latent, cfg.temperature, rng)?;
        let col_critic = InfoNceCritic::new(cfg.critic, n, cfg.col_latent, cfg.temperature, rng)?;
        let joint_critic = InfoNceCritic::new(
            cfg.critic,
            1 + cfg.row_latent + cfg.col_latent,
            cfg.joint_latent,
            cfg.temperature,
            rng,
        )?;
        Ok(Self {
            row,
            col,
            joint,
            row_critic,
            col_critic,
            joint_critic,
        })
    }

    pub fn side(&self, s: Side) -> &SideVae {
        match s {
            Side::Row => &self.row,
            Side::Column => &self.col,
        }
    }

    pub fn side_mut(&mut self, s: Side) -> &mut SideVae {
        match s {
            Side::Row => &mut self.row,
            Side::Column => &mut self.col,
        }
    }

    fn side_and_critic_mut(&mut self, s: Side) -> (&mut SideVae, &mut InfoNceCritic) {
        match s {
            Side::Row => (&mut self.row, &mut self.row_critic),
            Side::Column => (&mut self.col, &mut self.col_critic),
        }
    }

    pub fn critic(&self, s: Side) -> &InfoNceCritic {
        match s {
            Side::Row => &self.row_critic,
            Side::Column => &self.col_critic,
        }
    }

    fn group_size(&self, s: Side) -> usize {
        self.side(s).num_params() + self.critic(s).params.num_params()
    }

    fn joint_group_size(&self) -> usize {
        self.joint.num_params() + self.joint_critic.params.num_params()
    }
}

/// One epoch's objective, term by term. Sums run over the items visited in
/// the epoch; contrastive entries hold the loss `−c`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub epoch: usize,
    pub row_norm: f64,
    pub row_elbo: f64,
    pub row_contrastive: f64,
    pub col_norm: f64,
    pub col_elbo: f64,
    pub col_contrastive: f64,
    pub cell_elbo: f64,
    pub cell_contrastive: f64,
    pub cross_loss: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Terms in the order of their weights `lambda1..lambda9`.
    pub fn terms(&self) -> [f64; 9] {
        [
            self.row_norm,
            self.row_elbo,
            self.row_contrastive,
            self.col_norm,
            self.col_elbo,
            self.col_contrastive,
            self.cell_elbo,
            self.cell_contrastive,
            self.cross_loss,
        ]
    }

    pub fn weighted_sum(terms: &[f64; 9], lambdas: &[f64; 9]) -> f64 {
        terms
            .iter()
            .zip(lambdas)
            .map(|(t, l)| if *l == 0.0 { 0.0 } else { t * l })
            .sum()
    }

    fn finish(&mut self, lambdas: &[f64; 9]) {
        self.total = Self::weighted_sum(&self.terms(), lambdas);
    }
}

/// Row and column views of the training matrix. Encoder inputs are the
/// imputed values standardized by the mean and std of all observed cells;
/// reconstruction targets stay in data units.
#[derive(Clone, Debug)]
struct Views {
    matrix: DataMatrix,
    rows: Vec<Vec<f64>>,
    row_targets: Vec<Vec<f64>>,
    row_masks: Vec<Vec<bool>>,
    cols: Vec<Vec<f64>>,
    col_targets: Vec<Vec<f64>>,
    col_masks: Vec<Vec<bool>>,
    present: Vec<(usize, usize)>,
}

impl Views {
    fn new(matrix: DataMatrix) -> Self {
        let (n, d) = (matrix.n(), matrix.d());
        let imp = matrix.imputed();
        let count = matrix.present_count().max(1) as f64;
        let mean = matrix.present_values().sum::<f64>() / count;
        let var = matrix.present_values().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        let std_imp: Vec<f64> = imp.iter().map(|v| (v - mean) / std).collect();
        let by_row = |t: &[f64]| -> Vec<Vec<f64>> { (0..n).map(|i| t[i * d..(i + 1) * d].to_vec()).collect() };
        let by_col = |t: &[f64]| -> Vec<Vec<f64>> { (0..d).map(|j| (0..n).map(|i| t[i * d + j]).collect()).collect() };
        let row_masks = (0..n).map(|i| matrix.row_mask(i).to_vec()).collect();
        let col_masks = (0..d).map(|j| matrix.column_mask(j)).collect();
        let present = (0..n)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .filter(|&(i, j)| matrix.is_present(i, j))
            .collect();
        Self {
            rows: by_row(&std_imp),
            row_targets: by_row(&imp),
            cols: by_col(&std_imp),
            col_targets: by_col(&imp),
            matrix,
            row_masks,
            col_masks,
            present,
        }
    }

    fn inputs(&self, s: Side) -> &[Vec<f64>] {
        match s {
            Side::Row => &self.rows,
            Side::Column => &self.cols,
        }
    }

    fn item(&self, s: Side, i: usize) -> SideItem<'_> {
        let (x, t, m) = match s {
            Side::Row => (&self.rows[i], &self.row_targets[i], &self.row_masks[i]),
            Side::Column => (&self.cols[i], &self.col_targets[i], &self.col_masks[i]),
        };
        SideItem {
            input: x,
            target: t,
            present: m,
        }
    }
}

struct ItemNoise {
    eps: Vec<Vec<f64>>,
    u: Vec<f64>,
}

fn draw_item_noise<R: Rng + ?Sized>(rng: &mut R, k: usize, dim: usize) -> ItemNoise {
    let eps = draw_noise(rng, k, dim);
    let u = (0..k).map(|_| rng.random::<f64>()).collect();
    ItemNoise { eps, u }
}

struct CellNoise {
    row: Vec<f64>,
    col: Vec<f64>,
    joint: ItemNoise,
}

fn draw_cell_noise<R: Rng + ?Sized>(rng: &mut R, k: usize, lr: usize, lc: usize, lj: usize) -> CellNoise {
    let row = draw_noise(rng, 1, lr).pop().unwrap_or_default();
    let col = draw_noise(rng, 1, lc).pop().unwrap_or_default();
    CellNoise {
        row,
        col,
        joint: draw_item_noise(rng, k, lj),
    }
}

#[derive(Clone, Copy, Debug)]
struct SideWeights {
    norm: f64,
    elbo: f64,
    contrast: f64,
    mode: GradMode,
    train_prior: bool,
    /// Batch size over item count, scaling the norm penalty per step.
    batch_fraction: f64,
}

struct SidePass {
    neg_elbo: f64,
    neg_contrast: f64,
    grads: Option<(SideGrads, CriticParams)>,
}

fn side_pass(
    vae: &SideVae,
    critic: &InfoNceCritic,
    views: &Views,
    side: Side,
    idx: &[usize],
    noise: &[ItemNoise],
    w: &SideWeights,
    want_grads: bool,
) -> Result<SidePass> {
    let evals: Vec<SideEval> = idx
        .par_iter()
        .zip(noise.par_iter())
        .map(|(&i, nz)| vae.evaluate(views.item(side, i), &nz.eps, &nz.u))
        .collect::<Result<_>>()?;
    let neg_elbo: f64 = evals.iter().map(|e| e.negative_elbo()).sum();
    let mut neg_contrast = 0.0;
    let mut contrast_grads = None;
    if w.contrast > 0.0 && idx.len() >= 2 {
        let inputs = views.inputs(side);
        let xs: Vec<&[f64]> = idx.iter().map(|&i| inputs[i].as_slice()).collect();
        let zs: Vec<&[f64]> = evals.iter().map(|e| e.samples[0].z.as_slice()).collect();
        if want_grads {
            let (c, g) = critic.info_nce_grads(&xs, &zs)?;
            neg_contrast = -c;
            contrast_grads = Some(g);
        } else {
            neg_contrast = -critic.info_nce(&xs, &zs)?;
        }
    }
    if !want_grads {
        return Ok(SidePass {
            neg_elbo,
            neg_contrast,
            grads: None,
        });
    }
    let partials: Vec<SideGrads> = evals
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut acc = vae.zero_grads();
            for (o, eval) in chunk.iter().enumerate() {
                if w.elbo > 0.0 {
                    vae.accumulate_grads(eval, w.mode, w.elbo, None, &mut acc)?;
                }
                if let Some(g) = &contrast_grads {
                    let head = vae.prior_latent_head(eval, 0, &g.z[c * CHUNK + o]);
                    vae.encoder_backward(eval, &head, w.contrast, &mut acc.encoder)?;
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = vae.zero_grads();
    for p in &partials {
        total.add_scaled(1.0, p);
    }
    if w.norm > 0.0 {
        let a = 2.0 * w.norm * w.batch_fraction;
        total.encoder.add_scaled(a, &vae.encoder);
        total.decoder.add_scaled(a, &vae.decoder);
    }
    if !w.train_prior {
        total.prior = MixtureGrad::zeros(vae.prior.num_components(), vae.latent_dim());
    }
    let mut critic_grad = critic.zero_grads();
    if let Some(g) = &contrast_grads {
        critic_grad.add_scaled(w.contrast, &g.critic);
    }
    Ok(SidePass {
        neg_elbo,
        neg_contrast,
        grads: Some((total, critic_grad)),
    })
}

struct CellEval {
    row_trace: Trace,
    col_trace: Trace,
    eps_row: Vec<f64>,
    eps_col: Vec<f64>,
    features: Vec<f64>,
    eval: JointEval,
}

#[derive(Clone, Copy, Debug)]
struct CellWeights {
    elbo: f64,
    contrast: f64,
    mode: GradMode,
}

struct CellGrads {
    joint: JointGrads,
    critic: CriticParams,
    row_encoder: Mlp,
    col_encoder: Mlp,
}

struct CellPass {
    neg_elbo: f64,
    neg_contrast: f64,
    grads: Option<CellGrads>,
}

fn reparam(mu: &[f64], sigma: &[f64], eps: &[f64]) -> Vec<f64> {
    mu.iter().zip(sigma).zip(eps).map(|((m, s), e)| m + s * e).collect()
}

fn cell_pass(
    model: &CoClusterModel,
    views: &Views,
    cells: &[(usize, usize)],
    noise: &[CellNoise],
    w: &CellWeights,
    want_grads: bool,
) -> Result<CellPass> {
    let evals: Vec<CellEval> = cells
        .par_iter()
        .zip(noise.par_iter())
        .map(|(&(i, j), nz)| {
            if !views.matrix.is_present(i, j) {
                return Err(Error::InvalidArgument(format!("cell ({i}, {j}) is not observed")));
            }
            let (pr, row_trace) = model.row.encode_traced(&views.rows[i])?;
            let (pc, col_trace) = model.col.encode_traced(&views.cols[j])?;
            let z_row = reparam(&pr.mu_scaled, &pr.sigma, &nz.row);
            let z_col = reparam(&pc.mu_scaled, &pc.sigma, &nz.col);
            let value = views.matrix.get(i, j);
            let eval = model
                .joint
                .evaluate(value, true, &z_row, &z_col, &nz.joint.eps, &nz.joint.u)?;
            let mut features = Vec::with_capacity(1 + z_row.len() + z_col.len());
            features.push(value);
            features.extend_from_slice(&z_row);
            features.extend_from_slice(&z_col);
            Ok(CellEval {
                row_trace,
                col_trace,
                eps_row: nz.row.clone(),
                eps_col: nz.col.clone(),
                features,
                eval,
            })
        })
        .collect::<Result<_>>()?;
    let neg_elbo: f64 = evals.iter().map(|e| e.eval.negative_elbo()).sum();
    let mut neg_contrast = 0.0;
    let mut contrast_grads = None;
    if w.contrast > 0.0 && cells.len() >= 2 {
        let xs: Vec<&[f64]> = evals.iter().map(|e| e.features.as_slice()).collect();
        let zs: Vec<&[f64]> = evals.iter().map(|e| e.eval.samples[0].z.as_slice()).collect();
        if want_grads {
            let (c, g) = model.joint_critic.info_nce_grads(&xs, &zs)?;
            neg_contrast = -c;
            contrast_grads = Some(g);
        } else {
            neg_contrast = -model.joint_critic.info_nce(&xs, &zs)?;
        }
    }
    if !want_grads {
        return Ok(CellPass {
            neg_elbo,
            neg_contrast,
            grads: None,
        });
    }
    let (fr, fc) = (&model.row.scale, &model.col.scale);
    let zero = || CellGrads {
        joint: model.joint.zero_grads(),
        critic: model.joint_critic.zero_grads(),
        row_encoder: model.row.encoder.zeros_like(),
        col_encoder: model.col.encoder.zeros_like(),
    };
    let partials: Vec<CellGrads> = evals
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut acc = zero();
            for (o, ce) in chunk.iter().enumerate() {
                let mut up_row = vec![0.0; fr.len()];
                let mut up_col = vec![0.0; fc.len()];
                if w.elbo > 0.0 {
                    let up = model.joint.accumulate_grads(&ce.eval, w.mode, w.elbo, &mut acc.joint)?;
                    up_row = up.z_row;
                    up_col = up.z_col;
                }
                if let Some(g) = &contrast_grads {
                    let gz = &g.z[c * CHUNK + o];
                    let eps0 = &ce.eval.samples[0].epsilon;
                    let head = HeadGrad {
                        mu: gz.clone(),
                        sigma: gz.iter().zip(eps0).map(|(a, e)| a * e).collect(),
                    };
                    let up = model
                        .joint
                        .encoder_backward(&ce.eval, &head, w.contrast, &mut acc.joint.encoder)?;
                    up_row.iter_mut().zip(&up.z_row).for_each(|(a, b)| *a += b);
                    up_col.iter_mut().zip(&up.z_col).for_each(|(a, b)| *a += b);
                }
                // z_side = f ⊙ μ' + σ ⊙ ε
                let row_head = HeadGrad {
                    mu: up_row.iter().zip(fr).map(|(g, f)| g * f).collect(),
                    sigma: up_row.iter().zip(&ce.eps_row).map(|(g, e)| g * e).collect(),
                };
                model
                    .row
                    .encoder_backward_trace(&ce.row_trace, &row_head, 1.0, &mut acc.row_encoder)?;
                let col_head = HeadGrad {
                    mu: up_col.iter().zip(fc).map(|(g, f)| g * f).collect(),
                    sigma: up_col.iter().zip(&ce.eps_col).map(|(g, e)| g * e).collect(),
                };
                model
                    .col
                    .encoder_backward_trace(&ce.col_trace, &col_head, 1.0, &mut acc.col_encoder)?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = zero();
    for p in &partials {
        total.joint.add_scaled(1.0, &p.joint);
        total.row_encoder.add_scaled(1.0, &p.row_encoder);
        total.col_encoder.add_scaled(1.0, &p.col_encoder);
    }
    if let Some(g) = &contrast_grads {
        total.critic.add_scaled(w.contrast, &g.critic);
    }
    Ok(CellPass {
        neg_elbo,
        neg_contrast,
        grads: Some(total),
    })
}

struct MiGrads {
    row_encoder: Mlp,
    row_prior: MixtureGrad,
    col_encoder: Mlp,
    col_prior: MixtureGrad,
}

/// Cross-loss on the `rows × cols` submatrix. `None` when the data carry
/// no measurable row/column dependence there.
fn mi_pass(
    model: &CoClusterModel,
    views: &Views,
    rows: &[usize],
    cols: &[usize],
    base_kind: MiBase,
    weight: f64,
    want_grads: bool,
) -> Result<Option<(f64, Option<MiGrads>)>> {
    let sub = views.matrix.submatrix(rows, cols)?;
    let Some(data) = data_pmf(&sub) else {
        return Ok(None);
    };
    let i_orig = mutual_information(&data);
    if !(i_orig > MI_EPSILON) {
        return Ok(None);
    }
    let base = match base_kind {
        MiBase::Data => data,
        MiBase::Uniform => uniform_pmf(rows.len(), cols.len()),
    };
    let encode = |vae: &SideVae, inputs: &[Vec<f64>], idx: &[usize]| -> Result<Vec<(Vec<f64>, Trace)>> {
        idx.par_iter()
            .map(|&i| vae.encode_traced(&inputs[i]).map(|(p, t)| (p.mu_raw, t)))
            .collect()
    };
    let re = encode(&model.row, &views.rows, rows)?;
    let ce = encode(&model.col, &views.cols, cols)?;
    let row_mus: Vec<Vec<f64>> = re.iter().map(|(m, _)| m.clone()).collect();
    let col_mus: Vec<Vec<f64>> = ce.iter().map(|(m, _)| m.clone()).collect();
    if !want_grads {
        let v = cross_loss_value(&base, i_orig, &model.row.prior, &row_mus, &model.col.prior, &col_mus)?;
        return Ok(Some((v, None)));
    }
    let g = cross_loss_gradients(&base, i_orig, &model.row.prior, &row_mus, &model.col.prior, &col_mus)?;
    let backprop = |vae: &SideVae, enc: &[(Vec<f64>, Trace)], grads: &[Vec<f64>]| -> Result<Mlp> {
        let mut acc = vae.encoder.zeros_like();
        for ((_, trace), gm) in enc.iter().zip(grads) {
            let head = HeadGrad {
                mu: gm.clone(),
                sigma: vec![0.0; gm.len()],
            };
            vae.encoder_backward_trace(trace, &head, weight, &mut acc)?;
        }
        Ok(acc)
    };
    let row_encoder = backprop(&model.row, &re, &g.row_means)?;
    let col_encoder = backprop(&model.col, &ce, &g.col_means)?;
    let mut row_prior = MixtureGrad::zeros(model.row.prior.num_components(), model.row.latent_dim());
    row_prior.add_scaled(weight, &g.row_prior);
    let mut col_prior = MixtureGrad::zeros(model.col.prior.num_components(), model.col.latent_dim());
    col_prior.add_scaled(weight, &g.col_prior);
    Ok(Some((
        g.value,
        Some(MiGrads {
            row_encoder,
            row_prior,
            col_encoder,
            col_prior,
        }),
    )))
}

/// One Adam step over the concatenation of `params`.
fn step_group(
    params: &mut [&mut dyn Parameterized],
    grads: &[&dyn Parameterized],
    state: &mut OptimizerState,
) -> Result<()> {
    let mut p = Vec::with_capacity(state.len());
    for x in params.iter() {
        x.write_params(&mut p);
    }
    let mut g = Vec::with_capacity(state.len());
    for x in grads {
        x.write_params(&mut g);
    }
    adam_step(&mut p, &g, state)?;
    let mut src = p.as_slice();
    for x in params.iter_mut() {
        x.read_params(&mut src);
    }
    Ok(())
}

fn step_side(
    model: &mut CoClusterModel,
    side: Side,
    grads: &SideGrads,
    critic: &CriticParams,
    state: &mut OptimizerState,
) -> Result<()> {
    let (vae, c) = model.side_and_critic_mut(side);
    step_group(&mut [vae, &mut c.params], &[grads, critic], state)?;
    vae.prior.project_std_floor(STD_FLOOR);
    Ok(())
}

/// Side gradient carrying only an encoder part.
fn encoder_only(vae: &SideVae, encoder: Mlp, prior: Option<MixtureGrad>) -> SideGrads {
    SideGrads {
        encoder,
        decoder: vae.decoder.zeros_like(),
        prior: prior.unwrap_or_else(|| MixtureGrad::zeros(vae.prior.num_components(), vae.latent_dim())),
    }
}

fn sample_indices(rng: &mut ChaCha8Rng, len: usize, amount: usize) -> Vec<usize> {
    if len <= amount {
        (0..len).collect()
    } else {
        let mut v = index::sample(rng, len, amount).into_vec();
        v.sort_unstable();
        v
    }
}

/// Posterior draws per item used to fit a prior to the aggregate posterior.
const PRIOR_FIT_DRAWS: usize = 5;

/// `PRIOR_FIT_DRAWS` samples `μ + σ ⊙ ε` per `(μ, σ)`. Fitting a mixture to
/// these rather than to the means keeps the component spread at least as
/// wide as the posteriors themselves.
fn posterior_draws(posts: &[(Vec<f64>, Vec<f64>)], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(posts.len() * PRIOR_FIT_DRAWS);
    for (mu, sigma) in posts {
        for eps in draw_noise(rng, PRIOR_FIT_DRAWS, mu.len()) {
            out.push(reparam(mu, sigma, &eps));
        }
    }
    out
}

/// Stop once the best loss of the last `window` epochs improves on the best
/// before it by less than `tol` (relative).
pub fn should_stop(history: &[f64], cfg: &TrainConfig) -> bool {
    let t = history.len();
    let w = cfg.early_stopping_window.max(1);
    if !cfg.early_stopping || t < cfg.min_epochs.max(w + 1) {
        return false;
    }
    let best = |s: &[f64]| s.iter().copied().fold(f64::INFINITY, f64::min);
    let before = best(&history[..t - w]);
    let recent = best(&history[t - w..]);
    (before - recent) / before.abs().max(1e-12) < cfg.early_stopping_tol
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMembership {
    pub row: usize,
    pub col: usize,
    pub memberships: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoClusterResult {
    pub row_memberships: Vec<Vec<f64>>,
    pub col_memberships: Vec<Vec<f64>>,
    pub row_labels: Vec<usize>,
    pub col_labels: Vec<usize>,
    /// Empty unless the cell model was trained.
    pub cell_memberships: Vec<CellMembership>,
    pub loss_trace: Vec<LossBreakdown>,
    /// Reconstruction error on withheld cells, one entry per epoch.
    pub holdout_mse: Vec<f64>,
    pub epochs: usize,
    pub stopped_early: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal `u128`.
    pub word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad generator position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizers {
    pub row: OptimizerState,
    pub col: OptimizerState,
    pub joint: OptimizerState,
}

/// Full training state, enough to resume bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub model: CoClusterModel,
    pub optimizers: Optimizers,
    pub rng: RngState,
    pub epoch: usize,
    pub pretrained: bool,
    pub loss_trace: Vec<LossBreakdown>,
    pub holdout_cells: Vec<(usize, usize)>,
    pub holdout_mse: Vec<f64>,
}

impl Checkpoint {
    /// Writes JSON to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!(
                    "unsupported checkpoint version {v}, expected {CHECKPOINT_VERSION}"
                )))
            }
            None => return Err(Error::Checkpoint("missing version field".into())),
        }
        Ok(serde_json::from_value(value)?)
    }
}

#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    model: CoClusterModel,
    views: Views,
    optimizers: Optimizers,
    rng: ChaCha8Rng,
    epoch: usize,
    pretrained: bool,
    trace: Vec<LossBreakdown>,
    holdout: Vec<(usize, usize, f64)>,
    holdout_mse: Vec<f64>,
}

impl Trainer {
    /// Fresh models for `matrix`. A `holdout` fraction of observed cells is
    /// hidden from training.
    pub fn new(matrix: &DataMatrix, config: TrainConfig) -> Result<Self> {
        config.validate(Some((matrix.n(), matrix.d())))?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut train = matrix.clone();
        let mut holdout = Vec::new();
        if config.holdout > 0.0 {
            let mut present: Vec<(usize, usize)> = (0..matrix.n())
                .flat_map(|i| (0..matrix.d()).map(move |j| (i, j)))
                .filter(|&(i, j)| matrix.is_present(i, j))
                .collect();
            present.shuffle(&mut rng);
            let count = (config.holdout * present.len() as f64).floor() as usize;
            for &(i, j) in &present[..count] {
                holdout.push((i, j, matrix.get(i, j)));
                train.hide(i, j);
            }
            holdout.sort_by_key(|&(i, j, _)| (i, j));
        }
        let views = Views::new(train);
        if views.present.is_empty() {
            return Err(Error::InvalidData("matrix has no observed cells".into()));
        }
        let model = CoClusterModel::new(matrix.n(), matrix.d(), &config, &mut rng)?;
        let adam = config.adam();
        let optimizers = Optimizers {
            row: OptimizerState::new(model.group_size(Side::Row), adam),
            col: OptimizerState::new(model.group_size(Side::Column), adam),
            joint: OptimizerState::new(model.joint_group_size(), adam),
        };
        Ok(Self {
            config,
            model,
            views,
            optimizers,
            rng,
            epoch: 0,
            pretrained: false,
            trace: Vec::new(),
            holdout,
            holdout_mse: Vec::new(),
        })
    }

    /// Resumes from a checkpoint taken on the same (unmasked) matrix.
    pub fn from_checkpoint(matrix: &DataMatrix, ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate(Some((matrix.n(), matrix.d())))?;
        if ckpt.model.row.input_dim() != matrix.d() || ckpt.model.col.input_dim() != matrix.n() {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained on a {}×{} matrix, got {}×{}",
                ckpt.model.col.input_dim(),
                ckpt.model.row.input_dim(),
                matrix.n(),
                matrix.d()
            )));
        }
        let mut train = matrix.clone();
        let mut holdout = Vec::with_capacity(ckpt.holdout_cells.len());
        for &(i, j) in &ckpt.holdout_cells {
            if i >= matrix.n() || j >= matrix.d() {
                return Err(Error::Checkpoint(format!("holdout cell ({i}, {j}) out of range")));
            }
            holdout.push((i, j, matrix.get(i, j)));
            train.hide(i, j);
        }
        Ok(Self {
            rng: ckpt.rng.restore()?,
            config: ckpt.config,
            model: ckpt.model,
            views: Views::new(train),
            optimizers: ckpt.optimizers,
            epoch: ckpt.epoch,
            pretrained: ckpt.pretrained,
            trace: ckpt.loss_trace,
            holdout,
            holdout_mse: ckpt.holdout_mse,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            model: self.model.clone(),
            optimizers: self.optimizers.clone(),
            rng: RngState::capture(&self.rng),
            epoch: self.epoch,
            pretrained: self.pretrained,
            loss_trace: self.trace.clone(),
            holdout_cells: self.holdout.iter().map(|&(i, j, _)| (i, j)).collect(),
            holdout_mse: self.holdout_mse.clone(),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &CoClusterModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut CoClusterModel {
        &mut self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn loss_trace(&self) -> &[LossBreakdown] {
        &self.trace
    }

    /// Standardized encoder inputs, one per row or column.
    pub fn encoder_inputs(&self, s: Side) -> &[Vec<f64>] {
        self.views.inputs(s)
    }

    /// The matrix the models see, with withheld cells hidden.
    pub fn training_matrix(&self) -> &DataMatrix {
        &self.views.matrix
    }

    fn active_sides(&self) -> &'static [Side] {
        match self.config.mode {
            Mode::FeatureOnly => &[Side::Column],
            _ => &[Side::Row, Side::Column],
        }
    }

    fn side_count(&self, s: Side) -> usize {
        self.views.inputs(s).len()
    }

    /// Recomputes the scale vector from the posterior means of all items.
    pub fn update_scale(&mut self, s: Side) -> Result<Vec<f64>> {
        let vae = self.model.side(s);
        let mus: Vec<Vec<f64>> = self
            .views
            .inputs(s)
            .par_iter()
            .map(|x| vae.encode(x).map(|p| p.mu_raw))
            .collect::<Result<_>>()?;
        let f = SideVae::compute_scale(&mus, self.config.tau, self.config.f_max)?;
        self.model.side_mut(s).scale = f.clone();
        Ok(f)
    }

    /// Shuffled mini-batch sweep over one side; returns the summed negative
    /// ELBO and contrastive loss seen along the way.
    fn side_epoch(&mut self, s: Side, w: SideWeights, state: Option<&mut OptimizerState>) -> Result<(f64, f64)> {
        let count = self.side_count(s);
        let batch = match s {
            Side::Row => self.config.row_batch,
            Side::Column => self.config.col_batch,
        };
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut self.rng);
        let k = self.config.importance_samples;
        let latent = self.model.side(s).latent_dim();
        let mut state = state;
        let (mut elbo, mut contrast) = (0.0, 0.0);
        for idx in order.chunks(batch) {
            let noise: Vec<ItemNoise> = idx.iter().map(|_| draw_item_noise(&mut self.rng, k, latent)).collect();
            let w = SideWeights {
                batch_fraction: idx.len() as f64 / count as f64,
                ..w
            };
            let pass = side_pass(
                self.model.side(s),
                self.model.critic(s),
                &self.views,
                s,
                idx,
                &noise,
                &w,
                true,
            )?;
            elbo += pass.neg_elbo;
            contrast += pass.neg_contrast;
            let (grads, critic) = pass.grads.expect("gradients requested");
            let st = match state.as_deref_mut() {
                Some(st) => st,
                None => match s {
                    Side::Row => &mut self.optimizers.row,
                    Side::Column => &mut self.optimizers.col,
                },
            };
            step_side(&mut self.model, s, &grads, &critic, st)?;
        }
        Ok((elbo, contrast))
    }

    fn cell_epoch(&mut self) -> Result<(f64, f64)> {
        let cfg = &self.config;
        let w = CellWeights {
            elbo: cfg.lambda7,
            contrast: cfg.lambda8,
            mode: cfg.grad_mode(),
        };
        let k = cfg.importance_samples;
        let (lr, lc, lj) = (cfg.row_latent, cfg.col_latent, cfg.joint_latent);
        let batch = cfg.cell_batch;
        let picks = sample_indices(&mut self.rng, self.views.present.len(), cfg.cells_per_epoch);
        let mut cells: Vec<(usize, usize)> = picks.iter().map(|&p| self.views.present[p]).collect();
        cells.shuffle(&mut self.rng);
        let (mut elbo, mut contrast) = (0.0, 0.0);
        for chunk in cells.chunks(batch) {
            let noise: Vec<CellNoise> = chunk
                .iter()
                .map(|_| draw_cell_noise(&mut self.rng, k, lr, lc, lj))
                .collect();
            let pass = cell_pass(&self.model, &self.views, chunk, &noise, &w, true)?;
            elbo += pass.neg_elbo;
            contrast += pass.neg_contrast;
            let g = pass.grads.expect("gradients requested");
            let m = &mut self.model;
            step_group(
                &mut [&mut m.joint, &mut m.joint_critic.params],
                &[&g.joint, &g.critic],
                &mut self.optimizers.joint,
            )?;
            m.joint.prior.project_std_floor(STD_FLOOR);
            let row_grads = encoder_only(&m.row, g.row_encoder, None);
            let zero_critic = m.row_critic.zero_grads();
            step_side(m, Side::Row, &row_grads, &zero_critic, &mut self.optimizers.row)?;
            let col_grads = encoder_only(&m.col, g.col_encoder, None);
            let zero_critic = m.col_critic.zero_grads();
            step_side(m, Side::Column, &col_grads, &zero_critic, &mut self.optimizers.col)?;
        }
        Ok((elbo, contrast))
    }

    fn mi_step(&mut self) -> Result<f64> {
        let rows = sample_indices(&mut self.rng, self.views.matrix.n(), self.config.mi_rows);
        let cols = sample_indices(&mut self.rng, self.views.matrix.d(), self.config.mi_cols);
        let out = mi_pass(
            &self.model,
            &self.views,
            &rows,
            &cols,
            self.config.mi_base,
            self.config.lambda9,
            true,
        )?;
        let Some((value, Some(g))) = out else {
            log::debug!("data carry no row/column dependence on this subsample; cross-loss skipped");
            return Ok(0.0);
        };
        let m = &mut self.model;
        let row_grads = encoder_only(&m.row, g.row_encoder, Some(g.row_prior));
        let zero_critic = m.row_critic.zero_grads();
        step_side(m, Side::Row, &row_grads, &zero_critic, &mut self.optimizers.row)?;
        let col_grads = encoder_only(&m.col, g.col_encoder, Some(g.col_prior));
        let zero_critic = m.col_critic.zero_grads();
        step_side(m, Side::Column, &col_grads, &zero_critic, &mut self.optimizers.col)?;
        Ok(value)
    }

    fn side_weights(&self, s: Side) -> SideWeights {
        let c = &self.config;
        let (norm, elbo, contrast) = match s {
            Side::Row => (c.lambda1, c.lambda2, c.lambda3),
            Side::Column => (c.lambda4, c.lambda5, c.lambda6),
        };
        SideWeights {
            norm,
            elbo,
            contrast,
            mode: c.grad_mode(),
            train_prior: true,
            batch_fraction: 1.0,
        }
    }

    /// Trains each side under a fixed standard-normal prior, then fits the
    /// mixture priors by EM on posterior draws. The cell prior is fitted the
    /// same way on a random set of observed cells.
    pub fn pretrain(&mut self) -> Result<()> {
        let adam = self.config.adam();
        let sides = self.active_sides();
        for &s in sides {
            let latent = self.model.side(s).latent_dim();
            let mixture = std::mem::replace(
                &mut self.model.side_mut(s).prior,
                GaussianMixture::standard_normal(latent),
            );
            let mut state = OptimizerState::new(self.model.group_size(s), adam);
            let w = SideWeights {
                contrast: 0.0,
                mode: GradMode::Elbo,
                train_prior: false,
                elbo: 1.0,
                ..self.side_weights(s)
            };
            for epoch in 0..self.config.pretrain_epochs {
                self.update_scale(s)?;
                let (elbo, _) = self.side_epoch(s, w, Some(&mut state))?;
                log::debug!("pretrain {s:?} epoch {} negative ELBO {elbo:.4}", epoch + 1);
            }
            self.update_scale(s)?;
            let vae = self.model.side(s);
            let posts: Vec<(Vec<f64>, Vec<f64>)> = self
                .views
                .inputs(s)
                .par_iter()
                .map(|x| vae.encode(x).map(|p| (p.mu_raw, p.sigma)))
                .collect::<Result<_>>()?;
            let points = posterior_draws(&posts, &mut self.rng);
            let k = mixture.num_components();
            let opts = EmOptions {
                restarts: self.config.em_restarts,
                std_floor: STD_FLOOR,
                ..EmOptions::default()
            };
            let seed = self.rng.random::<u64>();
            self.model.side_mut(s).prior = fit_em_with(&points, k, seed, &opts)?.mixture;
        }
        if self.config.mode == Mode::TwoStage {
            self.init_joint_prior()?;
        }
        self.pretrained = true;
        Ok(())
    }

    fn init_joint_prior(&mut self) -> Result<()> {
        let picks = sample_indices(&mut self.rng, self.views.present.len(), JOINT_EM_CELLS);
        let model = &self.model;
        let row_hat: Vec<Vec<f64>> = self
            .views
            .rows
            .par_iter()
            .map(|x| model.row.encode(x).map(|p| p.mu_scaled))
            .collect::<Result<_>>()?;
        let col_hat: Vec<Vec<f64>> = self
            .views
            .cols
            .par_iter()
            .map(|x| model.col.encode(x).map(|p| p.mu_scaled))
            .collect::<Result<_>>()?;
        let posts: Vec<(Vec<f64>, Vec<f64>)> = picks
            .par_iter()
            .map(|&p| {
                let (i, j) = self.views.present[p];
                model.joint.joint_encode(&row_hat[i], &col_hat[j])
            })
            .collect::<Result<_>>()?;
        let points = posterior_draws(&posts, &mut self.rng);
        let opts = EmOptions {
            restarts: self.config.em_restarts,
            std_floor: STD_FLOOR,
            ..EmOptions::default()
        };
        let seed = self.rng.random::<u64>();
        match fit_em_with(&points, self.config.joint_components(), seed, &opts) {
            Ok(fit) => self.model.joint.prior = fit.mixture,
            Err(e) => log::warn!("cell prior left at its random start: {e}"),
        }
        Ok(())
    }

    /// One pass of every active term with a parameter step per mini-batch.
    pub fn train_epoch(&mut self) -> Result<LossBreakdown> {
        let lambdas = self.config.lambdas();
        let mut out = LossBreakdown {
            epoch: self.epoch + 1,
            ..LossBreakdown::default()
        };
        for &s in self.active_sides() {
            let w = self.side_weights(s);
            if w.elbo == 0.0 && w.contrast == 0.0 && w.norm == 0.0 {
                continue;
            }
            self.update_scale(s)?;
            let (elbo, contrast) = self.side_epoch(s, w, None)?;
            match s {
                Side::Row => {
                    out.row_elbo = elbo;
                    out.row_contrastive = contrast;
                }
                Side::Column => {
                    out.col_elbo = elbo;
                    out.col_contrastive = contrast;
                }
            }
        }
        if self.config.mode == Mode::TwoStage {
            if self.config.lambda7 > 0.0 || self.config.lambda8 > 0.0 {
                let (elbo, contrast) = self.cell_epoch()?;
                out.cell_elbo = elbo;
                out.cell_contrastive = contrast;
            }
            if self.config.lambda9 > 0.0 {
                out.cross_loss = self.mi_step()?;
            }
        }
        if self.config.mode != Mode::FeatureOnly {
            out.row_norm = self.model.row.encoder.squared_norm() + self.model.row.decoder.squared_norm();
        }
        out.col_norm = self.model.col.encoder.squared_norm() + self.model.col.decoder.squared_norm();
        out.finish(&lambdas);
        if !out.total.is_finite() {
            return Err(Error::NonFinite(format!("objective at epoch {}", out.epoch)));
        }
        if !self.holdout.is_empty() {
            let mse = self.holdout_error()?;
            self.holdout_mse.push(mse);
        }
        self.epoch += 1;
        log::info!(
            "epoch {} total {:.4} rows {:.4} cols {:.4} cells {:.4} cross {:.4}",
            out.epoch,
            out.total,
            out.row_elbo,
            out.col_elbo,
            out.cell_elbo,
            out.cross_loss
        );
        self.trace.push(out.clone());
        Ok(out)
    }

    /// Mean squared reconstruction error over the withheld cells.
    pub fn holdout_error(&self) -> Result<f64> {
        if self.holdout.is_empty() {
            return Err(Error::InvalidArgument("no cells were withheld".into()));
        }
        let (side, by_row) = match self.config.mode {
            Mode::FeatureOnly => (Side::Column, false),
            _ => (Side::Row, true),
        };
        let vae = self.model.side(side);
        let mut cache: std::collections::HashMap<usize, Vec<f64>> = std::collections::HashMap::new();
        let mut sse = 0.0;
        for &(i, j, v) in &self.holdout {
            let (item, pos) = if by_row { (i, j) } else { (j, i) };
            if !cache.contains_key(&item) {
                let post = vae.encode(&self.views.inputs(side)[item])?;
                cache.insert(item, vae.decode(&post.mu_scaled)?);
            }
            sse += (cache[&item][pos] - v).powi(2);
        }
        Ok(sse / self.holdout.len() as f64)
    }

    /// Objective on explicit row, column and (observed) cell index sets at
    /// the current parameters, with fresh noise from `rng`. Nothing is
    /// updated. Terms whose weight is zero are reported as zero.
    pub fn total_loss(
        &self,
        rows: &[usize],
        cols: &[usize],
        cells: &[(usize, usize)],
        rng: &mut ChaCha8Rng,
    ) -> Result<LossBreakdown> {
        let c = &self.config;
        let k = c.importance_samples;
        let (n, d) = (self.views.matrix.n(), self.views.matrix.d());
        if rows.iter().any(|&i| i >= n) || cols.iter().any(|&j| j >= d) {
            return Err(Error::InvalidArgument("index out of range".into()));
        }
        let mut out = LossBreakdown {
            epoch: self.epoch,
            ..LossBreakdown::default()
        };
        for (s, idx) in [(Side::Row, rows), (Side::Column, cols)] {
            let w = self.side_weights(s);
            let noise: Vec<ItemNoise> = idx
                .iter()
                .map(|_| draw_item_noise(rng, k, self.model.side(s).latent_dim()))
                .collect();
            if idx.is_empty() || (w.elbo == 0.0 && w.contrast == 0.0) {
                continue;
            }
            let pass = side_pass(
                self.model.side(s),
                self.model.critic(s),
                &self.views,
                s,
                idx,
                &noise,
                &w,
                false,
            )?;
            let (elbo, contrast) = (if w.elbo > 0.0 { pass.neg_elbo } else { 0.0 }, pass.neg_contrast);
            match s {
                Side::Row => {
                    out.row_elbo = elbo;
                    out.row_contrastive = contrast;
                }
                Side::Column => {
                    out.col_elbo = elbo;
                    out.col_contrastive = contrast;
                }
            }
        }
        let w = CellWeights {
            elbo: c.lambda7,
            contrast: c.lambda8,
            mode: c.grad_mode(),
        };
        let noise: Vec<CellNoise> = cells
            .iter()
            .map(|_| draw_cell_noise(rng, k, c.row_latent, c.col_latent, c.joint_latent))
            .collect();
        if !cells.is_empty() && (w.elbo > 0.0 || w.contrast > 0.0) {
            let pass = cell_pass(&self.model, &self.views, cells, &noise, &w, false)?;
            out.cell_elbo = if w.elbo > 0.0 { pass.neg_elbo } else { 0.0 };
            out.cell_contrastive = pass.neg_contrast;
        }
        if c.lambda9 > 0.0 && rows.len() >= 2 && cols.len() >= 2 {
            if let Some((v, _)) = mi_pass(&self.model, &self.views, rows, cols, c.mi_base, c.lambda9, false)? {
                out.cross_loss = v;
            }
        }
        if c.lambda1 > 0.0 {
            out.row_norm = self.model.row.encoder.squared_norm() + self.model.row.decoder.squared_norm();
        }
        if c.lambda4 > 0.0 {
            out.col_norm = self.model.col.encoder.squared_norm() + self.model.col.decoder.squared_norm();
        }
        out.finish(&c.lambdas());
        Ok(out)
    }

    /// Pretrains if needed, then trains until `max_epochs` or early
    /// stopping. When pretraining or an epoch fails numerically and
    /// `abort_checkpoint` is set, the state from before it is written there.
    pub fn run(&mut self, abort_checkpoint: Option<&Path>) -> Result<CoClusterResult> {
        let guard = |e: Error, snapshot: Option<Checkpoint>| -> Result<CoClusterResult> {
            if let (true, Some(path), Some(snap)) =
                (e.category() == ErrorCategory::Numerical, abort_checkpoint, snapshot)
            {
                snap.save(path)?;
                log::error!("training aborted; last good state written to {}", path.display());
            }
            Err(e)
        };
        if !self.pretrained {
            let snapshot = abort_checkpoint.map(|_| self.checkpoint());
            if let Err(e) = self.pretrain() {
                return guard(e, snapshot);
            }
        }
        let mut stopped_early = false;
        while self.epoch < self.config.max_epochs {
            let snapshot = abort_checkpoint.map(|_| self.checkpoint());
            if let Err(e) = self.train_epoch() {
                return guard(e, snapshot);
            }
            let totals: Vec<f64> = self.trace.iter().map(|l| l.total).collect();
            if should_stop(&totals, &self.config) {
                log::info!("early stop after epoch {}", self.epoch);
                stopped_early = true;
                break;
            }
        }
        self.assignments(stopped_early)
    }

    /// Cluster memberships under the current models.
    pub fn assignments(&mut self, stopped_early: bool) -> Result<CoClusterResult> {
        let col_memberships = self.memberships(Side::Column)?;
        let row_memberships = match self.config.mode {
            Mode::FeatureOnly => self.rows_from_reconstruction()?,
            _ => self.memberships(Side::Row)?,
        };
        let cell_memberships = if self.config.mode == Mode::TwoStage {
            self.cell_memberships()?
        } else {
            Vec::new()
        };
        Ok(CoClusterResult {
            row_labels: hard_labels(&row_memberships),
            col_labels: hard_labels(&col_memberships),
            row_memberships,
            col_memberships,
            cell_memberships,
            loss_trace: self.trace.clone(),
            holdout_mse: self.holdout_mse.clone(),
            epochs: self.epoch,
            stopped_early,
        })
    }

    fn memberships(&mut self, s: Side) -> Result<Vec<Vec<f64>>> {
        let vae = self.model.side(s);
        let inputs = self.views.inputs(s);
        if self.config.assignment_sampling {
            inputs
                .iter()
                .map(|x| vae.cluster_assign_sampled(x, &mut self.rng))
                .collect()
        } else {
            inputs.par_iter().map(|x| vae.cluster_assign(x)).collect()
        }
    }

    /// Rows of the matrix rebuilt from the column model, clustered by EM.
    fn rows_from_reconstruction(&mut self) -> Result<Vec<Vec<f64>>> {
        let vae = &self.model.col;
        let recon: Vec<Vec<f64>> = self
            .views
            .cols
            .par_iter()
            .map(|x| {
                let post = vae.encode(x)?;
                vae.decode(&post.mu_scaled)
            })
            .collect::<Result<_>>()?;
        let (n, d) = (self.views.matrix.n(), self.views.matrix.d());
        let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..d).map(|j| recon[j][i]).collect()).collect();
        let opts = EmOptions {
            restarts: self.config.em_restarts,
            std_floor: STD_FLOOR,
            ..EmOptions::default()
        };
        let seed = self.rng.random::<u64>();
        let mix = fit_em_with(&rows, self.config.g, seed, &opts)?.mixture;
        rows.iter().map(|r| mix.responsibilities(r)).collect()
    }

    fn cell_memberships(&mut self) -> Result<Vec<CellMembership>> {
        let (n, d) = (self.views.matrix.n(), self.views.matrix.d());
        let picks = sample_indices(&mut self.rng, n * d, self.config.joint_assign_cells);
        let model = &self.model;
        let hat = |vae: &SideVae, inputs: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
            inputs.par_iter().map(|x| vae.encode(x).map(|p| p.mu_scaled)).collect()
        };
        let row_hat = hat(&model.row, &self.views.rows)?;
        let col_hat = hat(&model.col, &self.views.cols)?;
        picks
            .par_iter()
            .map(|&p| {
                let (i, j) = (p / d, p % d);
                let (mu, _) = model.joint.joint_encode(&row_hat[i], &col_hat[j])?;
                Ok(CellMembership {
                    row: i,
                    col: j,
                    memberships: model.joint.joint_responsibilities(&mu)?,
                })
            })
            .collect()
    }
}

/// Runs `f` on a pool with `threads` workers (all cores for 0).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Trains from scratch and returns the memberships together with the
/// trained state.
pub fn fit(matrix: &DataMatrix, config: TrainConfig) -> Result<(CoClusterResult, Trainer)> {
    with_threads(config.threads, || {
        let mut t = Trainer::new(matrix, config)?;
        let r = t.run(None)?;
        Ok((r, t))
    })?
}
