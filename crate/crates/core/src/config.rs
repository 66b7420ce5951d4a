//! Training configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{Attribution, EncoderEstimator, PriorEstimator};
use crate::info::{CriticKind, MiBase};
use crate::linalg::AdamConfig;
use crate::side::{GradMode, Likelihood};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Row, column and cell objectives plus the cross-loss.
    #[default]
    TwoStage,
    /// Row and column objectives only, no cell model and no cross-loss.
    SimpleCascade,
    /// Column side only; rows are clustered in the reconstructed space.
    FeatureOnly,
}

/// Every knob of the training procedure. Field names are also the keys of
/// the TOML config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Row clusters.
    pub g: usize,
    /// Column clusters.
    pub m: usize,
    /// Cell clusters; `g · m` when unset.
    pub joint_components: Option<usize>,
    pub row_latent: usize,
    pub col_latent: usize,
    pub joint_latent: usize,
    /// Hidden widths of the side encoders (decoders mirror them).
    pub hidden: Vec<usize>,
    pub joint_hidden: usize,

    /// Row parameter norm.
    pub lambda1: f64,
    /// Row negative ELBO.
    pub lambda2: f64,
    /// Row contrastive term.
    pub lambda3: f64,
    /// Column parameter norm.
    pub lambda4: f64,
    /// Column negative ELBO.
    pub lambda5: f64,
    /// Column contrastive term.
    pub lambda6: f64,
    /// Cell negative ELBO.
    pub lambda7: f64,
    /// Cell contrastive term.
    pub lambda8: f64,
    /// Mutual-information cross-loss.
    pub lambda9: f64,

    /// Importance samples per item.
    pub importance_samples: usize,
    pub row_batch: usize,
    pub col_batch: usize,
    pub cell_batch: usize,
    /// Cells visited per epoch (all cells when the matrix is smaller).
    pub cells_per_epoch: usize,

    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,

    pub max_epochs: usize,
    pub pretrain_epochs: usize,
    /// Target spread of the scaled means.
    pub tau: f64,
    pub f_max: f64,

    pub mode: Mode,
    /// Doubly reparameterized estimators; the plain importance-weighted
    /// gradient otherwise.
    pub dreg: bool,
    pub attribution: Attribution,
    pub seed: u64,

    pub row_likelihood: Likelihood,
    pub col_likelihood: Likelihood,
    pub joint_likelihood: Likelihood,

    pub critic: CriticKind,
    pub temperature: f64,

    pub mi_base: MiBase,
    pub mi_rows: usize,
    pub mi_cols: usize,

    pub early_stopping: bool,
    pub early_stopping_tol: f64,
    pub early_stopping_window: usize,
    pub min_epochs: usize,

    /// Assign clusters from a posterior sample instead of the mean.
    pub assignment_sampling: bool,
    /// Cells whose joint memberships are reported.
    pub joint_assign_cells: usize,
    pub em_restarts: usize,
    /// Worker threads; 0 uses all cores.
    pub threads: usize,
    /// Fraction of observed cells withheld for reconstruction error.
    pub holdout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            g: 4,
            m: 3,
            joint_components: None,
            row_latent: 4,
            col_latent: 4,
            joint_latent: 2,
            hidden: vec![32],
            joint_hidden: 16,
            lambda1: 1e-4,
            lambda2: 1.0,
            lambda3: 0.1,
            lambda4: 1e-4,
            lambda5: 1.0,
            lambda6: 0.1,
            lambda7: 1.0,
            lambda8: 0.1,
            lambda9: 1.0,
            importance_samples: 5,
            row_batch: 16,
            col_batch: 16,
            cell_batch: 128,
            cells_per_epoch: 2048,
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            max_epochs: 100,
            pretrain_epochs: 20,
            tau: 1.0,
            f_max: 100.0,
            mode: Mode::TwoStage,
            dreg: true,
            attribution: Attribution::Weighted,
            seed: 0,
            row_likelihood: Likelihood::GaussianUnitVariance,
            col_likelihood: Likelihood::GaussianUnitVariance,
            joint_likelihood: Likelihood::GaussianUnitVariance,
            critic: CriticKind::Bilinear,
            temperature: 0.1,
            mi_base: MiBase::Data,
            mi_rows: 512,
            mi_cols: 512,
            early_stopping: true,
            early_stopping_tol: 1e-4,
            early_stopping_window: 10,
            min_epochs: 20,
            assignment_sampling: false,
            joint_assign_cells: 1000,
            em_restarts: 3,
            threads: 1,
            holdout: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn joint_components(&self) -> usize {
        self.joint_components.unwrap_or(self.g * self.m)
    }

    pub fn lambdas(&self) -> [f64; 9] {
        [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
            self.lambda5,
            self.lambda6,
            self.lambda7,
            self.lambda8,
            self.lambda9,
        ]
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
        }
    }

    pub fn grad_mode(&self) -> GradMode {
        if self.dreg {
            GradMode::Iwae {
                encoder: EncoderEstimator::Dreg,
                prior: PriorEstimator::Gdreg(self.attribution),
            }
        } else {
            GradMode::Iwae {
                encoder: EncoderEstimator::TotalDerivative,
                prior: PriorEstimator::Direct,
            }
        }
    }

    /// Checks internal consistency; `n × d` is the data shape when known.
    pub fn validate(&self, shape: Option<(usize, usize)>) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.g == 0 || self.m == 0 || self.joint_components() == 0 {
            return bad("cluster counts must be ≥ 1");
        }
        if self.row_latent == 0 || self.col_latent == 0 || self.joint_latent == 0 {
            return bad("latent dimensions must be ≥ 1");
        }
        if self.hidden.contains(&0) || self.joint_hidden == 0 {
            return bad("hidden widths must be ≥ 1");
        }
        if self.lambdas().iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return bad("all lambda weights must be finite and ≥ 0");
        }
        if self.importance_samples == 0 {
            return bad("importance_samples must be ≥ 1");
        }
        if self.row_batch < 2 || self.col_batch < 2 || self.cell_batch < 2 {
            return bad("batch sizes must be ≥ 2");
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("optimizer constants out of range");
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam_epsilon must be positive");
        }
        if !(self.tau > 0.0) || !(self.f_max >= 1.0) {
            return bad("tau must be positive and f_max ≥ 1");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if self.mi_rows < 2 || self.mi_cols < 2 {
            return bad("MI subsample sizes must be ≥ 2");
        }
        if !(0.0..0.5).contains(&self.holdout) {
            return bad("holdout must lie in [0, 0.5)");
        }
        if self.em_restarts == 0 {
            return bad("em_restarts must be ≥ 1");
        }
        if let Some((n, d)) = shape {
            if self.g > n || self.m > d {
                return Err(Error::InvalidConfig(format!(
                    "need g ≤ n and m ≤ d, got g={} n={n} m={} d={d}",
                    self.g, self.m
                )));
            }
            if n < 2 || d < 2 {
                return bad("matrix needs at least two rows and two columns");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = TrainConfig::default();
        c.validate(Some((200, 100))).unwrap();
        assert_eq!(c.joint_components(), 12);
    }

    #[test]
    fn rejects_bad_values() {
        let c = TrainConfig {
            lambda3: -1.0,
            ..TrainConfig::default()
        };
        assert!(c.validate(None).is_err());
        let c = TrainConfig {
            g: 10,
            ..TrainConfig::default()
        };
        assert!(c.validate(Some((5, 5))).is_err());
        let c = TrainConfig {
            importance_samples: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate(None).is_err());
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let c = TrainConfig {
            mode: Mode::FeatureOnly,
            dreg: false,
            ..TrainConfig::default()
        };
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), c);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
        let partial: TrainConfig = serde_json::from_str(r#"{"g": 2, "mode": "simple_cascade"}"#).unwrap();
        assert_eq!(partial.g, 2);
        assert_eq!(partial.mode, Mode::SimpleCascade);
    }
}
