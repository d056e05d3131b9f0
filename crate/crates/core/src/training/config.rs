use serde::{Deserialize, Serialize};

use crate::kgdata::PerturbMode;
use crate::numerics::OptimizerKind;

use super::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerChoice {
    Sgd,
    Adam,
}

/// All hyperparameters of one training run. Every field has a default, so a
/// partial JSON config materializes fully.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Weight of the alignment term in the joint objective.
    pub alpha: f64,
    pub optimizer: OptimizerChoice,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of subgraph edges retained during training and evaluation.
    pub coverage: f64,
    pub perturb_mode: Option<PerturbMode>,
    pub perturb_rate: f64,
    /// Apply the perturbation during training as well as evaluation.
    pub perturb_train: bool,
    pub hop_bound: usize,
    pub d_kg: usize,
    pub rgcn_layers: usize,
    pub add_inverse_edges: bool,
    pub d_lm: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub d_attn: usize,
    pub scalar_gate: bool,
    pub freeze_context_encoder: bool,
    /// Skip all knowledge machinery: the pure language-model baseline.
    pub knowledge_free: bool,
    /// Build path that never computes the alignment term.
    pub disable_alignment: bool,
    /// Block gradients into the knowledge side of the alignment term.
    pub align_stop_grad_kg: bool,
    /// Weight of the next-token language-modeling term inside L_task.
    pub lm_loss_weight: f64,
    /// Seeds used for sweep cells.
    pub sweep_seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            alpha: 0.1,
            optimizer: OptimizerChoice::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 8,
            batch_size: 8,
            seed: 42,
            coverage: 1.0,
            perturb_mode: None,
            perturb_rate: 0.0,
            perturb_train: false,
            hop_bound: 2,
            d_kg: 32,
            rgcn_layers: 2,
            add_inverse_edges: false,
            d_lm: 32,
            n_heads: 2,
            n_blocks: 2,
            d_ff: 64,
            max_len: 64,
            d_attn: 32,
            scalar_gate: false,
            freeze_context_encoder: false,
            knowledge_free: false,
            disable_alignment: false,
            align_stop_grad_kg: false,
            lm_loss_weight: 1.0,
            sweep_seeds: vec![1, 2, 3],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(TrainError::Config(format!(
                "alpha must be non-negative, got {}",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.coverage) {
            return Err(TrainError::Config(format!(
                "coverage must lie in [0, 1], got {}",
                self.coverage
            )));
        }
        if !(0.0..=1.0).contains(&self.perturb_rate) {
            return Err(TrainError::Config(format!(
                "perturb_rate must lie in [0, 1], got {}",
                self.perturb_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        for (name, v) in [
            ("d_kg", self.d_kg),
            ("d_lm", self.d_lm),
            ("d_attn", self.d_attn),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("n_blocks", self.n_blocks),
            ("rgcn_layers", self.rgcn_layers),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return Err(TrainError::Config(format!("{name} must be >= 1")));
            }
        }
        if self.d_lm % self.n_heads != 0 {
            return Err(TrainError::Config(format!(
                "d_lm ({}) must be divisible by n_heads ({})",
                self.d_lm, self.n_heads
            )));
        }
        if self.sweep_seeds.is_empty() {
            return Err(TrainError::Config("sweep_seeds must be non-empty".into()));
        }
        Ok(())
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerChoice::Sgd => OptimizerKind::Sgd,
            OptimizerChoice::Adam => OptimizerKind::Adam {
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
            },
        }
    }

    /// Whether a step computes the alignment term at all. With alpha = 0 the
    /// term is skipped entirely, which makes an alpha = 0 run take exactly
    /// the same numeric path as a `disable_alignment` build.
    pub fn alignment_active(&self) -> bool {
        !self.disable_alignment && self.alpha != 0.0 && !self.knowledge_free
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn bad_values_are_rejected() {
        for patch in [
            |c: &mut TrainConfig| c.learning_rate = 0.0,
            |c: &mut TrainConfig| c.learning_rate = -1.0,
            |c: &mut TrainConfig| c.alpha = -0.1,
            |c: &mut TrainConfig| c.coverage = 1.2,
            |c: &mut TrainConfig| c.batch_size = 0,
            |c: &mut TrainConfig| c.n_heads = 3,
            |c: &mut TrainConfig| c.sweep_seeds = vec![],
        ] {
            let mut cfg = TrainConfig::default();
            patch(&mut cfg);
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn partial_json_materializes_defaults() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"learning_rate": 5e-4, "epochs": 2}"#).unwrap();
        assert_eq!(cfg.learning_rate, 5e-4);
        assert_eq!(cfg.epochs, 2);
        assert_eq!(cfg.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn alignment_activity_gate() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.alignment_active());
        cfg.alpha = 0.0;
        assert!(!cfg.alignment_active());
        cfg.alpha = 0.1;
        cfg.disable_alignment = true;
        assert!(!cfg.alignment_active());
        cfg.disable_alignment = false;
        cfg.knowledge_free = true;
        assert!(!cfg.alignment_active());
    }
}
