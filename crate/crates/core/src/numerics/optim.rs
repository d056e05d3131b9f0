use super::params::ParamSet;
use super::tensor::NumericsError;

/// Which update rule an [`Optimizer`] applies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn adam_default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// SGD or bias-corrected Adam over a [`ParamSet`].
///
/// Adam keeps first/second moment buffers and a step counter per parameter,
/// allocated on first use.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    slots: Vec<Option<AdamSlot>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> super::Result<Self> {
        if !learning_rate.is_finite() || learning_rate < 0.0 {
            return Err(NumericsError::BadLearningRate(learning_rate));
        }
        Ok(Optimizer {
            kind,
            learning_rate,
            slots: Vec::new(),
        })
    }

    /// Apply one update to every trainable parameter.
    ///
    /// Every trainable parameter must have a gradient buffer (zeroed is fine);
    /// a missing buffer is a contract error naming the parameter.
    pub fn step(&mut self, params: &mut ParamSet) -> super::Result<()> {
        if self.slots.len() < params.len() {
            self.slots.resize(params.len(), None);
        }
        for i in 0..params.len() {
            let param = params.get_mut(super::ParamId(i));
            if !param.trainable {
                continue;
            }
            let name = param.name.clone();
            let n = param.tensor.numel();
            let grad = param
                .tensor
                .grad
                .as_ref()
                .ok_or(NumericsError::MissingGradient { name })?
                .clone();
            let values = param.tensor.values_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in values.iter_mut().zip(&grad) {
                        *w -= self.learning_rate * g;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, epsilon } => {
                    let slot = self.slots[i].get_or_insert_with(|| AdamSlot {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                        step: 0,
                    });
                    slot.step += 1;
                    let t = slot.step as f64;
                    let bc1 = 1.0 - beta1.powf(t);
                    let bc2 = 1.0 - beta2.powf(t);
                    for j in 0..n {
                        let g = grad[j];
                        slot.m[j] = beta1 * slot.m[j] + (1.0 - beta1) * g;
                        slot.v[j] = beta2 * slot.v[j] + (1.0 - beta2) * g * g;
                        let m_hat = slot.m[j] / bc1;
                        let v_hat = slot.v[j] / bc2;
                        values[j] -= self.learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn one_param(value: f64, grad: f64) -> (ParamSet, super::super::ParamId) {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::scalar(value).unwrap()).unwrap();
        ps.get_mut(id).tensor.grad = Some(vec![grad]);
        (ps, id)
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let (mut ps, id) = one_param(1.0, 123.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.0).unwrap();
        opt.step(&mut ps).unwrap();
        assert_eq!(ps.get(id).tensor.values(), &[1.0]);

        let (mut ps, id) = one_param(1.0, 123.0);
        let mut opt = Optimizer::new(OptimizerKind::adam_default(), 0.0).unwrap();
        opt.step(&mut ps).unwrap();
        assert_eq!(ps.get(id).tensor.values(), &[1.0]);
    }

    #[test]
    fn sgd_definitional_update() {
        let (mut ps, id) = one_param(1.0, 0.5);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1).unwrap();
        opt.step(&mut ps).unwrap();
        assert!((ps.get(id).tensor.values()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut ps = ParamSet::new();
        ps.add("hidden.w", Tensor::scalar(1.0).unwrap()).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1).unwrap();
        let err = opt.step(&mut ps).unwrap_err();
        assert!(err.to_string().contains("hidden.w"));
    }

    /// Independently coded Adam used as a reference.
    fn adam_oracle(
        w0: f64,
        grads: &[f64],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> f64 {
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as f64;
            m = beta1 * m + (1.0 - beta1) * g;
            v = beta2 * v + (1.0 - beta2) * g * g;
            let m_hat = m / (1.0 - beta1.powf(t));
            let v_hat = v / (1.0 - beta2.powf(t));
            w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        w
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        // |delta| = lr * |g| / (|g| + eps), so the identity needs |g| >> eps.
        for &g in &[0.5, -2.0, 1.0, 40.0] {
            let (mut ps, id) = one_param(1.0, g);
            let lr = 0.01;
            let mut opt = Optimizer::new(OptimizerKind::adam_default(), lr).unwrap();
            opt.step(&mut ps).unwrap();
            let delta = ps.get(id).tensor.values()[0] - 1.0;
            assert!(
                (delta.abs() - lr).abs() < 1e-9,
                "|delta| = {} for g = {g}",
                delta.abs()
            );
            let oracle = adam_oracle(1.0, &[g], lr, 0.9, 0.999, 1e-8);
            assert!((ps.get(id).tensor.values()[0] - oracle).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_multi_step_matches_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let grads: Vec<f64> = (0..25).map(|_| rng.random_range(-3.0..3.0)).collect();
        let lr = 0.05;
        let (mut ps, id) = one_param(0.3, 0.0);
        let mut opt = Optimizer::new(OptimizerKind::adam_default(), lr).unwrap();
        for &g in &grads {
            ps.get_mut(id).tensor.grad = Some(vec![g]);
            opt.step(&mut ps).unwrap();
        }
        let oracle = adam_oracle(0.3, &grads, lr, 0.9, 0.999, 1e-8);
        assert!((ps.get(id).tensor.values()[0] - oracle).abs() < 1e-12);
    }

    #[test]
    fn frozen_params_are_skipped() {
        let (mut ps, id) = one_param(1.0, 1.0);
        ps.freeze_prefix("w");
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1).unwrap();
        opt.step(&mut ps).unwrap();
        assert_eq!(ps.get(id).tensor.values(), &[1.0]);
    }
}
