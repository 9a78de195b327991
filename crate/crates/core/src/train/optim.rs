//! AdamW over adapter arrays and the warmup-cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{GradientSet, PolicyParameters};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moments per trainable array, in gradient order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &PolicyParameters, config: OptimizerConfig) -> Self {
        let shapes: Vec<usize> = params.trainable_arrays().iter().map(|(_, m)| m.len()).collect();
        Self {
            config,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam step. `update` only labels errors.
pub fn optimizer_step(
    params: &mut PolicyParameters,
    grads: &GradientSet,
    state: &mut OptimizerState,
    lr: f64,
    update: usize,
) -> Result<()> {
    if !grads.shapes_match(params) || state.first.len() != grads.arrays().count() {
        return Err(Error::Shape("gradient and optimizer shapes do not match the adapters".into()));
    }
    if !grads.all_finite() {
        return Err(Error::NonFiniteGradient(update));
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (((p, g), m), v) in params
        .trainable_arrays_mut()
        .into_iter()
        .zip(grads.arrays())
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        for i in 0..g.len() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let w = p.data[i] as f64;
            let next = w - lr * c.weight_decay * w - lr * m_hat / (v_hat.sqrt() + c.epsilon);
            p.data[i] = next as f32;
        }
    }
    params.version += 1;
    if !params.all_finite() {
        return Err(Error::NonFiniteParameters(update));
    }
    Ok(())
}

/// Number of warmup updates for a run of `total` updates.
pub fn warmup_updates(total: usize, warmup_ratio: f64) -> usize {
    (warmup_ratio * total as f64).floor() as usize
}

/// Linear warmup from 0 to `peak` over `floor(ratio · total)` updates,
/// then cosine decay reaching 0 at update `total − 1`.
pub fn lr_at(update: usize, total: usize, peak: f64, warmup_ratio: f64) -> f64 {
    let total = total.max(1);
    let warmup = warmup_updates(total, warmup_ratio);
    if update < warmup {
        return peak * update as f64 / warmup as f64;
    }
    let span = total.saturating_sub(1).saturating_sub(warmup);
    if span == 0 {
        return peak;
    }
    let progress = ((update - warmup) as f64 / span as f64).min(1.0);
    0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;

    fn small() -> PolicyParameters {
        let config = PolicyConfig {
            vocab_size: 16,
            embed_dim: 8,
            context_len: 16,
            n_layers: 1,
            n_heads: 1,
            lora_rank: 1,
            lora_alpha: 1.0,
        };
        let mut p = PolicyParameters::init(config, 1).unwrap();
        p.randomize_adapters(0.5, 2);
        p
    }

    #[test]
    fn schedule_shape() {
        assert_eq!(lr_at(0, 100, 1e-3, 0.03), 0.0);
        assert_eq!(warmup_updates(100, 0.03), 3);
        assert!((lr_at(3, 100, 1e-3, 0.03) - 1e-3).abs() < 1e-18);
        assert!((lr_at(2, 100, 1e-3, 0.03) - 2e-3 / 3.0).abs() < 1e-18);
        assert!(lr_at(99, 100, 1e-3, 0.03).abs() < 1e-15);
        // midpoint of the cosine: (3 + 99) / 2 = 51
        assert!((lr_at(51, 100, 1e-3, 0.03) - 5e-4).abs() < 1e-15);
        // short runs have no warmup and still reach zero at the end
        assert_eq!(lr_at(0, 10, 0.1, 0.03), 0.1);
        assert!(lr_at(9, 10, 0.1, 0.03).abs() < 1e-15);
        assert_eq!(lr_at(0, 1, 0.1, 0.03), 0.1);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut p = small();
        let before = p.clone();
        let config = OptimizerConfig { weight_decay: 0.0, ..Default::default() };
        let mut state = OptimizerState::new(&p, config);
        let g = GradientSet::zeros_like(&p);
        optimizer_step(&mut p, &g, &mut state, 1e-3, 0).unwrap();
        assert_eq!(p.trainable_arrays(), before.trainable_arrays());
    }

    #[test]
    fn decay_shrinks_by_lr_times_decay() {
        let mut p = small();
        let w0 = p.adapters[0].up.data[0] as f64;
        let mut state = OptimizerState::new(&p, OptimizerConfig::default());
        let g = GradientSet::zeros_like(&p);
        optimizer_step(&mut p, &g, &mut state, 0.1, 0).unwrap();
        let expected = w0 - 0.1 * 0.01 * w0;
        assert!((p.adapters[0].up.data[0] as f64 - expected).abs() < 1e-7);
    }

    #[test]
    fn first_step_on_a_quadratic() {
        // f(w) = w^2 / 2 at w = 2: g = 2, m = 0.2, v = 0.004,
        // m_hat = 2, v_hat = 4, step = lr · 2 / (2 + eps).
        let mut p = small();
        p.adapters[0].up.data[0] = 2.0;
        let mut g = GradientSet::zeros_like(&p);
        g.grads[0].up[0] = 2.0;
        let config = OptimizerConfig { weight_decay: 0.0, ..Default::default() };
        let mut state = OptimizerState::new(&p, config);
        optimizer_step(&mut p, &g, &mut state, 0.01, 0).unwrap();
        let expected = 2.0 - 0.01 * 2.0 / (2.0 + 1e-8);
        assert!((p.adapters[0].up.data[0] as f64 - expected).abs() < 1e-6);
        assert!((state.first[0][0] - 0.2).abs() < 1e-15);
        assert!((state.second[0][0] - 0.004).abs() < 1e-15);
        assert_eq!(p.version, 1);

        // second step with the same gradient: m = 0.38, v = 0.007996
        g.grads[0].up[0] = 2.0;
        let w1 = p.adapters[0].up.data[0] as f64;
        optimizer_step(&mut p, &g, &mut state, 0.01, 1).unwrap();
        let m_hat = 0.38 / (1.0 - 0.81);
        let v_hat = 0.007996 / (1.0 - 0.999f64.powi(2));
        let expected = w1 - 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p.adapters[0].up.data[0] as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_names_the_update() {
        let mut p = small();
        let mut state = OptimizerState::new(&p, OptimizerConfig::default());
        let mut g = GradientSet::zeros_like(&p);
        g.grads[1].down[0] = f64::NAN;
        let err = optimizer_step(&mut p, &g, &mut state, 1e-3, 41).unwrap_err();
        assert_eq!(err.to_string(), "non-finite gradient at update 41");
    }
}
