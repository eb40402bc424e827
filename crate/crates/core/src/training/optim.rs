//! Adam with bias correction, coupled weight decay, and weight
//! initialization.

use crate::model::ModelParams;
use crate::rng::Prng;
use crate::training::grad::GradientBundle;
use crate::training::train::TrainConfig;

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub step_count: u64,
    pub first_moment: GradientBundle,
    pub second_moment: GradientBundle,
    pub learning_rate: f64,
    pub beta_1: f64,
    pub beta_2: f64,
    pub epsilon_hat: f64,
    /// Coupled L2 decay added to the incoming gradient of every weight
    /// tensor (biases excluded). Zero when the loss already carries the
    /// penalty, which is how [`super::train`] runs.
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, learning_rate: f64) -> Self {
        Self {
            step_count: 0,
            first_moment: GradientBundle::zeros_like(params),
            second_moment: GradientBundle::zeros_like(params),
            learning_rate,
            beta_1: 0.9,
            beta_2: 0.999,
            epsilon_hat: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// One bias-corrected adaptive-moment update, in place.
pub fn adam_step(state: &mut OptimizerState, params: &mut ModelParams, grads: &GradientBundle) {
    state.step_count += 1;
    let t = state.step_count as i32;
    let corr1 = 1.0 - state.beta_1.powi(t);
    let corr2 = 1.0 - state.beta_2.powi(t);
    let lr = state.learning_rate;
    let (b1, b2, eps, wd) = (
        state.beta_1,
        state.beta_2,
        state.epsilon_hat,
        state.weight_decay,
    );
    for (((name, p), (_, g)), ((_, m), (_, v))) in
        params.tensors_mut().into_iter().zip(grads.tensors()).zip(
            state
                .first_moment
                .tensors_mut()
                .into_iter()
                .zip(state.second_moment.tensors_mut()),
        )
    {
        let decay = if ModelParams::is_bias(name) { 0.0 } else { wd };
        for i in 0..p.len() {
            let grad = g[i] + decay * p[i];
            m[i] = b1 * m[i] + (1.0 - b1) * grad;
            v[i] = b2 * v[i] + (1.0 - b2) * grad * grad;
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Fresh parameters: the shared layer uses a variance-scaled normal
/// (variance 2 / fan_in, matching the rectifier), branch weights use a
/// 1e-4 standard deviation normal, biases start at zero.
pub fn initialize(config: &TrainConfig, feature_dim: usize, rng: &mut Prng) -> ModelParams {
    let mut params = ModelParams::zeros(config.variant, config.k, feature_dim, config.hidden_dim);
    let shared_std = (2.0 / feature_dim as f64).sqrt();
    for v in params.shared_w.as_mut_slice() {
        *v = shared_std * rng.normal();
    }
    for v in params.cls_w.as_mut_slice() {
        *v = 1e-4 * rng.normal();
    }
    if let Some(w) = &mut params.det_w {
        for v in w.as_mut_slice() {
            *v = 1e-4 * rng.normal();
        }
    }
    params
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn small_params() -> ModelParams {
        let mut p = ModelParams::zeros(Variant::ClsDet, 2, 2, 2);
        for (_, t) in p.tensors_mut() {
            for (i, v) in t.iter_mut().enumerate() {
                *v = 0.1 * (i as f64 + 1.0);
            }
        }
        p
    }

    fn grads_filled(params: &ModelParams, value: f64) -> GradientBundle {
        let mut g = GradientBundle::zeros_like(params);
        for (_, t) in g.tensors_mut() {
            for v in t {
                *v = value;
            }
        }
        g
    }

    #[test]
    fn first_step_moves_by_learning_rate_times_sign() {
        let mut params = small_params();
        let reference = params.clone();
        let mut state = OptimizerState::new(&params, 1e-3);
        let mut grads = grads_filled(&params, 0.0);
        // mixed signs, all far above epsilon_hat
        let t = grads.tensors_mut();
        for (k, (_, slice)) in t.into_iter().enumerate() {
            for (i, v) in slice.iter_mut().enumerate() {
                *v = if (k + i) % 2 == 0 { 0.5 } else { -0.25 };
            }
        }
        adam_step(&mut state, &mut params, &grads);
        // bias-corrected first step: m_hat = g, v_hat = g^2, so the update
        // is -lr * g / (|g| + eps) = -lr * sign(g) up to eps
        for ((_, p), ((_, r), (_, g))) in params
            .tensors()
            .into_iter()
            .zip(reference.tensors().into_iter().zip(grads.tensors()))
        {
            for ((&pv, &rv), &gv) in p.iter().zip(r).zip(g) {
                let expected = rv - 1e-3 * gv.signum();
                assert!((pv - expected).abs() < 1e-9, "{pv} vs {expected}");
            }
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut params = small_params();
        let reference = params.clone();
        let mut state = OptimizerState::new(&params, 1e-2);
        let grads = grads_filled(&params, 0.0);
        for _ in 0..3 {
            adam_step(&mut state, &mut params, &grads);
        }
        assert_eq!(params, reference);
    }

    #[test]
    fn zero_betas_degenerate_to_sign_normalized_descent() {
        let mut params = small_params();
        let reference = params.clone();
        let mut state = OptimizerState::new(&params, 1e-2);
        state.beta_1 = 0.0;
        state.beta_2 = 0.0;
        let grads = grads_filled(&params, -2.0);
        adam_step(&mut state, &mut params, &grads);
        adam_step(&mut state, &mut params, &grads);
        for ((_, p), (_, r)) in params.tensors().into_iter().zip(reference.tensors()) {
            for (&pv, &rv) in p.iter().zip(r) {
                let expected = rv + 2.0 * 1e-2; // two steps of +lr
                assert!((pv - expected).abs() < 1e-7, "{pv} vs {expected}");
            }
        }
    }

    #[test]
    fn weight_decay_pulls_weights_but_not_biases() {
        let mut params = small_params();
        let reference = params.clone();
        let mut state = OptimizerState::new(&params, 1e-3);
        state.weight_decay = 0.1;
        let grads = grads_filled(&params, 0.0);
        adam_step(&mut state, &mut params, &grads);
        for ((name, p), (_, r)) in params.tensors().into_iter().zip(reference.tensors()) {
            for (&pv, &rv) in p.iter().zip(r) {
                if ModelParams::is_bias(name) {
                    assert_eq!(pv, rv);
                } else {
                    assert!(pv < rv, "{name} should shrink: {pv} vs {rv}");
                }
            }
        }
    }

    #[test]
    fn initialization_is_deterministic_under_the_seed() {
        let config = TrainConfig {
            hidden_dim: 8,
            ..TrainConfig::default()
        };
        let a = initialize(&config, 16, &mut Prng::stream(9, "init", 0));
        let b = initialize(&config, 16, &mut Prng::stream(9, "init", 0));
        assert_eq!(a, b);
    }

    #[test]
    fn branch_weights_have_the_declared_standard_deviation() {
        let config = TrainConfig {
            hidden_dim: 500,
            ..TrainConfig::default()
        };
        // 3 classes x 500 + 2 x 500 = 2500 branch draws per init; pool a
        // few seeds to pass 1e5 samples
        let mut values = Vec::new();
        for s in 0..80 {
            let p = initialize(&config, 4, &mut Prng::stream(s, "init", 0));
            values.extend_from_slice(p.cls_w.as_slice());
            values.extend_from_slice(p.det_w.as_ref().unwrap().as_slice());
        }
        assert!(values.len() >= 100_000);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / values.len() as f64)
            .sqrt();
        assert!((0.9e-4..=1.1e-4).contains(&std), "std {std}");
    }

    #[test]
    fn shared_layer_variance_scales_with_fan_in() {
        let fan_in = 50;
        let config = TrainConfig {
            hidden_dim: 40,
            ..TrainConfig::default()
        };
        let mut sq = 0.0;
        let mut n = 0usize;
        for s in 0..60 {
            let p = initialize(&config, fan_in, &mut Prng::stream(s, "init", 0));
            sq += p.shared_w.as_slice().iter().map(|v| v * v).sum::<f64>();
            n += p.shared_w.as_slice().len();
        }
        assert!(n >= 100_000);
        let var = sq / n as f64;
        let target = 2.0 / fan_in as f64;
        assert!(
            (var - target).abs() <= 0.2 * target,
            "variance {var} vs target {target}"
        );
    }
}
