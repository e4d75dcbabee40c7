//! Momentum SGD and AMSGrad over flat weight vectors.
//!
//! Momentum is the dampened form `m = eta1 * m + (1 - eta1) * g`, shared by both
//! optimizers, so that an AMSGrad step can be read as a momentum-SGD step with an
//! equivalent per-weight learning-rate ratio (see [`equivalent_lr`]).
//!
//! Weight decay is coupled L2: `lambda * w` is added to the gradient before any
//! moment update.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::median;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("gradient has {got} entries but the state holds {expected} weights")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("gradient entry {index} is not finite")]
    NonFiniteGradient { index: usize },
    #[error("state was advanced by {state:?} and cannot take a {requested:?} step")]
    AlgorithmMismatch { state: Algorithm, requested: Algorithm },
    #[error("equivalent learning rate requires a state advanced by AMSGrad")]
    NotAmsgrad,
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    SgdMomentum,
    Amsgrad,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub base_lr: f64,
    pub momentum: f64,
    pub second_moment: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    /// Momentum SGD with base rate 0.1 and momentum 0.9.
    pub fn sgd() -> Self {
        Self {
            algorithm: Algorithm::SgdMomentum,
            base_lr: 0.1,
            momentum: 0.9,
            second_moment: 0.99,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }

    /// AMSGrad with `alpha0 = 0.001`, `eta1 = 0.9`, `eta2 = 0.99`, `eps = 1e-8`.
    pub fn amsgrad() -> Self {
        Self {
            algorithm: Algorithm::Amsgrad,
            base_lr: 0.001,
            momentum: 0.9,
            second_moment: 0.99,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let fail = |msg: &str| Err(OptimError::InvalidConfig(msg.to_string()));
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return fail("base_lr must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.second_moment) {
            return fail("second_moment must lie in [0, 1)");
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return fail("epsilon must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail("weight_decay must be non-negative");
        }
        Ok(())
    }
}

/// Weights plus optimizer buffers. Buffers start at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub weights: Vec<f64>,
    pub momentum: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub second_moment_max: Vec<f64>,
    /// Completed steps.
    pub step_count: u64,
    algorithm: Option<Algorithm>,
}

impl OptimizerState {
    pub fn new(weights: Vec<f64>) -> Self {
        let n = weights.len();
        Self {
            weights,
            momentum: vec![0.0; n],
            second_moment: vec![0.0; n],
            second_moment_max: vec![0.0; n],
            step_count: 0,
            algorithm: None,
        }
    }

    /// The algorithm that has been driving this state, if any step was taken.
    pub fn algorithm(&self) -> Option<Algorithm> {
        self.algorithm
    }

    pub fn weight_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    fn begin_step(&mut self, grad: &[f64], algorithm: Algorithm) -> Result<(), OptimError> {
        if grad.len() != self.weights.len() {
            return Err(OptimError::ShapeMismatch {
                expected: self.weights.len(),
                got: grad.len(),
            });
        }
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(OptimError::NonFiniteGradient { index });
        }
        match self.algorithm {
            Some(state) if state != algorithm => Err(OptimError::AlgorithmMismatch {
                state,
                requested: algorithm,
            }),
            _ => {
                self.algorithm = Some(algorithm);
                Ok(())
            }
        }
    }
}

/// One momentum-SGD step with schedule ratio `beta`:
///
/// ```text
/// m_t = eta1 * m_{t-1} + (1 - eta1) * (g_t + lambda * w_{t-1})
/// w_t = w_{t-1} - alpha0 * beta * m_t
/// ```
pub fn sgd_momentum_step(
    state: &mut OptimizerState,
    grad: &[f64],
    beta: f64,
    cfg: &OptimizerConfig,
) -> Result<(), OptimError> {
    state.begin_step(grad, Algorithm::SgdMomentum)?;
    let eta1 = cfg.momentum;
    let step = cfg.base_lr * beta;
    for ((w, m), &g) in state.weights.iter_mut().zip(state.momentum.iter_mut()).zip(grad) {
        let g = g + cfg.weight_decay * *w;
        *m = eta1 * *m + (1.0 - eta1) * g;
        *w -= step * *m;
    }
    state.step_count += 1;
    Ok(())
}

/// One AMSGrad step, exactly as the six-line recurrence with bias-corrected
/// moments and a running maximum of the corrected second moment.
pub fn amsgrad_step(state: &mut OptimizerState, grad: &[f64], cfg: &OptimizerConfig) -> Result<(), OptimError> {
    amsgrad_step_scaled(state, grad, 1.0, cfg)
}

/// AMSGrad with the base rate additionally scaled by a schedule ratio `beta`.
/// `beta = 1` is the plain update.
pub fn amsgrad_step_scaled(
    state: &mut OptimizerState,
    grad: &[f64],
    beta: f64,
    cfg: &OptimizerConfig,
) -> Result<(), OptimError> {
    state.begin_step(grad, Algorithm::Amsgrad)?;
    let t = state.step_count + 1;
    let (eta1, eta2) = (cfg.momentum, cfg.second_moment);
    let m_correction = 1.0 - eta1.powf(t as f64);
    let v_correction = 1.0 - eta2.powf(t as f64);
    let step = cfg.base_lr * beta;
    for i in 0..grad.len() {
        let w = state.weights[i];
        let g = grad[i] + cfg.weight_decay * w;
        let m = eta1 * state.momentum[i] + (1.0 - eta1) * g;
        let v = eta2 * state.second_moment[i] + (1.0 - eta2) * g * g;
        let m_hat = m / m_correction;
        let v_hat = v / v_correction;
        let v_max = state.second_moment_max[i].max(v_hat);
        state.momentum[i] = m;
        state.second_moment[i] = v;
        state.second_moment_max[i] = v_max;
        state.weights[i] = w - step * m_hat / (v_max.sqrt() + cfg.epsilon);
    }
    state.step_count = t;
    Ok(())
}

/// Per-weight ratio that makes the last AMSGrad update equal to a momentum-SGD
/// update with base rate `sgd_base_lr`:
///
/// ```text
/// beta~_t = (alpha0_ams / alpha0_sgd) / ((1 - eta1^t) (sqrt(v_max) + eps))
/// ```
pub fn equivalent_lr_per_weight(
    state: &OptimizerState,
    cfg_ams: &OptimizerConfig,
    sgd_base_lr: f64,
) -> Result<Vec<f64>, OptimError> {
    if state.algorithm != Some(Algorithm::Amsgrad) || state.step_count == 0 {
        return Err(OptimError::NotAmsgrad);
    }
    let scale = cfg_ams.base_lr / sgd_base_lr / (1.0 - cfg_ams.momentum.powf(state.step_count as f64));
    Ok(state
        .second_moment_max
        .iter()
        .map(|v| scale / (v.sqrt() + cfg_ams.epsilon))
        .collect())
}

/// Median across weights of [`equivalent_lr_per_weight`].
pub fn equivalent_lr(state: &OptimizerState, cfg_ams: &OptimizerConfig, sgd_base_lr: f64) -> Result<f64, OptimError> {
    let per_weight = equivalent_lr_per_weight(state, cfg_ams, sgd_base_lr)?;
    median(&per_weight).ok_or(OptimError::NotAmsgrad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn single_momentum_step() {
        let mut state = OptimizerState::new(vec![0.0]);
        sgd_momentum_step(&mut state, &[2.0], 1.0, &OptimizerConfig::sgd()).unwrap();
        assert_relative_eq!(state.momentum[0], 0.2, max_relative = 1e-15);
        assert_relative_eq!(state.weights[0], -0.02, max_relative = 1e-15);
    }

    #[test]
    fn zero_momentum_is_vanilla_sgd() {
        let cfg = OptimizerConfig {
            momentum: 0.0,
            ..OptimizerConfig::sgd()
        };
        let mut state = OptimizerState::new(vec![1.0, -2.0]);
        sgd_momentum_step(&mut state, &[0.5, 3.0], 0.7, &cfg).unwrap();
        assert_eq!(state.weights, vec![1.0 - 0.1 * 0.7 * 0.5, -2.0 - 0.1 * 0.7 * 3.0]);
    }

    #[test]
    fn zero_ratio_only_updates_momentum() {
        let mut state = OptimizerState::new(vec![1.5]);
        sgd_momentum_step(&mut state, &[1.0], 0.0, &OptimizerConfig::sgd()).unwrap();
        assert_eq!(state.weights, vec![1.5]);
        assert_relative_eq!(state.momentum[0], 0.1, max_relative = 1e-15);
    }

    #[test]
    fn gradient_checks() {
        let mut state = OptimizerState::new(vec![0.0; 3]);
        assert_eq!(
            sgd_momentum_step(&mut state, &[1.0], 1.0, &OptimizerConfig::sgd()),
            Err(OptimError::ShapeMismatch { expected: 3, got: 1 })
        );
        assert_eq!(
            amsgrad_step(&mut state, &[1.0, f64::NAN, 0.0], &OptimizerConfig::amsgrad()),
            Err(OptimError::NonFiniteGradient { index: 1 })
        );
        assert_eq!(state.step_count, 0);
        assert_eq!(state.algorithm(), None);
    }

    #[test]
    fn mixing_algorithms_is_rejected() {
        let mut state = OptimizerState::new(vec![0.0]);
        amsgrad_step(&mut state, &[1.0], &OptimizerConfig::amsgrad()).unwrap();
        assert!(matches!(
            sgd_momentum_step(&mut state, &[1.0], 1.0, &OptimizerConfig::sgd()),
            Err(OptimError::AlgorithmMismatch { .. })
        ));
    }

    #[test]
    fn first_amsgrad_step() {
        let cfg = OptimizerConfig::amsgrad();
        let mut state = OptimizerState::new(vec![0.0; 4]);
        amsgrad_step(&mut state, &[1.0; 4], &cfg).unwrap();
        for i in 0..4 {
            assert_relative_eq!(state.second_moment_max[i], 1.0, max_relative = 1e-12);
            assert_relative_eq!(state.weights[i], -0.001 / (1.0 + 1e-8), max_relative = 1e-12);
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let cfg = OptimizerConfig::amsgrad();
        let mut state = OptimizerState::new(vec![0.3, -0.7]);
        for _ in 0..20 {
            amsgrad_step(&mut state, &[0.0, 0.0], &cfg).unwrap();
        }
        assert_eq!(state.weights, vec![0.3, -0.7]);
        assert_eq!(state.second_moment_max, vec![0.0, 0.0]);
    }

    #[test]
    fn constant_gradient_second_moment() {
        let cfg = OptimizerConfig::amsgrad();
        let c = 0.37;
        let mut state = OptimizerState::new(vec![0.0]);
        for t in 1..=200u32 {
            amsgrad_step(&mut state, &[c], &cfg).unwrap();
            // v_t = (1 - eta2^t) c^2 by the geometric series.
            let v_oracle = (1.0 - 0.99f64.powi(t as i32)) * c * c;
            assert_relative_eq!(state.second_moment[0], v_oracle, max_relative = 1e-9);
            assert_relative_eq!(state.second_moment_max[0], c * c, max_relative = 1e-9);
        }
    }

    #[test]
    fn equivalent_lr_closed_forms() {
        let cfg = OptimizerConfig::amsgrad();
        let mut state = OptimizerState::new(vec![0.0; 5]);
        assert_eq!(equivalent_lr(&state, &cfg, 0.1), Err(OptimError::NotAmsgrad));
        amsgrad_step(&mut state, &[1.0; 5], &cfg).unwrap();
        let first = equivalent_lr(&state, &cfg, 0.1).unwrap();
        assert_relative_eq!(first, 0.01 / (0.1 * (1.0 + 1e-8)), max_relative = 1e-9);
        for _ in 0..2000 {
            amsgrad_step(&mut state, &[1.0; 5], &cfg).unwrap();
        }
        let late = equivalent_lr(&state, &cfg, 0.1).unwrap();
        assert_relative_eq!(late, 0.01 / (1.0 + 1e-8), max_relative = 1e-9);
        let per_weight = equivalent_lr_per_weight(&state, &cfg, 0.1).unwrap();
        assert!(per_weight.iter().all(|&b| b == late));

        let mut sgd_state = OptimizerState::new(vec![0.0]);
        sgd_momentum_step(&mut sgd_state, &[1.0], 1.0, &OptimizerConfig::sgd()).unwrap();
        assert_eq!(equivalent_lr(&sgd_state, &cfg, 0.1), Err(OptimError::NotAmsgrad));
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::sgd().validate().is_ok());
        assert!(OptimizerConfig {
            momentum: 1.0,
            ..OptimizerConfig::sgd()
        }
        .validate()
        .is_err());
        assert!(OptimizerConfig::amsgrad().with_weight_decay(-1.0).validate().is_err());
    }
}
