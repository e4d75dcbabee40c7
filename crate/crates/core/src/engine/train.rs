use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::objective::{full_gradient_norm, Objective, Supervised};
use super::record::{Evaluation, IterationSample, RunMeta, RunRecord};
use super::{EngineError, Network};
use crate::data::Dataset;
use crate::optim::{amsgrad_step_scaled, sgd_momentum_step, Algorithm, OptimizerConfig, OptimizerState};
use crate::schedules::{apply_warmup, eval_schedule, BudgetClock, ScheduleSpec};

/// Minibatch losses above this (or non-finite) mark the run as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalCadence {
    /// Evaluate after every this many iterations; `None` means once per epoch.
    pub every: Option<u64>,
    /// Whether to pay for a full pass to compute the full-gradient norm.
    pub full_grad_norm: bool,
}

impl Default for EvalCadence {
    fn default() -> Self {
        Self {
            every: None,
            full_grad_norm: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Must be budget-aware; convert unaware schedules beforehand.
    pub schedule: ScheduleSpec,
    pub budget: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub warmup: u64,
    pub eval: EvalCadence,
}

impl TrainConfig {
    pub fn new(schedule: ScheduleSpec, budget: u64, batch_size: usize, optimizer: OptimizerConfig, seed: u64) -> Self {
        Self {
            schedule,
            budget,
            batch_size,
            optimizer,
            seed,
            warmup: 0,
            eval: EvalCadence::default(),
        }
    }
}

/// Called after every optimizer step with the iteration index, the updated
/// state and the minibatch gradient that produced it.
pub type Observer<'o> = dyn FnMut(u64, &OptimizerState, &[f64]) + 'o;

/// Trains `network` from its seeded initialisation on `data`.
pub fn train_budgeted(network: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<RunRecord, EngineError> {
    let objective = Supervised::new(network, data)?;
    let w0 = network.init_weights(cfg.seed);
    let mut record = train_objective(&objective, w0, cfg, None)?;
    record.meta.dataset = Some(data.fingerprint());
    record.meta.architecture = Some(network.architecture().to_string());
    Ok(record)
}

/// The budgeted loop over any [`Objective`], starting from `w0`.
pub fn train_objective<O: Objective + ?Sized>(
    objective: &O,
    w0: Vec<f64>,
    cfg: &TrainConfig,
    mut observer: Option<&mut Observer<'_>>,
) -> Result<RunRecord, EngineError> {
    if cfg.budget == 0 {
        return Err(EngineError::ZeroBudget);
    }
    if cfg.batch_size == 0 {
        return Err(EngineError::ZeroBatch);
    }
    if !cfg.schedule.is_budget_aware() {
        return Err(EngineError::UnawareSchedule(cfg.schedule.to_string()));
    }
    cfg.schedule.validate()?;
    cfg.optimizer.validate()?;
    if w0.len() != objective.n_weights() {
        return Err(EngineError::WeightMismatch {
            expected: objective.n_weights(),
            got: w0.len(),
        });
    }
    let n = objective.n_examples();
    if n == 0 {
        return Err(EngineError::EmptyBatch);
    }
    let iters_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let every = cfg.eval.every.unwrap_or(iters_per_epoch).max(1);

    // Schedule values for the whole run; also rejects a too-long warm-up
    // before any work is done.
    let betas = (0..cfg.budget)
        .map(|t| {
            let clock = BudgetClock::new(t, cfg.budget)?;
            if cfg.warmup > 0 {
                apply_warmup(&cfg.schedule, cfg.warmup, &clock)
            } else {
                eval_schedule(&cfg.schedule, &clock)
            }
        })
        .collect::<Result<Vec<f64>, _>>()?;

    let mut record = RunRecord {
        meta: RunMeta {
            seed: cfg.seed,
            schedule: cfg.schedule.clone(),
            optimizer: cfg.optimizer,
            budget: cfg.budget,
            batch_size: cfg.batch_size,
            iters_per_epoch,
            warmup: cfg.warmup,
            dataset: None,
            architecture: None,
            diverged: false,
            completed: 0,
        },
        iterations: Vec::with_capacity(cfg.budget as usize),
        evaluations: Vec::new(),
    };

    let mut state = OptimizerState::new(w0);
    let mut grad = vec![0.0; objective.n_weights()];
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    for t in 0..cfg.budget {
        let epoch = t / iters_per_epoch;
        let slot = (t % iters_per_epoch) as usize;
        if slot == 0 {
            order.sort_unstable();
            rng.set_stream(epoch);
            rng.set_word_pos(0);
            order.shuffle(&mut rng);
        }
        let start = slot * cfg.batch_size;
        let batch = &order[start..(start + cfg.batch_size).min(n)];

        let loss = match objective.loss_grad(&state.weights, batch, &mut grad) {
            Ok(loss) if loss <= DIVERGENCE_LOSS => loss,
            Ok(_) | Err(EngineError::NonFinite) => {
                record.meta.diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        if grad.iter().any(|g| !g.is_finite()) {
            record.meta.diverged = true;
            break;
        }

        let beta = betas[t as usize];
        match cfg.optimizer.algorithm {
            Algorithm::SgdMomentum => sgd_momentum_step(&mut state, &grad, beta, &cfg.optimizer)?,
            Algorithm::Amsgrad => amsgrad_step_scaled(&mut state, &grad, beta, &cfg.optimizer)?,
        }
        record.iterations.push(IterationSample {
            iter: t,
            beta,
            lr: cfg.optimizer.base_lr * beta,
            train_loss: loss,
        });
        record.meta.completed = t + 1;
        if let Some(obs) = observer.as_mut() {
            obs(t, &state, &grad);
        }
        if state.weights.iter().any(|w| !w.is_finite()) {
            record.meta.diverged = true;
            break;
        }

        let done = t + 1;
        if done % every == 0 || done == cfg.budget {
            let full_grad_norm = if cfg.eval.full_grad_norm {
                match full_gradient_norm(objective, &state.weights) {
                    Ok(g) => Some(g),
                    Err(EngineError::NonFinite) => {
                        record.meta.diverged = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            } else {
                None
            };
            record.evaluations.push(Evaluation {
                epoch: done.div_ceil(iters_per_epoch),
                iteration: done,
                val_acc: objective.val_accuracy(&state.weights)?,
                full_grad_norm,
                weight_norm: state.weight_norm(),
            });
        }
    }
    Ok(record)
}
