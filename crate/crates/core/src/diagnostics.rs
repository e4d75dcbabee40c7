//! Post-hoc analysis of finished runs.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::RunRecord;
use crate::stats::pearson;

#[derive(Debug, Error, PartialEq)]
pub enum DiagnosticsError {
    #[error("run has no validation evaluations")]
    NoEvaluations,
    #[error("run has no full-gradient-norm series")]
    MissingGradNorm,
}

/// A correlation that may not exist because one series has zero variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Correlation {
    Defined(f64),
    Undefined,
}

impl Correlation {
    pub fn value(self) -> Option<f64> {
        match self {
            Correlation::Defined(r) => Some(r),
            Correlation::Undefined => None,
        }
    }
}

impl fmt::Display for Correlation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Correlation::Defined(r) => write!(f, "{r}"),
            Correlation::Undefined => f.write_str("undefined"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub final_grad_norm: f64,
    pub final_weight_norm: f64,
    /// Final full-gradient norm over the largest one seen during the run.
    pub final_to_peak: f64,
    pub best_progress: f64,
    pub best_val_acc: f64,
    /// Pearson correlation between the learning rate at each evaluation and
    /// the full-gradient norm there.
    pub lr_grad_correlation: Correlation,
}

pub const REPORT_CSV_HEADER: &str =
    "final_grad_norm,final_weight_norm,final_to_peak,best_progress,best_val_acc,lr_grad_correlation";

impl ConvergenceReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.final_grad_norm,
            self.final_weight_norm,
            self.final_to_peak,
            self.best_progress,
            self.best_val_acc,
            self.lr_grad_correlation
        )
    }

    pub fn key_values(&self) -> String {
        format!(
            "final_grad_norm = {}\nfinal_weight_norm = {}\nfinal_to_peak = {}\nbest_progress = {}\nbest_val_acc = {}\nlr_grad_correlation = {}\n",
            self.final_grad_norm,
            self.final_weight_norm,
            self.final_to_peak,
            self.best_progress,
            self.best_val_acc,
            self.lr_grad_correlation
        )
    }
}

/// Training progress of the best validation checkpoint, earliest on ties.
pub fn best_progress(run: &RunRecord) -> Result<f64, DiagnosticsError> {
    let i = run.best_index().ok_or(DiagnosticsError::NoEvaluations)?;
    Ok(run.progress_of(&run.evaluations[i]))
}

/// Learning rate in effect for the step that ended at each evaluation.
fn lr_at_evaluations(run: &RunRecord) -> Vec<f64> {
    run.evaluations
        .iter()
        .map(|e| {
            run.iterations
                .get((e.iteration as usize).saturating_sub(1))
                .map_or(f64::NAN, |s| s.lr)
        })
        .collect()
}

pub fn convergence_report(run: &RunRecord) -> Result<ConvergenceReport, DiagnosticsError> {
    let last = run.evaluations.last().ok_or(DiagnosticsError::NoEvaluations)?;
    let norms = run
        .evaluations
        .iter()
        .map(|e| e.full_grad_norm)
        .collect::<Option<Vec<f64>>>()
        .ok_or(DiagnosticsError::MissingGradNorm)?;
    let final_grad_norm = *norms.last().expect("non-empty");
    let peak = norms.iter().copied().fold(0.0, f64::max);
    let best = run.best_index().expect("non-empty");
    let lrs = lr_at_evaluations(run);
    Ok(ConvergenceReport {
        final_grad_norm,
        final_weight_norm: last.weight_norm,
        final_to_peak: if peak > 0.0 { final_grad_norm / peak } else { 0.0 },
        best_progress: run.progress_of(&run.evaluations[best]),
        best_val_acc: run.evaluations[best].val_acc,
        lr_grad_correlation: pearson(&lrs, &norms).map_or(Correlation::Undefined, Correlation::Defined),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Evaluation, IterationSample, RunMeta};
    use crate::optim::OptimizerConfig;
    use crate::schedules::ScheduleSpec;

    fn record(lrs: &[f64], norms: &[f64], accs: &[f64]) -> RunRecord {
        let n = lrs.len() as u64;
        RunRecord {
            meta: RunMeta {
                seed: 0,
                schedule: ScheduleSpec::Linear,
                optimizer: OptimizerConfig::sgd(),
                budget: n,
                batch_size: 1,
                iters_per_epoch: 1,
                warmup: 0,
                dataset: None,
                architecture: None,
                diverged: false,
                completed: n,
            },
            iterations: lrs
                .iter()
                .enumerate()
                .map(|(i, &lr)| IterationSample {
                    iter: i as u64,
                    beta: lr,
                    lr,
                    train_loss: 1.0,
                })
                .collect(),
            evaluations: norms
                .iter()
                .zip(accs)
                .enumerate()
                .map(|(i, (&g, &a))| Evaluation {
                    epoch: i as u64 + 1,
                    iteration: i as u64 + 1,
                    val_acc: a,
                    full_grad_norm: Some(g),
                    weight_norm: 1.0,
                })
                .collect(),
        }
    }

    #[test]
    fn best_progress_at_end_for_increasing_accuracy() {
        let r = record(&[1.0; 4], &[1.0; 4], &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(best_progress(&r), Ok(1.0));
    }

    #[test]
    fn best_progress_ties_go_early() {
        let r = record(&[1.0; 4], &[1.0; 4], &[0.1, 0.5, 0.5, 0.2]);
        assert_eq!(best_progress(&r), Ok(0.5));
    }

    #[test]
    fn constant_lr_has_undefined_correlation() {
        let r = record(&[0.1; 5], &[5.0, 4.0, 3.0, 2.0, 1.0], &[0.5; 5]);
        let rep = convergence_report(&r).unwrap();
        assert_eq!(rep.lr_grad_correlation, Correlation::Undefined);
        assert_eq!(rep.lr_grad_correlation.to_string(), "undefined");
    }

    #[test]
    fn affine_norm_correlates_perfectly() {
        let lrs = [0.5, 0.4, 0.3, 0.2, 0.1];
        let norms: Vec<f64> = lrs.iter().map(|l| 3.0 * l + 0.25).collect();
        let rep = convergence_report(&record(&lrs, &norms, &[0.5; 5])).unwrap();
        let r = rep.lr_grad_correlation.value().unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn opposite_trends_anticorrelate() {
        let lrs = [0.5, 0.4, 0.3, 0.2, 0.1];
        let norms = [1.0, 2.0, 3.0, 4.0, 5.0];
        let rep = convergence_report(&record(&lrs, &norms, &[0.5; 5])).unwrap();
        let r = rep.lr_grad_correlation.value().unwrap();
        assert!((r + 1.0).abs() < 1e-12);
        assert!((rep.final_to_peak - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empty_run_is_rejected() {
        let r = record(&[], &[], &[]);
        assert_eq!(best_progress(&r), Err(DiagnosticsError::NoEvaluations));
        assert_eq!(convergence_report(&r), Err(DiagnosticsError::NoEvaluations));
    }
}
