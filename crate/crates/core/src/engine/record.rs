use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Fingerprint;
use crate::optim::OptimizerConfig;
use crate::schedules::ScheduleSpec;

pub const ITERATIONS_HEADER: &str = "iter,beta,lr,train_loss";
pub const EVALUATIONS_HEADER: &str = "epoch,val_acc,full_grad_norm,weight_norm";

/// Everything needed to reproduce a run, given the same dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub schedule: ScheduleSpec,
    pub optimizer: OptimizerConfig,
    pub budget: u64,
    pub batch_size: usize,
    pub iters_per_epoch: u64,
    pub warmup: u64,
    pub dataset: Option<Fingerprint>,
    pub architecture: Option<String>,
    pub diverged: bool,
    pub completed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationSample {
    pub iter: u64,
    pub beta: f64,
    pub lr: f64,
    pub train_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub epoch: u64,
    /// Completed iterations when the evaluation was taken.
    pub iteration: u64,
    pub val_acc: f64,
    pub full_grad_norm: Option<f64>,
    pub weight_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub meta: RunMeta,
    pub iterations: Vec<IterationSample>,
    pub evaluations: Vec<Evaluation>,
}

impl RunRecord {
    pub fn diverged(&self) -> bool {
        self.meta.diverged
    }

    pub fn progress_of(&self, eval: &Evaluation) -> f64 {
        eval.iteration as f64 / self.meta.budget as f64
    }

    /// Index of the best validation evaluation, earliest on ties.
    pub fn best_index(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, e) in self.evaluations.iter().enumerate() {
            if best.is_none_or(|b| e.val_acc > self.evaluations[b].val_acc) {
                best = Some(i);
            }
        }
        best
    }

    pub fn best_val_acc(&self) -> Option<f64> {
        self.best_index().map(|i| self.evaluations[i].val_acc)
    }

    pub fn final_val_acc(&self) -> Option<f64> {
        self.evaluations.last().map(|e| e.val_acc)
    }

    pub fn iterations_csv(&self) -> String {
        let mut out = String::from(ITERATIONS_HEADER);
        out.push('\n');
        for s in &self.iterations {
            out.push_str(&format!("{},{:?},{:?},{:?}\n", s.iter, s.beta, s.lr, s.train_loss));
        }
        out
    }

    pub fn evaluations_csv(&self) -> String {
        let mut out = String::from(EVALUATIONS_HEADER);
        out.push('\n');
        for e in &self.evaluations {
            let g = e.full_grad_norm.map(|g| format!("{g:?}")).unwrap_or_default();
            out.push_str(&format!("{},{:?},{},{:?}\n", e.epoch, e.val_acc, g, e.weight_norm));
        }
        out
    }

    /// Writes `iterations.csv` and `evaluations.csv` into `dir`.
    pub fn write_curves(&self, dir: &Path) -> io::Result<()> {
        fs::write(dir.join("iterations.csv"), self.iterations_csv())?;
        fs::write(dir.join("evaluations.csv"), self.evaluations_csv())
    }
}
