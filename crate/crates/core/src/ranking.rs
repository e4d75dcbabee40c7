//! Random architecture families and how well short runs predict their
//! full-budget ranking.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::engine::{
    train_budgeted, Activation, Architecture, EngineError, EvalCadence, HiddenLayer, Network, TrainConfig,
};
use crate::optim::OptimizerConfig;
use crate::schedules::ScheduleSpec;
use crate::stats::{mean, median};

pub const MIN_WIDTH: usize = 8;
pub const MAX_WIDTH: usize = 64;

#[derive(Debug, Error)]
pub enum RankingError {
    #[error("score lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least two scores, got {0}")]
    TooShort(usize),
    #[error("scores contain NaN")]
    NotANumber,
    #[error("a family needs at least two architectures")]
    FamilyTooSmall,
    #[error("every architecture diverged")]
    AllDiverged,
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Kendall's tau-b, or `None` when one list is entirely tied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Tau {
    Value(f64),
    Degenerate,
}

impl Tau {
    pub fn value(self) -> Option<f64> {
        match self {
            Tau::Value(t) => Some(t),
            Tau::Degenerate => None,
        }
    }
}

impl std::fmt::Display for Tau {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Tau::Value(t) => write!(f, "{t}"),
            Tau::Degenerate => f.write_str("degenerate"),
        }
    }
}

fn tied_pairs(sorted: &[f64]) -> u64 {
    let mut total = 0;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Sorts `xs` and returns the number of strictly inverted pairs.
fn merge_count(xs: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = xs.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut xs[..mid], &mut buf[..mid]) + merge_count(&mut xs[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if xs[i] <= xs[j] {
            buf[k] = xs[i];
            i += 1;
        } else {
            buf[k] = xs[j];
            swaps += (mid - i) as u64;
            j += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&xs[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&xs[j..n]);
    xs.copy_from_slice(&buf[..n]);
    swaps
}

/// Tie-corrected Kendall rank correlation (tau-b) in O(n log n).
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<Tau, RankingError> {
    if a.len() != b.len() {
        return Err(RankingError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(RankingError::TooShort(n));
    }
    if a.iter().chain(b).any(|x| x.is_nan()) {
        return Err(RankingError::NotANumber);
    }
    let mut pairs: Vec<(f64, f64)> = a.iter().copied().zip(b.iter().copied()).collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));

    let n0 = (n as u64) * (n as u64 - 1) / 2;
    let sorted_a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ties_a = tied_pairs(&sorted_a);
    let mut joint = 0u64;
    let mut run = 1u64;
    for w in pairs.windows(2) {
        if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
            run += 1;
        } else {
            joint += run * (run - 1) / 2;
            run = 1;
        }
    }
    joint += run * (run - 1) / 2;

    let mut bs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; n];
    let swaps = merge_count(&mut bs, &mut buf);
    let ties_b = tied_pairs(&bs);

    if ties_a == n0 || ties_b == n0 {
        return Ok(Tau::Degenerate);
    }
    let numerator = n0 as f64 - ties_a as f64 - ties_b as f64 + joint as f64 - 2.0 * swaps as f64;
    let denominator = ((n0 - ties_a) as f64 * (n0 - ties_b) as f64).sqrt();
    Ok(Tau::Value((numerator / denominator).clamp(-1.0, 1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureFamily {
    pub architectures: Vec<Architecture>,
    pub seed: u64,
    /// Indices of architectures that diverged in some run.
    pub excluded: Vec<usize>,
}

/// Random MLPs: depth 1 to 3, widths in `[MIN_WIDTH, MAX_WIDTH]`, each layer
/// after the first gets a skip connection with probability one half (keeping
/// the previous width so the identity is well defined). Duplicates are
/// redrawn.
pub fn gen_architectures(count: usize, seed: u64) -> Result<ArchitectureFamily, RankingError> {
    if count < 2 {
        return Err(RankingError::FamilyTooSmall);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut architectures = Vec::with_capacity(count);
    while architectures.len() < count {
        let depth = rng.random_range(1..=3usize);
        let activation = if rng.random_bool(0.5) {
            Activation::Relu
        } else {
            Activation::Tanh
        };
        let mut hidden: Vec<HiddenLayer> = Vec::with_capacity(depth);
        for l in 0..depth {
            let skip = l > 0 && rng.random_bool(0.5);
            let width = if skip {
                hidden[l - 1].width
            } else {
                rng.random_range(MIN_WIDTH..=MAX_WIDTH)
            };
            hidden.push(HiddenLayer { width, skip });
        }
        let arch = Architecture { hidden, activation };
        if seen.insert(arch.clone()) {
            architectures.push(arch);
        }
    }
    Ok(ArchitectureFamily {
        architectures,
        seed,
        excluded: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankSettings {
    pub schedules: Vec<ScheduleSpec>,
    /// Budgets as fractions of `full_budget`, each in `(0, 1]`.
    pub budgets: Vec<f64>,
    /// Full budget in iterations.
    pub full_budget: u64,
    /// Schedule used for the full-budget reference runs.
    pub reference: ScheduleSpec,
    pub seeds: Vec<u64>,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl RankSettings {
    pub fn budget_iters(&self, fraction: f64) -> u64 {
        ((fraction * self.full_budget as f64).round() as u64).max(1)
    }

    fn validate(&self) -> Result<(), RankingError> {
        let bad = |m: &str| Err(RankingError::Invalid(m.to_string()));
        if self.schedules.is_empty() || self.budgets.is_empty() || self.seeds.is_empty() {
            return bad("schedules, budgets and seeds must be non-empty");
        }
        if self.full_budget == 0 || self.batch_size == 0 {
            return bad("full budget and batch size must be positive");
        }
        if self.budgets.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return bad("budget fractions must lie in (0, 1]");
        }
        if self
            .schedules
            .iter()
            .chain(std::iter::once(&self.reference))
            .any(|s| !s.is_budget_aware())
        {
            return bad("schedules must be budget-aware");
        }
        Ok(())
    }
}

/// Best-epoch validation accuracies for every architecture in one
/// (schedule, budget) cell, median over seeds. `None` for excluded
/// architectures.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub schedule: ScheduleSpec,
    pub fraction: f64,
    pub budget: u64,
    pub accuracy: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamilyResults {
    pub family: ArchitectureFamily,
    pub reference: Vec<Option<f64>>,
    pub cells: Vec<Cell>,
}

/// Trains every architecture at the full budget and under every
/// (schedule, budget) pair, taking the median over seeds of each run's best
/// validation accuracy. Architectures with any diverged run are excluded
/// everywhere.
pub fn run_family(
    family: &ArchitectureFamily,
    data: &Dataset,
    settings: &RankSettings,
) -> Result<FamilyResults, RankingError> {
    settings.validate()?;
    let networks = family
        .architectures
        .iter()
        .map(|a| Network::new(a, data.dim(), data.classes()))
        .collect::<Result<Vec<_>, _>>()?;

    // Job 0 per architecture is the reference; job c+1 is cell c.
    let mut cells: Vec<(ScheduleSpec, f64, u64)> = vec![(settings.reference.clone(), 1.0, settings.full_budget)];
    for s in &settings.schedules {
        for &f in &settings.budgets {
            cells.push((s.clone(), f, settings.budget_iters(f)));
        }
    }
    let jobs: Vec<(usize, usize, u64)> = (0..networks.len())
        .flat_map(|a| (0..cells.len()).flat_map(move |c| settings.seeds.iter().map(move |&s| (a, c, s))))
        .collect();

    let outcomes = jobs
        .par_iter()
        .map(|&(a, c, seed)| {
            let (schedule, _, budget) = &cells[c];
            let mut cfg = TrainConfig::new(schedule.clone(), *budget, settings.batch_size, settings.optimizer, seed);
            cfg.eval = EvalCadence {
                every: None,
                full_grad_norm: false,
            };
            let run = train_budgeted(&networks[a], data, &cfg)?;
            Ok(if run.diverged() { None } else { run.best_val_acc() })
        })
        .collect::<Result<Vec<Option<f64>>, EngineError>>()?;

    let n_seeds = settings.seeds.len();
    let mut acc = vec![vec![None; networks.len()]; cells.len()];
    let mut excluded = Vec::new();
    for a in 0..networks.len() {
        let mut diverged = false;
        for (c, slot) in acc.iter_mut().enumerate() {
            let base = (a * cells.len() + c) * n_seeds;
            let runs: Option<Vec<f64>> = outcomes[base..base + n_seeds].iter().copied().collect();
            match runs {
                Some(r) => slot[a] = median(&r),
                None => diverged = true,
            }
        }
        if diverged {
            excluded.push(a);
            for slot in acc.iter_mut() {
                slot[a] = None;
            }
        }
    }
    if excluded.len() == networks.len() {
        return Err(RankingError::AllDiverged);
    }

    let mut family = family.clone();
    family.excluded = excluded;
    let mut acc = acc.into_iter();
    let reference = acc.next().expect("reference cell");
    Ok(FamilyResults {
        family,
        reference,
        cells: cells
            .into_iter()
            .skip(1)
            .zip(acc)
            .map(|((schedule, fraction, budget), accuracy)| Cell {
                schedule,
                fraction,
                budget,
                accuracy,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TauCell {
    pub schedule: ScheduleSpec,
    pub fraction: f64,
    pub tau: Tau,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankTable {
    pub cells: Vec<TauCell>,
}

impl RankTable {
    pub fn get(&self, schedule: &ScheduleSpec, fraction: f64) -> Option<Tau> {
        self.cells
            .iter()
            .find(|c| &c.schedule == schedule && c.fraction == fraction)
            .map(|c| c.tau)
    }
}

fn included(results: &FamilyResults, cell: &Cell) -> (Vec<f64>, Vec<f64>) {
    results
        .reference
        .iter()
        .zip(&cell.accuracy)
        .filter_map(|(r, a)| Some(((*a)?, (*r)?)))
        .unzip()
}

/// Kendall's tau between each cell's accuracies and the reference ranking.
pub fn rank_table(results: &FamilyResults) -> Result<RankTable, RankingError> {
    let cells = results
        .cells
        .iter()
        .map(|cell| {
            let (budgeted, full) = included(results, cell);
            Ok(TauCell {
                schedule: cell.schedule.clone(),
                fraction: cell.fraction,
                tau: kendall_tau(&budgeted, &full)?,
            })
        })
        .collect::<Result<Vec<_>, RankingError>>()?;
    Ok(RankTable { cells })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub schedule: ScheduleSpec,
    pub fraction: f64,
    /// Mean best accuracy across included architectures.
    pub raw_mean: f64,
    /// Mean of each architecture's accuracy over its full-budget accuracy.
    pub normalized_mean: f64,
}

pub fn accuracy_table(results: &FamilyResults) -> Vec<AccuracyCell> {
    results
        .cells
        .iter()
        .map(|cell| {
            let (budgeted, full) = included(results, cell);
            let normalized: Vec<f64> = budgeted.iter().zip(&full).map(|(b, f)| b / f).collect();
            AccuracyCell {
                schedule: cell.schedule.clone(),
                fraction: cell.fraction,
                raw_mean: mean(&budgeted).unwrap_or(f64::NAN),
                normalized_mean: mean(&normalized).unwrap_or(f64::NAN),
            }
        })
        .collect()
}

pub fn rank_experiment(
    family: &ArchitectureFamily,
    data: &Dataset,
    settings: &RankSettings,
) -> Result<RankTable, RankingError> {
    rank_table(&run_family(family, data, settings)?)
}

pub fn budgeted_accuracy_table(
    family: &ArchitectureFamily,
    data: &Dataset,
    settings: &RankSettings,
) -> Result<Vec<AccuracyCell>, RankingError> {
    Ok(accuracy_table(&run_family(family, data, settings)?))
}

fn fraction_label(f: f64) -> String {
    format!("{f}")
}

/// Matrix with one row per schedule and one column per budget fraction.
pub fn rank_matrix_csv(table: &RankTable, settings: &RankSettings) -> String {
    let mut out = String::from("schedule");
    for &f in &settings.budgets {
        out.push(',');
        out.push_str(&fraction_label(f));
    }
    out.push('\n');
    for s in &settings.schedules {
        out.push_str(&csv_quote(&s.to_string()));
        for &f in &settings.budgets {
            out.push(',');
            if let Some(t) = table.get(s, f) {
                out.push_str(&t.to_string());
            }
        }
        out.push('\n');
    }
    out
}

/// One row per architecture with its reference and per-cell accuracies.
pub fn detail_csv(results: &FamilyResults) -> String {
    let mut out = String::from("index,architecture,excluded,full_budget_acc");
    for c in &results.cells {
        out.push(',');
        out.push_str(&csv_quote(&format!("{} @ {}", c.schedule, fraction_label(c.fraction))));
    }
    out.push('\n');
    let fmt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for (i, arch) in results.family.architectures.iter().enumerate() {
        out.push_str(&format!(
            "{i},{arch},{},{}",
            results.family.excluded.contains(&i),
            fmt(results.reference[i])
        ));
        for c in &results.cells {
            out.push(',');
            out.push_str(&fmt(c.accuracy[i]));
        }
        out.push('\n');
    }
    out
}

pub fn accuracy_csv(table: &[AccuracyCell]) -> String {
    let mut out = String::from("schedule,budget,raw_mean,normalized_mean\n");
    for c in table {
        out.push_str(&format!(
            "{},{},{},{}\n",
            csv_quote(&c.schedule.to_string()),
            fraction_label(c.fraction),
            c.raw_mean,
            c.normalized_mean
        ));
    }
    out
}

fn csv_quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(a: &[f64], b: &[f64]) -> Option<f64> {
        let (mut c, mut d, mut ta, mut tb) = (0i64, 0i64, 0i64, 0i64);
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                let x = (a[i] - a[j]).signum() * if a[i] == a[j] { 0.0 } else { 1.0 };
                let y = (b[i] - b[j]).signum() * if b[i] == b[j] { 0.0 } else { 1.0 };
                if x == 0.0 && y == 0.0 {
                    continue;
                } else if x == 0.0 {
                    ta += 1;
                } else if y == 0.0 {
                    tb += 1;
                } else if x * y > 0.0 {
                    c += 1;
                } else {
                    d += 1;
                }
            }
        }
        let denom = (((c + d + ta) * (c + d + tb)) as f64).sqrt();
        (denom > 0.0).then(|| (c - d) as f64 / denom)
    }

    #[test]
    fn worked_example() {
        let t = kendall_tau(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((t.value().unwrap() - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn identity_and_reversal() {
        let a = [0.3, 0.1, 0.7, 0.2, 0.9];
        let rev: Vec<f64> = a.iter().map(|x| -x).collect();
        assert_eq!(kendall_tau(&a, &a).unwrap(), Tau::Value(1.0));
        assert_eq!(kendall_tau(&a, &rev).unwrap(), Tau::Value(-1.0));
    }

    #[test]
    fn ties_match_brute_force() {
        let a = [1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 3.0];
        let b = [2.0, 1.0, 1.0, 2.0, 3.0, 3.0, 1.0];
        let t = kendall_tau(&a, &b).unwrap().value().unwrap();
        assert!((t - brute(&a, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn all_ties_are_degenerate() {
        assert_eq!(kendall_tau(&[0.5; 4], &[1.0, 2.0, 3.0, 4.0]).unwrap(), Tau::Degenerate);
    }

    #[test]
    fn argument_errors() {
        assert!(matches!(kendall_tau(&[1.0], &[1.0]), Err(RankingError::TooShort(1))));
        assert!(matches!(
            kendall_tau(&[1.0, 2.0], &[1.0]),
            Err(RankingError::LengthMismatch(2, 1))
        ));
    }

    #[test]
    fn families_are_deterministic_and_distinct() {
        let a = gen_architectures(30, 4).unwrap();
        let b = gen_architectures(30, 4).unwrap();
        assert_eq!(a, b);
        let distinct: HashSet<_> = a.architectures.iter().collect();
        assert_eq!(distinct.len(), 30);
        for arch in &a.architectures {
            assert!((1..=3).contains(&arch.depth()));
            assert!(!arch.hidden[0].skip);
            for l in &arch.hidden {
                assert!((MIN_WIDTH..=MAX_WIDTH).contains(&l.width));
            }
        }
        let two = gen_architectures(2, 0).unwrap();
        assert_ne!(two.architectures[0], two.architectures[1]);
        assert!(gen_architectures(1, 0).is_err());
    }
}
