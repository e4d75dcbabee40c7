use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use budgeted::data::{subsample, Dataset};
use budgeted::diagnostics::{best_progress, convergence_report, ConvergenceReport, REPORT_CSV_HEADER};
use budgeted::engine::{train_budgeted, RunMeta, RunRecord};
use budgeted::ranking::{
    accuracy_csv, accuracy_table, detail_csv, gen_architectures, rank_matrix_csv, rank_table, run_family, AccuracyCell,
    RankSettings, RankTable,
};
use budgeted::schedules::{bac_convert, ScheduleSpec};
use budgeted::stats::median;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Budget, Config, Prepared, RunSection};

/// Command-line overrides shared by the experiment commands.
#[derive(Debug, Clone)]
pub struct Options {
    pub out: PathBuf,
    /// Replaces the run seed, or the list of training seeds.
    pub seed: Option<u64>,
    pub jobs: usize,
    pub overwrite: bool,
}

impl Options {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Options {
            out: out.into(),
            seed: None,
            jobs: default_jobs(),
            overwrite: false,
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        Ok(rayon::ThreadPoolBuilder::new().num_threads(self.jobs.max(1)).build()?)
    }

    fn seeds(&self, configured: &[u64]) -> Vec<u64> {
        self.seed.map_or_else(|| configured.to_vec(), |s| vec![s])
    }
}

pub fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub best_val_acc: f64,
    pub final_val_acc: f64,
    pub best_progress: f64,
    pub diverged: bool,
}

impl Summary {
    fn of(record: &RunRecord) -> Self {
        Summary {
            best_val_acc: record.best_val_acc().unwrap_or(f64::NAN),
            final_val_acc: record.final_val_acc().unwrap_or(f64::NAN),
            best_progress: best_progress(record).unwrap_or(f64::NAN),
            diverged: record.diverged(),
        }
    }
}

/// Written next to every run's curves. `config` holds a `[run]` table with
/// the exact schedule, budget and seed, so it reproduces the run on its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: Config,
    pub run: RunMeta,
    pub summary: Summary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ConvergenceReport>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub manifest: Manifest,
}

/// Trains the `[run]` table of `cfg` on an already prepared dataset.
pub fn execute(cfg: &Config, prepared: &Prepared) -> Result<RunOutcome> {
    let run = cfg.run.as_ref().context("config has no [run] table")?;
    let iters = run.budget.iters(prepared.full_iters);
    let schedule = cfg.resolve_schedule(&run.schedule, iters, prepared.iters_per_epoch)?;
    let network = cfg.network(&prepared.dataset)?;
    let record = train_budgeted(
        &network,
        &prepared.dataset,
        &cfg.train_config(schedule, iters, run.seed),
    )?;
    let manifest = Manifest {
        config: cfg.clone(),
        run: record.meta.clone(),
        summary: Summary::of(&record),
        report: convergence_report(&record).ok(),
    };
    Ok(RunOutcome { record, manifest })
}

fn write_run(dir: &Path, outcome: &RunOutcome) -> Result<()> {
    outcome.record.write_curves(dir)?;
    fs::write(dir.join("manifest.toml"), toml::to_string(&outcome.manifest)?)?;
    if let Some(report) = &outcome.manifest.report {
        fs::write(
            dir.join("report.csv"),
            format!("{REPORT_CSV_HEADER}\n{}\n", report.csv_row()),
        )?;
    }
    Ok(())
}

/// Fills a sibling temporary directory and renames it into place, so `dir`
/// either holds complete output or does not exist.
fn write_atomically(dir: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let name = dir
        .file_name()
        .with_context(|| format!("{} has no final component", dir.display()))?
        .to_string_lossy()
        .into_owned();
    let tmp = dir.with_file_name(format!(".{name}.partial"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    fill(&tmp)?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir).with_context(|| format!("moving results into {}", dir.display()))?;
    Ok(())
}

fn claim_output(out: &Path, overwrite: bool) -> Result<()> {
    let occupied = out.exists() && (out.is_file() || fs::read_dir(out)?.next().is_some());
    if occupied {
        ensure!(
            overwrite,
            "output directory {} already exists; pass --overwrite to replace it",
            out.display()
        );
        if out.is_dir() {
            fs::remove_dir_all(out)?;
        } else {
            fs::remove_file(out)?;
        }
    }
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

pub fn cmd_run(cfg: &Config, opts: &Options) -> Result<RunOutcome> {
    let mut cfg = cfg.clone();
    let run = cfg.run.as_mut().context("config has no [run] table")?;
    if let Some(seed) = opts.seed {
        run.seed = seed;
    }
    cfg.out = None;
    claim_output(&opts.out, opts.overwrite)?;
    let prepared = cfg.prepare()?;
    let outcome = execute(&cfg, &prepared)?;
    write_atomically(&opts.out, |dir| write_run(dir, &outcome))?;
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellStatus {
    Ok,
    Resumed,
    Diverged,
    Failed,
}

impl CellStatus {
    fn as_str(self) -> &'static str {
        match self {
            CellStatus::Ok => "ok",
            CellStatus::Resumed => "resumed",
            CellStatus::Diverged => "diverged",
            CellStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub id: String,
    pub schedule: ScheduleSpec,
    pub budget: Budget,
    pub base_lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub status: CellStatus,
    pub summary: Option<Summary>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub cells: Vec<SweepCell>,
    /// Table rows: schedule, base rate, batch size, then one median accuracy
    /// per budget.
    pub matrix: Vec<(String, String, String, Vec<Option<f64>>)>,
}

fn cell_config(base: &Config, cell: &SweepCell) -> Config {
    let mut cfg = base.clone();
    cfg.out = None;
    cfg.sweep = None;
    cfg.rank = None;
    cfg.subsample = None;
    if let Some(lr) = cell.base_lr {
        cfg.optimizer.base_lr = Some(lr);
    }
    if let Some(b) = cell.batch_size {
        cfg.training.batch_size = b;
    }
    cfg.run = Some(RunSection {
        schedule: cell.schedule.clone(),
        budget: cell.budget,
        seed: cell.seed,
    });
    cfg
}

/// Runs every schedule x budget x seed cell (and the optional base-rate and
/// batch-size axes). Finished cells found under `<out>/cells` with a matching
/// config are reused, so an interrupted sweep resumes where it stopped.
pub fn cmd_sweep(cfg: &Config, opts: &Options) -> Result<SweepOutcome> {
    let sweep = cfg.sweep.as_ref().context("config has no [sweep] table")?;
    let seeds = opts.seeds(&sweep.seeds);
    if opts.overwrite && opts.out.exists() {
        fs::remove_dir_all(&opts.out)?;
    }
    let cells_dir = opts.out.join("cells");
    fs::create_dir_all(&cells_dir)?;

    let lrs: Vec<Option<f64>> = sweep
        .base_lrs
        .as_ref()
        .map_or(vec![None], |v| v.iter().copied().map(Some).collect());
    let batches: Vec<Option<usize>> = sweep
        .batch_sizes
        .as_ref()
        .map_or(vec![None], |v| v.iter().copied().map(Some).collect());
    let mut cells = Vec::new();
    for (si, schedule) in sweep.schedules.iter().enumerate() {
        for (li, lr) in lrs.iter().enumerate() {
            for (ki, batch) in batches.iter().enumerate() {
                for (bi, budget) in sweep.budgets.iter().enumerate() {
                    for &seed in &seeds {
                        cells.push(SweepCell {
                            id: format!("s{si}-lr{li}-bs{ki}-b{bi}-seed{seed}"),
                            schedule: schedule.clone(),
                            budget: *budget,
                            base_lr: *lr,
                            batch_size: *batch,
                            seed,
                            status: CellStatus::Failed,
                            summary: None,
                            error: None,
                        });
                    }
                }
            }
        }
    }

    let dataset = cfg.prepare()?.dataset;
    let pool = opts.pool()?;
    let cells: Vec<SweepCell> = pool.install(|| {
        cells
            .into_par_iter()
            .map(|mut cell| {
                let cell_cfg = cell_config(cfg, &cell);
                let dir = cells_dir.join(&cell.id);
                match run_cell(&cell_cfg, &dataset, &dir) {
                    Ok((summary, resumed)) => {
                        cell.status = match (resumed, summary.diverged) {
                            (_, true) => CellStatus::Diverged,
                            (true, false) => CellStatus::Resumed,
                            (false, false) => CellStatus::Ok,
                        };
                        cell.summary = Some(summary);
                    }
                    Err(e) => cell.error = Some(format!("{e:#}")),
                }
                cell
            })
            .collect()
    });

    let mut matrix = Vec::new();
    for schedule in &sweep.schedules {
        for lr in &lrs {
            for batch in &batches {
                let accs = sweep
                    .budgets
                    .iter()
                    .map(|budget| {
                        let values: Vec<f64> = cells
                            .iter()
                            .filter(|c| &c.schedule == schedule && c.budget == *budget)
                            .filter(|c| c.base_lr == *lr && c.batch_size == *batch)
                            .filter_map(|c| c.summary.map(|s| s.best_val_acc))
                            .filter(|a| a.is_finite())
                            .collect();
                        median(&values)
                    })
                    .collect();
                matrix.push((
                    schedule.to_string(),
                    lr.unwrap_or(cfg.optimizer.resolve().base_lr).to_string(),
                    batch.unwrap_or(cfg.training.batch_size).to_string(),
                    accs,
                ));
            }
        }
    }
    let outcome = SweepOutcome { cells, matrix };
    fs::write(opts.out.join("sweep.csv"), sweep_matrix_csv(&outcome, &sweep.budgets)?)?;
    fs::write(opts.out.join("cells.csv"), sweep_cells_csv(&outcome)?)?;
    Ok(outcome)
}

fn run_cell(cfg: &Config, dataset: &Dataset, dir: &Path) -> Result<(Summary, bool)> {
    let manifest_path = dir.join("manifest.toml");
    if manifest_path.exists() {
        if let Ok(done) = Manifest::load(&manifest_path) {
            if &done.config == cfg {
                return Ok((done.summary, true));
            }
        }
    }
    let prepared = cfg.prepared_for(dataset.clone(), cfg.training.batch_size);
    let outcome = execute(cfg, &prepared)?;
    write_atomically(dir, |tmp| write_run(tmp, &outcome))?;
    Ok((outcome.manifest.summary, false))
}

fn csv_string(write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w)?;
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn opt_to_string(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub const SWEEP_CELLS_HEADER: [&str; 10] = [
    "schedule",
    "budget",
    "base_lr",
    "batch_size",
    "seed",
    "status",
    "best_val_acc",
    "final_val_acc",
    "best_progress",
    "error",
];

fn sweep_matrix_csv(outcome: &SweepOutcome, budgets: &[Budget]) -> Result<String> {
    csv_string(|w| {
        let mut header = vec!["schedule".to_string(), "base_lr".into(), "batch_size".into()];
        header.extend(budgets.iter().map(Budget::label));
        w.write_record(&header)?;
        for (schedule, lr, batch, accs) in &outcome.matrix {
            let mut row = vec![schedule.clone(), lr.clone(), batch.clone()];
            row.extend(accs.iter().map(|a| opt_to_string(*a)));
            w.write_record(&row)?;
        }
        Ok(())
    })
}

fn sweep_cells_csv(outcome: &SweepOutcome) -> Result<String> {
    csv_string(|w| {
        w.write_record(SWEEP_CELLS_HEADER)?;
        for c in &outcome.cells {
            let s = c.summary;
            w.write_record([
                c.schedule.to_string(),
                c.budget.label(),
                c.base_lr.map(|v| v.to_string()).unwrap_or_default(),
                c.batch_size.map(|v| v.to_string()).unwrap_or_default(),
                c.seed.to_string(),
                c.status.as_str().to_string(),
                opt_to_string(s.map(|s| s.best_val_acc)),
                opt_to_string(s.map(|s| s.final_val_acc)),
                opt_to_string(s.map(|s| s.best_progress)),
                c.error.clone().unwrap_or_default(),
            ])?;
        }
        Ok(())
    })
}

#[derive(Debug, Clone)]
pub struct RankExperiment {
    pub family_seed: u64,
    pub table: RankTable,
    pub accuracy: Vec<AccuracyCell>,
    pub excluded: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct RankOutcome {
    pub settings: RankSettings,
    pub experiments: Vec<RankExperiment>,
}

impl RankOutcome {
    /// Median over experiments of the defined tau values of one cell.
    pub fn median_tau(&self, schedule: &ScheduleSpec, fraction: f64) -> Option<f64> {
        let taus: Vec<f64> = self
            .experiments
            .iter()
            .filter_map(|e| e.table.get(schedule, fraction).and_then(|t| t.value()))
            .collect();
        median(&taus)
    }
}

/// One rank-prediction experiment per family seed. Writes
/// `family-<seed>/{tau,detail,accuracy}.csv` and a `tau.csv` with the median
/// over experiments.
pub fn cmd_rank(cfg: &Config, opts: &Options) -> Result<RankOutcome> {
    let rank = cfg.rank.as_ref().context("config has no [rank] table")?;
    let resolve = |spec: &ScheduleSpec| -> Result<ScheduleSpec> {
        if spec.is_budget_aware() {
            return Ok(spec.clone());
        }
        ensure!(
            cfg.training.bac,
            "rank schedules must be budget-aware unless training.bac is set: {spec}"
        );
        Ok(bac_convert(spec, cfg.training.full_budget_epochs as f64)?)
    };
    claim_output(&opts.out, opts.overwrite)?;
    let prepared = cfg.prepare()?;
    let settings = RankSettings {
        schedules: rank.schedules.iter().map(resolve).collect::<Result<_>>()?,
        budgets: rank.budgets.clone(),
        full_budget: prepared.full_iters,
        reference: resolve(&rank.reference)?,
        seeds: opts.seeds(&rank.seeds),
        batch_size: cfg.training.batch_size,
        optimizer: cfg.optimizer.resolve(),
    };
    let pool = opts.pool()?;
    let mut experiments = Vec::new();
    fs::create_dir_all(&opts.out)?;
    for &family_seed in &rank.family_seeds {
        let family = gen_architectures(rank.family_size, family_seed)?;
        let results = pool.install(|| run_family(&family, &prepared.dataset, &settings))?;
        let table = rank_table(&results)?;
        let accuracy = accuracy_table(&results);
        write_atomically(&opts.out.join(format!("family-{family_seed}")), |dir| {
            fs::write(dir.join("tau.csv"), rank_matrix_csv(&table, &settings))?;
            fs::write(dir.join("detail.csv"), detail_csv(&results))?;
            fs::write(dir.join("accuracy.csv"), accuracy_csv(&accuracy))?;
            Ok(())
        })?;
        experiments.push(RankExperiment {
            family_seed,
            table,
            accuracy,
            excluded: results.family.excluded.clone(),
        });
    }
    let outcome = RankOutcome { settings, experiments };
    let summary = csv_string(|w| {
        let mut header = vec!["schedule".to_string()];
        header.extend(outcome.settings.budgets.iter().map(|f| f.to_string()));
        w.write_record(&header)?;
        for s in &outcome.settings.schedules {
            let mut row = vec![s.to_string()];
            row.extend(
                outcome
                    .settings
                    .budgets
                    .iter()
                    .map(|&f| opt_to_string(outcome.median_tau(s, f))),
            );
            w.write_record(&row)?;
        }
        Ok(())
    })?;
    fs::write(opts.out.join("tau.csv"), summary)?;
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsampleRow {
    pub fraction: f64,
    pub seed: u64,
    /// Full training set, iteration budget of `fraction` of the full budget.
    pub full_data_acc: f64,
    /// `fraction` of the training set, trained for the full number of epochs.
    pub subsampled_acc: f64,
}

/// Iteration-limited training on the full data against offline subsampling
/// with the same number of examples seen. Both arms replay the configured
/// schedule over their budget with BAC.
pub fn cmd_subsample_compare(cfg: &Config, opts: &Options) -> Result<Vec<SubsampleRow>> {
    let section = cfg.subsample.as_ref().context("config has no [subsample] table")?;
    claim_output(&opts.out, opts.overwrite)?;
    let prepared = cfg.prepare()?;
    let schedule = if section.schedule.is_budget_aware() {
        section.schedule.clone()
    } else {
        bac_convert(&section.schedule, cfg.training.full_budget_epochs as f64)?
    };
    let network = cfg.network(&prepared.dataset)?;
    let mut jobs = Vec::new();
    for &fraction in &section.budgets {
        for seed in opts.seeds(&section.seeds) {
            jobs.push((fraction, seed));
        }
    }
    let pool = opts.pool()?;
    let rows = pool.install(|| {
        jobs.par_iter()
            .map(|&(fraction, seed)| -> Result<SubsampleRow> {
                let iters = Budget::fraction(fraction).iters(prepared.full_iters);
                let full = train_budgeted(
                    &network,
                    &prepared.dataset,
                    &cfg.train_config(schedule.clone(), iters, seed),
                )?;
                let subset = subsample(&prepared.dataset, fraction, seed)?;
                let sub_iters =
                    cfg.training.full_budget_epochs * subset.train.len().div_ceil(cfg.training.batch_size) as u64;
                let sub = train_budgeted(&network, &subset, &cfg.train_config(schedule.clone(), sub_iters, seed))?;
                Ok(SubsampleRow {
                    fraction,
                    seed,
                    full_data_acc: full.best_val_acc().unwrap_or(f64::NAN),
                    subsampled_acc: sub.best_val_acc().unwrap_or(f64::NAN),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    fs::create_dir_all(&opts.out)?;
    let detail = csv_string(|w| {
        w.write_record(["budget", "seed", "full_data_acc", "subsampled_acc"])?;
        for r in &rows {
            w.write_record([
                r.fraction.to_string(),
                r.seed.to_string(),
                r.full_data_acc.to_string(),
                r.subsampled_acc.to_string(),
            ])?;
        }
        Ok(())
    })?;
    fs::write(opts.out.join("subsample.csv"), detail)?;
    let summary = csv_string(|w| {
        w.write_record(["budget", "full_data_median", "subsampled_median"])?;
        for &f in &section.budgets {
            let pick = |g: fn(&SubsampleRow) -> f64| {
                let v: Vec<f64> = rows.iter().filter(|r| r.fraction == f).map(g).collect();
                opt_to_string(median(&v))
            };
            w.write_record([f.to_string(), pick(|r| r.full_data_acc), pick(|r| r.subsampled_acc)])?;
        }
        Ok(())
    })?;
    fs::write(opts.out.join("subsample_summary.csv"), summary)?;
    Ok(rows)
}

/// `progress,ratio` rows at `points` evenly spaced progress values. The last
/// sample sits just below 1 since progress 1 is outside the budget.
/// Budget-unaware schedules need the horizon they were designed for.
pub fn schedule_csv(spec: &ScheduleSpec, points: usize, original_budget: Option<f64>) -> Result<String> {
    ensure!(points >= 1, "points must be at least 1");
    let spec = match (spec.is_budget_aware(), original_budget) {
        (true, None) => spec.clone(),
        (true, Some(_)) => bail!("`{spec}` is already budget-aware; drop --original-budget"),
        (false, Some(t0)) => bac_convert(spec, t0)?,
        (false, None) => bail!("`{spec}` is budget-unaware; pass --original-budget"),
    };
    let mut out = String::from("progress,ratio\n");
    let last = 1.0 - f64::EPSILON / 2.0;
    for i in 0..points {
        let p = if points == 1 {
            0.0
        } else if i + 1 == points {
            last
        } else {
            i as f64 / (points - 1) as f64
        };
        let ratio = spec.eval_progress(p)?;
        out.push_str(&format!("{p:?},{ratio:?}\n"));
    }
    Ok(out)
}
