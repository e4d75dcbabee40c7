//! Learning-rate schedules expressed as a ratio `beta` of the base learning rate.
//!
//! Budget-aware schedules are functions of training progress `p = t / T`, where
//! `t` is the zero-based iteration and `T` the iteration budget. Budget-unaware
//! schedules (exponential, step decay at absolute positions, SGDR with fixed
//! periods) are functions of an absolute position and must be rescaled with
//! [`bac_convert`] (or truncated with [`early_stop`]) before they can drive a
//! budgeted run.
//!
//! Every evaluation is a pure function of its arguments and does not allocate.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default multiplicative drop factor for step decay.
pub const DEFAULT_STEP_GAMMA: f64 = 0.1;
/// Default exponent for poly decay.
pub const DEFAULT_POLY_GAMMA: f64 = 0.9;
/// Default htd shape parameters.
pub const DEFAULT_HTD_LOWER: f64 = -6.0;
pub const DEFAULT_HTD_UPPER: f64 = 3.0;
/// Default SGDR period multiplier.
pub const DEFAULT_SGDR_T_MULT: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("budget must be at least one iteration")]
    EmptyBudget,
    #[error("iteration {t} is outside a budget of {total} iterations")]
    PastBudget { t: u64, total: u64 },
    #[error("progress {0} is outside [0, 1)")]
    ProgressOutOfRange(f64),
    #[error("position {0} must be finite and non-negative")]
    PositionOutOfRange(f64),
    #[error("schedule `{0}` is not budget-aware; convert it with BAC first")]
    BudgetUnaware(&'static str),
    #[error("schedule `{0}` is already budget-aware")]
    BudgetAware(&'static str),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("unknown schedule kind `{0}`")]
    UnknownKind(String),
    #[error("malformed schedule text: {0}")]
    Malformed(String),
    #[error("warm-up of {warmup} iterations does not fit in a budget of {total}")]
    WarmupTooLong { warmup: u64, total: u64 },
}

pub type Result<T, E = ScheduleError> = std::result::Result<T, E>;

/// Position inside a training budget: iteration `t` of `total`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BudgetClock {
    t: u64,
    total: u64,
}

impl BudgetClock {
    pub fn new(t: u64, total: u64) -> Result<Self> {
        if total == 0 {
            return Err(ScheduleError::EmptyBudget);
        }
        if t >= total {
            return Err(ScheduleError::PastBudget { t, total });
        }
        Ok(Self { t, total })
    }

    pub fn iteration(&self) -> u64 {
        self.t
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Training progress `t / T`, always in `[0, 1)`.
    pub fn progress(&self) -> f64 {
        self.t as f64 / self.total as f64
    }
}

/// Declarative description of a learning-rate schedule.
///
/// The text form is a whitespace-separated list of `key=value` pairs, e.g.
/// `kind=step gamma=0.1 drops=0.25,0.5`. See [`ScheduleSpec::from_str`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ScheduleSpec {
    /// `beta = 1`.
    Constant,
    /// `beta = 1 - p`.
    Linear,
    /// `beta = (1 - p)^gamma`.
    Poly { gamma: f64 },
    /// `beta = eta + (1 - eta)(1 + cos(pi p)) / 2`.
    Cosine { eta: f64 },
    /// `beta = eta + (1 - eta)(1 - tanh(lower + (upper - lower) p)) / 2`.
    Htd { eta: f64, lower: f64, upper: f64 },
    /// Step decay with drops at progress fractions in `(0, 1)`.
    Step { gamma: f64, drops: Vec<f64> },
    /// Step decay with drops at absolute positions. Budget-unaware.
    StepAt { gamma: f64, at: Vec<f64> },
    /// `beta = gamma^t`. Budget-unaware unless `horizon` is set, in which case
    /// it is evaluated at `t = p * horizon`.
    Exponential { gamma: f64, horizon: Option<f64> },
    /// Cosine with warm restarts and periods `t0 * t_mult^(i-1)`.
    /// Budget-unaware unless `horizon` is set.
    SgdrUnaware {
        t0_period: f64,
        t_mult: f64,
        eta: f64,
        horizon: Option<f64>,
    },
    /// Cosine restarted `n_restarts` times at even intervals of the budget.
    SgdrAware { n_restarts: u32, eta: f64 },
}

impl ScheduleSpec {
    pub fn poly() -> Self {
        ScheduleSpec::Poly {
            gamma: DEFAULT_POLY_GAMMA,
        }
    }

    pub fn cosine() -> Self {
        ScheduleSpec::Cosine { eta: 0.0 }
    }

    pub fn htd() -> Self {
        ScheduleSpec::Htd {
            eta: 0.0,
            lower: DEFAULT_HTD_LOWER,
            upper: DEFAULT_HTD_UPPER,
        }
    }

    /// Step decay dropping `n` times at even intervals of the budget
    /// (`n = 2` drops at 1/3 and 2/3).
    pub fn step_even(n: u32) -> Self {
        let drops = (1..=n).map(|i| f64::from(i) / f64::from(n + 1)).collect();
        ScheduleSpec::Step {
            gamma: DEFAULT_STEP_GAMMA,
            drops,
        }
    }

    pub fn exponential(gamma: f64) -> Self {
        ScheduleSpec::Exponential { gamma, horizon: None }
    }

    pub fn sgdr_aware(n_restarts: u32) -> Self {
        ScheduleSpec::SgdrAware { n_restarts, eta: 0.0 }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ScheduleSpec::Constant => "constant",
            ScheduleSpec::Linear => "linear",
            ScheduleSpec::Poly { .. } => "poly",
            ScheduleSpec::Cosine { .. } => "cosine",
            ScheduleSpec::Htd { .. } => "htd",
            ScheduleSpec::Step { .. } | ScheduleSpec::StepAt { .. } => "step",
            ScheduleSpec::Exponential { .. } => "exponential",
            ScheduleSpec::SgdrUnaware { .. } => "sgdr-unaware",
            ScheduleSpec::SgdrAware { .. } => "sgdr-aware",
        }
    }

    /// Whether the schedule can be evaluated from training progress alone.
    pub fn is_budget_aware(&self) -> bool {
        match self {
            ScheduleSpec::StepAt { .. } => false,
            ScheduleSpec::Exponential { horizon, .. } | ScheduleSpec::SgdrUnaware { horizon, .. } => horizon.is_some(),
            _ => true,
        }
    }

    /// Checks parameter ranges. Constructors do not validate; parsing does.
    pub fn validate(&self) -> Result<()> {
        match self {
            ScheduleSpec::Constant | ScheduleSpec::Linear => Ok(()),
            ScheduleSpec::Poly { gamma } => check_positive("gamma", *gamma),
            ScheduleSpec::Cosine { eta } => check_eta(*eta),
            ScheduleSpec::Htd { eta, lower, upper } => {
                check_eta(*eta)?;
                check_finite("lower", *lower)?;
                check_finite("upper", *upper)
            }
            ScheduleSpec::Step { gamma, drops } => {
                check_positive("gamma", *gamma)?;
                check_increasing("drops", drops)?;
                if drops.iter().any(|&d| d <= 0.0 || d >= 1.0) {
                    return Err(invalid("drops", "every drop must lie in (0, 1)"));
                }
                Ok(())
            }
            ScheduleSpec::StepAt { gamma, at } => {
                check_positive("gamma", *gamma)?;
                check_increasing("at", at)?;
                if at.iter().any(|&d| d <= 0.0) {
                    return Err(invalid("at", "every drop position must be positive"));
                }
                Ok(())
            }
            ScheduleSpec::Exponential { gamma, horizon } => {
                check_positive("gamma", *gamma)?;
                if let Some(h) = horizon {
                    check_positive("horizon", *h)?;
                }
                Ok(())
            }
            ScheduleSpec::SgdrUnaware {
                t0_period,
                t_mult,
                eta,
                horizon,
            } => {
                check_positive("t0", *t0_period)?;
                if !(t_mult.is_finite() && *t_mult >= 1.0) {
                    return Err(invalid("t_mult", "must be a finite value >= 1"));
                }
                check_eta(*eta)?;
                if let Some(h) = horizon {
                    check_positive("horizon", *h)?;
                }
                Ok(())
            }
            ScheduleSpec::SgdrAware { eta, .. } => check_eta(*eta),
        }
    }

    /// Evaluates a budget-aware schedule at an arbitrary progress in `[0, 1)`.
    pub fn eval_progress(&self, p: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&p) {
            return Err(ScheduleError::ProgressOutOfRange(p));
        }
        let beta = match self {
            ScheduleSpec::Constant => 1.0,
            ScheduleSpec::Linear => 1.0 - p,
            ScheduleSpec::Poly { gamma } => (1.0 - p).powf(*gamma),
            ScheduleSpec::Cosine { eta } => cosine_ratio(*eta, p),
            ScheduleSpec::Htd { eta, lower, upper } => {
                eta + 0.5 * (1.0 - eta) * (1.0 - (lower + (upper - lower) * p).tanh())
            }
            ScheduleSpec::Step { gamma, drops } => step_ratio(*gamma, drops, p),
            ScheduleSpec::Exponential {
                gamma,
                horizon: Some(h),
            } => (p * h * gamma.ln()).exp(),
            ScheduleSpec::SgdrUnaware {
                t0_period,
                t_mult,
                eta,
                horizon: Some(h),
            } => sgdr_value(*t0_period, *t_mult, *eta, p * h),
            ScheduleSpec::SgdrAware { n_restarts, eta } => {
                let segment = p * f64::from(n_restarts + 1);
                cosine_ratio(*eta, segment - segment.floor())
            }
            _ => return Err(ScheduleError::BudgetUnaware(self.kind())),
        };
        Ok(beta)
    }
}

fn invalid(name: &'static str, reason: &str) -> ScheduleError {
    ScheduleError::InvalidParameter {
        name,
        reason: reason.to_string(),
    }
}

fn check_finite(name: &'static str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(invalid(name, "must be finite"))
    }
}

fn check_positive(name: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(name, "must be a finite positive value"))
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if (0.0..1.0).contains(&eta) {
        Ok(())
    } else {
        Err(invalid("eta", "must lie in [0, 1)"))
    }
}

fn check_increasing(name: &'static str, xs: &[f64]) -> Result<()> {
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(invalid(name, "must be finite"));
    }
    if xs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid(name, "must be strictly increasing"));
    }
    Ok(())
}

/// `eta + (1 - eta)(1 + cos(pi q)) / 2`.
#[inline]
pub fn cosine_ratio(eta: f64, q: f64) -> f64 {
    eta + 0.5 * (1.0 - eta) * (1.0 + (PI * q).cos())
}

/// Drops apply once `position >= drop` (half-open intervals). Positions a few
/// ulps short of a drop count as on it, so `t/T * T0` and `t/T` agree at
/// boundaries that are equal in exact arithmetic.
#[inline]
fn step_ratio(gamma: f64, drops: &[f64], position: f64) -> f64 {
    let reached = |d: f64| position >= d || d - position <= 4.0 * f64::EPSILON * d.abs();
    let k = drops.iter().take_while(|&&d| reached(d)).count();
    gamma.powi(k as i32)
}

/// Evaluates a budget-aware schedule at the clock's progress.
pub fn eval_schedule(spec: &ScheduleSpec, clock: &BudgetClock) -> Result<f64> {
    match spec {
        ScheduleSpec::SgdrAware { n_restarts, eta } => Ok(sgdr_budget_aware(*n_restarts, *eta, clock)),
        _ => spec.eval_progress(clock.progress()),
    }
}

/// Evaluates a budget-unaware schedule at absolute position `t`.
///
/// Constant schedules are rate-invariant and accepted here too.
pub fn eval_unaware(spec: &ScheduleSpec, t: f64) -> Result<f64> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(ScheduleError::PositionOutOfRange(t));
    }
    match spec {
        ScheduleSpec::Constant => Ok(1.0),
        ScheduleSpec::Exponential { gamma, horizon: None } => Ok((t * gamma.ln()).exp()),
        ScheduleSpec::StepAt { gamma, at } => Ok(step_ratio(*gamma, at, t)),
        ScheduleSpec::SgdrUnaware {
            t0_period,
            t_mult,
            eta,
            horizon: None,
        } => Ok(sgdr_value(*t0_period, *t_mult, *eta, t)),
        _ => Err(ScheduleError::BudgetAware(spec.kind())),
    }
}

/// Budget-aware conversion: rescales a schedule designed for `original_budget`
/// so that `beta(p) = f(p * original_budget)` for any new budget.
///
/// Absolute step positions become progress fractions; positions at or past
/// `original_budget` were never reached by the original schedule and are
/// dropped.
pub fn bac_convert(spec: &ScheduleSpec, original_budget: f64) -> Result<ScheduleSpec> {
    check_positive("original_budget", original_budget)?;
    match spec {
        ScheduleSpec::Constant => Ok(ScheduleSpec::Constant),
        ScheduleSpec::StepAt { gamma, at } => Ok(ScheduleSpec::Step {
            gamma: *gamma,
            drops: at.iter().map(|a| a / original_budget).filter(|&d| d < 1.0).collect(),
        }),
        ScheduleSpec::Exponential { gamma, horizon: None } => Ok(ScheduleSpec::Exponential {
            gamma: *gamma,
            horizon: Some(original_budget),
        }),
        ScheduleSpec::SgdrUnaware {
            t0_period,
            t_mult,
            eta,
            horizon: None,
        } => Ok(ScheduleSpec::SgdrUnaware {
            t0_period: *t0_period,
            t_mult: *t_mult,
            eta: *eta,
            horizon: Some(original_budget),
        }),
        _ => Err(ScheduleError::BudgetAware(spec.kind())),
    }
}

/// Budget-aware view of an unaware schedule that is simply cut off after
/// `budget` units, i.e. early stopping without any rescaling.
pub fn early_stop(spec: &ScheduleSpec, budget: f64) -> Result<ScheduleSpec> {
    bac_convert(spec, budget)
}

/// Start and length of the SGDR period containing position `t`.
pub fn sgdr_period(t0_period: f64, t_mult: f64, t: f64) -> (f64, f64) {
    if t_mult == 1.0 {
        let index = (t / t0_period).floor();
        return (index * t0_period, t0_period);
    }
    let mut start = 0.0;
    let mut len = t0_period;
    while t >= start + len {
        start += len;
        len *= t_mult;
    }
    (start, len)
}

/// SGDR ratio at absolute position `t`: a cosine decay within each period,
/// restarting at the cumulative period boundaries.
pub fn sgdr_value(t0_period: f64, t_mult: f64, eta: f64, t: f64) -> f64 {
    let (start, len) = sgdr_period(t0_period, t_mult, t);
    let q = ((t - start) / len).clamp(0.0, 1.0);
    cosine_ratio(eta, q)
}

/// Cosine decay restarted `n_restarts` times at even intervals of the budget.
///
/// Segment boundaries are located with integer arithmetic so that a restart
/// lands exactly on the iteration where `t * (n + 1)` is a multiple of `T`.
pub fn sgdr_budget_aware(n_restarts: u32, eta: f64, clock: &BudgetClock) -> f64 {
    let segments = u128::from(n_restarts) + 1;
    let scaled = u128::from(clock.iteration()) * segments;
    let total = u128::from(clock.total());
    let q = (scaled % total) as f64 / total as f64;
    cosine_ratio(eta, q)
}

/// Linear warm-up over the first `warmup_iters` iterations followed by `spec`
/// evaluated over the remaining span with progress `(t - w) / (T - w)`.
///
/// During warm-up the ratio is `(t + 1) / w` times the schedule's initial value.
pub fn apply_warmup(spec: &ScheduleSpec, warmup_iters: u64, clock: &BudgetClock) -> Result<f64> {
    if warmup_iters == 0 {
        return eval_schedule(spec, clock);
    }
    if warmup_iters >= clock.total() {
        return Err(ScheduleError::WarmupTooLong {
            warmup: warmup_iters,
            total: clock.total(),
        });
    }
    let span = clock.total() - warmup_iters;
    if clock.iteration() < warmup_iters {
        let ramp = (clock.iteration() + 1) as f64 / warmup_iters as f64;
        Ok(ramp * eval_schedule(spec, &BudgetClock::new(0, span)?)?)
    } else {
        eval_schedule(spec, &BudgetClock::new(clock.iteration() - warmup_iters, span)?)
    }
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl fmt::Display for ScheduleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "kind={}", self.kind())?;
        match self {
            ScheduleSpec::Constant | ScheduleSpec::Linear => Ok(()),
            ScheduleSpec::Poly { gamma } => write!(f, " gamma={gamma}"),
            ScheduleSpec::Cosine { eta } => write!(f, " eta={eta}"),
            ScheduleSpec::Htd { eta, lower, upper } => {
                write!(f, " eta={eta} lower={lower} upper={upper}")
            }
            ScheduleSpec::Step { gamma, drops } => {
                write!(f, " gamma={gamma} drops={}", fmt_list(drops))
            }
            ScheduleSpec::StepAt { gamma, at } => write!(f, " gamma={gamma} at={}", fmt_list(at)),
            ScheduleSpec::Exponential { gamma, horizon } => {
                write!(f, " gamma={gamma}")?;
                match horizon {
                    Some(h) => write!(f, " horizon={h}"),
                    None => Ok(()),
                }
            }
            ScheduleSpec::SgdrUnaware {
                t0_period,
                t_mult,
                eta,
                horizon,
            } => {
                write!(f, " t0={t0_period} t_mult={t_mult} eta={eta}")?;
                match horizon {
                    Some(h) => write!(f, " horizon={h}"),
                    None => Ok(()),
                }
            }
            ScheduleSpec::SgdrAware { n_restarts, eta } => {
                write!(f, " restarts={n_restarts} eta={eta}")
            }
        }
    }
}

/// Parsed `key=value` pairs of the text form; each lookup consumes its key so
/// leftovers can be reported.
struct Params {
    pairs: Vec<(String, String)>,
}

impl Params {
    fn take(&mut self, key: &str) -> Option<String> {
        let idx = self.pairs.iter().position(|(k, _)| k == key)?;
        Some(self.pairs.remove(idx).1)
    }

    fn real(&mut self, key: &'static str, default: Option<f64>) -> Result<f64> {
        match self.take(key) {
            Some(v) => v
                .parse::<f64>()
                .map_err(|_| invalid(key, &format!("`{v}` is not a number"))),
            None => default.ok_or_else(|| invalid(key, "is required")),
        }
    }

    fn opt_real(&mut self, key: &'static str) -> Result<Option<f64>> {
        self.take(key)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| invalid(key, &format!("`{v}` is not a number")))
            })
            .transpose()
    }

    fn list(&mut self, key: &'static str) -> Result<Option<Vec<f64>>> {
        self.take(key)
            .map(|v| {
                if v.is_empty() {
                    return Ok(Vec::new());
                }
                v.split(',')
                    .map(|x| {
                        x.trim()
                            .parse::<f64>()
                            .map_err(|_| invalid(key, &format!("`{x}` is not a number")))
                    })
                    .collect()
            })
            .transpose()
    }

    fn finish(self) -> Result<()> {
        match self.pairs.first() {
            Some((k, _)) => Err(ScheduleError::Malformed(format!("unexpected parameter `{k}`"))),
            None => Ok(()),
        }
    }
}

impl FromStr for ScheduleSpec {
    type Err = ScheduleError;

    /// Parses `kind=<kind> [key=value ...]`. Pairs may be separated by
    /// whitespace or `;`. Unknown or inapplicable keys are errors.
    fn from_str(s: &str) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for token in s.split(|c: char| c.is_whitespace() || c == ';') {
            if token.is_empty() {
                continue;
            }
            let (k, v) = token
                .split_once('=')
                .ok_or_else(|| ScheduleError::Malformed(format!("`{token}` is not key=value")))?;
            if pairs.iter().any(|(existing, _)| existing == k) {
                return Err(ScheduleError::Malformed(format!("duplicate key `{k}`")));
            }
            pairs.push((k.to_string(), v.to_string()));
        }
        let mut p = Params { pairs };
        let kind = p
            .take("kind")
            .ok_or_else(|| ScheduleError::Malformed("missing `kind`".into()))?;
        let spec = match kind.as_str() {
            "constant" => ScheduleSpec::Constant,
            "linear" => ScheduleSpec::Linear,
            "poly" => ScheduleSpec::Poly {
                gamma: p.real("gamma", Some(DEFAULT_POLY_GAMMA))?,
            },
            "cosine" => ScheduleSpec::Cosine {
                eta: p.real("eta", Some(0.0))?,
            },
            "htd" => ScheduleSpec::Htd {
                eta: p.real("eta", Some(0.0))?,
                lower: p.real("lower", Some(DEFAULT_HTD_LOWER))?,
                upper: p.real("upper", Some(DEFAULT_HTD_UPPER))?,
            },
            "step" => {
                let gamma = p.real("gamma", Some(DEFAULT_STEP_GAMMA))?;
                match (p.list("drops")?, p.list("at")?) {
                    (Some(drops), None) => ScheduleSpec::Step { gamma, drops },
                    (None, Some(at)) => ScheduleSpec::StepAt { gamma, at },
                    _ => {
                        return Err(ScheduleError::Malformed(
                            "step needs exactly one of `drops` or `at`".into(),
                        ))
                    }
                }
            }
            "exponential" => ScheduleSpec::Exponential {
                gamma: p.real("gamma", None)?,
                horizon: p.opt_real("horizon")?,
            },
            "sgdr-unaware" => ScheduleSpec::SgdrUnaware {
                t0_period: p.real("t0", None)?,
                t_mult: p.real("t_mult", Some(DEFAULT_SGDR_T_MULT))?,
                eta: p.real("eta", Some(0.0))?,
                horizon: p.opt_real("horizon")?,
            },
            "sgdr-aware" => {
                let n = p.take("restarts").unwrap_or_else(|| "0".into());
                ScheduleSpec::SgdrAware {
                    n_restarts: n
                        .parse()
                        .map_err(|_| invalid("restarts", "must be a non-negative integer"))?,
                    eta: p.real("eta", Some(0.0))?,
                }
            }
            other => return Err(ScheduleError::UnknownKind(other.to_string())),
        };
        p.finish()?;
        spec.validate()?;
        Ok(spec)
    }
}

impl TryFrom<String> for ScheduleSpec {
    type Error = ScheduleError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ScheduleSpec> for String {
    fn from(spec: ScheduleSpec) -> String {
        spec.to_string()
    }
}
