//! Budget-aware learning-rate schedules and a small deterministic training
//! engine for studying training under a fixed iteration budget.

pub mod data;
pub mod diagnostics;
pub mod engine;
pub mod optim;
pub mod ranking;
pub mod schedules;
pub mod stats;
