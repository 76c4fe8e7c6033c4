//! rank1lab: an exact-arithmetic laboratory for cutting-and-stacking
//! constructions.
//!
//! The crate builds rank-one Z-actions, flows, and Z^n-actions from explicit
//! schedules, represents tower-measurable sets exactly, and evaluates
//! self-joinings on product sets with certified rational interval bounds.
//! On top of that sit constructive search engines for the approximation,
//! weak-closure, factor-rigidity, flat-roof, and partial-rigidity
//! experiments, and a config-driven CLI runner that emits reproducible
//! reports.
//!
//! Everything is exact: there is no floating point anywhere in a measure
//! computation, and identical inputs produce byte-identical reports.

pub mod coloring;
pub mod config;
pub mod error;
pub mod joining;
pub mod level_set;
pub mod rational;
pub mod report;
pub mod runner;
pub mod schedule;
pub mod search;
pub mod tower;
pub mod zn;

pub use coloring::ColoringFactor;
pub use error::{Error, Result};
pub use joining::{Displacement, JoiningSpec};
pub use level_set::{LevelSet, Translated};
pub use rational::{Interval, Rational};
pub use schedule::{preset, validate_schedule, Schedule, ScheduleKind, StageRule};
pub use search::{ScanBudget, SearchReport, TestFamily};
pub use tower::{accelerate_schedule, flat_roof_defect, AcceleratedSchedule, Construction};
