//! Cluster-aware multivariate rank-sum testing.
//!
//! Counties (observations) nested in states (clusters) carry `K` outcomes.
//! Outcomes are aligned so higher means worse, gaps are filled with state
//! medians, each state may be subsampled to a fixed county count, and the
//! pooled mid-ranks are averaged per state to compare two groups of states
//! with a studentized rank-sum statistic.
//!
//! ```
//! use rankfuse::oracles::{simulate_panel, SimScenario};
//! use rankfuse::rank::{test_matrix, Sidedness};
//!
//! let scenario = SimScenario::uniform_shift(8, 8, 20, 3, 0.3, 0.4, 0.5, 1).unwrap();
//! let (matrix, groups) = simulate_panel(&scenario).unwrap();
//! let (result, _summaries) = test_matrix(&matrix, &groups, Sidedness::GreaterTreat).unwrap();
//! assert!(result.t.is_finite());
//! ```

pub mod data;
pub mod descriptives;
pub mod harness;
pub mod normal;
pub mod oracles;
pub mod preprocess;
pub mod rank;
pub mod seed;

pub use data::{
    parse_group_map, parse_panel, validate_panel, Direction, Group, GroupMap, OutcomeConfig,
    OutcomeSpec, PanelDataset, ValidationReport,
};
pub use preprocess::{
    align_outcomes, apply_subsample, impute_state_median, plan_subsample, AlignedMatrix,
    SubsamplePlan,
};
pub use rank::{lrst_test, midranks, rank_table, state_rank_summaries, Sidedness, TestResult};
