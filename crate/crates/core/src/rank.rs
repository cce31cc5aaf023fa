//! Pooled mid-ranks, state-level rank summaries and the studentized
//! cluster rank-sum statistic.
//!
//! Ranks are oriented so that the county with the lowest burden on an outcome
//! receives the largest rank. Each state is reduced to a single aggregate, the
//! mean over outcomes of its mean county rank, and the two groups of states
//! are compared through the difference of their mean aggregates, studentized
//! by the between-state spread within each group.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Group, GroupMap};
use crate::normal;
use crate::preprocess::AlignedMatrix;

pub const DIRECTION_NOTE: &str = "larger ranks = more favorable";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RankError {
    #[error("cannot rank an empty vector")]
    Empty,
    #[error("non-finite value at position {0}")]
    NonFinite(usize),
    #[error("state `{0}` has no group assignment")]
    UnassignedState(String),
    #[error("each group needs at least 2 states (treatment {m1}, comparison {m0})")]
    GroupTooSmall { m1: usize, m0: usize },
    #[error("state aggregates are constant within each group (treatment mean {rbar_treat}, comparison mean {rbar_ctrl}); T is undefined")]
    DegenerateVariance { rbar_treat: f64, rbar_ctrl: f64 },
}

impl RankError {
    pub fn code(&self) -> &'static str {
        match self {
            RankError::Empty => "EMPTY",
            RankError::NonFinite(_) => "NON_FINITE",
            RankError::UnassignedState(_) => "UNASSIGNED_STATE",
            RankError::GroupTooSmall { .. } => "GROUP_TOO_SMALL",
            RankError::DegenerateVariance { .. } => "DEGENERATE_VARIANCE",
        }
    }
}

/// Ascending mid-ranks: a value whose tie block occupies sorted positions
/// `p..p+t` gets `p + (t - 1) / 2` (1-based).
pub fn midranks(values: &[f64]) -> Result<Vec<f64>, RankError> {
    midranks_with_ties(values).map(|(r, _)| r)
}

/// Mid-ranks plus the number of tie blocks of size two or more.
fn midranks_with_ties(values: &[f64]) -> Result<(Vec<f64>, usize), RankError> {
    if values.is_empty() {
        return Err(RankError::Empty);
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(RankError::NonFinite(i));
    }
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());

    let mut ranks = vec![0.0; n];
    let mut ties = 0;
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[order[end]] == values[order[start]] {
            end += 1;
        }
        if end - start > 1 {
            ties += 1;
        }
        // positions start+1 ..= end, averaged
        let r = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    Ok((ranks, ties))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    /// `ranks[k][i]`: mid-rank of row `i` on outcome `k`.
    pub ranks: Vec<Vec<f64>>,
    #[serde(rename = "N")]
    pub n: usize,
    pub tie_groups: Vec<usize>,
}

/// Rank every outcome column over all pooled rows, lowest burden highest.
pub fn rank_table(matrix: &AlignedMatrix) -> Result<RankTable, RankError> {
    if matrix.n_rows() == 0 {
        return Err(RankError::Empty);
    }
    let per_outcome = (0..matrix.n_outcomes())
        .into_par_iter()
        .map(|k| {
            let favour: Vec<f64> = matrix.rows().iter().map(|r| -r.values[k]).collect();
            midranks_with_ties(&favour)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (ranks, tie_groups) = per_outcome.into_iter().unzip();
    Ok(RankTable {
        ranks,
        n: matrix.n_rows(),
        tie_groups,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRankSummary {
    pub state_id: String,
    /// Mean rank of the state's counties, per outcome.
    pub per_outcome_means: Vec<f64>,
    /// Mean of `per_outcome_means`.
    pub aggregate: f64,
    pub n_counties: usize,
}

/// One summary per state, ordered by state id.
pub fn state_rank_summaries(table: &RankTable, matrix: &AlignedMatrix) -> Vec<StateRankSummary> {
    let k = table.ranks.len();
    let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, row) in matrix.rows().iter().enumerate() {
        let entry = sums
            .entry(row.state_id.as_str())
            .or_insert_with(|| (vec![0.0; k], 0));
        for (acc, col) in entry.0.iter_mut().zip(&table.ranks) {
            *acc += col[i];
        }
        entry.1 += 1;
    }
    sums.into_iter()
        .map(|(state, (totals, n))| {
            let per_outcome_means: Vec<f64> = totals.iter().map(|t| t / n as f64).collect();
            let aggregate = per_outcome_means.iter().sum::<f64>() / k as f64;
            StateRankSummary {
                state_id: state.to_string(),
                per_outcome_means,
                aggregate,
                n_counties: n,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sidedness {
    TwoSided,
    /// H1: treatment states rank higher (more favorable).
    #[default]
    GreaterTreat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    #[serde(rename = "T")]
    pub t: f64,
    pub rbar_treat: f64,
    pub rbar_ctrl: f64,
    pub variance: f64,
    pub p_two_sided: f64,
    pub p_one_sided_greater: f64,
    pub m1: usize,
    pub m0: usize,
    #[serde(rename = "C")]
    pub c: Option<usize>,
    #[serde(rename = "K")]
    pub k: usize,
    pub direction_note: String,
    pub sidedness: Sidedness,
}

impl TestResult {
    /// The p-value used for decisions under the configured sidedness.
    pub fn p_value(&self) -> f64 {
        match self.sidedness {
            Sidedness::TwoSided => self.p_two_sided,
            Sidedness::GreaterTreat => self.p_one_sided_greater,
        }
    }
}

/// Mean and unbiased variance. The values are summed in sorted order so the
/// result depends only on the multiset, not on input order.
fn mean_var(values: &mut [f64]) -> (f64, f64) {
    values.sort_by(f64::total_cmp);
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let ss: f64 = values.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, ss / (m - 1.0))
}

pub(crate) fn split_aggregates(
    summaries: &[StateRankSummary],
    groups: &GroupMap,
) -> Result<(Vec<f64>, Vec<f64>), RankError> {
    let mut treat = Vec::new();
    let mut ctrl = Vec::new();
    for s in summaries {
        match groups.get(&s.state_id) {
            Some(Group::Treatment) => treat.push(s.aggregate),
            Some(Group::Comparison) => ctrl.push(s.aggregate),
            None => return Err(RankError::UnassignedState(s.state_id.clone())),
        }
    }
    Ok((treat, ctrl))
}

/// Compare the mean state aggregate of group 1 against group 0.
///
/// `Var = s1²/m1 + s0²/m0` over the state aggregates, so states are the
/// independent units and any dependence among a state's counties or across
/// outcomes enters only through the spread of the aggregates.
pub fn lrst_test(
    summaries: &[StateRankSummary],
    groups: &GroupMap,
    sidedness: Sidedness,
) -> Result<TestResult, RankError> {
    let (mut treat, mut ctrl) = split_aggregates(summaries, groups)?;
    let (m1, m0) = (treat.len(), ctrl.len());
    if m1 < 2 || m0 < 2 {
        return Err(RankError::GroupTooSmall { m1, m0 });
    }
    let (rbar_treat, v1) = mean_var(&mut treat);
    let (rbar_ctrl, v0) = mean_var(&mut ctrl);
    let variance = v1 / m1 as f64 + v0 / m0 as f64;
    if variance.is_nan() || variance <= 0.0 {
        return Err(RankError::DegenerateVariance {
            rbar_treat,
            rbar_ctrl,
        });
    }
    let t = (rbar_treat - rbar_ctrl) / variance.sqrt();
    Ok(TestResult {
        t,
        rbar_treat,
        rbar_ctrl,
        variance,
        p_two_sided: normal::two_sided(t),
        p_one_sided_greater: normal::upper_tail(t),
        m1,
        m0,
        c: None,
        k: summaries.first().map_or(0, |s| s.per_outcome_means.len()),
        direction_note: DIRECTION_NOTE.to_string(),
        sidedness,
    })
}

/// Full ranking pipeline on a prepared matrix.
pub fn test_matrix(
    matrix: &AlignedMatrix,
    groups: &GroupMap,
    sidedness: Sidedness,
) -> Result<(TestResult, Vec<StateRankSummary>), RankError> {
    let table = rank_table(matrix)?;
    let summaries = state_rank_summaries(&table, matrix);
    let mut result = lrst_test(&summaries, groups, sidedness)?;
    result.k = matrix.n_outcomes();
    Ok((result, summaries))
}

/// `state_id,group,n_counties,rbar_k1..rbar_kK,rbar`
pub fn write_summaries_csv<W: Write>(
    summaries: &[StateRankSummary],
    groups: &GroupMap,
    writer: W,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    let k = summaries.first().map_or(0, |s| s.per_outcome_means.len());
    let mut header = vec!["state_id".to_string(), "group".into(), "n_counties".into()];
    header.extend((1..=k).map(|i| format!("rbar_k{i}")));
    header.push("rbar".into());
    w.write_record(&header)?;
    for s in summaries {
        let mut row = vec![
            s.state_id.clone(),
            groups.get(&s.state_id).map_or_else(String::new, |g| g.to_string()),
            s.n_counties.to_string(),
        ];
        row.extend(s.per_outcome_means.iter().map(|v| v.to_string()));
        row.push(s.aggregate.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
