//! Repeated balanced subsampling at several subsample sizes, with the
//! replicate distribution of the statistic summarized per size.
//!
//! Replicate `r` at size `C` draws its plan with seed `mix(master, C, r)`.
//! Seeds depend only on their own coordinates, so replicate sets are
//! prefix-stable: running 100 replicates reproduces the first 100 of a
//! 200-replicate run exactly, and results do not depend on thread count.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{validate_panel, GroupMap, PanelDataset, ValidationReport};
use crate::oracles::{mean_sd, Rejection};
use crate::preprocess::{
    align_outcomes, apply_subsample, group_counts, impute_state_median, plan_subsample,
    AlignedMatrix, PreprocessError,
};
use crate::rank::{self, RankError, Sidedness};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessConfig {
    #[serde(rename = "C_values")]
    pub c_values: Vec<usize>,
    pub replicates: usize,
    pub alpha_levels: Vec<f64>,
    pub master_seed: u64,
    pub sidedness: Sidedness,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            c_values: vec![30, 40, 50],
            replicates: 200,
            alpha_levels: vec![0.05, 0.10],
            master_seed: 0,
            sidedness: Sidedness::GreaterTreat,
        }
    }
}

impl RobustnessConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.c_values.is_empty() || self.c_values.contains(&0) {
            return Err(HarnessError::Config(
                "C values must be a non-empty list of positive integers".into(),
            ));
        }
        if self.replicates == 0 {
            return Err(HarnessError::Config("replicates must be at least 1".into()));
        }
        if self
            .alpha_levels
            .iter()
            .any(|a| !(a.is_finite() && *a > 0.0 && *a < 1.0))
        {
            return Err(HarnessError::Config("alpha levels must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid robustness config: {0}")]
    Config(String),
    #[error("panel failed validation with {} error(s)", .0.errors.len())]
    Invalid(ValidationReport),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

/// Plan seed for replicate `r` at subsample size `c`.
pub fn replicate_seed(master: u64, c: usize, r: usize) -> u64 {
    seed::mix2(master, c as u64, r as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub seed: u64,
    #[serde(rename = "T")]
    pub t: Option<f64>,
    /// p-value under the configured sidedness.
    pub p: Option<f64>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateCounts {
    pub m1: usize,
    pub m0: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CSummary {
    #[serde(rename = "mean_T")]
    pub mean_t: Option<f64>,
    #[serde(rename = "sd_T")]
    pub sd_t: Option<f64>,
    pub rejection_rate: Vec<Rejection>,
    pub n_valid: usize,
    pub n_degenerate: usize,
    pub retained_state_counts: StateCounts,
    /// Share of valid replicates with T > 0.
    #[serde(rename = "frac_positive_T")]
    pub frac_positive_t: Option<f64>,
    /// Set when this C could not be run (e.g. a group lost all its states).
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessSummary {
    #[serde(rename = "per_C")]
    pub per_c: BTreeMap<usize, CSummary>,
}

impl RobustnessSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary is always serializable")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRun {
    pub summary: RobustnessSummary,
    /// Replicate records per C, in replicate order.
    pub replicates: BTreeMap<usize, Vec<ReplicateRecord>>,
}

/// Reduce replicate records to a per-C summary. Degenerate replicates are
/// counted but excluded from the moments and rejection rates.
pub fn summarize_replicates(
    records: &[ReplicateRecord],
    alpha_levels: &[f64],
    retained: StateCounts,
) -> CSummary {
    let ts: Vec<f64> = records.iter().filter_map(|r| r.t).collect();
    let ps: Vec<f64> = records.iter().filter_map(|r| r.p).collect();
    let (mean_t, sd_t) = mean_sd(&ts);
    let share = |count: usize| {
        if ts.is_empty() {
            None
        } else {
            Some(count as f64 / ts.len() as f64)
        }
    };
    CSummary {
        mean_t,
        sd_t,
        rejection_rate: alpha_levels
            .iter()
            .map(|&alpha| Rejection {
                alpha,
                rate: share(ps.iter().filter(|&&p| p < alpha).count()).unwrap_or(0.0),
            })
            .collect(),
        n_valid: ts.len(),
        n_degenerate: records.len() - ts.len(),
        retained_state_counts: retained,
        frac_positive_t: share(ts.iter().filter(|&&t| t > 0.0).count()),
        error: None,
    }
}

fn failed(code: &str, message: String, retained: StateCounts) -> CSummary {
    CSummary {
        mean_t: None,
        sd_t: None,
        rejection_rate: Vec::new(),
        n_valid: 0,
        n_degenerate: 0,
        retained_state_counts: retained,
        frac_positive_t: None,
        error: Some(format!("{code}: {message}")),
    }
}

fn run_replicate(
    matrix: &AlignedMatrix,
    groups: &GroupMap,
    cfg: &RobustnessConfig,
    c: usize,
    r: usize,
) -> Result<ReplicateRecord, HarnessError> {
    let seed = replicate_seed(cfg.master_seed, c, r);
    let plan = plan_subsample(matrix, c, seed)?;
    let sub = apply_subsample(matrix, &plan)?;
    let record = match rank::test_matrix(&sub, groups, cfg.sidedness) {
        Ok((res, _)) => ReplicateRecord {
            replicate: r,
            seed,
            t: Some(res.t),
            p: Some(res.p_value()),
            degenerate: false,
        },
        Err(RankError::DegenerateVariance { .. }) => ReplicateRecord {
            replicate: r,
            seed,
            t: None,
            p: None,
            degenerate: true,
        },
        // group sizes were checked before any replicate ran
        Err(e) => unreachable!("replicate failed after group checks: {e}"),
    };
    Ok(record)
}

/// Robustness protocol on an already aligned and imputed matrix.
pub fn run_robustness_matrix(
    matrix: &AlignedMatrix,
    groups: &GroupMap,
    cfg: &RobustnessConfig,
) -> Result<RobustnessRun, HarnessError> {
    cfg.validate()?;
    let counts = matrix.state_counts();
    if let Some(s) = counts.keys().find(|s| groups.get(s).is_none()) {
        return Err(HarnessError::Config(format!("state `{s}` has no group assignment")));
    }
    let mut c_values = cfg.c_values.clone();
    c_values.sort_unstable();
    c_values.dedup();

    let mut per_c = BTreeMap::new();
    let mut runnable = Vec::new();
    for &c in &c_values {
        // exclusion depends only on the panel and C
        let retained = counts.iter().filter(|(_, &n)| n >= c).map(|(s, _)| s.as_str());
        let (m1, m0) = group_counts(retained, groups);
        let sc = StateCounts { m1, m0 };
        if m1 + m0 == 0 {
            per_c.insert(c, failed("NO_RETAINED_STATES", format!("no state has {c} counties"), sc));
        } else if m1 == 0 || m0 == 0 {
            let g = if m1 == 0 { 1 } else { 0 };
            per_c.insert(c, failed("GROUP_EMPTIED", format!("group {g} has no state with {c} counties"), sc));
        } else if m1 < 2 || m0 < 2 {
            per_c.insert(
                c,
                failed("GROUP_TOO_SMALL", format!("need 2 states per group, have {m1} and {m0}"), sc),
            );
        } else {
            runnable.push((c, sc));
        }
    }

    let tasks: Vec<(usize, usize)> = runnable
        .iter()
        .flat_map(|&(c, _)| (0..cfg.replicates).map(move |r| (c, r)))
        .collect();
    let records = tasks
        .par_iter()
        .map(|&(c, r)| run_replicate(matrix, groups, cfg, c, r))
        .collect::<Result<Vec<_>, _>>()?;

    let mut replicates = BTreeMap::new();
    for ((c, sc), chunk) in runnable.iter().zip(records.chunks(cfg.replicates)) {
        per_c.insert(*c, summarize_replicates(chunk, &cfg.alpha_levels, *sc));
        replicates.insert(*c, chunk.to_vec());
    }
    Ok(RobustnessRun {
        summary: RobustnessSummary { per_c },
        replicates,
    })
}

/// Validate, align and impute `panel`, then run the robustness protocol.
pub fn run_robustness(
    panel: &PanelDataset,
    groups: &GroupMap,
    cfg: &RobustnessConfig,
) -> Result<RobustnessRun, HarnessError> {
    let report = validate_panel(panel, groups);
    if !report.is_ok() {
        return Err(HarnessError::Invalid(report));
    }
    let matrix = impute_state_median(&align_outcomes(panel))?;
    run_robustness_matrix(&matrix, groups, cfg)
}

const DASH: &str = "\u{2014}";

/// Three decimals, dropping one trailing zero (`1.000` -> `1.00`).
fn fmt_rate(rate: f64) -> String {
    let s = format!("{rate:.3}");
    match s.strip_suffix('0') {
        Some(t) => t.to_string(),
        None => s,
    }
}

/// Table rows in the layout `C & Mean T & SD(T) & Pr(p<a1) & Pr(p<a2) ...`
/// with alpha columns in descending order. The first row is the header.
pub fn summarize_table(summary: &RobustnessSummary) -> Vec<String> {
    let mut alphas: Vec<f64> = summary
        .per_c
        .values()
        .flat_map(|c| c.rejection_rate.iter().map(|r| r.alpha))
        .collect();
    alphas.sort_by(|a, b| b.total_cmp(a));
    alphas.dedup();
    if alphas.is_empty() {
        alphas = vec![0.10, 0.05];
    }

    let mut header = vec!["C".to_string(), "Mean T".into(), "SD(T)".into()];
    header.extend(alphas.iter().map(|a| format!("Pr(p<{a:.2})")));
    let mut rows = vec![header.join(" & ")];
    for (c, s) in &summary.per_c {
        let mut cells = vec![
            c.to_string(),
            s.mean_t.map_or(DASH.into(), |m| format!("{m:.1}")),
            s.sd_t.map_or(DASH.into(), |v| format!("{v:.2}")),
        ];
        for a in &alphas {
            let rate = s
                .rejection_rate
                .iter()
                .find(|r| r.alpha == *a)
                .filter(|_| s.n_valid > 0)
                .map(|r| r.rate);
            cells.push(rate.map_or(DASH.into(), fmt_rate));
        }
        rows.push(cells.join(" & "));
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Group;
    use crate::oracles::{simulate_panel, SimScenario};

    fn entry(mean: Option<f64>, sd: Option<f64>, r10: f64, r05: f64, valid: usize) -> CSummary {
        CSummary {
            mean_t: mean,
            sd_t: sd,
            rejection_rate: vec![
                Rejection { alpha: 0.05, rate: r05 },
                Rejection { alpha: 0.10, rate: r10 },
            ],
            n_valid: valid,
            n_degenerate: 0,
            retained_state_counts: StateCounts { m1: 20, m0: 20 },
            frac_positive_t: Some(1.0),
            error: None,
        }
    }

    #[test]
    fn table_row_format() {
        let mut per_c = BTreeMap::new();
        per_c.insert(50, entry(Some(17.6), Some(0.95), 1.0, 0.945, 200));
        let rows = summarize_table(&RobustnessSummary { per_c });
        assert_eq!(rows[0], "C & Mean T & SD(T) & Pr(p<0.10) & Pr(p<0.05)");
        assert_eq!(rows[1], "50 & 17.6 & 0.95 & 1.00 & 0.945");
    }

    #[test]
    fn table_edge_cases() {
        let rows = summarize_table(&RobustnessSummary {
            per_c: BTreeMap::new(),
        });
        assert_eq!(rows, vec!["C & Mean T & SD(T) & Pr(p<0.10) & Pr(p<0.05)"]);

        let mut per_c = BTreeMap::new();
        per_c.insert(30, entry(Some(2.04), None, 1.0, 0.0, 1));
        let rows = summarize_table(&RobustnessSummary { per_c });
        assert_eq!(rows[1], "30 & 2.0 & \u{2014} & 1.00 & 0.00");
    }

    #[test]
    fn single_replicate_has_no_sd() {
        let recs = vec![ReplicateRecord {
            replicate: 0,
            seed: 1,
            t: Some(1.5),
            p: Some(0.07),
            degenerate: false,
        }];
        let s = summarize_replicates(&recs, &[0.05, 0.10], StateCounts { m1: 2, m0: 2 });
        assert_eq!(s.n_valid, 1);
        assert_eq!(s.sd_t, None);
        assert_eq!(s.mean_t, Some(1.5));
        assert_eq!(s.rejection_rate[0].rate, 0.0);
        assert_eq!(s.rejection_rate[1].rate, 1.0);
    }

    #[test]
    fn degenerate_replicates_are_counted_separately() {
        let recs = vec![
            ReplicateRecord { replicate: 0, seed: 0, t: None, p: None, degenerate: true },
            ReplicateRecord { replicate: 1, seed: 0, t: Some(-1.0), p: Some(0.84), degenerate: false },
            ReplicateRecord { replicate: 2, seed: 0, t: Some(3.0), p: Some(0.001), degenerate: false },
        ];
        let s = summarize_replicates(&recs, &[0.05], StateCounts { m1: 2, m0: 2 });
        assert_eq!((s.n_valid, s.n_degenerate), (2, 1));
        assert_eq!(s.mean_t, Some(1.0));
        assert_eq!(s.rejection_rate[0].rate, 0.5);
        assert_eq!(s.frac_positive_t, Some(0.5));
    }

    #[test]
    fn config_checks() {
        assert!(RobustnessConfig::default().validate().is_ok());
        let bad = RobustnessConfig {
            c_values: vec![],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = RobustnessConfig {
            replicates: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn group_emptied_is_reported_per_c() {
        let sc = SimScenario::uniform_shift(3, 3, 10, 2, 0.2, 0.2, 0.0, 4).unwrap();
        let (mut m, mut g) = simulate_panel(&sc).unwrap();
        // one large comparison state: only it survives C = 20
        let extra: Vec<_> = (0..20)
            .map(|i| crate::preprocess::AlignedRow {
                county_id: format!("BIG-{i}"),
                state_id: "BIG".into(),
                values: vec![i as f64, -(i as f64)],
            })
            .collect();
        let mut rows = m.rows().to_vec();
        rows.extend(extra);
        m = AlignedMatrix::new(m.outcomes().to_vec(), rows).unwrap();
        g.assignment.insert("BIG".into(), Group::Comparison);
        let cfg = RobustnessConfig {
            c_values: vec![5, 20],
            replicates: 3,
            ..Default::default()
        };
        let run = run_robustness_matrix(&m, &g, &cfg).unwrap();
        assert_eq!(run.summary.per_c[&5].n_valid, 3);
        let c20 = &run.summary.per_c[&20];
        assert!(c20.error.as_deref().unwrap().starts_with("GROUP_EMPTIED"));
        assert_eq!(c20.retained_state_counts, StateCounts { m1: 0, m0: 1 });
    }

    #[test]
    fn replicate_seeds_are_coordinate_based() {
        assert_eq!(replicate_seed(7, 30, 4), seed::mix(seed::mix(7, 30), 4));
        assert_ne!(replicate_seed(7, 30, 4), replicate_seed(7, 40, 4));
    }
}
