//! Independent checks on the rank engine: a label-permutation test over the
//! state aggregates, a definitional mid-rank oracle, and an equicorrelated
//! Gaussian panel generator with a Monte Carlo calibration loop.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Direction, Group, GroupMap, OutcomeSpec};
use crate::preprocess::{AlignedMatrix, AlignedRow};
use crate::rank::{self, RankError, Sidedness, StateRankSummary};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub p_value: f64,
    pub n_permutations: u64,
    pub exhaustive: bool,
    /// Unstudentized `mean(group 1) - mean(group 0)` of the observed labels.
    pub observed_t_like: f64,
}

/// `n choose k`, saturating at `u64::MAX`.
pub fn binomial(n: usize, k: usize) -> u64 {
    let k = k.min(n - k.min(n));
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

fn mean_diff(values: &[f64], in_treat: &[bool], m1: usize, m0: usize) -> f64 {
    let (mut s1, mut s0) = (0.0, 0.0);
    for (v, &t) in values.iter().zip(in_treat) {
        if t {
            s1 += v;
        } else {
            s0 += v;
        }
    }
    s1 / m1 as f64 - s0 / m0 as f64
}

/// Calls `f` with each `k`-subset of `0..n` as a membership mask, in
/// lexicographic order of the chosen indices.
fn for_each_subset(n: usize, k: usize, mut f: impl FnMut(&[bool])) {
    let mut idx: Vec<usize> = (0..k).collect();
    let mut mask = vec![false; n];
    loop {
        mask.iter_mut().for_each(|m| *m = false);
        for &i in &idx {
            mask[i] = true;
        }
        f(&mask);
        // rightmost index that can still advance
        let mut i = k;
        while i > 0 && idx[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// One-sided (group 1 greater) permutation test over fixed state aggregates.
///
/// Labels are permuted across the precomputed aggregates; pooled ranks do not
/// depend on labels, so re-ranking would change nothing. All
/// `C(m1 + m0, m1)` assignments are enumerated when that count is at most
/// `max_permutations`; otherwise `max_permutations` random relabelings are
/// drawn. The p-value is `(1 + #{stat >= observed}) / (1 + n_permutations)`.
pub fn permutation_test(
    summaries: &[StateRankSummary],
    groups: &GroupMap,
    max_permutations: u64,
    seed_value: u64,
) -> Result<PermutationResult, RankError> {
    let mut sorted: Vec<&StateRankSummary> = summaries.iter().collect();
    sorted.sort_by(|a, b| a.state_id.cmp(&b.state_id));
    let values: Vec<f64> = sorted.iter().map(|s| s.aggregate).collect();
    let observed: Vec<bool> = sorted
        .iter()
        .map(|s| match groups.get(&s.state_id) {
            Some(g) => Ok(g == Group::Treatment),
            None => Err(RankError::UnassignedState(s.state_id.clone())),
        })
        .collect::<Result<_, _>>()?;
    let n = values.len();
    let m1 = observed.iter().filter(|&&t| t).count();
    let m0 = n - m1;
    if m1 == 0 || m0 == 0 {
        return Err(RankError::GroupTooSmall { m1, m0 });
    }

    let obs = mean_diff(&values, &observed, m1, m0);
    let scale = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let threshold = obs - 1e-12 * scale.max(1.0);

    let total = binomial(n, m1);
    let (count, n_perm, exhaustive) = if total <= max_permutations {
        let mut count = 0u64;
        for_each_subset(n, m1, |mask| {
            if mean_diff(&values, mask, m1, m0) >= threshold {
                count += 1;
            }
        });
        (count, total, true)
    } else {
        let mut rng = seed::rng(seed_value);
        let mut labels = observed.clone();
        let mut count = 0u64;
        for _ in 0..max_permutations {
            labels.shuffle(&mut rng);
            if mean_diff(&values, &labels, m1, m0) >= threshold {
                count += 1;
            }
        }
        (count, max_permutations, false)
    };
    Ok(PermutationResult {
        p_value: (1 + count) as f64 / (1 + n_perm) as f64,
        n_permutations: n_perm,
        exhaustive,
        observed_t_like: obs,
    })
}

/// `rank(v_i) = #{j : v_j < v_i} + (1 + #{j : v_j = v_i}) / 2`, in O(n²).
pub fn brute_force_midranks(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .map(|&v| {
            let less = values.iter().filter(|&&w| w < v).count();
            let equal = values.iter().filter(|&&w| w == v).count();
            less as f64 + (1 + equal) as f64 / 2.0
        })
        .collect()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("{0} must be at least 1")]
    Size(&'static str),
    #[error("{name} = {value} is outside [0, 1)")]
    Correlation { name: &'static str, value: f64 },
    #[error("shift has {found} entries, expected {expected}")]
    ShiftLength { expected: usize, found: usize },
    #[error("shift entries must be finite")]
    ShiftNonFinite,
}

/// Synthetic two-group panel. Every state has `n` counties with `k`
/// standard-normal burden outcomes; counties in a state share an
/// equicorrelated state effect, and outcomes within a county are
/// equicorrelated. Group 1 has `shift` subtracted from its burdens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub m1: usize,
    pub m0: usize,
    pub n: usize,
    pub k: usize,
    pub rho_within: f64,
    pub rho_outcome: f64,
    pub shift: Vec<f64>,
    pub seed: u64,
}

impl SimScenario {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        m1: usize,
        m0: usize,
        n: usize,
        k: usize,
        rho_within: f64,
        rho_outcome: f64,
        shift: Vec<f64>,
        seed: u64,
    ) -> Result<Self, SimError> {
        let s = Self {
            m1,
            m0,
            n,
            k,
            rho_within,
            rho_outcome,
            shift,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    /// Same shift on every outcome.
    #[allow(clippy::too_many_arguments)]
    pub fn uniform_shift(
        m1: usize,
        m0: usize,
        n: usize,
        k: usize,
        rho_within: f64,
        rho_outcome: f64,
        shift: f64,
        seed: u64,
    ) -> Result<Self, SimError> {
        Self::new(m1, m0, n, k, rho_within, rho_outcome, vec![shift; k], seed)
    }

    /// Positive definiteness: the implied covariance is the Kronecker product
    /// of two equicorrelation matrices with eigenvalues `1 - ρ` and
    /// `1 + (d - 1)ρ`, all positive exactly when `0 <= ρ < 1`.
    pub fn validate(&self) -> Result<(), SimError> {
        for (name, v) in [("m1", self.m1), ("m0", self.m0), ("n", self.n), ("k", self.k)] {
            if v == 0 {
                return Err(SimError::Size(name));
            }
        }
        for (name, value) in [("rho_within", self.rho_within), ("rho_outcome", self.rho_outcome)] {
            if !(0.0..1.0).contains(&value) {
                return Err(SimError::Correlation { name, value });
            }
        }
        if self.shift.len() != self.k {
            return Err(SimError::ShiftLength {
                expected: self.k,
                found: self.shift.len(),
            });
        }
        if self.shift.iter().any(|s| !s.is_finite()) {
            return Err(SimError::ShiftNonFinite);
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn state_ids(&self) -> Vec<String> {
        (0..self.m1 + self.m0).map(|s| format!("S{:03}", s + 1)).collect()
    }
}

/// `k` standard normals with pairwise correlation `rho`.
fn equicorrelated<R: Rng>(rng: &mut R, k: usize, rho: f64) -> Vec<f64> {
    let common: f64 = rng.sample(StandardNormal);
    let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
    (0..k)
        .map(|_| a * common + b * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Draw a panel for `scenario`. States `S001..` are group 1 for the first
/// `m1`, group 0 after. Each state uses its own generator seeded from
/// `(seed, state index)`.
pub fn simulate_panel(scenario: &SimScenario) -> Result<(AlignedMatrix, GroupMap), SimError> {
    scenario.validate()?;
    let SimScenario {
        m1,
        n,
        k,
        rho_within,
        rho_outcome,
        ..
    } = *scenario;
    let (sw, se) = (rho_within.sqrt(), (1.0 - rho_within).sqrt());
    let states = scenario.state_ids();
    let mut rows = Vec::with_capacity(states.len() * n);
    let mut groups = GroupMap::default();
    for (si, state) in states.iter().enumerate() {
        let treat = si < m1;
        groups.assignment.insert(
            state.clone(),
            if treat { Group::Treatment } else { Group::Comparison },
        );
        let mut rng = seed::rng(seed::mix(scenario.seed, si as u64));
        let effect = equicorrelated(&mut rng, k, rho_outcome);
        for i in 0..n {
            let noise = equicorrelated(&mut rng, k, rho_outcome);
            let values = (0..k)
                .map(|j| {
                    let z = sw * effect[j] + se * noise[j];
                    if treat {
                        z - scenario.shift[j]
                    } else {
                        z
                    }
                })
                .collect();
            rows.push(AlignedRow {
                county_id: format!("{state}-{:04}", i + 1),
                state_id: state.clone(),
                values,
            });
        }
    }
    let outcomes = (0..k)
        .map(|j| OutcomeSpec::new(format!("y{}", j + 1), Direction::HigherIsWorse))
        .collect();
    let matrix = AlignedMatrix::new(outcomes, rows).expect("simulated values are finite");
    Ok((matrix, groups))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub alpha: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub replicates: usize,
    pub n_valid: usize,
    pub n_degenerate: usize,
    /// Share of valid replicates with one-sided p below each alpha.
    pub rejection: Vec<Rejection>,
    pub mean_t: Option<f64>,
    pub sd_t: Option<f64>,
    /// One-sided p-values of the valid replicates, in replicate order.
    pub p_values: Vec<f64>,
}

impl CalibrationReport {
    pub fn rate(&self, alpha: f64) -> Option<f64> {
        self.rejection.iter().find(|r| r.alpha == alpha).map(|r| r.rate)
    }
}

/// Mean and unbiased SD; SD is `None` below two values.
pub fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (Some(mean), None);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (Some(mean), Some((ss / (n - 1.0)).sqrt()))
}

/// Simulate `replicates` panels (replicate `r` seeded with `mix(seed, r)`),
/// run the full rank test on each with the one-sided rule and tally
/// rejections. Degenerate-variance replicates are counted, not fatal.
pub fn calibration_run(
    scenario: &SimScenario,
    replicates: usize,
    alpha_levels: &[f64],
) -> Result<CalibrationReport, SimError> {
    scenario.validate()?;
    let outcomes: Vec<Result<Option<(f64, f64)>, RankError>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let sc = scenario.with_seed(seed::mix(scenario.seed, r as u64));
            let (matrix, groups) = simulate_panel(&sc).expect("validated scenario");
            match rank::test_matrix(&matrix, &groups, Sidedness::GreaterTreat) {
                Ok((res, _)) => Ok(Some((res.t, res.p_one_sided_greater))),
                Err(RankError::DegenerateVariance { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut ts = Vec::new();
    let mut ps = Vec::new();
    let mut n_degenerate = 0;
    for o in outcomes {
        match o {
            Ok(Some((t, p))) => {
                ts.push(t);
                ps.push(p);
            }
            Ok(None) => n_degenerate += 1,
            // m1, m0 < 2 or similar; treat like an unusable replicate
            Err(_) => n_degenerate += 1,
        }
    }
    let (mean_t, sd_t) = mean_sd(&ts);
    let rejection = alpha_levels
        .iter()
        .map(|&alpha| Rejection {
            alpha,
            rate: if ps.is_empty() {
                0.0
            } else {
                ps.iter().filter(|&&p| p < alpha).count() as f64 / ps.len() as f64
            },
        })
        .collect();
    Ok(CalibrationReport {
        replicates,
        n_valid: ts.len(),
        n_degenerate,
        rejection,
        mean_t,
        sd_t,
        p_values: ps,
    })
}

/// Kolmogorov-Smirnov distance between the empirical CDF of `p` and U(0, 1).
pub fn ks_distance_uniform(p: &[f64]) -> f64 {
    let mut v = p.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let x = x.clamp(0.0, 1.0);
        d.max((i + 1) as f64 / n - x).max(x - i as f64 / n)
    })
}
