//! From a validated panel to the rank engine's input: sign alignment,
//! state-median imputation and balanced per-state subsampling.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Direction, GroupMap, OutcomeSpec, PanelDataset};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedRow {
    pub county_id: String,
    pub state_id: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Outcomes negated during alignment.
    pub flipped: Vec<String>,
    /// Imputed cells per outcome.
    pub imputed: BTreeMap<String, usize>,
    pub plan_id: Option<String>,
}

/// Complete, burden-oriented county matrix (higher = worse on every outcome).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedMatrix {
    outcomes: Vec<OutcomeSpec>,
    rows: Vec<AlignedRow>,
    pub provenance: Provenance,
}

impl AlignedMatrix {
    pub fn new(outcomes: Vec<OutcomeSpec>, rows: Vec<AlignedRow>) -> Result<Self, PreprocessError> {
        if outcomes.iter().any(|o| o.direction != Direction::HigherIsWorse) {
            return Err(PreprocessError::NotAligned);
        }
        let k = outcomes.len();
        for r in &rows {
            if r.values.len() != k {
                return Err(PreprocessError::Shape {
                    county_id: r.county_id.clone(),
                    expected: k,
                    found: r.values.len(),
                });
            }
            if r.values.iter().any(|v| !v.is_finite()) {
                return Err(PreprocessError::NonFinite(r.county_id.clone()));
            }
        }
        Ok(Self {
            outcomes,
            rows,
            provenance: Provenance::default(),
        })
    }

    pub fn outcomes(&self) -> &[OutcomeSpec] {
        &self.outcomes
    }

    pub fn rows(&self) -> &[AlignedRow] {
        &self.rows
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_outcomes(&self) -> usize {
        self.outcomes.len()
    }

    /// Outcome `k` across all rows, in row order.
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.values[k]).collect()
    }

    /// Apply `f` to every value of outcome `k`. Fails if `f` produces a
    /// non-finite value.
    pub fn map_column(&self, k: usize, f: impl Fn(f64) -> f64) -> Result<Self, PreprocessError> {
        let mut out = self.clone();
        for r in &mut out.rows {
            r.values[k] = f(r.values[k]);
            if !r.values[k].is_finite() {
                return Err(PreprocessError::NonFinite(r.county_id.clone()));
            }
        }
        Ok(out)
    }

    /// County count per state.
    pub fn state_counts(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for r in &self.rows {
            *m.entry(r.state_id.clone()).or_insert(0) += 1;
        }
        m
    }
}

/// Anything that lists counties with their state.
pub trait CountyIndex {
    fn county_states(&self) -> Vec<(&str, &str)>;
}

impl CountyIndex for PanelDataset {
    fn county_states(&self) -> Vec<(&str, &str)> {
        self.observations()
            .iter()
            .map(|o| (o.county_id.as_str(), o.state_id.as_str()))
            .collect()
    }
}

impl CountyIndex for AlignedMatrix {
    fn county_states(&self) -> Vec<(&str, &str)> {
        self.rows
            .iter()
            .map(|r| (r.county_id.as_str(), r.state_id.as_str()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub state_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsamplePlan {
    #[serde(rename = "C")]
    pub c: usize,
    pub seed: u64,
    pub retained_states: Vec<String>,
    pub selection: BTreeMap<String, Vec<String>>,
    pub excluded_states: Vec<Exclusion>,
}

impl SubsamplePlan {
    pub fn id(&self) -> String {
        format!("C{}-seed{:016x}", self.c, self.seed)
    }

    /// Retained state counts `(m1, m0)` under `groups`; unassigned states
    /// are not counted.
    pub fn group_counts(&self, groups: &GroupMap) -> (usize, usize) {
        group_counts(self.retained_states.iter().map(String::as_str), groups)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan is always serializable")
    }

    pub fn from_json(text: &str) -> Result<Self, PreprocessError> {
        let plan: SubsamplePlan =
            serde_json::from_str(text).map_err(|e| PreprocessError::PlanFormat(e.to_string()))?;
        plan.check()?;
        Ok(plan)
    }

    fn check(&self) -> Result<(), PreprocessError> {
        if self.c == 0 {
            return Err(PreprocessError::ZeroCount);
        }
        for s in &self.retained_states {
            let sel = self
                .selection
                .get(s)
                .ok_or_else(|| PreprocessError::PlanFormat(format!("no selection for `{s}`")))?;
            let mut uniq = sel.clone();
            uniq.sort();
            uniq.dedup();
            if sel.len() != self.c || uniq.len() != self.c {
                return Err(PreprocessError::PlanFormat(format!(
                    "state `{s}` must select exactly {} distinct counties",
                    self.c
                )));
            }
        }
        if self.selection.len() != self.retained_states.len()
            || self
                .excluded_states
                .iter()
                .any(|e| self.selection.contains_key(&e.state_id))
        {
            return Err(PreprocessError::PlanFormat(
                "every state must be either retained or excluded".into(),
            ));
        }
        Ok(())
    }
}

pub(crate) fn group_counts<'a>(
    states: impl Iterator<Item = &'a str>,
    groups: &GroupMap,
) -> (usize, usize) {
    let (mut m1, mut m0) = (0, 0);
    for s in states {
        match groups.get(s) {
            Some(crate::data::Group::Treatment) => m1 += 1,
            Some(crate::data::Group::Comparison) => m0 += 1,
            None => {}
        }
    }
    (m1, m0)
}

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("matrix outcomes must all be oriented higher-is-worse")]
    NotAligned,
    #[error("county `{county_id}` has {found} values, expected {expected}")]
    Shape {
        county_id: String,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value for county `{0}`")]
    NonFinite(String),
    #[error("every value of `{outcome}` is missing in state `{state_id}`")]
    Unimputable { state_id: String, outcome: String },
    #[error("counties per state must be at least 1")]
    ZeroCount,
    #[error("no state has at least {0} counties")]
    NoRetainedStates(usize),
    #[error("plan selects county `{county_id}` of state `{state_id}`, which is not in the matrix")]
    PlanMismatch { county_id: String, state_id: String },
    #[error("invalid subsample plan: {0}")]
    PlanFormat(String),
}

impl PreprocessError {
    pub fn code(&self) -> &'static str {
        match self {
            PreprocessError::NotAligned => "NOT_ALIGNED",
            PreprocessError::Shape { .. } => "SHAPE",
            PreprocessError::NonFinite(_) => "NON_FINITE",
            PreprocessError::Unimputable { .. } => "UNIMPUTABLE_STATE_OUTCOME",
            PreprocessError::ZeroCount => "ZERO_C",
            PreprocessError::NoRetainedStates(_) => "NO_RETAINED_STATES",
            PreprocessError::PlanMismatch { .. } => "PLAN_MISMATCH",
            PreprocessError::PlanFormat(_) => "PLAN_FORMAT",
        }
    }
}

/// Negate every higher-is-better outcome so that higher always means worse.
/// Idempotent: already aligned outcomes are left alone.
pub fn align_outcomes(panel: &PanelDataset) -> PanelDataset {
    let flip: Vec<bool> = panel
        .outcomes()
        .iter()
        .map(|o| o.direction == Direction::HigherIsBetter)
        .collect();
    let outcomes = panel
        .outcomes()
        .iter()
        .map(|o| OutcomeSpec {
            direction: Direction::HigherIsWorse,
            ..o.clone()
        })
        .collect();
    let mut flipped = panel.flipped().to_vec();
    flipped.extend(
        panel
            .outcomes()
            .iter()
            .zip(&flip)
            .filter(|(_, &f)| f)
            .map(|(o, _)| o.name.clone()),
    );
    panel.with_values(outcomes, flipped, |k, v| {
        if flip[k] {
            v.map(|x| -x)
        } else {
            v
        }
    })
}

/// Median with the midpoint rule for even counts. `values` must be non-empty.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Fill each missing cell with the median of the present values of the same
/// outcome within the same state.
pub fn impute_state_median(panel: &PanelDataset) -> Result<AlignedMatrix, PreprocessError> {
    if panel
        .outcomes()
        .iter()
        .any(|o| o.direction != Direction::HigherIsWorse)
    {
        return Err(PreprocessError::NotAligned);
    }
    let k = panel.n_outcomes();
    let mut present: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for obs in panel.observations() {
        let cols = present
            .entry(obs.state_id.as_str())
            .or_insert_with(|| vec![Vec::new(); k]);
        for (j, v) in obs.values.iter().enumerate() {
            if let Some(x) = v {
                cols[j].push(*x);
            }
        }
    }
    let mut medians: HashMap<&str, Vec<Option<f64>>> = HashMap::new();
    for (state, cols) in &present {
        medians.insert(
            state,
            cols.iter()
                .map(|c| (!c.is_empty()).then(|| median(c)))
                .collect(),
        );
    }

    let mut imputed = vec![0usize; k];
    let mut rows = Vec::with_capacity(panel.observations().len());
    for obs in panel.observations() {
        let meds = &medians[obs.state_id.as_str()];
        let mut values = Vec::with_capacity(k);
        for (j, v) in obs.values.iter().enumerate() {
            match (v, meds[j]) {
                (Some(x), _) => values.push(*x),
                (None, Some(m)) => {
                    imputed[j] += 1;
                    values.push(m);
                }
                (None, None) => {
                    return Err(PreprocessError::Unimputable {
                        state_id: obs.state_id.clone(),
                        outcome: panel.outcomes()[j].name.clone(),
                    })
                }
            }
        }
        rows.push(AlignedRow {
            county_id: obs.county_id.clone(),
            state_id: obs.state_id.clone(),
            values,
        });
    }
    let mut matrix = AlignedMatrix::new(panel.outcomes().to_vec(), rows)?;
    matrix.provenance.flipped = panel.flipped().to_vec();
    matrix.provenance.imputed = panel
        .outcomes()
        .iter()
        .zip(imputed)
        .map(|(o, n)| (o.name.clone(), n))
        .collect();
    Ok(matrix)
}

/// Draw exactly `c` distinct counties from every state with at least `c`.
///
/// Each state's draw is a partial Fisher-Yates shuffle of its county ids in
/// sorted order, driven by a generator seeded from `(seed, hash(state_id))`,
/// so one state's selection does not depend on which other states exist.
pub fn plan_subsample<P: CountyIndex + ?Sized>(
    source: &P,
    c: usize,
    seed: u64,
) -> Result<SubsamplePlan, PreprocessError> {
    if c == 0 {
        return Err(PreprocessError::ZeroCount);
    }
    let mut by_state: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (county, state) in source.county_states() {
        by_state.entry(state).or_default().push(county);
    }
    let mut plan = SubsamplePlan {
        c,
        seed,
        retained_states: Vec::new(),
        selection: BTreeMap::new(),
        excluded_states: Vec::new(),
    };
    for (state, mut counties) in by_state {
        if counties.len() < c {
            plan.excluded_states.push(Exclusion {
                state_id: state.to_string(),
                reason: "TOO_FEW_COUNTIES".into(),
            });
            continue;
        }
        counties.sort_unstable();
        let mut rng = seed::rng(seed::mix(seed, seed::hash_str(state)));
        let n = counties.len();
        for i in 0..c {
            let j = rng.random_range(i..n);
            counties.swap(i, j);
        }
        plan.retained_states.push(state.to_string());
        plan.selection.insert(
            state.to_string(),
            counties[..c].iter().map(|s| s.to_string()).collect(),
        );
    }
    if plan.retained_states.is_empty() {
        return Err(PreprocessError::NoRetainedStates(c));
    }
    Ok(plan)
}

/// Keep exactly the planned counties, whole rows, in the matrix's row order.
pub fn apply_subsample(
    matrix: &AlignedMatrix,
    plan: &SubsamplePlan,
) -> Result<AlignedMatrix, PreprocessError> {
    let mut wanted: HashMap<&str, &str> = HashMap::new();
    for (state, counties) in &plan.selection {
        for c in counties {
            wanted.insert(c.as_str(), state.as_str());
        }
    }
    let rows: Vec<AlignedRow> = matrix
        .rows
        .iter()
        .filter(|r| wanted.get(r.county_id.as_str()) == Some(&r.state_id.as_str()))
        .cloned()
        .collect();
    if rows.len() != wanted.len() {
        let found: std::collections::HashSet<&str> =
            rows.iter().map(|r| r.county_id.as_str()).collect();
        let (county, state) = plan
            .selection
            .iter()
            .flat_map(|(s, cs)| cs.iter().map(move |c| (c, s)))
            .find(|(c, _)| !found.contains(c.as_str()))
            .expect("a selected county is missing");
        return Err(PreprocessError::PlanMismatch {
            county_id: county.clone(),
            state_id: state.clone(),
        });
    }
    Ok(AlignedMatrix {
        outcomes: matrix.outcomes.clone(),
        rows,
        provenance: Provenance {
            plan_id: Some(plan.id()),
            ..matrix.provenance.clone()
        },
    })
}
