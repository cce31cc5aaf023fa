//! Panel data model: outcome metadata, county observations grouped by state,
//! state-to-group assignment, and the CSV/TOML readers that produce them.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Orientation of an outcome before alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherIsWorse,
    HigherIsBetter,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeSpec {
    pub name: String,
    pub direction: Direction,
    #[serde(default)]
    pub label: String,
}

impl OutcomeSpec {
    pub fn new(name: impl Into<String>, direction: Direction) -> Self {
        Self {
            name: name.into(),
            direction,
            label: String::new(),
        }
    }
}

/// Ordered outcome list, read from a TOML file of `[[outcome]]` tables.
///
/// ```toml
/// [[outcome]]
/// name = "poverty_rate"
/// direction = "higher_is_worse"
///
/// [[outcome]]
/// name = "per_capita_income"
/// direction = "higher_is_better"
/// label = "Per capita income (USD)"
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeConfig {
    #[serde(rename = "outcome")]
    pub outcomes: Vec<OutcomeSpec>,
}

impl OutcomeConfig {
    pub fn new(outcomes: Vec<OutcomeSpec>) -> Result<Self, DataError> {
        let cfg = Self { outcomes };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, DataError> {
        let cfg: OutcomeConfig =
            toml::from_str(text).map_err(|e| DataError::Config(e.message().to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("outcome config is always serializable")
    }

    fn check(&self) -> Result<(), DataError> {
        check_outcomes(&self.outcomes)
    }
}

fn check_outcomes(outcomes: &[OutcomeSpec]) -> Result<(), DataError> {
    if outcomes.is_empty() {
        return Err(DataError::Config("at least one outcome is required".into()));
    }
    let mut seen = HashMap::new();
    for (i, o) in outcomes.iter().enumerate() {
        if o.name.trim().is_empty() {
            return Err(DataError::Config(format!("outcome #{} has an empty name", i + 1)));
        }
        if let Some(prev) = seen.insert(o.name.as_str(), i) {
            return Err(DataError::Config(format!(
                "outcome `{}` listed twice (entries {} and {})",
                o.name,
                prev + 1,
                i + 1
            )));
        }
    }
    Ok(())
}

/// One county row. `None` marks a missing value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountyObservation {
    pub county_id: String,
    pub state_id: String,
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PanelDataset {
    outcomes: Vec<OutcomeSpec>,
    observations: Vec<CountyObservation>,
    n_s: BTreeMap<String, usize>,
    flipped: Vec<String>,
}

impl PanelDataset {
    /// Checks every structural invariant; duplicate counties are reported
    /// with the line numbers they would occupy in the canonical CSV form.
    pub fn new(
        outcomes: Vec<OutcomeSpec>,
        observations: Vec<CountyObservation>,
    ) -> Result<Self, DataError> {
        check_outcomes(&outcomes)?;
        let k = outcomes.len();
        let mut first_line: HashMap<&str, usize> = HashMap::new();
        let mut n_s = BTreeMap::new();
        for (i, obs) in observations.iter().enumerate() {
            let line = i + 2;
            if obs.state_id.is_empty() {
                return Err(DataError::MissingStateId { line });
            }
            if obs.values.len() != k {
                return Err(DataError::MalformedRow {
                    line,
                    expected: k,
                    found: obs.values.len(),
                });
            }
            if let Some(bad) = obs.values.iter().flatten().find(|v| !v.is_finite()) {
                return Err(DataError::BadNumber {
                    line,
                    column: "?".into(),
                    value: bad.to_string(),
                });
            }
            if let Some(&first) = first_line.get(obs.county_id.as_str()) {
                return Err(DataError::DuplicateCounty {
                    county_id: obs.county_id.clone(),
                    first_line: first,
                    second_line: line,
                });
            }
            first_line.insert(&obs.county_id, line);
            *n_s.entry(obs.state_id.clone()).or_insert(0) += 1;
        }
        if n_s.len() < 2 {
            return Err(DataError::TooFewStates(n_s.len()));
        }
        Ok(Self {
            outcomes,
            observations,
            n_s,
            flipped: Vec::new(),
        })
    }

    pub fn outcomes(&self) -> &[OutcomeSpec] {
        &self.outcomes
    }

    pub fn observations(&self) -> &[CountyObservation] {
        &self.observations
    }

    /// County count per state.
    pub fn state_counts(&self) -> &BTreeMap<String, usize> {
        &self.n_s
    }

    pub fn n_outcomes(&self) -> usize {
        self.outcomes.len()
    }

    pub fn n_states(&self) -> usize {
        self.n_s.len()
    }

    /// Names of outcomes whose sign was flipped by alignment.
    pub fn flipped(&self) -> &[String] {
        &self.flipped
    }

    /// Same rows with new outcome metadata and transformed values.
    pub(crate) fn with_values(
        &self,
        outcomes: Vec<OutcomeSpec>,
        flipped: Vec<String>,
        f: impl Fn(usize, Option<f64>) -> Option<f64>,
    ) -> Self {
        let observations = self
            .observations
            .iter()
            .map(|o| CountyObservation {
                county_id: o.county_id.clone(),
                state_id: o.state_id.clone(),
                values: o.values.iter().enumerate().map(|(k, v)| f(k, *v)).collect(),
            })
            .collect();
        Self {
            outcomes,
            observations,
            n_s: self.n_s.clone(),
            flipped,
        }
    }
}

/// Group label of a state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    /// Group 0.
    Comparison,
    /// Group 1.
    Treatment,
}

impl Group {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Group::Comparison),
            1 => Some(Group::Treatment),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Group::Comparison => 0,
            Group::Treatment => 1,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Group::Comparison => Group::Treatment,
            Group::Treatment => Group::Comparison,
        }
    }
}

impl Serialize for Group {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.code())
    }
}

impl<'de> Deserialize<'de> for Group {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let code = u8::deserialize(d)?;
        Group::from_code(code).ok_or_else(|| serde::de::Error::custom("group must be 0 or 1"))
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupMap {
    pub assignment: BTreeMap<String, Group>,
}

impl GroupMap {
    pub fn from_pairs<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, Group)>,
        S: Into<String>,
    {
        Self {
            assignment: pairs.into_iter().map(|(s, g)| (s.into(), g)).collect(),
        }
    }

    pub fn get(&self, state_id: &str) -> Option<Group> {
        self.assignment.get(state_id).copied()
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Same states with every label swapped.
    pub fn swapped(&self) -> Self {
        Self {
            assignment: self
                .assignment
                .iter()
                .map(|(s, g)| (s.clone(), g.flipped()))
                .collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["state_id", "group"])?;
        for (s, g) in &self.assignment {
            w.write_record([s.as_str(), &g.code().to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A located diagnostic, used for both errors and warnings in reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Issue {
    pub code: &'static str,
    pub message: String,
    pub location: Option<String>,
}

impl Issue {
    fn new(code: &'static str, message: impl Into<String>, location: Option<String>) -> Self {
        Self {
            code,
            message: message.into(),
            location,
        }
    }
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.location {
            Some(loc) => write!(f, "[{}] {} ({})", self.code, self.message, loc),
            None => write!(f, "[{}] {}", self.code, self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub errors: Vec<Issue>,
    pub warnings: Vec<Issue>,
    pub missing_counts: BTreeMap<String, usize>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("config error: column `{0}` not found in header")]
    MissingColumn(String),
    #[error("line {line}: expected {expected} fields, found {found}")]
    MalformedRow {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}, column `{column}`: cannot parse `{value}` as a finite number")]
    BadNumber {
        line: usize,
        column: String,
        value: String,
    },
    #[error("line {line}: empty state_id")]
    MissingStateId { line: usize },
    #[error("duplicate county_id `{county_id}` on lines {first_line} and {second_line}")]
    DuplicateCounty {
        county_id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("panel must contain at least 2 states, found {0}")]
    TooFewStates(usize),
    #[error("line {line}: group must be 0 or 1, found `{value}`")]
    BadGroup { line: usize, value: String },
    #[error("state `{state_id}` assigned to conflicting groups on lines {first_line} and {second_line}")]
    GroupConflict {
        state_id: String,
        first_line: usize,
        second_line: usize,
    },
}

impl DataError {
    pub fn code(&self) -> &'static str {
        match self {
            DataError::Io(_) => "IO",
            DataError::Csv(_) => "CSV",
            DataError::Config(_) | DataError::MissingColumn(_) => "CONFIG",
            DataError::MalformedRow { .. } => "MALFORMED_ROW",
            DataError::BadNumber { .. } => "BAD_NUMBER",
            DataError::MissingStateId { .. } => "MISSING_STATE_ID",
            DataError::DuplicateCounty { .. } => "DUPLICATE_COUNTY",
            DataError::TooFewStates(_) => "TOO_FEW_STATES",
            DataError::BadGroup { .. } => "BAD_GROUP",
            DataError::GroupConflict { .. } => "GROUP_CONFLICT",
        }
    }
}

fn is_missing(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || t.eq_ignore_ascii_case("NA")
}

fn parse_cell(cell: &str, line: usize, column: &str) -> Result<Option<f64>, DataError> {
    if is_missing(cell) {
        return Ok(None);
    }
    match cell.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(DataError::BadNumber {
            line,
            column: column.to_string(),
            value: cell.to_string(),
        }),
    }
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader)
}

fn header_index(header: &csv::StringRecord, name: &str) -> Result<usize, DataError> {
    header
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| DataError::MissingColumn(name.to_string()))
}

/// Read a county panel. Outcome columns are taken in `config` order; other
/// columns in the file are ignored.
pub fn parse_panel<R: Read>(reader: R, config: &OutcomeConfig) -> Result<PanelDataset, DataError> {
    let mut rdr = csv_reader(reader);
    let header = rdr.headers()?.clone();
    let county_col = header_index(&header, "county_id")?;
    let state_col = header_index(&header, "state_id")?;
    let outcome_cols = config
        .outcomes
        .iter()
        .map(|o| header_index(&header, &o.name))
        .collect::<Result<Vec<_>, _>>()?;

    let mut observations = Vec::new();
    let mut first_line: HashMap<String, usize> = HashMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(DataError::MalformedRow {
                line,
                expected: header.len(),
                found: record.len(),
            });
        }
        let county_id = record[county_col].trim().to_string();
        let state_id = record[state_col].trim().to_string();
        if state_id.is_empty() {
            return Err(DataError::MissingStateId { line });
        }
        if let Some(&first) = first_line.get(&county_id) {
            return Err(DataError::DuplicateCounty {
                county_id,
                first_line: first,
                second_line: line,
            });
        }
        first_line.insert(county_id.clone(), line);
        let values = outcome_cols
            .iter()
            .zip(&config.outcomes)
            .map(|(&c, o)| parse_cell(&record[c], line, &o.name))
            .collect::<Result<Vec<_>, _>>()?;
        observations.push(CountyObservation {
            county_id,
            state_id,
            values,
        });
    }
    PanelDataset::new(config.outcomes.clone(), observations)
}

pub fn load_panel(path: impl AsRef<Path>, config: &OutcomeConfig) -> Result<PanelDataset, DataError> {
    parse_panel(std::fs::File::open(path)?, config)
}

/// Write the canonical CSV form: `county_id,state_id,<outcomes...>`, missing
/// values as empty cells, numbers in shortest round-trip notation.
pub fn write_panel<W: Write>(panel: &PanelDataset, writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["county_id".to_string(), "state_id".to_string()];
    header.extend(panel.outcomes.iter().map(|o| o.name.clone()));
    w.write_record(&header)?;
    for obs in &panel.observations {
        let mut row = vec![obs.county_id.clone(), obs.state_id.clone()];
        row.extend(obs.values.iter().map(|v| v.map_or_else(String::new, |x| x.to_string())));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a `state_id,group` table. Consistent duplicate rows are merged with
/// a warning; conflicting ones are an error.
pub fn parse_group_map<R: Read>(reader: R) -> Result<(GroupMap, Vec<Issue>), DataError> {
    let mut rdr = csv_reader(reader);
    let header = rdr.headers()?.clone();
    let state_col = header_index(&header, "state_id")?;
    let group_col = header_index(&header, "group")?;

    let mut map = GroupMap::default();
    let mut lines: HashMap<String, usize> = HashMap::new();
    let mut warnings = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(DataError::MalformedRow {
                line,
                expected: header.len(),
                found: record.len(),
            });
        }
        let state = record[state_col].trim().to_string();
        if state.is_empty() {
            return Err(DataError::MissingStateId { line });
        }
        let raw = record[group_col].trim();
        let group = raw
            .parse::<u8>()
            .ok()
            .and_then(Group::from_code)
            .ok_or_else(|| DataError::BadGroup {
                line,
                value: raw.to_string(),
            })?;
        match map.assignment.get(&state) {
            Some(&g) if g == group => warnings.push(Issue::new(
                "DUPLICATE_STATE",
                format!("state `{state}` listed more than once with the same group"),
                Some(format!("line {line}")),
            )),
            Some(_) => {
                return Err(DataError::GroupConflict {
                    first_line: lines[&state],
                    state_id: state,
                    second_line: line,
                })
            }
            None => {
                lines.insert(state.clone(), line);
                map.assignment.insert(state, group);
            }
        }
    }
    Ok((map, warnings))
}

pub fn load_group_map(path: impl AsRef<Path>) -> Result<(GroupMap, Vec<Issue>), DataError> {
    parse_group_map(std::fs::File::open(path)?)
}

/// Structural checks that do not depend on a subsample size.
pub fn validate_panel(panel: &PanelDataset, groups: &GroupMap) -> ValidationReport {
    validate_panel_for(panel, groups, None)
}

/// As [`validate_panel`], additionally warning about states that a
/// subsample of `counties_per_state` would exclude.
pub fn validate_panel_for(
    panel: &PanelDataset,
    groups: &GroupMap,
    counties_per_state: Option<usize>,
) -> ValidationReport {
    let mut report = ValidationReport::default();
    let k = panel.n_outcomes();

    let mut group_sizes = [0usize; 2];
    for state in panel.state_counts().keys() {
        match groups.get(state) {
            Some(g) => group_sizes[g.code() as usize] += 1,
            None => report.errors.push(Issue::new(
                "UNASSIGNED_STATE",
                format!("state `{state}` has no group assignment"),
                Some(format!("state {state}")),
            )),
        }
    }
    for (code, size) in group_sizes.iter().enumerate() {
        if *size == 0 {
            report.errors.push(Issue::new(
                "EMPTY_GROUP",
                format!("group {code} contains no states of the panel"),
                None,
            ));
        }
    }
    for state in groups.assignment.keys() {
        if !panel.state_counts().contains_key(state) {
            report.warnings.push(Issue::new(
                "UNUSED_GROUP_STATE",
                format!("state `{state}` is assigned a group but has no counties"),
                Some(format!("state {state}")),
            ));
        }
    }

    // present-value count per (state, outcome)
    let mut present: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut missing = vec![0usize; k];
    for obs in panel.observations() {
        let counts = present.entry(&obs.state_id).or_insert_with(|| vec![0; k]);
        for (j, v) in obs.values.iter().enumerate() {
            match v {
                Some(_) => counts[j] += 1,
                None => missing[j] += 1,
            }
        }
    }
    for (state, counts) in &present {
        for (j, &c) in counts.iter().enumerate() {
            if c == 0 {
                let name = &panel.outcomes()[j].name;
                report.errors.push(Issue::new(
                    "UNIMPUTABLE_STATE_OUTCOME",
                    format!("every value of `{name}` is missing in state `{state}`"),
                    Some(format!("state {state}, outcome {name}")),
                ));
            }
        }
    }
    for (o, &m) in panel.outcomes().iter().zip(&missing) {
        report.missing_counts.insert(o.name.clone(), m);
        if m > 0 {
            report.warnings.push(Issue::new(
                "MISSING_VALUES",
                format!("{m} missing value(s) in `{}` will be imputed", o.name),
                Some(format!("outcome {}", o.name)),
            ));
        }
    }
    if let Some(c) = counties_per_state {
        for (state, &n) in panel.state_counts() {
            if n < c {
                report.warnings.push(Issue::new(
                    "TOO_FEW_COUNTIES",
                    format!("state `{state}` has {n} counties, fewer than {c}; it will be excluded"),
                    Some(format!("state {state}")),
                ));
            }
        }
    }
    report
}
