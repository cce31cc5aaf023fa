//! Exploratory summaries: cross-outcome correlation and group differences in
//! robust (MAD) units.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Group, GroupMap, Issue};
use crate::preprocess::{median, AlignedMatrix};
use crate::rank::midranks;

/// Normal-consistency factor applied to the raw MAD.
pub const MAD_SCALE: f64 = 1.4826;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMethod {
    #[default]
    Pearson,
    Spearman,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DescriptiveError {
    #[error("need at least 2 rows, found {0}")]
    TooFewRows(usize),
    #[error("state `{0}` has no group assignment")]
    UnassignedState(String),
    #[error("group {0} has no counties")]
    EmptyGroup(u8),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub outcomes: Vec<String>,
    pub method: CorrelationMethod,
    /// `None` where a coefficient is undefined (constant column).
    pub values: Vec<Vec<Option<f64>>>,
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|v| *v == x[0])
}

/// Pairwise coefficients over all pooled rows. Spearman is Pearson on
/// mid-ranks. Constant columns yield `None` entries and a warning.
pub fn correlation_matrix(
    matrix: &AlignedMatrix,
    method: CorrelationMethod,
) -> Result<(CorrelationMatrix, Vec<Issue>), DescriptiveError> {
    if matrix.n_rows() < 2 {
        return Err(DescriptiveError::TooFewRows(matrix.n_rows()));
    }
    let k = matrix.n_outcomes();
    let cols: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let c = matrix.column(j);
            match method {
                CorrelationMethod::Pearson => c,
                CorrelationMethod::Spearman => midranks(&c).expect("aligned values are finite"),
            }
        })
        .collect();
    let constant: Vec<bool> = cols.iter().map(|c| is_constant(c)).collect();
    let mut warnings = Vec::new();
    for (j, &c) in constant.iter().enumerate() {
        if c {
            let name = &matrix.outcomes()[j].name;
            warnings.push(Issue {
                code: "CONSTANT_COLUMN",
                message: format!("`{name}` is constant; its correlations are undefined"),
                location: Some(format!("outcome {name}")),
            });
        }
    }
    let mut values = vec![vec![None; k]; k];
    for i in 0..k {
        if constant[i] {
            continue;
        }
        values[i][i] = Some(1.0);
        for j in i + 1..k {
            if constant[j] {
                continue;
            }
            let r = pearson(&cols[i], &cols[j]);
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    Ok((
        CorrelationMatrix {
            outcomes: matrix.outcomes().iter().map(|o| o.name.clone()).collect(),
            method,
            values,
        },
        warnings,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StdDiff {
    pub outcome: String,
    /// `(mean_1 - mean_0) / MAD`; `None` when the MAD is zero.
    pub diff_mad_units: Option<f64>,
    /// Scaled MAD about the pooled median.
    pub mad: f64,
    pub flag: Option<String>,
}

/// Scaled median absolute deviation about the median.
pub fn scaled_mad(values: &[f64]) -> f64 {
    let m = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - m).abs()).collect();
    MAD_SCALE * median(&dev)
}

/// Per outcome, group-1 county mean minus group-0 county mean, divided by the
/// scaled MAD of all counties pooled. Negative means group 1 carries less
/// burden. A county's group is its state's group.
pub fn standardized_differences(
    matrix: &AlignedMatrix,
    groups: &GroupMap,
) -> Result<(Vec<StdDiff>, Vec<Issue>), DescriptiveError> {
    let membership: Vec<Group> = matrix
        .rows()
        .iter()
        .map(|r| {
            groups
                .get(&r.state_id)
                .ok_or_else(|| DescriptiveError::UnassignedState(r.state_id.clone()))
        })
        .collect::<Result<_, _>>()?;
    let n1 = membership.iter().filter(|g| **g == Group::Treatment).count();
    let n0 = membership.len() - n1;
    if n1 == 0 {
        return Err(DescriptiveError::EmptyGroup(1));
    }
    if n0 == 0 {
        return Err(DescriptiveError::EmptyGroup(0));
    }
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for (k, spec) in matrix.outcomes().iter().enumerate() {
        let col = matrix.column(k);
        let (mut s1, mut s0) = (0.0, 0.0);
        for (v, g) in col.iter().zip(&membership) {
            match g {
                Group::Treatment => s1 += v,
                Group::Comparison => s0 += v,
            }
        }
        let diff = s1 / n1 as f64 - s0 / n0 as f64;
        let mad = scaled_mad(&col);
        if mad > 0.0 {
            out.push(StdDiff {
                outcome: spec.name.clone(),
                diff_mad_units: Some(diff / mad),
                mad,
                flag: None,
            });
        } else {
            warnings.push(Issue {
                code: "ZERO_MAD",
                message: format!("`{}` has zero MAD and is excluded", spec.name),
                location: Some(format!("outcome {}", spec.name)),
            });
            out.push(StdDiff {
                outcome: spec.name.clone(),
                diff_mad_units: None,
                mad,
                flag: Some("ZERO_MAD".into()),
            });
        }
    }
    Ok((out, warnings))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DescriptiveSummary {
    pub correlation: CorrelationMatrix,
    pub std_diffs: Vec<StdDiff>,
    pub mad_center: String,
    pub mad_scale: f64,
    pub warnings: Vec<Issue>,
}

pub fn describe(
    matrix: &AlignedMatrix,
    groups: &GroupMap,
    method: CorrelationMethod,
) -> Result<DescriptiveSummary, DescriptiveError> {
    let (correlation, mut warnings) = correlation_matrix(matrix, method)?;
    let (std_diffs, w) = standardized_differences(matrix, groups)?;
    warnings.extend(w);
    Ok(DescriptiveSummary {
        correlation,
        std_diffs,
        mad_center: "pooled_median".into(),
        mad_scale: MAD_SCALE,
        warnings,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// K×K table with outcome names as header row and first column; undefined
/// entries are written as `NA`.
pub fn write_correlation_csv<W: Write>(c: &CorrelationMatrix, writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![String::new()];
    header.extend(c.outcomes.iter().cloned());
    w.write_record(&header)?;
    for (name, row) in c.outcomes.iter().zip(&c.values) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|v| fmt_opt(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `outcome,diff_mad_units,mad,flag`
pub fn write_std_diffs_csv<W: Write>(diffs: &[StdDiff], writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["outcome", "diff_mad_units", "mad", "flag"])?;
    for d in diffs {
        w.write_record([
            d.outcome.clone(),
            fmt_opt(d.diff_mad_units),
            d.mad.to_string(),
            d.flag.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
