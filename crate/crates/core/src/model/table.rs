use std::collections::{HashMap, HashSet};

use nalgebra::{DMatrix, DVector};

use super::{GroupedDesign, Standardization, TaskData};
use crate::error::{BivasError, Result};

/// A parsed text table: header names and raw cell strings.
#[derive(Debug, Clone, Default)]
pub struct RawTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Where predictor group labels come from.
#[derive(Debug, Clone)]
pub enum GroupSource {
    /// Sidecar map of predictor name to group label.
    Map(Vec<(String, String)>),
    /// One label per table column; blank for non-predictor columns.
    Inline(Vec<String>),
    /// Every predictor forms its own group.
    Singletons,
}

/// Declares how the columns of a [`RawTable`] are used.
#[derive(Debug, Clone)]
pub struct ColumnRoles {
    pub response: String,
    pub covariates: Vec<String>,
    pub intercept: bool,
    pub groups: GroupSource,
    pub standardize: bool,
}

impl ColumnRoles {
    pub fn new(response: impl Into<String>, groups: GroupSource) -> Self {
        ColumnRoles {
            response: response.into(),
            covariates: Vec::new(),
            intercept: true,
            groups,
            standardize: false,
        }
    }

    /// Predictor columns: everything except the response and the covariates.
    pub fn predictors<'a>(&self, headers: &'a [String]) -> Vec<(usize, &'a String)> {
        headers
            .iter()
            .enumerate()
            .filter(|(_, h)| **h != self.response && !self.covariates.contains(h))
            .collect()
    }
}

impl RawTable {
    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| BivasError::MissingColumn(name.to_string()))
    }

    fn numeric_column(&self, idx: usize) -> Result<Vec<f64>> {
        self.rows
            .iter()
            .enumerate()
            .map(|(row, cells)| {
                let cell = cells.get(idx).ok_or_else(|| {
                    BivasError::DimensionMismatch(format!(
                        "row {} has {} fields, expected {}",
                        row + 1,
                        cells.len(),
                        self.headers.len()
                    ))
                })?;
                let v: f64 = cell.trim().parse().map_err(|_| BivasError::NonNumeric {
                    column: self.headers[idx].clone(),
                    row: row + 1,
                    value: cell.clone(),
                })?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(BivasError::NaNPresent {
                        what: format!("column {:?} row {}", self.headers[idx], row + 1),
                    })
                }
            })
            .collect()
    }

    /// Builds `Z` (optionally with a leading intercept) and returns covariate names.
    pub fn covariate_matrix(&self, names: &[String], intercept: bool) -> Result<(DMatrix<f64>, Vec<String>)> {
        let n = self.rows.len();
        let mut cols = Vec::new();
        let mut out_names = Vec::new();
        if intercept {
            cols.push(vec![1.0; n]);
            out_names.push("(intercept)".to_string());
        }
        for name in names {
            cols.push(self.numeric_column(self.column_index(name)?)?);
            out_names.push(name.clone());
        }
        Ok((columns_to_matrix(n, &cols), out_names))
    }

    /// Extracts the named columns as a matrix, in the given order.
    pub fn matrix(&self, names: &[String]) -> Result<DMatrix<f64>> {
        let cols = names
            .iter()
            .map(|name| self.numeric_column(self.column_index(name)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(columns_to_matrix(self.rows.len(), &cols))
    }

    pub fn vector(&self, name: &str) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(self.numeric_column(self.column_index(name)?)?))
    }
}

fn columns_to_matrix(n: usize, cols: &[Vec<f64>]) -> DMatrix<f64> {
    let flat: Vec<f64> = cols.iter().flatten().copied().collect();
    DMatrix::from_vec(n, cols.len(), flat)
}

fn check_roles(raw: &RawTable, roles: &ColumnRoles) -> Result<()> {
    raw.column_index(&roles.response)?;
    let mut seen = HashSet::new();
    for c in &roles.covariates {
        raw.column_index(c)?;
        if !seen.insert(c) || *c == roles.response {
            return Err(BivasError::InvalidConfig(format!("column {c:?} declared twice")));
        }
    }
    Ok(())
}

/// Turns a raw table into a validated [`GroupedDesign`].
///
/// Group labels are re-indexed densely in order of first appearance among
/// the predictor columns. With `roles.standardize` the predictors are centred
/// and scaled, and the transform is returned so new data can be mapped the
/// same way.
pub fn validate_design(raw: &RawTable, roles: &ColumnRoles) -> Result<(GroupedDesign, Option<Standardization>)> {
    check_roles(raw, roles)?;
    let predictors = roles.predictors(&raw.headers);
    let names: Vec<String> = predictors.iter().map(|(_, h)| (*h).clone()).collect();

    let labels: Vec<String> = match &roles.groups {
        GroupSource::Singletons => names.clone(),
        GroupSource::Inline(row) => {
            if row.len() != raw.headers.len() {
                return Err(BivasError::DimensionMismatch(format!(
                    "inline group row has {} fields, header has {}",
                    row.len(),
                    raw.headers.len()
                )));
            }
            predictors
                .iter()
                .map(|(i, h)| {
                    let l = row[*i].trim();
                    if l.is_empty() {
                        Err(BivasError::DimensionMismatch(format!(
                            "predictor {h:?} has no group label"
                        )))
                    } else {
                        Ok(l.to_string())
                    }
                })
                .collect::<Result<_>>()?
        }
        GroupSource::Map(map) => {
            let lookup: HashMap<&str, &str> = map.iter().map(|(p, g)| (p.as_str(), g.as_str())).collect();
            let labels: Vec<String> = names
                .iter()
                .map(|h| {
                    lookup
                        .get(h.as_str())
                        .map(|g| g.to_string())
                        .ok_or_else(|| BivasError::DimensionMismatch(format!("predictor {h:?} missing from group map")))
                })
                .collect::<Result<_>>()?;
            let present: HashSet<&str> = labels.iter().map(String::as_str).collect();
            if let Some((_, g)) = map.iter().find(|(_, g)| !present.contains(g.as_str())) {
                return Err(BivasError::EmptyGroup { group: g.clone() });
            }
            labels
        }
    };
    if let Some(l) = labels.iter().find(|l| l.is_empty()) {
        return Err(BivasError::EmptyGroup { group: l.clone() });
    }

    let y = raw.vector(&roles.response)?;
    let (z, cov_names) = raw.covariate_matrix(&roles.covariates, roles.intercept)?;
    let mut x = raw.matrix(&names)?;
    let standardization = if roles.standardize {
        let s = Standardization::fit(&x);
        s.apply(&mut x)?;
        Some(s)
    } else {
        None
    };
    let design = GroupedDesign::new(y, z, x, &labels)?.with_names(names, cov_names)?;
    Ok((design, standardization))
}

/// Turns a raw table into one task of a multi-task problem; predictors keep
/// their header order and are returned by name.
pub fn validate_task(raw: &RawTable, roles: &ColumnRoles) -> Result<(TaskData, Vec<String>, Option<Standardization>)> {
    check_roles(raw, roles)?;
    let names: Vec<String> = roles
        .predictors(&raw.headers)
        .into_iter()
        .map(|(_, h)| h.clone())
        .collect();
    let y = raw.vector(&roles.response)?;
    let (z, _) = raw.covariate_matrix(&roles.covariates, roles.intercept)?;
    let mut x = raw.matrix(&names)?;
    let standardization = if roles.standardize {
        let s = Standardization::fit(&x);
        s.apply(&mut x)?;
        Some(s)
    } else {
        None
    };
    Ok((TaskData::new(y, z, x)?, names, standardization))
}
