use std::collections::HashMap;
use std::hash::Hash;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{BivasError, Result};
use crate::linalg::{self, column, gram_cholesky};

/// Maps arbitrary labels to dense ids `0..K` in order of first appearance.
/// Returns the id of every input label and the distinct labels indexed by id.
pub fn dense_reindex<L: Eq + Hash + Clone>(labels: &[L]) -> (Vec<usize>, Vec<L>) {
    let mut seen: HashMap<L, usize> = HashMap::new();
    let mut distinct = Vec::new();
    let ids = labels
        .iter()
        .map(|l| {
            *seen.entry(l.clone()).or_insert_with(|| {
                distinct.push(l.clone());
                distinct.len() - 1
            })
        })
        .collect();
    (ids, distinct)
}

fn check_finite(what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(BivasError::NaNPresent { what: what.to_string() })
    }
}

/// Column centering and scaling applied to predictors before fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    /// Column means and population standard deviations; constant columns keep scale 1.
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mut center = Vec::with_capacity(x.ncols());
        let mut scale = Vec::with_capacity(x.ncols());
        for j in 0..x.ncols() {
            let col = column(x, j);
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            center.push(mean);
            scale.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Standardization { center, scale }
    }

    pub fn apply(&self, x: &mut DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.center.len() {
            return Err(BivasError::DimensionMismatch(format!(
                "standardization has {} columns, matrix has {}",
                self.center.len(),
                x.ncols()
            )));
        }
        for (j, mut col) in x.column_iter_mut().enumerate() {
            for v in col.iter_mut() {
                *v = (*v - self.center[j]) / self.scale[j];
            }
        }
        Ok(())
    }
}

/// Response, covariates and grouped predictors of a single regression.
///
/// Immutable once built; column norms and the factorised covariate Gram
/// matrix are cached at construction.
#[derive(Debug, Clone)]
pub struct GroupedDesign {
    y: DVector<f64>,
    z: DMatrix<f64>,
    x: DMatrix<f64>,
    group_of: Vec<usize>,
    members: Vec<Vec<usize>>,
    group_labels: Vec<String>,
    xtx: Vec<f64>,
    ztz: Cholesky<f64, Dyn>,
    predictor_names: Vec<String>,
    covariate_names: Vec<String>,
}

impl GroupedDesign {
    /// Validates the inputs and re-indexes `group_labels` densely.
    pub fn new<L: AsRef<str>>(y: DVector<f64>, z: DMatrix<f64>, x: DMatrix<f64>, group_labels: &[L]) -> Result<Self> {
        let n = y.len();
        if z.nrows() != n || x.nrows() != n {
            return Err(BivasError::DimensionMismatch(format!(
                "y has {} rows, Z has {}, X has {}",
                n,
                z.nrows(),
                x.nrows()
            )));
        }
        if group_labels.len() != x.ncols() {
            return Err(BivasError::DimensionMismatch(format!(
                "{} group labels for {} predictors",
                group_labels.len(),
                x.ncols()
            )));
        }
        if z.ncols() >= n {
            return Err(BivasError::DimensionMismatch(format!(
                "need more observations ({n}) than covariates ({})",
                z.ncols()
            )));
        }
        check_finite("y", y.as_slice())?;
        check_finite("Z", z.as_slice())?;
        check_finite("X", x.as_slice())?;
        let ztz = gram_cholesky(&z)?;

        let labels: Vec<String> = group_labels.iter().map(|l| l.as_ref().to_string()).collect();
        let (group_of, distinct) = dense_reindex(&labels);
        let mut members = vec![Vec::new(); distinct.len()];
        for (j, &g) in group_of.iter().enumerate() {
            members[g].push(j);
        }
        let xtx = (0..x.ncols()).map(|j| linalg::sq_norm(column(&x, j))).collect();
        let p = x.ncols();
        let r = z.ncols();
        Ok(GroupedDesign {
            y,
            z,
            x,
            group_of,
            members,
            group_labels: distinct,
            xtx,
            ztz,
            predictor_names: (0..p).map(|j| format!("x{j}")).collect(),
            covariate_names: (0..r).map(|j| format!("z{j}")).collect(),
        })
    }

    /// Same as [`GroupedDesign::new`] with an intercept-only `Z`.
    pub fn with_intercept<L: AsRef<str>>(y: DVector<f64>, x: DMatrix<f64>, group_labels: &[L]) -> Result<Self> {
        let z = DMatrix::from_element(y.len(), 1, 1.0);
        Self::new(y, z, x, group_labels)
    }

    pub fn with_names(mut self, predictors: Vec<String>, covariates: Vec<String>) -> Result<Self> {
        if predictors.len() != self.p() || covariates.len() != self.r() {
            return Err(BivasError::DimensionMismatch(
                "name lists do not match the design".into(),
            ));
        }
        self.predictor_names = predictors;
        self.covariate_names = covariates;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
    pub fn p(&self) -> usize {
        self.x.ncols()
    }
    pub fn r(&self) -> usize {
        self.z.ncols()
    }
    pub fn k(&self) -> usize {
        self.members.len()
    }
    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }
    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn column(&self, j: usize) -> &[f64] {
        column(&self.x, j)
    }
    /// Cached `x_j'x_j`.
    pub fn xtx(&self, j: usize) -> f64 {
        self.xtx[j]
    }
    pub fn xtx_all(&self) -> &[f64] {
        &self.xtx
    }
    pub fn group_of(&self) -> &[usize] {
        &self.group_of
    }
    pub fn members(&self, k: usize) -> &[usize] {
        &self.members[k]
    }
    pub fn group_sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }
    pub fn group_labels(&self) -> &[String] {
        &self.group_labels
    }
    pub fn predictor_names(&self) -> &[String] {
        &self.predictor_names
    }
    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Least-squares fixed effects for `target` regressed on `Z`.
    pub fn solve_fixed(&self, target: &DVector<f64>) -> DVector<f64> {
        linalg::ols_with(&self.ztz, &self.z, target)
    }
}

/// One task of a multi-task problem: `X` has one column per shared feature.
#[derive(Debug, Clone)]
pub struct TaskData {
    y: DVector<f64>,
    z: DMatrix<f64>,
    x: DMatrix<f64>,
    xtx: Vec<f64>,
    ztz: Cholesky<f64, Dyn>,
    name: String,
}

impl TaskData {
    pub fn new(y: DVector<f64>, z: DMatrix<f64>, x: DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        if z.nrows() != n || x.nrows() != n {
            return Err(BivasError::DimensionMismatch(format!(
                "task y has {} rows, Z has {}, X has {}",
                n,
                z.nrows(),
                x.nrows()
            )));
        }
        if z.ncols() >= n {
            return Err(BivasError::DimensionMismatch(format!(
                "need more observations ({n}) than covariates ({})",
                z.ncols()
            )));
        }
        check_finite("y", y.as_slice())?;
        check_finite("Z", z.as_slice())?;
        check_finite("X", x.as_slice())?;
        let ztz = gram_cholesky(&z)?;
        let xtx = (0..x.ncols()).map(|j| linalg::sq_norm(column(&x, j))).collect();
        Ok(TaskData {
            y,
            z,
            x,
            xtx,
            ztz,
            name: String::new(),
        })
    }

    pub fn with_intercept(y: DVector<f64>, x: DMatrix<f64>) -> Result<Self> {
        let z = DMatrix::from_element(y.len(), 1, 1.0);
        Self::new(y, z, x)
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
    pub fn r(&self) -> usize {
        self.z.ncols()
    }
    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }
    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn column(&self, k: usize) -> &[f64] {
        column(&self.x, k)
    }
    pub fn xtx(&self, k: usize) -> f64 {
        self.xtx[k]
    }
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn solve_fixed(&self, target: &DVector<f64>) -> DVector<f64> {
        linalg::ols_with(&self.ztz, &self.z, target)
    }
}

/// `L` regressions sharing the same `K` features.
#[derive(Debug, Clone)]
pub struct MultiTaskData {
    tasks: Vec<TaskData>,
    k: usize,
    feature_names: Vec<String>,
}

impl MultiTaskData {
    pub fn new(tasks: Vec<TaskData>) -> Result<Self> {
        let k = tasks
            .first()
            .map(|t| t.x.ncols())
            .ok_or_else(|| BivasError::InvalidCount("multi-task data needs at least one task".into()))?;
        if let Some(bad) = tasks.iter().position(|t| t.x.ncols() != k) {
            return Err(BivasError::DimensionMismatch(format!(
                "task {bad} has {} features, task 0 has {k}",
                tasks[bad].x.ncols()
            )));
        }
        Ok(MultiTaskData {
            tasks,
            k,
            feature_names: (0..k).map(|j| format!("x{j}")).collect(),
        })
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.k {
            return Err(BivasError::DimensionMismatch(
                "feature name count does not match K".into(),
            ));
        }
        self.feature_names = names;
        Ok(self)
    }

    pub fn tasks(&self) -> &[TaskData] {
        &self.tasks
    }
    pub fn task(&self, j: usize) -> &TaskData {
        &self.tasks[j]
    }
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }
    pub fn k(&self) -> usize {
        self.k
    }
    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }
}
