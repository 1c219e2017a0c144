use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// Probabilities are kept inside `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-12;
/// Variances never drop below this floor.
pub const VAR_FLOOR: f64 = 1e-10;

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

#[inline]
pub fn floor_var(v: f64) -> f64 {
    if v.is_nan() {
        VAR_FLOOR
    } else {
        v.max(VAR_FLOOR)
    }
}

/// Parameters of the grouped model: prior inclusion probabilities at the
/// variable (`alpha`) and group (`pi`) level, slab and noise variances, and
/// the fixed effects of the covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub alpha: f64,
    pub pi: f64,
    pub sigma_beta2: f64,
    pub sigma_e2: f64,
    pub omega: Vec<f64>,
}

impl ModelParams {
    /// Builds a parameter set with probabilities clamped and variances floored.
    pub fn new(alpha: f64, pi: f64, sigma_beta2: f64, sigma_e2: f64, omega: Vec<f64>) -> Self {
        ModelParams {
            alpha,
            pi,
            sigma_beta2,
            sigma_e2,
            omega,
        }
        .clamped()
    }

    pub fn clamped(mut self) -> Self {
        self.alpha = clamp_prob(self.alpha);
        self.pi = clamp_prob(self.pi);
        self.sigma_beta2 = floor_var(self.sigma_beta2);
        self.sigma_e2 = floor_var(self.sigma_e2);
        self
    }

    pub fn omega_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.omega)
    }
}

/// Per-task variances and fixed effects of the multi-task model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub sigma_beta2: f64,
    pub sigma_e2: f64,
    pub omega: Vec<f64>,
}

impl TaskParams {
    pub fn omega_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.omega)
    }
}

/// Parameters of the multi-task model; `alpha` and `pi` are shared by all tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskParams {
    pub alpha: f64,
    pub pi: f64,
    pub tasks: Vec<TaskParams>,
}

impl MultiTaskParams {
    pub fn clamped(mut self) -> Self {
        self.alpha = clamp_prob(self.alpha);
        self.pi = clamp_prob(self.pi);
        for t in &mut self.tasks {
            t.sigma_beta2 = floor_var(t.sigma_beta2);
            t.sigma_e2 = floor_var(t.sigma_e2);
        }
        self
    }
}

/// Engine-independent view of fitted parameters. A grouped fit is a single task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedParams {
    pub alpha: f64,
    pub pi: f64,
    pub tasks: Vec<TaskParams>,
}

impl From<&ModelParams> for FittedParams {
    fn from(p: &ModelParams) -> Self {
        FittedParams {
            alpha: p.alpha,
            pi: p.pi,
            tasks: vec![TaskParams {
                sigma_beta2: p.sigma_beta2,
                sigma_e2: p.sigma_e2,
                omega: p.omega.clone(),
            }],
        }
    }
}

impl From<&MultiTaskParams> for FittedParams {
    fn from(p: &MultiTaskParams) -> Self {
        FittedParams {
            alpha: p.alpha,
            pi: p.pi,
            tasks: p.tasks.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamps_and_floors() {
        let p = ModelParams::new(0.0, 1.0, 0.0, -3.0, vec![]);
        assert_eq!(p.alpha, PROB_EPS);
        assert_eq!(p.pi, 1.0 - PROB_EPS);
        assert_eq!(p.sigma_beta2, VAR_FLOOR);
        assert_eq!(p.sigma_e2, VAR_FLOOR);
    }
}
