use nalgebra::DVector;

use super::{GroupedDesign, ModelParams};
use crate::linalg::axpy;

/// Variational posterior of the grouped model.
///
/// For coefficient `j` in group `k`, `q(beta_j | eta_k = gamma_j = 1)` is
/// `N(mu[j], s2[j])`, `q(gamma_j = 1) = alpha[j]` and `q(eta_k = 1) = pi[k]`.
///
/// Two caches are kept in step with the posterior:
/// - `group_fit[k] = sum_{j in k} alpha_j mu_j x_j`
/// - `residual = y - Z omega - sum_k pi_k group_fit[k]`
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub mu: Vec<f64>,
    pub s2: Vec<f64>,
    pub alpha: Vec<f64>,
    pub pi: Vec<f64>,
    pub residual: DVector<f64>,
    pub group_fit: Vec<DVector<f64>>,
}

impl VariationalState {
    /// Zero means, prior variances, and every inclusion probability set to its prior value.
    pub fn init(data: &GroupedDesign, params: &ModelParams) -> Self {
        let p = data.p();
        let mut state = VariationalState {
            mu: vec![0.0; p],
            s2: vec![params.sigma_beta2; p],
            alpha: vec![params.alpha; p],
            pi: vec![params.pi; data.k()],
            residual: DVector::zeros(data.n()),
            group_fit: vec![DVector::zeros(data.n()); data.k()],
        };
        state.refresh_residual(data, params);
        state
    }

    /// Recomputes both caches from the posterior means.
    pub fn refresh_residual(&mut self, data: &GroupedDesign, params: &ModelParams) {
        let mut resid = data.y() - data.z() * params.omega_vec();
        for k in 0..data.k() {
            let g = &mut self.group_fit[k];
            g.fill(0.0);
            for &j in data.members(k) {
                let c = self.alpha[j] * self.mu[j];
                if c != 0.0 {
                    axpy(c, data.column(j), g.as_mut_slice());
                }
            }
            axpy(-self.pi[k], g.as_slice(), resid.as_mut_slice());
        }
        self.residual = resid;
    }

    /// Posterior mean effect `pi_k alpha_j mu_j` of every predictor.
    pub fn effects(&self, data: &GroupedDesign) -> Vec<f64> {
        data.group_of()
            .iter()
            .enumerate()
            .map(|(j, &k)| self.pi[k] * self.alpha[j] * self.mu[j])
            .collect()
    }
}
