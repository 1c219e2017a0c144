//! Variational EM for the multi-task model.
//!
//! Task `t` regresses `y_t` on its own covariates and on the `K` shared
//! features. Feature `k` has one coefficient per task; the group indicator of
//! feature `k` is shared by all tasks while the variable indicators are per
//! task. Noise variance, slab variance and fixed effects are per task.

use std::f64::consts::PI;

use nalgebra::DVector;

use crate::error::{BivasError, Result};
use crate::group::{group_slope, run_em, EmOptions};
use crate::linalg::{axpy, dot, logit, sigmoid, xlogy};
use crate::model::{clamp_prob, floor_var, MultiTaskData, MultiTaskParams, TaskParams};

/// Variational posterior of the multi-task model.
///
/// `mu[t][k]`, `s2[t][k]` and `alpha[t][k]` describe the coefficient of
/// feature `k` in task `t`; `pi[k]` is the shared group posterior. The cache
/// `residual[t] = y_t - Z_t omega_t - sum_k pi_k alpha_tk mu_tk x_tk`.
#[derive(Debug, Clone, PartialEq)]
pub struct MtVariationalState {
    pub mu: Vec<Vec<f64>>,
    pub s2: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
    pub pi: Vec<f64>,
    pub residual: Vec<DVector<f64>>,
}

impl MtVariationalState {
    pub fn init(data: &MultiTaskData, params: &MultiTaskParams) -> Self {
        let k = data.k();
        let l = data.num_tasks();
        let mut state = MtVariationalState {
            mu: vec![vec![0.0; k]; l],
            s2: params.tasks.iter().map(|t| vec![t.sigma_beta2; k]).collect(),
            alpha: vec![vec![params.alpha; k]; l],
            pi: vec![params.pi; k],
            residual: data.tasks().iter().map(|t| DVector::zeros(t.n())).collect(),
        };
        state.refresh_residual(data, params);
        state
    }

    pub fn refresh_residual(&mut self, data: &MultiTaskData, params: &MultiTaskParams) {
        for (t, task) in data.tasks().iter().enumerate() {
            let mut r = task.y() - task.z() * params.tasks[t].omega_vec();
            for k in 0..data.k() {
                let c = self.pi[k] * self.alpha[t][k] * self.mu[t][k];
                if c != 0.0 {
                    axpy(-c, task.column(k), r.as_mut_slice());
                }
            }
            self.residual[t] = r;
        }
    }

    /// Posterior mean effects, `effects[t][k] = pi_k alpha_tk mu_tk`.
    pub fn effects(&self) -> Vec<Vec<f64>> {
        self.mu
            .iter()
            .zip(&self.alpha)
            .map(|(mu, al)| (0..mu.len()).map(|k| self.pi[k] * al[k] * mu[k]).collect())
            .collect()
    }
}

/// Outcome of [`mt_em_fit`].
#[derive(Debug, Clone)]
pub struct MtEmResult {
    pub params: MultiTaskParams,
    pub state: MtVariationalState,
    pub elbo: f64,
    pub elbo_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl MultiTaskParams {
    /// Per-task starting values chosen the same way as for the grouped model.
    pub fn initial(data: &MultiTaskData, pi: f64, alpha: f64) -> MultiTaskParams {
        let pi = clamp_prob(pi);
        let alpha = clamp_prob(alpha);
        let tasks = data
            .tasks()
            .iter()
            .map(|task| {
                let omega = task.solve_fixed(task.y());
                let resid = task.y() - task.z() * &omega;
                let sigma_e2 = floor_var(resid.norm_squared() / task.n() as f64);
                let total: f64 = (0..data.k()).map(|k| task.xtx(k)).sum();
                let sigma_beta2 = if total > 0.0 {
                    sigma_e2 * task.n() as f64 / (pi * alpha * total)
                } else {
                    sigma_e2
                };
                TaskParams {
                    sigma_beta2,
                    sigma_e2,
                    omega: omega.as_slice().to_vec(),
                }
            })
            .collect();
        MultiTaskParams { alpha, pi, tasks }.clamped()
    }
}

/// One coordinate-ascent sweep: features in index order, tasks in index
/// order within a feature, then the shared group probability.
pub fn mt_estep_sweep(state: &mut MtVariationalState, data: &MultiTaskData, params: &MultiTaskParams) {
    let logit_alpha = logit(params.alpha);
    let logit_pi = logit(params.pi);
    let l = data.num_tasks();
    let mut pieces = Vec::with_capacity(l);

    for k in 0..data.k() {
        let pik = state.pi[k];
        let mut fit_dot_resid_excl = 0.0;
        pieces.clear();
        for t in 0..l {
            let task = data.task(t);
            let tp = &params.tasks[t];
            let (se2, sb2) = (tp.sigma_e2, tp.sigma_beta2);
            let x = task.column(k);
            let xtx = task.xtx(k);
            let s2 = se2 / (xtx + se2 / sb2);
            let old = state.alpha[t][k] * state.mu[t][k];
            let num = dot(x, state.residual[t].as_slice()) + pik * old * xtx;
            let mu = num / (xtx + se2 / sb2);
            let v = logit_alpha + 0.5 * pik * ((s2 / sb2).ln() + mu * mu / s2);
            let a = clamp_prob(sigmoid(v));
            state.mu[t][k] = mu;
            state.s2[t][k] = s2;
            state.alpha[t][k] = a;
            let delta = a * mu - old;
            if delta != 0.0 {
                axpy(-pik * delta, x, state.residual[t].as_mut_slice());
            }
            let c = a * mu;
            // g'r_{-k} with g = c x
            fit_dot_resid_excl += (c * dot(x, state.residual[t].as_slice()) + pik * c * c * xtx) / se2;
            pieces.push((a, mu, s2, xtx, se2, sb2));
        }
        // Each task has its own variances, so the slope is accumulated task by task.
        let mut slope = fit_dot_resid_excl;
        for &(a, mu, s2, xtx, se2, sb2) in &pieces {
            slope += group_slope(std::iter::once((a, mu, s2, xtx)), 0.0, 0.0, se2, sb2);
        }
        let new_pi = clamp_prob(sigmoid(logit_pi + slope));
        if new_pi != pik {
            for t in 0..l {
                let c = state.alpha[t][k] * state.mu[t][k];
                if c != 0.0 {
                    axpy(
                        -(new_pi - pik) * c,
                        data.task(t).column(k),
                        state.residual[t].as_mut_slice(),
                    );
                }
            }
            state.pi[k] = new_pi;
        }
    }
}

/// Per-task `(||r_t||^2, sum_k Var[eta gamma beta] x'x)` from scratch.
fn task_terms(state: &MtVariationalState, data: &MultiTaskData, t: usize, omega: &[f64]) -> (f64, f64) {
    let task = data.task(t);
    let mut r = task.y() - task.z() * DVector::from_column_slice(omega);
    let mut var_term = 0.0;
    for k in 0..data.k() {
        let a = state.pi[k] * state.alpha[t][k];
        let mu = state.mu[t][k];
        if a * mu != 0.0 {
            axpy(-a * mu, task.column(k), r.as_mut_slice());
        }
        var_term += (a * (state.s2[t][k] + mu * mu) - (a * mu).powi(2)) * task.xtx(k);
    }
    (r.norm_squared(), var_term)
}

/// Evidence lower bound of the multi-task model, evaluated from scratch.
pub fn mt_elbo(state: &MtVariationalState, data: &MultiTaskData, params: &MultiTaskParams) -> f64 {
    let mut elbo = 0.0;
    let (la, l1a) = (params.alpha.ln(), (1.0 - params.alpha).ln());
    for (t, tp) in params.tasks.iter().enumerate() {
        let n = data.task(t).n() as f64;
        let (rss, var_term) = task_terms(state, data, t, &tp.omega);
        elbo += -0.5 * n * (2.0 * PI * tp.sigma_e2).ln() - (rss + var_term) / (2.0 * tp.sigma_e2);
        for k in 0..data.k() {
            let a = state.pi[k] * state.alpha[t][k];
            let s2 = state.s2[t][k];
            let m2 = s2 + state.mu[t][k].powi(2);
            elbo += -a * m2 / (2.0 * tp.sigma_beta2) + 0.5 * a + 0.5 * a * (s2 / tp.sigma_beta2).ln();
            let aj = state.alpha[t][k];
            elbo += aj * la - xlogy(aj, aj) + (1.0 - aj) * l1a - xlogy(1.0 - aj, 1.0 - aj);
        }
    }
    let (lp, l1p) = (params.pi.ln(), (1.0 - params.pi).ln());
    for &pk in &state.pi {
        elbo += pk * lp - xlogy(pk, pk) + (1.0 - pk) * l1p - xlogy(1.0 - pk, 1.0 - pk);
    }
    elbo
}

/// Closed-form parameter update; fixed effects before noise variance in every task.
pub fn mt_mstep_update(
    state: &MtVariationalState,
    data: &MultiTaskData,
    params: &MultiTaskParams,
    opts: &EmOptions,
) -> Result<MultiTaskParams> {
    let mut tasks = Vec::with_capacity(data.num_tasks());
    for (t, task) in data.tasks().iter().enumerate() {
        let mut target = task.y().clone();
        let mut weight = 0.0;
        let mut second = 0.0;
        for k in 0..data.k() {
            let a = state.pi[k] * state.alpha[t][k];
            let mu = state.mu[t][k];
            if a * mu != 0.0 {
                axpy(-a * mu, task.column(k), target.as_mut_slice());
            }
            weight += a;
            second += a * (state.s2[t][k] + mu * mu);
        }
        let omega = task.solve_fixed(&target);
        if omega.iter().any(|v| !v.is_finite()) {
            return Err(BivasError::RankDeficientZ { ratio: 0.0 });
        }
        let omega = omega.as_slice().to_vec();
        let (rss, var_term) = task_terms(state, data, t, &omega);
        tasks.push(TaskParams {
            sigma_e2: (rss + var_term) / task.n() as f64,
            sigma_beta2: if weight > 0.0 {
                second / weight
            } else {
                params.tasks[t].sigma_beta2
            },
            omega,
        });
    }
    let entries = data.k() * data.num_tasks();
    let alpha = if opts.fix_alpha || entries == 0 {
        params.alpha
    } else {
        state.alpha.iter().flatten().sum::<f64>() / entries as f64
    };
    let pi = if opts.fix_pi || data.k() == 0 {
        params.pi
    } else {
        state.pi.iter().sum::<f64>() / data.k() as f64
    };
    Ok(MultiTaskParams { alpha, pi, tasks }.clamped())
}

/// Variational EM for the multi-task model; same loop contract as
/// [`crate::group::em_fit`].
pub fn mt_em_fit(data: &MultiTaskData, init: &MultiTaskParams, opts: &EmOptions) -> Result<MtEmResult> {
    if init.tasks.len() != data.num_tasks() {
        return Err(BivasError::DimensionMismatch(format!(
            "{} task parameter sets for {} tasks",
            init.tasks.len(),
            data.num_tasks()
        )));
    }
    let params = init.clone().clamped();
    let state = MtVariationalState::init(data, &params);
    let (state, params, elbo, elbo_trace, iterations, converged) = run_em(
        state,
        params,
        opts,
        |s, p| mt_estep_sweep(s, data, p),
        |s, p| mt_mstep_update(s, data, p, opts),
        |s, p| s.refresh_residual(data, p),
        |s, p| mt_elbo(s, data, p),
    )?;
    Ok(MtEmResult {
        params,
        state,
        elbo,
        elbo_trace,
        iterations,
        converged,
    })
}
