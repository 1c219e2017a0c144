//! Exact posterior quantities by enumeration, for tiny problems.
//!
//! Every assignment of the group and variable indicators is visited. Given
//! the assignment, the active coefficients integrate out in closed form:
//! `y ~ N(Z omega, s_e I + s_b X_A X_A')`. The determinant and quadratic form
//! go through the `m x m` matrix `M = X_A'X_A + (s_e / s_b) I`, so each
//! assignment costs one small Cholesky factorisation.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{BivasError, Result};
use crate::model::{GroupedDesign, ModelParams, MultiTaskData, MultiTaskParams};

/// Largest number of indicator assignments that will be enumerated.
pub const MAX_CONFIGS: u64 = 4096;
/// Largest sample size per regression.
pub const MAX_N: usize = 64;

/// Exact marginal likelihood and posterior summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactPosterior {
    pub log_marginal: f64,
    /// `P(eta_k = 1 | y)`
    pub group_prob: Vec<f64>,
    /// `P(gamma = 1 | y)` per coefficient
    pub var_prob: Vec<f64>,
    /// `E[eta gamma beta | y]` per coefficient
    pub effect: Vec<f64>,
}

/// Sufficient statistics of one regression for the closed-form marginal.
struct Regression {
    n: usize,
    rtr: f64,
    xtr: DVector<f64>,
    xtx: DMatrix<f64>,
    sigma_e2: f64,
    sigma_beta2: f64,
}

impl Regression {
    fn new(
        y: &DVector<f64>,
        z: &DMatrix<f64>,
        x: &DMatrix<f64>,
        omega: &[f64],
        sigma_e2: f64,
        sigma_beta2: f64,
    ) -> Self {
        let r = y - z * DVector::from_column_slice(omega);
        Regression {
            n: y.len(),
            rtr: r.norm_squared(),
            xtr: x.transpose() * &r,
            xtx: x.transpose() * x,
            sigma_e2,
            sigma_beta2,
        }
    }

    /// Log marginal density of the response with the given columns active,
    /// and the posterior mean of those coefficients.
    fn log_density(&self, active: &[usize]) -> (f64, Vec<f64>) {
        let (se, sb) = (self.sigma_e2, self.sigma_beta2);
        let n = self.n as f64;
        let m = active.len();
        if m == 0 {
            return (-0.5 * n * (2.0 * PI * se).ln() - self.rtr / (2.0 * se), Vec::new());
        }
        let gram = DMatrix::from_fn(m, m, |a, b| {
            self.xtx[(active[a], active[b])] + if a == b { se / sb } else { 0.0 }
        });
        let xr = DVector::from_fn(m, |a, _| self.xtr[active[a]]);
        let chol = Cholesky::new(gram).expect("X_A'X_A + cI is positive definite");
        let log_det_m = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let mean = chol.solve(&xr);
        let log_det = n * se.ln() + log_det_m + m as f64 * (sb / se).ln();
        let quad = (self.rtr - xr.dot(&mean)) / se;
        (-0.5 * (n * (2.0 * PI).ln() + log_det + quad), mean.as_slice().to_vec())
    }
}

/// `ln p` for a Bernoulli outcome, `-inf` for impossible outcomes.
fn ln_bern(on: bool, p: f64) -> f64 {
    if on {
        p.ln()
    } else {
        (1.0 - p).ln()
    }
}

fn check_size(bits: usize, n_max: usize) -> Result<()> {
    if bits >= 63 || (1u64 << bits) > MAX_CONFIGS {
        return Err(BivasError::TooLarge(format!(
            "2^{bits} indicator assignments exceed {MAX_CONFIGS}"
        )));
    }
    if n_max > MAX_N {
        return Err(BivasError::TooLarge(format!("{n_max} observations exceed {MAX_N}")));
    }
    Ok(())
}

/// Accumulates `log sum exp` and probability-weighted sums in one pass.
struct Accumulator {
    max: f64,
    total: f64,
    group: Vec<f64>,
    var: Vec<f64>,
    effect: Vec<f64>,
}

impl Accumulator {
    fn new(k: usize, p: usize) -> Self {
        Accumulator {
            max: f64::NEG_INFINITY,
            total: 0.0,
            group: vec![0.0; k],
            var: vec![0.0; p],
            effect: vec![0.0; p],
        }
    }

    fn add(&mut self, log_w: f64, eta: &[bool], gamma: &[bool], means: &[(usize, f64)]) {
        if log_w == f64::NEG_INFINITY {
            return;
        }
        if log_w > self.max {
            let scale = (self.max - log_w).exp();
            self.total *= scale;
            for v in self.group.iter_mut().chain(&mut self.var).chain(&mut self.effect) {
                *v *= scale;
            }
            self.max = log_w;
        }
        let w = (log_w - self.max).exp();
        self.total += w;
        for (k, &e) in eta.iter().enumerate() {
            if e {
                self.group[k] += w;
            }
        }
        for (j, &g) in gamma.iter().enumerate() {
            if g {
                self.var[j] += w;
            }
        }
        for &(j, m) in means {
            self.effect[j] += w * m;
        }
    }

    fn finish(self) -> ExactPosterior {
        let t = self.total;
        ExactPosterior {
            log_marginal: self.max + t.ln(),
            group_prob: self.group.into_iter().map(|v| v / t).collect(),
            var_prob: self.var.into_iter().map(|v| v / t).collect(),
            effect: self.effect.into_iter().map(|v| v / t).collect(),
        }
    }
}

/// Exact posterior of the grouped model. Probabilities in `params` may be
/// exactly 0 or 1.
pub fn exact_posteriors(data: &GroupedDesign, params: &ModelParams) -> Result<ExactPosterior> {
    let (k, p) = (data.k(), data.p());
    check_size(k + p, data.n())?;
    let reg = Regression::new(
        data.y(),
        data.z(),
        data.x(),
        &params.omega,
        params.sigma_e2,
        params.sigma_beta2,
    );
    let group_of = data.group_of();
    let mut acc = Accumulator::new(k, p);
    let mut eta = vec![false; k];
    let mut gamma = vec![false; p];
    let mut active = Vec::with_capacity(p);
    for code in 0u64..(1u64 << (k + p)) {
        let mut log_prior = 0.0;
        for (i, e) in eta.iter_mut().enumerate() {
            *e = code >> i & 1 == 1;
            log_prior += ln_bern(*e, params.pi);
        }
        active.clear();
        for (j, g) in gamma.iter_mut().enumerate() {
            *g = code >> (k + j) & 1 == 1;
            log_prior += ln_bern(*g, params.alpha);
            if *g && eta[group_of[j]] {
                active.push(j);
            }
        }
        if log_prior == f64::NEG_INFINITY {
            continue;
        }
        let (ll, mean) = reg.log_density(&active);
        let means: Vec<(usize, f64)> = active.iter().copied().zip(mean).collect();
        acc.add(log_prior + ll, &eta, &gamma, &means);
    }
    Ok(acc.finish())
}

/// Exact log marginal likelihood of the grouped model.
pub fn exact_log_marginal(data: &GroupedDesign, params: &ModelParams) -> Result<f64> {
    Ok(exact_posteriors(data, params)?.log_marginal)
}

/// Exact posterior of the multi-task model. Coefficients use the flattened
/// `task * K + feature` layout.
pub fn mt_exact_posteriors(data: &MultiTaskData, params: &MultiTaskParams) -> Result<ExactPosterior> {
    let (k, l) = (data.k(), data.num_tasks());
    let p = k * l;
    let n_max = data.tasks().iter().map(|t| t.n()).max().unwrap_or(0);
    check_size(k + p, n_max)?;
    if params.tasks.len() != l {
        return Err(BivasError::DimensionMismatch(
            "one parameter set per task required".into(),
        ));
    }
    let regs: Vec<Regression> = data
        .tasks()
        .iter()
        .zip(&params.tasks)
        .map(|(t, tp)| Regression::new(t.y(), t.z(), t.x(), &tp.omega, tp.sigma_e2, tp.sigma_beta2))
        .collect();
    let mut acc = Accumulator::new(k, p);
    let mut eta = vec![false; k];
    let mut gamma = vec![false; p];
    let mut means = Vec::with_capacity(p);
    for code in 0u64..(1u64 << (k + p)) {
        let mut log_w = 0.0;
        for (i, e) in eta.iter_mut().enumerate() {
            *e = code >> i & 1 == 1;
            log_w += ln_bern(*e, params.pi);
        }
        for (j, g) in gamma.iter_mut().enumerate() {
            *g = code >> (k + j) & 1 == 1;
            log_w += ln_bern(*g, params.alpha);
        }
        if log_w == f64::NEG_INFINITY {
            continue;
        }
        means.clear();
        for (t, reg) in regs.iter().enumerate() {
            let active: Vec<usize> = (0..k).filter(|&f| eta[f] && gamma[t * k + f]).collect();
            let (ll, mean) = reg.log_density(&active);
            log_w += ll;
            means.extend(active.iter().map(|f| t * k + f).zip(mean));
        }
        acc.add(log_w, &eta, &gamma, &means);
    }
    Ok(acc.finish())
}

pub fn mt_exact_log_marginal(data: &MultiTaskData, params: &MultiTaskParams) -> Result<f64> {
    Ok(mt_exact_posteriors(data, params)?.log_marginal)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn design(x: DMatrix<f64>, y: DVector<f64>, labels: &[&str]) -> GroupedDesign {
        GroupedDesign::with_intercept(y, x, labels).unwrap()
    }

    fn gaussian_logpdf(r: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        let n = r.len() as f64;
        let chol = Cholesky::new(cov.clone()).unwrap();
        let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        -0.5 * (n * (2.0 * PI).ln() + log_det + r.dot(&chol.solve(r)))
    }

    #[test]
    fn single_config_is_gaussian_marginal() {
        let x = DMatrix::from_fn(6, 1, |i, _| (i as f64 * 1.7).sin());
        let y = DVector::from_fn(6, |i, _| i as f64 * 0.3 - 0.4);
        let d = design(x.clone(), y.clone(), &["a"]);
        let params = ModelParams {
            alpha: 1.0,
            pi: 1.0,
            sigma_beta2: 0.8,
            sigma_e2: 0.5,
            omega: vec![0.1],
        };
        let r = &y - DVector::from_element(6, 0.1);
        let cov = DMatrix::identity(6, 6) * 0.5 + &x * x.transpose() * 0.8;
        let got = exact_log_marginal(&d, &params).unwrap();
        assert!((got - gaussian_logpdf(&r, &cov)).abs() < 1e-12);
        let post = exact_posteriors(&d, &params).unwrap();
        assert_eq!(post.group_prob, vec![1.0]);
        assert_eq!(post.var_prob, vec![1.0]);
    }

    #[test]
    fn empty_model_when_pi_is_zero() {
        let x = DMatrix::from_fn(8, 3, |i, j| ((i + 2 * j) as f64).cos());
        let y = DVector::from_fn(8, |i, _| (i as f64).sqrt());
        let d = design(x, y.clone(), &["a", "a", "b"]);
        let params = ModelParams {
            alpha: 0.3,
            pi: 0.0,
            sigma_beta2: 2.0,
            sigma_e2: 1.5,
            omega: vec![1.0],
        };
        let r = &y - DVector::from_element(8, 1.0);
        let expect = -4.0 * (2.0 * PI * 1.5).ln() - r.norm_squared() / 3.0;
        assert!((exact_log_marginal(&d, &params).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn identical_groups_are_symmetric() {
        let col = DVector::from_fn(10, |i, _| (i as f64 * 0.9).sin());
        let x = DMatrix::from_columns(&[col.clone(), col]);
        let y = DVector::from_fn(10, |i, _| (i as f64 * 0.9).sin() * 2.0 + 0.1 * (i as f64).cos());
        let d = design(x, y, &["a", "b"]);
        let params = ModelParams::new(0.5, 0.3, 1.0, 0.5, vec![0.0]);
        let post = exact_posteriors(&d, &params).unwrap();
        assert!((post.group_prob[0] - post.group_prob[1]).abs() < 1e-12);
    }

    #[test]
    fn certain_priors_give_certain_inclusion() {
        let x = DMatrix::from_fn(10, 3, |i, j| ((i * 3 + j) as f64).sin());
        let y = DVector::from_fn(10, |i, _| i as f64);
        let d = design(x, y, &["a", "b", "b"]);
        let params = ModelParams {
            alpha: 1.0,
            pi: 1.0,
            sigma_beta2: 1.0,
            sigma_e2: 1.0,
            omega: vec![0.0],
        };
        let post = exact_posteriors(&d, &params).unwrap();
        assert!(post.group_prob.iter().chain(&post.var_prob).all(|&v| v == 1.0));
    }

    #[test]
    fn too_large_is_rejected() {
        let x = DMatrix::from_fn(10, 10, |i, j| ((i * 10 + j) as f64).sin());
        let y = DVector::from_fn(10, |i, _| i as f64);
        let labels: Vec<String> = (0..10).map(|j| format!("g{}", j / 2)).collect();
        let d = GroupedDesign::with_intercept(y, x, &labels).unwrap();
        let params = ModelParams::new(0.5, 0.5, 1.0, 1.0, vec![0.0]);
        assert!(matches!(exact_log_marginal(&d, &params), Err(BivasError::TooLarge(_))));
    }
}
