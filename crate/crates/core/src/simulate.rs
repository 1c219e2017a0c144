//! Synthetic data with known truth.
//!
//! Predictor rows are Gaussian with AR(1) correlation `rho^|j - j'|` between
//! columns. Group indicators, variable indicators and slab effects are drawn
//! from the bi-level prior with slab variance 1, and the noise variance is set
//! so that the sample variance of the signal divided by the noise variance
//! equals the requested SNR. Everything is driven by a single ChaCha8 stream
//! seeded from `seed`, so a configuration reproduces bit for bit.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{BivasError, Result};
use crate::model::{GroupedDesign, MultiTaskData, TaskData};

/// Settings for a grouped simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub group_sizes: Vec<usize>,
    pub rho: f64,
    pub pi_true: f64,
    pub alpha_true: f64,
    pub snr: f64,
    pub seed: u64,
}

impl SimConfig {
    /// `k` groups of `p / k` predictors each.
    pub fn equal_groups(
        n: usize,
        p: usize,
        k: usize,
        pi_true: f64,
        alpha_true: f64,
        snr: f64,
        seed: u64,
    ) -> Result<Self> {
        if k == 0 || !p.is_multiple_of(k) {
            return Err(BivasError::InvalidConfig(format!(
                "p = {p} is not divisible by K = {k}"
            )));
        }
        Ok(SimConfig {
            n,
            group_sizes: vec![p / k; k],
            rho: 0.0,
            pi_true,
            alpha_true,
            snr,
            seed,
        })
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn p(&self) -> usize {
        self.group_sizes.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        check_common(self.rho, self.pi_true, self.alpha_true, self.snr)?;
        if self.n < 2 {
            return Err(BivasError::InvalidConfig("need at least 2 observations".into()));
        }
        if self.group_sizes.contains(&0) {
            return Err(BivasError::InvalidConfig("group sizes must be positive".into()));
        }
        Ok(())
    }

    /// Group id of every predictor.
    pub fn group_of(&self) -> Vec<usize> {
        self.group_sizes
            .iter()
            .enumerate()
            .flat_map(|(k, &s)| std::iter::repeat_n(k, s))
            .collect()
    }
}

/// Settings for a multi-task simulation: `K` shared features, one sample
/// size per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtSimConfig {
    pub task_sizes: Vec<usize>,
    pub k: usize,
    pub rho: f64,
    pub pi_true: f64,
    pub alpha_true: f64,
    pub snr: f64,
    pub seed: u64,
}

impl MtSimConfig {
    pub fn validate(&self) -> Result<()> {
        check_common(self.rho, self.pi_true, self.alpha_true, self.snr)?;
        if self.task_sizes.is_empty() || self.task_sizes.iter().any(|&n| n < 2) {
            return Err(BivasError::InvalidConfig(
                "need at least one task with 2 or more observations".into(),
            ));
        }
        Ok(())
    }
}

fn check_common(rho: f64, pi: f64, alpha: f64, snr: f64) -> Result<()> {
    if !(rho > -1.0 && rho < 1.0) {
        return Err(BivasError::InvalidConfig(format!("rho must lie in (-1, 1), got {rho}")));
    }
    for (name, v) in [("pi", pi), ("alpha", alpha)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(BivasError::InvalidConfig(format!("{name} must lie in [0, 1], got {v}")));
        }
    }
    if !(snr > 0.0 && snr.is_finite()) {
        return Err(BivasError::InvalidConfig(format!("snr must be positive, got {snr}")));
    }
    Ok(())
}

/// Simulation truth. Coefficients are flattened the same way as fitted
/// posteriors: predictor order for grouped data, `task * K + feature` for
/// multi-task data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub eta: Vec<bool>,
    pub gamma: Vec<bool>,
    pub beta: Vec<f64>,
    /// Realised coefficient `eta * gamma * beta`.
    pub coef: Vec<f64>,
    pub group_of: Vec<usize>,
    /// Noise variance used for each task (one entry for grouped data).
    pub sigma_e2: Vec<f64>,
}

impl Truth {
    pub fn is_active(&self) -> Vec<bool> {
        self.coef.iter().map(|&c| c != 0.0).collect()
    }
}

/// `n x p` matrix whose rows follow `x_j = rho x_{j-1} + sqrt(1 - rho^2) e_j`.
pub fn gen_design<R: Rng>(n: usize, p: usize, rho: f64, rng: &mut R) -> DMatrix<f64> {
    let scale = (1.0 - rho * rho).sqrt();
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        let mut prev = 0.0;
        for j in 0..p {
            let e: f64 = rng.sample(StandardNormal);
            let v = if j == 0 { e } else { rho * prev + scale * e };
            x[(i, j)] = v;
            prev = v;
        }
    }
    x
}

/// Draws `(eta, gamma, beta)` for the given group membership.
pub fn gen_coefficients<R: Rng>(group_of: &[usize], k: usize, pi_true: f64, alpha_true: f64, rng: &mut R) -> Truth {
    let eta: Vec<bool> = (0..k).map(|_| rng.random_bool(pi_true)).collect();
    let gamma: Vec<bool> = group_of.iter().map(|_| rng.random_bool(alpha_true)).collect();
    let beta: Vec<f64> = group_of.iter().map(|_| rng.sample(StandardNormal)).collect();
    let coef = group_of
        .iter()
        .enumerate()
        .map(|(j, &g)| if eta[g] && gamma[j] { beta[j] } else { 0.0 })
        .collect();
    Truth {
        eta,
        gamma,
        beta,
        coef,
        group_of: group_of.to_vec(),
        sigma_e2: Vec::new(),
    }
}

/// Sample variance with divisor `n - 1`.
pub fn sample_var(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Adds Gaussian noise to `X coef`. The noise variance is
/// `sample_var(X coef) / snr`, or 1 when the signal is constant.
pub fn gen_response<R: Rng>(x: &DMatrix<f64>, coef: &[f64], snr: f64, rng: &mut R) -> (DVector<f64>, f64) {
    let signal = x * DVector::from_column_slice(coef);
    let var = sample_var(signal.as_slice());
    let sigma_e2 = if var > 0.0 { var / snr } else { 1.0 };
    let sd = sigma_e2.sqrt();
    let y = signal.map(|s| s + sd * rng.sample::<f64, _>(StandardNormal));
    (y, sigma_e2)
}

/// Grouped data set with an intercept-only covariate matrix. Predictors are
/// named `x0, x1, ...` and groups `g0, g1, ...`.
pub fn simulate_grouped(cfg: &SimConfig) -> Result<(GroupedDesign, Truth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let p = cfg.p();
    let x = gen_design(cfg.n, p, cfg.rho, &mut rng);
    let group_of = cfg.group_of();
    let mut truth = gen_coefficients(&group_of, cfg.group_sizes.len(), cfg.pi_true, cfg.alpha_true, &mut rng);
    let (y, sigma_e2) = gen_response(&x, &truth.coef, cfg.snr, &mut rng);
    truth.sigma_e2 = vec![sigma_e2];
    let labels: Vec<String> = group_of.iter().map(|g| format!("g{g}")).collect();
    let names = (0..p).map(|j| format!("x{j}")).collect();
    let design = GroupedDesign::with_intercept(y, x, &labels)?.with_names(names, vec!["(intercept)".into()])?;
    Ok((design, truth))
}

/// Multi-task data set. The group indicator of each feature is shared;
/// variable indicators, effects, designs and noise are drawn per task.
pub fn simulate_multitask(cfg: &MtSimConfig) -> Result<(MultiTaskData, Truth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.k;
    let l = cfg.task_sizes.len();
    let eta: Vec<bool> = (0..k).map(|_| rng.random_bool(cfg.pi_true)).collect();
    let mut truth = Truth {
        eta: eta.clone(),
        gamma: Vec::with_capacity(k * l),
        beta: Vec::with_capacity(k * l),
        coef: Vec::with_capacity(k * l),
        group_of: (0..l).flat_map(|_| 0..k).collect(),
        sigma_e2: Vec::with_capacity(l),
    };
    let mut tasks = Vec::with_capacity(l);
    for (t, &n) in cfg.task_sizes.iter().enumerate() {
        let x = gen_design(n, k, cfg.rho, &mut rng);
        let gamma: Vec<bool> = (0..k).map(|_| rng.random_bool(cfg.alpha_true)).collect();
        let beta: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let coef: Vec<f64> = (0..k).map(|f| if eta[f] && gamma[f] { beta[f] } else { 0.0 }).collect();
        let (y, sigma_e2) = gen_response(&x, &coef, cfg.snr, &mut rng);
        tasks.push(TaskData::with_intercept(y, x)?.named(format!("task{t}")));
        truth.gamma.extend(gamma);
        truth.beta.extend(beta);
        truth.coef.extend(coef);
        truth.sigma_e2.push(sigma_e2);
    }
    let data = MultiTaskData::new(tasks)?.with_feature_names((0..k).map(|f| format!("x{f}")).collect())?;
    Ok((data, truth))
}
