#![allow(dead_code)]

use bivas::linalg::{logit, sigmoid};
use bivas::model::{clamp_prob, PROB_EPS};
use bivas::multitask::MtVariationalState;
use bivas::simulate::gen_design;
use bivas::{
    elbo_group, estep_sweep, mt_elbo, mt_estep_sweep, GroupedDesign, ModelParams, MultiTaskData, MultiTaskParams,
    TaskData, VariationalState,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random grouped instance with an AR design, a sparse signal, and either an
/// intercept-only or a two-column covariate matrix.
pub fn group_instance(seed: u64, n: usize, sizes: &[usize], rho: f64) -> GroupedDesign {
    let mut r = rng(seed);
    let p: usize = sizes.iter().sum();
    let x = gen_design(n, p, rho, &mut r);
    let beta: Vec<f64> = (0..p)
        .map(|_| {
            if r.random_bool(0.3) {
                r.sample::<f64, _>(StandardNormal) * 1.5
            } else {
                0.0
            }
        })
        .collect();
    let extra_cov = r.random_bool(0.5);
    let z = if extra_cov {
        DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { (i as f64 * 0.37).sin() })
    } else {
        DMatrix::from_element(n, 1, 1.0)
    };
    let noise = 0.5 + r.random::<f64>();
    let y = DVector::from_fn(n, |i, _| {
        let mut v = 0.3 + z[(i, z.ncols() - 1)] * 0.5;
        for j in 0..p {
            v += x[(i, j)] * beta[j];
        }
        v + noise * r.sample::<f64, _>(StandardNormal)
    });
    let labels: Vec<String> = sizes
        .iter()
        .enumerate()
        .flat_map(|(k, &s)| std::iter::repeat_n(format!("g{k}"), s))
        .collect();
    GroupedDesign::new(y, z, x, &labels).unwrap()
}

/// Random multi-task instance sharing `k` features.
pub fn mt_instance(seed: u64, sizes: &[usize], k: usize, rho: f64) -> MultiTaskData {
    let mut r = rng(seed);
    let active: Vec<bool> = (0..k).map(|_| r.random_bool(0.4)).collect();
    let tasks = sizes
        .iter()
        .map(|&n| {
            let x = gen_design(n, k, rho, &mut r);
            let beta: Vec<f64> = (0..k)
                .map(|f| {
                    if active[f] && r.random_bool(0.7) {
                        r.sample::<f64, _>(StandardNormal) * 1.5
                    } else {
                        0.0
                    }
                })
                .collect();
            let y = DVector::from_fn(n, |i, _| {
                (0..k).map(|f| x[(i, f)] * beta[f]).sum::<f64>() + 0.2 + r.sample::<f64, _>(StandardNormal)
            });
            TaskData::with_intercept(y, x).unwrap()
        })
        .collect();
    MultiTaskData::new(tasks).unwrap()
}

/// Random sizes for `k` groups of at most `max` members.
pub fn group_sizes(r: &mut ChaCha8Rng, k: usize, max: usize) -> Vec<usize> {
    (0..k).map(|_| r.random_range(1..=max)).collect()
}

/// Grouped design with one group per column of a task.
pub fn singleton_design(task: &TaskData) -> GroupedDesign {
    let labels: Vec<String> = (0..task.x().ncols()).map(|k| format!("f{k}")).collect();
    GroupedDesign::new(task.y().clone(), task.z().clone(), task.x().clone(), &labels).unwrap()
}

/// Randomised variational state with consistent caches.
pub fn random_state(seed: u64, data: &GroupedDesign, params: &ModelParams) -> VariationalState {
    let mut r = rng(seed);
    let mut st = VariationalState::init(data, params);
    for j in 0..data.p() {
        st.mu[j] = r.sample::<f64, _>(StandardNormal);
        st.s2[j] = 0.1 + r.random::<f64>();
        st.alpha[j] = clamp_prob(r.random::<f64>());
    }
    for k in 0..data.k() {
        st.pi[k] = clamp_prob(r.random::<f64>());
    }
    st.refresh_residual(data, params);
    st
}

/// `x_j'(y - Z omega - sum over other groups of pi alpha mu x - sum over the
/// rest of the group of alpha mu x)`, from the raw definitions.
pub fn direct_numerator(st: &VariationalState, data: &GroupedDesign, params: &ModelParams, j: usize) -> f64 {
    let k = data.group_of()[j];
    let mut target = data.y() - data.z() * params.omega_vec();
    for jj in 0..data.p() {
        let kk = data.group_of()[jj];
        let w = if kk != k {
            st.pi[kk] * st.alpha[jj] * st.mu[jj]
        } else if jj != j {
            st.alpha[jj] * st.mu[jj]
        } else {
            0.0
        };
        for i in 0..data.n() {
            target[i] -= w * data.x()[(i, jj)];
        }
    }
    (0..data.n()).map(|i| data.x()[(i, j)] * target[i]).sum()
}

fn bernoulli_kl(q: f64, prior: f64) -> f64 {
    let t = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a / b).ln() };
    t(q, prior) + t(1.0 - q, 1.0 - prior)
}

/// Maximiser of `f(q) - KL(q || prior)` for `f` linear in `q`, found from
/// `f` at 0 and 1.
fn optimal_prob(f_at: impl Fn(f64) -> f64, prior: f64) -> f64 {
    clamp_prob(sigmoid(logit(prior) + f_at(1.0) - f_at(0.0)))
}

/// One E-step sweep without caches: the conditional mean from
/// [`direct_numerator`], the variable probability from its closed form, and
/// the group probability from two evaluations of the bound.
pub fn direct_sweep(st: &mut VariationalState, data: &GroupedDesign, params: &ModelParams) {
    let (se, sb) = (params.sigma_e2, params.sigma_beta2);
    for k in 0..data.k() {
        for &j in data.members(k) {
            let xtx: f64 = (0..data.n()).map(|i| data.x()[(i, j)].powi(2)).sum();
            let s2 = se / (xtx + se / sb);
            let mu = direct_numerator(st, data, params, j) / (xtx + se / sb);
            st.mu[j] = mu;
            st.s2[j] = s2;
            st.alpha[j] = clamp_prob(sigmoid(
                logit(params.alpha) + 0.5 * st.pi[k] * ((s2 / sb).ln() + mu * mu / s2),
            ));
            st.refresh_residual(data, params);
        }
        let base = st.clone();
        let new_pi = optimal_prob(
            |q| {
                let mut s = base.clone();
                s.pi[k] = q;
                elbo_group(&s, data, params) + bernoulli_kl(q, params.pi)
            },
            params.pi,
        );
        st.pi[k] = new_pi;
        st.refresh_residual(data, params);
    }
}

/// Multi-task counterpart of [`direct_sweep`].
pub fn mt_direct_sweep(st: &mut MtVariationalState, data: &MultiTaskData, params: &MultiTaskParams) {
    let l = data.num_tasks();
    for k in 0..data.k() {
        for t in 0..l {
            let task = data.task(t);
            let tp = &params.tasks[t];
            let (se, sb) = (tp.sigma_e2, tp.sigma_beta2);
            let mut target = task.y() - task.z() * tp.omega_vec();
            for kk in 0..data.k() {
                if kk != k {
                    let w = st.pi[kk] * st.alpha[t][kk] * st.mu[t][kk];
                    for i in 0..task.n() {
                        target[i] -= w * task.x()[(i, kk)];
                    }
                }
            }
            let col: Vec<f64> = (0..task.n()).map(|i| task.x()[(i, k)]).collect();
            let xtx: f64 = col.iter().map(|v| v * v).sum();
            let num: f64 = col.iter().zip(target.iter()).map(|(a, b)| a * b).sum();
            let s2 = se / (xtx + se / sb);
            let mu = num / (xtx + se / sb);
            st.mu[t][k] = mu;
            st.s2[t][k] = s2;
            st.alpha[t][k] = clamp_prob(sigmoid(
                logit(params.alpha) + 0.5 * st.pi[k] * ((s2 / sb).ln() + mu * mu / s2),
            ));
        }
        st.refresh_residual(data, params);
        let base = st.clone();
        let new_pi = optimal_prob(
            |q| {
                let mut s = base.clone();
                s.pi[k] = q;
                mt_elbo(&s, data, params) + bernoulli_kl(q, params.pi)
            },
            params.pi,
        );
        st.pi[k] = new_pi;
        st.refresh_residual(data, params);
    }
}

/// Sweeps with fixed parameters until no probability or mean moves by more
/// than `1e-13`, or `max_sweeps` is reached.
pub fn converge_estep(st: &mut VariationalState, data: &GroupedDesign, params: &ModelParams, max_sweeps: usize) {
    for _ in 0..max_sweeps {
        let before = st.clone();
        estep_sweep(st, data, params);
        let moved = before
            .mu
            .iter()
            .zip(&st.mu)
            .chain(before.alpha.iter().zip(&st.alpha))
            .chain(before.pi.iter().zip(&st.pi))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if moved < 1e-13 {
            break;
        }
    }
    st.refresh_residual(data, params);
}

pub fn mt_converge_estep(
    st: &mut MtVariationalState,
    data: &MultiTaskData,
    params: &MultiTaskParams,
    max_sweeps: usize,
) {
    for _ in 0..max_sweeps {
        let before = st.clone();
        mt_estep_sweep(st, data, params);
        let flat = |s: &MtVariationalState| -> Vec<f64> {
            s.mu.iter()
                .flatten()
                .chain(s.alpha.iter().flatten())
                .chain(&s.pi)
                .copied()
                .collect()
        };
        let moved = flat(&before)
            .iter()
            .zip(flat(st))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if moved < 1e-13 {
            break;
        }
    }
    st.refresh_residual(data, params);
}

/// Central difference of `f` at `x` with a relative step.
pub fn central_diff(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    let h = 1e-6 * x.abs().max(1e-3);
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Largest increase of the bound over single-coordinate perturbations of
/// `+-delta` on every mean and probability, relative to `1 + |L|`.
pub fn max_perturbation_gain(st: &VariationalState, data: &GroupedDesign, params: &ModelParams, delta: f64) -> f64 {
    let base = elbo_group(st, data, params);
    let eval = |s: &mut VariationalState| {
        s.refresh_residual(data, params);
        elbo_group(s, data, params)
    };
    let mut worst = f64::NEG_INFINITY;
    for sign in [-1.0, 1.0] {
        for j in 0..data.p() {
            let mut s = st.clone();
            s.alpha[j] = clamp_prob(s.alpha[j] + sign * delta);
            worst = worst.max(eval(&mut s) - base);
            let mut s = st.clone();
            s.mu[j] += sign * delta;
            worst = worst.max(eval(&mut s) - base);
        }
        for k in 0..data.k() {
            let mut s = st.clone();
            s.pi[k] = (s.pi[k] + sign * delta).clamp(PROB_EPS, 1.0 - PROB_EPS);
            worst = worst.max(eval(&mut s) - base);
        }
    }
    worst / (1.0 + base.abs())
}

pub fn mt_max_perturbation_gain(
    st: &MtVariationalState,
    data: &MultiTaskData,
    params: &MultiTaskParams,
    delta: f64,
) -> f64 {
    let base = mt_elbo(st, data, params);
    let eval = |s: &mut MtVariationalState| {
        s.refresh_residual(data, params);
        mt_elbo(s, data, params)
    };
    let mut worst = f64::NEG_INFINITY;
    for sign in [-1.0, 1.0] {
        for t in 0..data.num_tasks() {
            for k in 0..data.k() {
                let mut s = st.clone();
                s.alpha[t][k] = clamp_prob(s.alpha[t][k] + sign * delta);
                worst = worst.max(eval(&mut s) - base);
                let mut s = st.clone();
                s.mu[t][k] += sign * delta;
                worst = worst.max(eval(&mut s) - base);
            }
        }
        for k in 0..data.k() {
            let mut s = st.clone();
            s.pi[k] = clamp_prob(s.pi[k] + sign * delta);
            worst = worst.max(eval(&mut s) - base);
        }
    }
    worst / (1.0 + base.abs())
}

pub fn is_monotone(trace: &[f64]) -> bool {
    trace.windows(2).all(|w| w[1] >= w[0] - 1e-8 * (1.0 + w[1].abs()))
}
