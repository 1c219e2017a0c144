//! Grid over the group-level prior inclusion probability.
//!
//! Each grid value is fitted by its own EM run with that value held fixed.
//! The runs are combined with weights proportional to `exp(ELBO)`, which
//! gives model-averaged posteriors, parameters, fdr-based selection and
//! predictions.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{BivasError, Result};
use crate::group::{em_fit, EmOptions};
use crate::model::{FittedParams, GroupedDesign, ModelParams, MultiTaskData, MultiTaskParams, TaskParams};
use crate::multitask::mt_em_fit;

/// Starting value of the variable-level prior inclusion probability.
pub const INITIAL_ALPHA: f64 = 0.1;
/// Largest accepted grid size.
pub const MAX_GRID: usize = 1000;

/// Grid values of the group-level prior inclusion probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiGrid {
    pub values: Vec<f64>,
}

impl PiGrid {
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `h` values whose base-10 log-odds are equally spaced on `[-log10 K, 0]`.
///
/// The end points are computed from the odds `1/K` and `1` directly rather
/// than through powers of ten. With `h = 1` the grid is `{0.5}`; with `K = 1`
/// the interval is a point and the grid collapses to `{0.5}` as well.
pub fn make_pi_grid(k: usize, h: usize) -> Result<PiGrid> {
    if k < 1 {
        return Err(BivasError::InvalidCount("grid needs at least one group".into()));
    }
    if !(1..=MAX_GRID).contains(&h) {
        return Err(BivasError::InvalidCount(format!(
            "grid size must be in 1..={MAX_GRID}, got {h}"
        )));
    }
    if h == 1 || k == 1 {
        return Ok(PiGrid { values: vec![0.5] });
    }
    let lo = -(k as f64).log10();
    let values = (0..h)
        .map(|i| {
            let odds = if i == 0 {
                1.0 / k as f64
            } else if i == h - 1 {
                1.0
            } else {
                10f64.powf(lo * (1.0 - i as f64 / (h - 1) as f64))
            };
            odds / (1.0 + odds)
        })
        .collect();
    Ok(PiGrid { values })
}

/// Normalised importance weights: `exp(elbo_i - max)` divided by their sum.
pub fn normalize_weights(elbos: &[f64]) -> Vec<f64> {
    if elbos.is_empty() {
        return Vec::new();
    }
    let max = elbos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = elbos.iter().map(|e| (e - max).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Position of every variational coefficient in the flattened layout.
///
/// Grouped fits use the predictor index. Multi-task fits put the coefficient
/// of feature `k` in task `t` at `t * K + k`, and feature `k` is group `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub group_of: Vec<usize>,
    pub task_of: Vec<usize>,
    pub num_groups: usize,
    pub num_tasks: usize,
}

/// Converged result of one grid point in engine-independent form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub pi: f64,
    pub seed: u64,
    pub params: FittedParams,
    pub group_prob: Vec<f64>,
    pub var_prob: Vec<f64>,
    pub mu: Vec<f64>,
    pub s2: Vec<f64>,
    pub elbo: f64,
    pub elbo_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// A model that can be fitted at a fixed group-level prior probability.
pub trait GridModel: Sync {
    fn num_groups(&self) -> usize;
    fn layout(&self) -> Layout;
    fn fit_at(&self, pi: f64, opts: &EmOptions) -> Result<GridRun>;
}

impl GridModel for GroupedDesign {
    fn num_groups(&self) -> usize {
        self.k()
    }

    fn layout(&self) -> Layout {
        Layout {
            group_of: self.group_of().to_vec(),
            task_of: vec![0; self.p()],
            num_groups: self.k(),
            num_tasks: 1,
        }
    }

    fn fit_at(&self, pi: f64, opts: &EmOptions) -> Result<GridRun> {
        let init = ModelParams::initial(self, pi, INITIAL_ALPHA);
        let res = em_fit(self, &init, opts)?;
        Ok(GridRun {
            pi,
            seed: 0,
            params: FittedParams::from(&res.params),
            group_prob: res.state.pi,
            var_prob: res.state.alpha,
            mu: res.state.mu,
            s2: res.state.s2,
            elbo: res.elbo,
            elbo_trace: res.elbo_trace,
            iterations: res.iterations,
            converged: res.converged,
        })
    }
}

impl GridModel for MultiTaskData {
    fn num_groups(&self) -> usize {
        self.k()
    }

    fn layout(&self) -> Layout {
        let k = self.k();
        let l = self.num_tasks();
        Layout {
            group_of: (0..l).flat_map(|_| 0..k).collect(),
            task_of: (0..l).flat_map(|t| std::iter::repeat_n(t, k)).collect(),
            num_groups: k,
            num_tasks: l,
        }
    }

    fn fit_at(&self, pi: f64, opts: &EmOptions) -> Result<GridRun> {
        let init = MultiTaskParams::initial(self, pi, INITIAL_ALPHA);
        let res = mt_em_fit(self, &init, opts)?;
        Ok(GridRun {
            pi,
            seed: 0,
            params: FittedParams::from(&res.params),
            group_prob: res.state.pi,
            var_prob: res.state.alpha.into_iter().flatten().collect(),
            mu: res.state.mu.into_iter().flatten().collect(),
            s2: res.state.s2.into_iter().flatten().collect(),
            elbo: res.elbo,
            elbo_trace: res.elbo_trace,
            iterations: res.iterations,
            converged: res.converged,
        })
    }
}

/// All grid runs, in grid order, with their normalised weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFit {
    pub layout: Layout,
    pub runs: Vec<GridRun>,
    pub weights: Vec<f64>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Sub-seed of grid point `index`; depends only on the master seed and the index.
pub fn grid_seed(master: u64, index: usize) -> u64 {
    splitmix64(master ^ splitmix64(index as u64))
}

/// Fits every grid point on `threads` workers.
///
/// Workers claim the next unstarted grid point from a shared counter as soon
/// as they finish the previous one. Runs are self-contained and
/// deterministically initialised, so the result does not depend on the
/// number of threads or on the claim order. `opts.fix_pi` is forced on.
pub fn run_grid<M: GridModel>(
    model: &M,
    grid: &PiGrid,
    opts: &EmOptions,
    threads: usize,
    seed: u64,
) -> Result<GridFit> {
    if threads < 1 {
        return Err(BivasError::InvalidCount("threads must be at least 1".into()));
    }
    if grid.is_empty() {
        return Err(BivasError::InvalidCount("empty grid".into()));
    }
    opts.validate()?;
    let opts = EmOptions {
        fix_pi: true,
        ..opts.clone()
    };
    let next = AtomicUsize::new(0);
    let workers = threads.min(grid.len());

    let mut collected: Vec<(usize, Result<GridRun>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= grid.len() {
                            break;
                        }
                        let pi = grid.values[i];
                        let out = model.fit_at(pi, &opts).map(|mut run| {
                            run.seed = grid_seed(seed, i);
                            run
                        });
                        if let Ok(run) = &out {
                            log::debug!(
                                "grid point {i}: pi = {pi:.6}, {} iterations, elbo = {}",
                                run.iterations,
                                run.elbo
                            );
                        }
                        done.push((i, out));
                    }
                    done
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("grid worker panicked"))
            .collect()
    });
    collected.sort_by_key(|(i, _)| *i);

    let mut runs = Vec::with_capacity(collected.len());
    for (index, out) in collected {
        runs.push(out.map_err(|e| BivasError::GridPoint {
            index,
            pi: grid.values[index],
            source: Box::new(e),
        })?);
    }
    let elbos: Vec<f64> = runs.iter().map(|r| r.elbo).collect();
    Ok(GridFit {
        layout: model.layout(),
        weights: normalize_weights(&elbos),
        runs,
    })
}

/// Model-averaged posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub layout: Layout,
    pub pi_tilde: Vec<f64>,
    pub alpha_tilde: Vec<f64>,
    pub mu_tilde: Vec<f64>,
    /// `pi_tilde[group] * alpha_tilde * mu_tilde` per coefficient.
    pub effect: Vec<f64>,
    pub group_fdr: Vec<f64>,
    pub var_fdr: Vec<f64>,
    /// Parameters averaged with the same weights.
    pub params: FittedParams,
}

fn weighted(weights: &[f64], runs: &[GridRun], field: impl Fn(&GridRun) -> &[f64]) -> Vec<f64> {
    let len = runs.first().map_or(0, |r| field(r).len());
    let mut out = vec![0.0; len];
    for (w, run) in weights.iter().zip(runs) {
        for (o, v) in out.iter_mut().zip(field(run)) {
            *o += w * v;
        }
    }
    out
}

/// Weighted average of the grid runs.
pub fn aggregate(fit: &GridFit) -> PosteriorSummary {
    let w = &fit.weights;
    let runs = &fit.runs;
    let pi_tilde = weighted(w, runs, |r| &r.group_prob);
    let alpha_tilde = weighted(w, runs, |r| &r.var_prob);
    let mu_tilde = weighted(w, runs, |r| &r.mu);
    let effect = (0..alpha_tilde.len())
        .map(|j| pi_tilde[fit.layout.group_of[j]] * alpha_tilde[j] * mu_tilde[j])
        .collect();

    let scalar = |f: &dyn Fn(&GridRun) -> f64| -> f64 { w.iter().zip(runs).map(|(w, r)| w * f(r)).sum() };
    let tasks = (0..runs[0].params.tasks.len())
        .map(|t| TaskParams {
            sigma_beta2: scalar(&|r| r.params.tasks[t].sigma_beta2),
            sigma_e2: scalar(&|r| r.params.tasks[t].sigma_e2),
            omega: weighted(w, runs, |r| &r.params.tasks[t].omega),
        })
        .collect();
    let params = FittedParams {
        alpha: scalar(&|r| r.params.alpha),
        pi: scalar(&|r| r.params.pi),
        tasks,
    };

    PosteriorSummary {
        layout: fit.layout.clone(),
        group_fdr: pi_tilde.iter().map(|p| 1.0 - p).collect(),
        var_fdr: alpha_tilde.iter().map(|a| 1.0 - a).collect(),
        pi_tilde,
        alpha_tilde,
        mu_tilde,
        effect,
        params,
    }
}

/// Groups and coefficients whose local fdr is strictly below the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub threshold: f64,
    pub groups: Vec<usize>,
    pub variables: Vec<usize>,
    pub group_fdr: Vec<f64>,
    pub var_fdr: Vec<f64>,
}

pub fn select(summary: &PosteriorSummary, threshold: f64) -> Result<Selection> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(BivasError::InvalidThreshold(threshold));
    }
    let below = |v: &[f64]| {
        v.iter()
            .enumerate()
            .filter(|(_, f)| **f < threshold)
            .map(|(i, _)| i)
            .collect()
    };
    Ok(Selection {
        threshold,
        groups: below(&summary.group_fdr),
        variables: below(&summary.var_fdr),
        group_fdr: summary.group_fdr.clone(),
        var_fdr: summary.var_fdr.clone(),
    })
}

fn linear_predictor(omega: &[f64], effects: &[f64], z: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    if z.ncols() != omega.len() || x.ncols() != effects.len() || z.nrows() != x.nrows() {
        return Err(BivasError::DimensionMismatch(format!(
            "new data has Z {}x{} and X {}x{}; model expects {} covariates and {} predictors",
            z.nrows(),
            z.ncols(),
            x.nrows(),
            x.ncols(),
            omega.len(),
            effects.len()
        )));
    }
    Ok(z * DVector::from_column_slice(omega) + x * DVector::from_column_slice(effects))
}

/// Predicted response of a grouped fit: `Z omega + X effect`.
pub fn predict(summary: &PosteriorSummary, z: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    if summary.layout.num_tasks != 1 {
        return Err(BivasError::DimensionMismatch(
            "multi-task model: use predict_task".into(),
        ));
    }
    linear_predictor(&summary.params.tasks[0].omega, &summary.effect, z, x)
}

/// Predicted response of task `t` of a multi-task fit.
pub fn predict_task(summary: &PosteriorSummary, t: usize, z: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    let l = summary.layout.num_tasks;
    if t >= l {
        return Err(BivasError::DimensionMismatch(format!(
            "task {t} out of range ({l} tasks)"
        )));
    }
    let k = summary.layout.num_groups;
    let effects = if l == 1 {
        &summary.effect[..]
    } else {
        &summary.effect[t * k..(t + 1) * k]
    };
    linear_predictor(&summary.params.tasks[t].omega, effects, z, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(pi: f64, group_prob: Vec<f64>, var_prob: Vec<f64>, mu: Vec<f64>, elbo: f64) -> GridRun {
        GridRun {
            pi,
            seed: 0,
            params: FittedParams {
                alpha: 0.2,
                pi,
                tasks: vec![TaskParams {
                    sigma_beta2: 1.0,
                    sigma_e2: 2.0,
                    omega: vec![0.5],
                }],
            },
            s2: vec![1.0; mu.len()],
            group_prob,
            var_prob,
            mu,
            elbo,
            elbo_trace: vec![elbo],
            iterations: 1,
            converged: true,
        }
    }

    fn layout(group_of: Vec<usize>, k: usize) -> Layout {
        Layout {
            task_of: vec![0; group_of.len()],
            group_of,
            num_groups: k,
            num_tasks: 1,
        }
    }

    #[test]
    fn grid_endpoints() {
        let g = make_pi_grid(10, 2).unwrap();
        assert_eq!(g.values, vec![0.1 / 1.1, 0.5]);
        assert_eq!(make_pi_grid(37, 1).unwrap().values, vec![0.5]);
        assert!(make_pi_grid(10, 0).is_err());
        assert!(make_pi_grid(10, 1001).is_err());
    }

    #[test]
    fn grid_interior_values() {
        let g = make_pi_grid(250, 3).unwrap();
        let expect = [0.00398406374501992, 0.059483487151975496, 0.5];
        assert!((g.values[0] - expect[0]).abs() < 1e-15);
        assert!((g.values[1] - expect[1]).abs() < 1e-13);
        assert_eq!(g.values[2], 0.5);
    }

    #[test]
    fn weight_examples() {
        assert_eq!(normalize_weights(&[3.0; 4]), vec![0.25; 4]);
        let w = normalize_weights(&[0.0, -1000.0]);
        assert_eq!(w[0], 1.0);
        assert!(w[1] < 1e-300);
        let w = normalize_weights(&[2f64.ln(), 0.0]);
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn aggregate_single_run_is_verbatim() {
        let r = run(0.3, vec![0.4], vec![0.7, 0.1], vec![1.5, -2.0], -10.0);
        let fit = GridFit {
            layout: layout(vec![0, 0], 1),
            runs: vec![r.clone()],
            weights: vec![1.0],
        };
        let s = aggregate(&fit);
        assert_eq!(s.pi_tilde, r.group_prob);
        assert_eq!(s.alpha_tilde, r.var_prob);
        assert_eq!(s.mu_tilde, r.mu);
        assert_eq!(s.params, r.params);
        assert_eq!(s.effect, vec![0.4 * 0.7 * 1.5, 0.4 * 0.1 * -2.0]);
    }

    #[test]
    fn aggregate_weighted_group_probability() {
        let a = run(0.1, vec![0.2], vec![0.5], vec![1.0], -1.0);
        let b = run(0.5, vec![0.6], vec![0.5], vec![1.0], -2.0);
        let fit = GridFit {
            layout: layout(vec![0], 1),
            runs: vec![a, b],
            weights: vec![0.25, 0.75],
        };
        assert!((aggregate(&fit).pi_tilde[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn selection_is_strict() {
        let s = PosteriorSummary {
            layout: layout(vec![0, 1], 2),
            pi_tilde: vec![0.96, 0.95],
            alpha_tilde: vec![1.0, 0.5],
            mu_tilde: vec![1.0, 1.0],
            effect: vec![0.96, 0.475],
            group_fdr: vec![1.0 - 0.96, 0.05],
            var_fdr: vec![0.0, 0.5],
            params: FittedParams {
                alpha: 0.5,
                pi: 0.5,
                tasks: vec![],
            },
        };
        let sel = select(&s, 0.05).unwrap();
        assert_eq!(sel.groups, vec![0]);
        assert_eq!(sel.variables, vec![0]);
        assert!(matches!(select(&s, 0.0), Err(BivasError::InvalidThreshold(_))));
        assert!(matches!(select(&s, 1.0), Err(BivasError::InvalidThreshold(_))));
    }

    #[test]
    fn empty_summary_selects_nothing() {
        let s = PosteriorSummary {
            layout: layout(vec![], 0),
            pi_tilde: vec![],
            alpha_tilde: vec![],
            mu_tilde: vec![],
            effect: vec![],
            group_fdr: vec![],
            var_fdr: vec![],
            params: FittedParams {
                alpha: 0.5,
                pi: 0.5,
                tasks: vec![],
            },
        };
        let sel = select(&s, 0.05).unwrap();
        assert!(sel.groups.is_empty() && sel.variables.is_empty());
    }

    #[test]
    fn prediction_examples() {
        let r = run(0.5, vec![1.0], vec![1.0], vec![3.0], 0.0);
        let fit = GridFit {
            layout: layout(vec![0], 1),
            runs: vec![r],
            weights: vec![1.0],
        };
        let s = aggregate(&fit);
        let z = DMatrix::from_element(3, 1, 1.0);
        let mut x = DMatrix::zeros(3, 1);
        x[(0, 0)] = 1.0;
        let y = predict(&s, &z, &x).unwrap();
        assert_eq!(y.as_slice(), &[3.5, 0.5, 0.5]);
        assert!(predict(&s, &z, &DMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn sub_seeds_differ_by_index() {
        let a: Vec<u64> = (0..5).map(|i| grid_seed(42, i)).collect();
        let mut b = a.clone();
        b.sort();
        b.dedup();
        assert_eq!(b.len(), 5);
        assert_eq!(grid_seed(42, 3), a[3]);
    }
}
