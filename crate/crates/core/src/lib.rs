//! Bayesian bi-level variable selection by variational EM.
//!
//! The crate fits two sparse linear models with a two-level spike-and-slab
//! prior: grouped regression, where predictors are organised into groups and
//! selection happens for whole groups and for individual members, and
//! multi-task regression, where the same `K` features enter `L` regressions
//! and a feature's group-level indicator is shared across tasks.
//!
//! Fitting follows a variational EM loop (coordinate-ascent E-step, closed-form
//! M-step). The group-level prior inclusion probability is integrated over a
//! grid of values weighted by the evidence lower bound, and the grid runs are
//! scheduled over a pool of worker threads.
//!
//! Module map:
//! - [`model`]: data containers, parameter types, and the variational state.
//! - [`group`] and [`multitask`]: the two inference engines.
//! - [`grid`]: the hyperparameter grid, weighting, aggregation, selection, and prediction.
//! - [`simulate`] and [`metrics`]: synthetic data and evaluation against truth.
//! - [`oracle`]: exhaustive enumeration for tiny instances.
//! - [`io`] and [`cli`]: file formats and the command-line front end.

pub mod cli;
pub mod error;
pub mod grid;
pub mod group;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod multitask;
pub mod oracle;
pub mod simulate;

pub use error::{BivasError, Result};
pub use grid::{
    aggregate, make_pi_grid, normalize_weights, predict, predict_task, run_grid, select, GridFit, PiGrid,
    PosteriorSummary, Selection,
};
pub use group::{coef_numerator, elbo_group, em_fit, estep_sweep, mstep_update, EmOptions, EmResult};
pub use model::{
    FittedParams, GroupedDesign, ModelParams, MultiTaskData, MultiTaskParams, TaskData, TaskParams, VariationalState,
};
pub use multitask::{mt_elbo, mt_em_fit, mt_estep_sweep, mt_mstep_update, MtEmResult, MtVariationalState};
