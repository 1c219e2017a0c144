//! Command-line front end.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use crate::error::{BivasError, Result};
use crate::grid::{aggregate, make_pi_grid, predict_task, run_grid, select, GridFit, GridModel};
use crate::group::EmOptions;
use crate::io::{
    append_csv, fmt_f64, read_group_map, read_json, read_table, write_csv, write_dataset, write_fit, write_json,
    FitOptions, GridRow, ModelFile, ModelKind, TruthFile,
};
use crate::metrics::{auc, coef_mse, fdr_power};
use crate::model::{validate_design, validate_task, ColumnRoles, GroupSource, MultiTaskData};
use crate::simulate::{simulate_grouped, simulate_multitask, MtSimConfig, SimConfig};

#[derive(Debug, Parser)]
#[command(
    name = "bivas",
    version,
    about = "Bayesian bi-level variable selection by variational EM"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the grouped model over the grid of group-level prior probabilities.
    Fit(FitArgs),
    /// Fit the multi-task model; one --task-data file per task.
    Multifit(MultifitArgs),
    /// Write a synthetic data set and its truth.
    Simulate(SimulateArgs),
    /// Score a fit against simulation truth and append a metrics row.
    Evaluate(EvaluateArgs),
    /// Predict the response of new data from a saved model.
    Predict(PredictArgs),
    /// Summarise metrics files into mean and standard deviation per label.
    Report(ReportArgs),
}

#[derive(Debug, Args, Clone)]
pub struct ColumnArgs {
    /// Response column name.
    #[arg(long, default_value = "y")]
    pub response: String,
    /// Covariate columns (comma separated); every other column is a predictor.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    /// Do not add an intercept to the covariates.
    #[arg(long)]
    pub no_intercept: bool,
    /// Centre and scale predictor columns before fitting.
    #[arg(long)]
    pub standardize: bool,
}

#[derive(Debug, Args, Clone)]
pub struct EmArgs {
    /// Number of grid points.
    #[arg(long, default_value_t = 20)]
    pub grid_size: usize,
    /// Worker threads; defaults to BIVAS_THREADS, then to the machine's parallelism.
    #[arg(long, env = "BIVAS_THREADS")]
    pub threads: Option<usize>,
    /// Local fdr threshold for selection.
    #[arg(long, default_value_t = 0.05)]
    pub fdr: f64,
    /// Relative change of the lower bound that ends EM.
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, default_value_t = 200)]
    pub max_iter: usize,
    /// Coordinate sweeps per E-step.
    #[arg(long, default_value_t = 1)]
    pub estep_sweeps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, default_value = "bivas-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// CSV or TSV table with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// Two-column predictor,group map. Without it the table must contain a `#group` row.
    #[arg(long)]
    pub groups: Option<PathBuf>,
    #[command(flatten)]
    pub columns: ColumnArgs,
    #[command(flatten)]
    pub em: EmArgs,
}

#[derive(Debug, Args)]
pub struct MultifitArgs {
    /// One table per task; all tasks must have the same predictor columns.
    #[arg(long = "task-data", required = true)]
    pub task_data: Vec<PathBuf>,
    #[command(flatten)]
    pub columns: ColumnArgs,
    #[command(flatten)]
    pub em: EmArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 1000)]
    pub p: usize,
    /// Number of groups (equal sizes), or of shared features with --task-sizes.
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub rho: f64,
    #[arg(long, default_value_t = 0.1)]
    pub pi: f64,
    #[arg(long, default_value_t = 0.4)]
    pub alpha: f64,
    #[arg(long, default_value_t = 2.0)]
    pub snr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-task sample sizes (comma separated) for a multi-task data set.
    #[arg(long, value_delimiter = ',')]
    pub task_sizes: Vec<usize>,
    #[arg(long, default_value = "sim")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory holding model.json.
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub fdr: f64,
    /// Value of the label column, used by `report` to group rows.
    #[arg(long, default_value = "default")]
    pub label: String,
    /// Metrics file to append to.
    #[arg(long, default_value = "metrics.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// model.json, or the directory containing it.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Task index for multi-task models.
    #[arg(long, default_value_t = 0)]
    pub task: usize,
    #[arg(long, default_value = "predictions.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub metrics: Vec<PathBuf>,
    #[arg(long, default_value = "report.csv")]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit(a) => cmd_fit(&a).map(drop),
        Command::Multifit(a) => cmd_multifit(&a).map(drop),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

fn roles(columns: &ColumnArgs, groups: GroupSource) -> ColumnRoles {
    ColumnRoles {
        response: columns.response.clone(),
        covariates: columns.covariates.clone(),
        intercept: !columns.no_intercept,
        groups,
        standardize: columns.standardize,
    }
}

fn threads(em: &EmArgs) -> Result<usize> {
    match em.threads {
        Some(0) => Err(BivasError::InvalidCount("--threads must be at least 1".into())),
        Some(t) => Ok(t),
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn check_fdr(fdr: f64) -> Result<()> {
    if fdr > 0.0 && fdr < 1.0 {
        Ok(())
    } else {
        Err(BivasError::InvalidThreshold(fdr))
    }
}

fn fit_grid<M: GridModel>(model: &M, em: &EmArgs) -> Result<(GridFit, FitOptions)> {
    check_fdr(em.fdr)?;
    let grid = make_pi_grid(model.num_groups().max(1), em.grid_size)?;
    let opts = EmOptions {
        max_iter: em.max_iter,
        rel_tol: em.tol,
        fix_pi: true,
        estep_sweeps: em.estep_sweeps,
        ..Default::default()
    };
    let threads = threads(em)?;
    log::info!("fitting {} grid points on {threads} threads", grid.len());
    let fit = run_grid(model, &grid, &opts, threads, em.seed)?;
    let options = FitOptions {
        grid_size: em.grid_size,
        fdr: em.fdr,
        tol: em.tol,
        max_iter: em.max_iter,
        estep_sweeps: em.estep_sweeps,
        seed: em.seed,
        standardize: false,
    };
    Ok((fit, options))
}

fn grid_rows(fit: &GridFit) -> Vec<GridRow> {
    fit.runs
        .iter()
        .zip(&fit.weights)
        .enumerate()
        .map(|(index, (r, &weight))| GridRow {
            index,
            pi: r.pi,
            elbo: r.elbo,
            weight,
            iterations: r.iterations,
            converged: r.converged,
            seed: r.seed,
        })
        .collect()
}

/// Fits a grouped model from files; returns the saved model.
pub fn cmd_fit(a: &FitArgs) -> Result<ModelFile> {
    let (raw, inline) = read_table(&a.data)?;
    let source = match (&a.groups, inline) {
        (Some(path), _) => GroupSource::Map(read_group_map(path)?),
        (None, Some(row)) => GroupSource::Inline(row),
        (None, None) => {
            return Err(BivasError::InvalidConfig(
                "no group assignment: pass --groups or add a #group row to the data".into(),
            ))
        }
    };
    let roles = roles(&a.columns, source);
    let (design, standardization) = validate_design(&raw, &roles)?;
    log::info!(
        "n = {}, p = {}, K = {}, r = {}",
        design.n(),
        design.p(),
        design.k(),
        design.r()
    );
    let (fit, mut options) = fit_grid(&design, &a.em)?;
    options.standardize = a.columns.standardize;
    let posterior = aggregate(&fit);
    let selection = select(&posterior, a.em.fdr)?;
    let model = ModelFile {
        kind: ModelKind::Group,
        response: roles.response.clone(),
        intercept: roles.intercept,
        covariates: roles.covariates.clone(),
        predictors: design.predictor_names().to_vec(),
        group_labels: design.group_labels().to_vec(),
        task_names: vec![file_stem(&a.data)],
        standardization: vec![standardization],
        posterior,
        grid: grid_rows(&fit),
        options,
    };
    write_fit(&a.em.out, &model, &selection)?;
    log::info!(
        "{} groups and {} variables selected",
        selection.groups.len(),
        selection.variables.len()
    );
    Ok(model)
}

fn file_stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("task").to_string()
}

/// Fits a multi-task model from one file per task; returns the saved model.
pub fn cmd_multifit(a: &MultifitArgs) -> Result<ModelFile> {
    let roles = roles(&a.columns, GroupSource::Singletons);
    let mut tasks = Vec::new();
    let mut standardization = Vec::new();
    let mut names: Option<Vec<String>> = None;
    let mut task_names = Vec::new();
    for path in &a.task_data {
        let (raw, _) = read_table(path)?;
        let (task, cols, st) = validate_task(&raw, &roles)?;
        match &names {
            Some(n) if *n != cols => {
                return Err(BivasError::DimensionMismatch(format!(
                    "{} has different predictor columns than the first task",
                    path.display()
                )))
            }
            Some(_) => {}
            None => names = Some(cols),
        }
        let name = file_stem(path);
        tasks.push(task.named(name.clone()));
        task_names.push(name);
        standardization.push(st);
    }
    let names = names.unwrap_or_default();
    let data = MultiTaskData::new(tasks)?.with_feature_names(names.clone())?;
    let (fit, mut options) = fit_grid(&data, &a.em)?;
    options.standardize = a.columns.standardize;
    let posterior = aggregate(&fit);
    let selection = select(&posterior, a.em.fdr)?;
    let model = ModelFile {
        kind: ModelKind::Multitask,
        response: roles.response.clone(),
        intercept: roles.intercept,
        covariates: roles.covariates.clone(),
        group_labels: names.clone(),
        predictors: names,
        task_names,
        standardization,
        posterior,
        grid: grid_rows(&fit),
        options,
    };
    write_fit(&a.em.out, &model, &selection)?;
    Ok(model)
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    if a.task_sizes.is_empty() {
        let cfg = SimConfig::equal_groups(a.n, a.p, a.k, a.pi, a.alpha, a.snr, a.seed)?.with_rho(a.rho);
        let (design, truth) = simulate_grouped(&cfg)?;
        write_dataset(
            &a.out.join("data.csv"),
            design.y().as_slice(),
            design.predictor_names(),
            design.x(),
        )?;
        let labels = design.group_labels();
        write_csv(
            &a.out.join("group_map.csv"),
            &["predictor", "group"],
            design
                .predictor_names()
                .iter()
                .zip(design.group_of())
                .map(|(p, &g)| vec![p.clone(), labels[g].clone()]),
        )?;
        write_json(
            &a.out.join("truth.json"),
            &TruthFile {
                kind: ModelKind::Group,
                group_config: Some(cfg),
                multitask_config: None,
                truth,
            },
        )
    } else {
        let cfg = MtSimConfig {
            task_sizes: a.task_sizes.clone(),
            k: a.k,
            rho: a.rho,
            pi_true: a.pi,
            alpha_true: a.alpha,
            snr: a.snr,
            seed: a.seed,
        };
        let (data, truth) = simulate_multitask(&cfg)?;
        for (t, task) in data.tasks().iter().enumerate() {
            write_dataset(
                &a.out.join(format!("task{t}.csv")),
                task.y().as_slice(),
                data.feature_names(),
                task.x(),
            )?;
        }
        write_json(
            &a.out.join("truth.json"),
            &TruthFile {
                kind: ModelKind::Multitask,
                group_config: None,
                multitask_config: Some(cfg),
                truth,
            },
        )
    }
}

fn model_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("model.json")
    } else {
        p.to_path_buf()
    }
}

/// Metrics of one fit against truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub auc: f64,
    pub group_auc: f64,
    pub fdr: f64,
    pub power: f64,
    pub mse: f64,
}

/// Scores a saved model against simulation truth.
///
/// The variable-level AUC ranks coefficients by `pi_tilde * alpha_tilde`, the
/// approximate marginal inclusion probability. An AUC with only one class of
/// labels is reported as NaN.
pub fn evaluate(model: &ModelFile, truth: &TruthFile, fdr: f64) -> Result<EvalRow> {
    let post = &model.posterior;
    let t = &truth.truth;
    if t.coef.len() != post.effect.len() || t.eta.len() != post.pi_tilde.len() {
        return Err(BivasError::DimensionMismatch(format!(
            "truth has {} coefficients and {} groups, fit has {} and {}",
            t.coef.len(),
            t.eta.len(),
            post.effect.len(),
            post.pi_tilde.len()
        )));
    }
    let active = t.is_active();
    let scores: Vec<f64> = (0..post.alpha_tilde.len())
        .map(|j| post.pi_tilde[post.layout.group_of[j]] * post.alpha_tilde[j])
        .collect();
    let or_nan = |r: Result<f64>| match r {
        Err(BivasError::DegenerateLabels) => Ok(f64::NAN),
        other => other,
    };
    let sel = select(post, fdr)?;
    let fp = fdr_power(&sel.variables, &active)?;
    Ok(EvalRow {
        auc: or_nan(auc(&scores, &active))?,
        group_auc: or_nan(auc(&post.pi_tilde, &t.eta))?,
        fdr: fp.fdr,
        power: fp.power,
        mse: coef_mse(&post.effect, &t.coef)?,
    })
}

pub const METRIC_COLUMNS: [&str; 6] = ["label", "auc", "group_auc", "fdr", "power", "mse"];

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let model: ModelFile = read_json(&model_path(&a.fit))?;
    let truth: TruthFile = read_json(&a.truth)?;
    let row = evaluate(&model, &truth, a.fdr)?;
    append_csv(
        &a.out,
        &METRIC_COLUMNS,
        [vec![
            a.label.clone(),
            fmt_f64(row.auc),
            fmt_f64(row.group_auc),
            fmt_f64(row.fdr),
            fmt_f64(row.power),
            fmt_f64(row.mse),
        ]],
    )
}

/// Predictions of a saved model for a table with the training column names.
pub fn predict_table(model: &ModelFile, data: &Path, task: usize) -> Result<Vec<f64>> {
    let (raw, _) = read_table(data)?;
    let t = match model.kind {
        ModelKind::Group => 0,
        ModelKind::Multitask => task,
    };
    if t >= model.task_names.len() {
        return Err(BivasError::DimensionMismatch(format!(
            "task {t} out of range ({} tasks)",
            model.task_names.len()
        )));
    }
    let (z, _) = raw.covariate_matrix(&model.covariates, model.intercept)?;
    let mut x: DMatrix<f64> = raw.matrix(&model.predictors)?;
    if let Some(st) = &model.standardization[t] {
        st.apply(&mut x)?;
    }
    Ok(predict_task(&model.posterior, t, &z, &x)?.as_slice().to_vec())
}

pub fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let model: ModelFile = read_json(&model_path(&a.model))?;
    let pred = predict_table(&model, &a.data, a.task)?;
    write_csv(
        &a.out,
        &["row", "prediction"],
        pred.iter().enumerate().map(|(i, v)| vec![i.to_string(), fmt_f64(*v)]),
    )
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        f64::NAN
    };
    (mean, sd)
}

/// Long-format summary `label, metric, mean, sd, n`. Labels keep their order
/// of first appearance; NaN entries are skipped.
pub fn cmd_report(a: &ReportArgs) -> Result<()> {
    let mut order: Vec<String> = Vec::new();
    let mut values: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    let mut metric_names: Vec<String> = Vec::new();
    for path in &a.metrics {
        let (raw, _) = read_table(path)?;
        let label_col = raw.column_index("label")?;
        for (c, h) in raw.headers.iter().enumerate() {
            if c != label_col && !metric_names.contains(h) {
                metric_names.push(h.clone());
            }
        }
        for (r, row) in raw.rows.iter().enumerate() {
            let label = row.get(label_col).cloned().unwrap_or_default();
            let li = match order.iter().position(|l| *l == label) {
                Some(i) => i,
                None => {
                    order.push(label);
                    order.len() - 1
                }
            };
            for (c, h) in raw.headers.iter().enumerate() {
                if c == label_col {
                    continue;
                }
                let cell = row.get(c).map(String::as_str).unwrap_or("");
                let v: f64 = cell.parse().map_err(|_| BivasError::NonNumeric {
                    column: h.clone(),
                    row: r + 1,
                    value: cell.to_string(),
                })?;
                let mi = metric_names
                    .iter()
                    .position(|m| m == h)
                    .expect("metric registered above");
                if !v.is_nan() {
                    values.entry((li, mi)).or_default().push(v);
                }
            }
        }
    }
    let rows = values.iter().map(|(&(li, mi), v)| {
        let (mean, sd) = mean_sd(v);
        vec![
            order[li].clone(),
            metric_names[mi].clone(),
            fmt_f64(mean),
            fmt_f64(sd),
            v.len().to_string(),
        ]
    });
    write_csv(&a.out, &["label", "metric", "mean", "sd", "n"], rows)
}
