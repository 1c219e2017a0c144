//! Text formats: delimited input tables, group maps, and fit artifacts.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so every
//! value read back parses to the identical `f64`.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{BivasError, Result};
use crate::grid::{PosteriorSummary, Selection};
use crate::model::{RawTable, Standardization};
use crate::simulate::{MtSimConfig, SimConfig, Truth};

/// First field of an inline group-label row.
pub const GROUP_ROW_MARKER: &str = "#group";

/// Round-trippable text form of a double.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn delimiter_for(path: &Path, first_line: &str) -> u8 {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    if ext.eq_ignore_ascii_case("tsv") || ext.eq_ignore_ascii_case("tab") || first_line.contains('\t') {
        b'\t'
    } else {
        b','
    }
}

/// Reads a CSV or TSV table with a header row. The delimiter is a tab for
/// `.tsv`/`.tab` files or when the header contains a tab, a comma otherwise.
///
/// A data row whose first field is `#group` is removed from the table and
/// returned separately as per-column group labels.
pub fn read_table(path: &Path) -> Result<(RawTable, Option<Vec<String>>)> {
    let text = fs::read_to_string(path)?;
    let first = text.lines().next().unwrap_or("");
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter_for(path, first))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    let mut group_row = None;
    for record in reader.records() {
        let fields: Vec<String> = record?.iter().map(str::to_string).collect();
        if group_row.is_none() && fields.first().map(String::as_str) == Some(GROUP_ROW_MARKER) {
            let mut labels = fields;
            labels[0].clear();
            group_row = Some(labels);
        } else {
            rows.push(fields);
        }
    }
    Ok((RawTable { headers, rows }, group_row))
}

/// Reads a two-column `predictor,group` map. The first row is a header.
pub fn read_group_map(path: &Path) -> Result<Vec<(String, String)>> {
    let (raw, _) = read_table(path)?;
    if raw.headers.len() < 2 {
        return Err(BivasError::DimensionMismatch(format!(
            "group map {} needs two columns",
            path.display()
        )));
    }
    raw.rows
        .into_iter()
        .enumerate()
        .map(|(i, r)| match (r.first(), r.get(1)) {
            (Some(p), Some(g)) => Ok((p.clone(), g.clone())),
            _ => Err(BivasError::DimensionMismatch(format!(
                "group map row {} has fewer than two fields",
                i + 1
            ))),
        })
        .collect()
}

/// Writes a CSV file from a header and string rows.
pub fn write_csv(path: &Path, headers: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(headers)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

/// Appends rows to a CSV file, writing the header first if the file is new or empty.
pub fn append_csv(path: &Path, headers: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    if fresh {
        w.write_record(headers)?;
    }
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Group,
    Multitask,
}

/// One grid point in the saved model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub index: usize,
    pub pi: f64,
    pub elbo: f64,
    pub weight: f64,
    pub iterations: usize,
    pub converged: bool,
    pub seed: u64,
}

/// Settings a fit was produced with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub grid_size: usize,
    pub fdr: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub estep_sweeps: usize,
    pub seed: u64,
    pub standardize: bool,
}

/// Everything needed to report on a fit and to predict from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub kind: ModelKind,
    pub response: String,
    pub intercept: bool,
    pub covariates: Vec<String>,
    /// Predictor names (grouped) or shared feature names (multi-task).
    pub predictors: Vec<String>,
    pub group_labels: Vec<String>,
    pub task_names: Vec<String>,
    /// Predictor transform per task, when standardisation was requested.
    pub standardization: Vec<Option<Standardization>>,
    pub posterior: PosteriorSummary,
    pub grid: Vec<GridRow>,
    pub options: FitOptions,
}

impl ModelFile {
    /// Name of flattened coefficient `j`.
    pub fn coef_name(&self, j: usize) -> &str {
        match self.kind {
            ModelKind::Group => &self.predictors[j],
            ModelKind::Multitask => &self.predictors[j % self.predictors.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedGroup {
    pub id: usize,
    pub label: String,
    pub fdr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedVariable {
    pub id: usize,
    pub name: String,
    pub task: String,
    pub group: String,
    pub fdr: f64,
}

/// Selection with names attached, as written to `selection.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub threshold: f64,
    pub groups: Vec<SelectedGroup>,
    pub variables: Vec<SelectedVariable>,
}

impl SelectionReport {
    pub fn new(model: &ModelFile, sel: &Selection) -> Self {
        let layout = &model.posterior.layout;
        SelectionReport {
            threshold: sel.threshold,
            groups: sel
                .groups
                .iter()
                .map(|&k| SelectedGroup {
                    id: k,
                    label: model.group_labels[k].clone(),
                    fdr: sel.group_fdr[k],
                })
                .collect(),
            variables: sel
                .variables
                .iter()
                .map(|&j| SelectedVariable {
                    id: j,
                    name: model.coef_name(j).to_string(),
                    task: model.task_names[layout.task_of[j]].clone(),
                    group: model.group_labels[layout.group_of[j]].clone(),
                    fdr: sel.var_fdr[j],
                })
                .collect(),
        }
    }
}

/// Writes `model.json`, `posterior.csv`, `groups.csv` and `selection.json` into `dir`.
pub fn write_fit(dir: &Path, model: &ModelFile, sel: &Selection) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("model.json"), model)?;

    let post = &model.posterior;
    let layout = &post.layout;
    write_csv(
        &dir.join("posterior.csv"),
        &[
            "id",
            "name",
            "task",
            "group",
            "pi_tilde",
            "alpha_tilde",
            "mu_tilde",
            "effect",
            "group_fdr",
            "var_fdr",
        ],
        (0..post.alpha_tilde.len()).map(|j| {
            let k = layout.group_of[j];
            vec![
                j.to_string(),
                model.coef_name(j).to_string(),
                model.task_names[layout.task_of[j]].clone(),
                model.group_labels[k].clone(),
                fmt_f64(post.pi_tilde[k]),
                fmt_f64(post.alpha_tilde[j]),
                fmt_f64(post.mu_tilde[j]),
                fmt_f64(post.effect[j]),
                fmt_f64(post.group_fdr[k]),
                fmt_f64(post.var_fdr[j]),
            ]
        }),
    )?;
    write_csv(
        &dir.join("groups.csv"),
        &["id", "group", "size", "pi_tilde", "fdr"],
        (0..post.pi_tilde.len()).map(|k| {
            let size = layout.group_of.iter().filter(|&&g| g == k).count();
            vec![
                k.to_string(),
                model.group_labels[k].clone(),
                size.to_string(),
                fmt_f64(post.pi_tilde[k]),
                fmt_f64(post.group_fdr[k]),
            ]
        }),
    )?;
    write_json(&dir.join("selection.json"), &SelectionReport::new(model, sel))
}

/// Simulation truth as written to `truth.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_config: Option<SimConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multitask_config: Option<MtSimConfig>,
    pub truth: Truth,
}

/// Writes a response column `y` followed by predictor columns.
pub fn write_dataset(path: &Path, y: &[f64], names: &[String], x: &nalgebra::DMatrix<f64>) -> Result<()> {
    let mut headers: Vec<&str> = vec!["y"];
    headers.extend(names.iter().map(String::as_str));
    write_csv(
        path,
        &headers,
        (0..y.len()).map(|i| {
            std::iter::once(fmt_f64(y[i]))
                .chain((0..x.ncols()).map(|j| fmt_f64(x[(i, j)])))
                .collect()
        }),
    )
}
