//! CSV emission and parsing for run artifacts.

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::metrics::{layer_movement, SimilaritySeries};
use crate::nn::ModelKind;
use crate::theory::{ScalingFit, ScalingRow};
use crate::train::PairedRun;

use super::AblationRow;

fn num(v: f64) -> String {
    v.to_string()
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::InvalidArgument(format!("CSV: {e}"))
}

fn build(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(csv_err)?).map_err(csv_err)
}

pub fn trajectory_csv(run: &PairedRun) -> Result<String> {
    let mut rows = Vec::new();
    for (i, &step) in run.steps.iter().enumerate() {
        for r in &run.records {
            let c = &r.checkpoints[i];
            rows.push(vec![step.to_string(), r.model.tag(), num(c.train_loss), num(c.test_acc)]);
        }
    }
    build(&["step", "model_tag", "train_loss", "test_acc"], rows)
}

pub fn similarity_csv(series: &[SimilaritySeries]) -> Result<String> {
    let mut rows = Vec::new();
    let steps = series.first().map(|s| s.steps.clone()).unwrap_or_default();
    for (i, step) in steps.iter().enumerate() {
        for s in series {
            rows.push(vec![step.to_string(), s.model.tag(), opt(s.cos_param[i]), opt(s.cos_func[i])]);
        }
    }
    build(&["step", "model_tag", "cos_param", "cos_func"], rows)
}

pub fn layer_movement_csv(run: &PairedRun) -> Result<String> {
    let mut rows = Vec::new();
    for (i, &step) in run.steps.iter().enumerate() {
        for r in &run.records {
            let prof = layer_movement(&run.params_at(r.model, i)?, step);
            for (l, name) in prof.layers.iter().enumerate() {
                rows.push(vec![
                    step.to_string(),
                    r.model.tag(),
                    name.clone(),
                    num(prof.distance[l]),
                    opt(prof.normalized[l]),
                ]);
            }
        }
    }
    build(&["step", "model_tag", "layer_name", "distance", "normalized_distance"], rows)
}

pub fn pca_csv(rows: &[(ModelKind, usize, f64, f64)]) -> Result<String> {
    build(
        &["model_tag", "step", "pc1", "pc2"],
        rows.iter().map(|(m, s, a, b)| vec![m.tag(), s.to_string(), num(*a), num(*b)]),
    )
}

pub fn scaling_csv(rows: &[ScalingRow]) -> Result<String> {
    build(
        &["width", "k", "seed", "sup_param_dev", "sup_func_dev"],
        rows.iter().map(|r| {
            vec![r.width.to_string(), r.k.to_string(), r.seed.to_string(), num(r.sup_param_dev), num(r.sup_func_dev)]
        }),
    )
}

pub fn scaling_median_csv(fit: &ScalingFit) -> Result<String> {
    let mut rows = Vec::new();
    for (ki, k) in fit.orders.iter().enumerate() {
        for (wi, w) in fit.widths.iter().enumerate() {
            rows.push(vec![
                w.to_string(),
                format!("k{k}"),
                num(fit.median_param_dev[ki][wi]),
                num(fit.median_func_dev[ki][wi]),
            ]);
        }
    }
    build(&["width", "k", "median_sup_param_dev", "median_sup_func_dev"], rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    build(
        &["variant", "seed", "model_tag", "final_test_acc", "mean_cos_param", "mean_cos_func"],
        rows.iter().map(|r| {
            vec![
                r.variant.clone(),
                r.seed.to_string(),
                r.model_tag.clone(),
                num(r.final_test_acc),
                opt(r.mean_cos_param),
                opt(r.mean_cos_func),
            ]
        }),
    )
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub model_tag: String,
    pub train_loss: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct SimilarityRow {
    pub step: usize,
    pub model_tag: String,
    pub cos_param: Option<f64>,
    pub cos_func: Option<f64>,
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path, header: &[&str]) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    let got: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    if got != header {
        return Err(Error::InvalidArgument(format!(
            "{}: expected columns {header:?}, found {got:?}",
            path.display()
        )));
    }
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<TrajectoryRow>> {
    read_rows(path, &["step", "model_tag", "train_loss", "test_acc"])
}

pub fn read_similarity_csv(path: &Path) -> Result<Vec<SimilarityRow>> {
    read_rows(path, &["step", "model_tag", "cos_param", "cos_func"])
}

pub fn read_scaling_csv(path: &Path) -> Result<Vec<ScalingRow>> {
    #[derive(Deserialize)]
    struct Row {
        width: usize,
        k: usize,
        seed: u64,
        sup_param_dev: f64,
        sup_func_dev: f64,
    }
    let rows: Vec<Row> = read_rows(path, &["width", "k", "seed", "sup_param_dev", "sup_func_dev"])?;
    Ok(rows
        .into_iter()
        .map(|r| ScalingRow {
            width: r.width,
            k: r.k,
            seed: r.seed,
            t0: f64::NAN,
            sup_param_dev: r.sup_param_dev,
            sup_func_dev: r.sup_func_dev,
        })
        .collect())
}
