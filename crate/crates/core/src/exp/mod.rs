//! Config-driven experiments: datasets, paired runs, theory sweeps, and the
//! CSV / SVG / manifest artifacts they leave on disk.

pub mod chart;
pub mod config;
pub mod manifest;
pub mod tables;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{
    AblationSection, DataSource, DatasetSpec, DecaySchedule, DurationUnit, ExperimentConfig, ExperimentKind, GradClip,
    Rate, TheorySection, TrainFor, TrainingSection, Variant,
};
pub use manifest::{verify_manifest, Manifest, ManifestProblem};
pub use tables::{read_scaling_csv, read_similarity_csv, read_trajectory_csv, SimilarityRow, TrajectoryRow};

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{serialize, Architecture, ModelKind};
use crate::theory::{self, ScalingReport};
use crate::train::{paired_run, PairedRun, PairedRunSpec};
use chart::{emit_chart, ChartKind, ChartSpec};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "TAYLORLAB_OUT";
pub const FAILURE_NAME: &str = "failure.json";

/// Output directory for a config: explicit override, then the config's own
/// `output`, then `$TAYLORLAB_OUT/<name>`, then `runs/<name>`.
pub fn resolve_out_dir(cfg: &ExperimentConfig, explicit: Option<&Path>, base: &Path) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.output {
        return base.join(p);
    }
    match std::env::var_os(OUT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(&cfg.name),
        _ => PathBuf::from("runs").join(&cfg.name),
    }
}

/// Builds the dataset for one run seed. Relative IDX paths resolve against
/// `base`.
pub fn load_dataset(spec: &DatasetSpec, run_seed: u64, base: &Path) -> Result<Dataset> {
    let seed = spec.seed.unwrap_or(run_seed);
    let mut ds = match spec.source {
        DataSource::SyntheticBlobs => data::blobs(&spec.blobs_spec()?, spec.n_train, spec.n_test, seed)?,
        DataSource::SyntheticSphere => {
            let dim = spec.dim.ok_or_else(|| Error::Config("synthetic datasets need `dim`".into()))?;
            data::sphere(dim, spec.n_train, spec.n_test, seed)?
        }
        DataSource::IdxFiles => {
            let idx = spec.idx.as_ref().ok_or_else(|| Error::Config("idx source needs an [dataset.idx] table".into()))?;
            let (x_train, y_train) =
                data::load_idx(&base.join(&idx.train_images), &base.join(&idx.train_labels), spec.n_train, spec.classes)?;
            let (x_test, y_test) =
                data::load_idx(&base.join(&idx.test_images), &base.join(&idx.test_labels), spec.n_test, spec.classes)?;
            Dataset { x_train, y_train, x_test, y_test, classes: spec.classes }
        }
    };
    if ds.n_train() == 0 {
        return Err(Error::Dataset("training set is empty; nothing to train on".into()));
    }
    if ds.n_test() == 0 {
        return Err(Error::Dataset("test set is empty; metrics need test examples".into()));
    }
    if spec.standardize {
        ds.standardize(spec.channels)?;
    }
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub total_steps: usize,
    pub final_test_acc: BTreeMap<String, f64>,
    pub final_train_loss: BTreeMap<String, f64>,
    /// Time-averaged cosines over the defined checkpoints.
    pub mean_cos_param: BTreeMap<String, Option<f64>>,
    pub mean_cos_func: BTreeMap<String, Option<f64>>,
    pub diverged_at: BTreeMap<String, Option<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: String,
    pub step: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diverged_at: Option<usize>,
}

pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub manifest: Manifest,
    pub summary: serde_json::Value,
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(p: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(p, bytes).map_err(|e| Error::io(p, e))
}

fn json_string<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Writes every artifact of one paired run into `dir`.
pub fn write_paired_run(run: &PairedRun, dir: &Path) -> Result<SeedSummary> {
    mkdir(dir)?;
    let sims = metrics::similarity_series(run)?;
    write(&dir.join("trajectory.csv"), tables::trajectory_csv(run)?)?;
    write(&dir.join("similarity.csv"), tables::similarity_csv(&sims)?)?;
    write(&dir.join("layer_movement.csv"), tables::layer_movement_csv(run)?)?;
    let (pca_rows, _) = metrics::pca_of_run(run)?;
    write(&dir.join("pca.csv"), tables::pca_csv(&pca_rows)?)?;

    let ck_dir = dir.join("checkpoints");
    mkdir(&ck_dir)?;
    let mut summary = SeedSummary {
        seed: run.init.seed(),
        total_steps: *run.steps.last().unwrap_or(&0),
        final_test_acc: BTreeMap::new(),
        final_train_loss: BTreeMap::new(),
        mean_cos_param: BTreeMap::new(),
        mean_cos_func: BTreeMap::new(),
        diverged_at: BTreeMap::new(),
    };
    for r in &run.records {
        let tag = r.model.tag();
        let last = r.last();
        let params = run.params_at(r.model, r.checkpoints.len() - 1)?;
        serialize::save(&params, &ck_dir.join(format!("{tag}.tlps")))?;
        let meta = CheckpointMeta {
            model: tag.clone(),
            step: last.step,
            train_loss: last.train_loss,
            test_acc: last.test_acc,
            diverged_at: r.diverged_at,
        };
        let text = toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?;
        write(&ck_dir.join(format!("{tag}.toml")), text)?;
        summary.final_test_acc.insert(tag.clone(), last.test_acc);
        summary.final_train_loss.insert(tag.clone(), last.train_loss);
        summary.diverged_at.insert(tag, r.diverged_at);
    }
    for s in &sims {
        summary.mean_cos_param.insert(s.model.tag(), s.mean_cos_param());
        summary.mean_cos_func.insert(s.model.tag(), s.mean_cos_func());
    }
    write(&dir.join("summary.json"), json_string(&summary)?)?;
    render_charts(dir)?;
    Ok(summary)
}

/// (csv file, svg file, chart spec) for every chart the tool knows how to draw.
pub fn standard_charts() -> Vec<(&'static str, &'static str, ChartSpec)> {
    let mut cos_func = ChartSpec::lines("Function-space cosine", "step", "cos_func", "model_tag");
    cos_func.y_label = "cos_func".into();
    let cos_param = ChartSpec::lines("Parameter-space cosine", "step", "cos_param", "model_tag");
    let acc = ChartSpec::lines("Test accuracy", "step", "test_acc", "model_tag");
    let loss = ChartSpec::lines("Train loss", "step", "train_loss", "model_tag");
    let mut pca = ChartSpec::lines("2D PCA of test logits", "pc1", "pc2", "model_tag");
    pca.kind = ChartKind::ScatterPath;
    let mut movement = ChartSpec::lines("Layer movement", "layer_name", "normalized_distance", "model_tag");
    movement.last_only = Some("step".into());
    movement.y_label = "distance / initial norm".into();
    let mut scaling = ChartSpec::lines("Coupling deviation vs width", "width", "median_sup_param_dev", "k");
    scaling.log_x = true;
    scaling.log_y = true;
    let mut scaling_f = ChartSpec::lines("Function deviation vs width", "width", "median_sup_func_dev", "k");
    scaling_f.log_x = true;
    scaling_f.log_y = true;
    vec![
        ("similarity.csv", "cos_func.svg", cos_func),
        ("similarity.csv", "cos_param.svg", cos_param),
        ("trajectory.csv", "test_acc.svg", acc),
        ("trajectory.csv", "train_loss.svg", loss),
        ("pca.csv", "pca.svg", pca),
        ("layer_movement.csv", "layer_movement.svg", movement),
        ("scaling_median.csv", "scaling_param.svg", scaling),
        ("scaling_median.csv", "scaling_func.svg", scaling_f),
    ]
}

/// Renders every standard chart whose CSV exists directly in `dir`.
pub fn render_charts(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for (csv_name, svg_name, spec) in standard_charts() {
        let csv = dir.join(csv_name);
        if csv.is_file() {
            let svg = dir.join(svg_name);
            emit_chart(&csv, &spec, &svg)?;
            out.push(svg);
        }
    }
    Ok(out)
}

/// Renders charts in `dir` and every subdirectory.
pub fn render_charts_recursive(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = render_charts(dir)?;
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for d in subdirs {
        out.extend(render_charts_recursive(&d)?);
    }
    Ok(out)
}

fn paired_spec(cfg: &ExperimentConfig, arch: Architecture, seed: u64, variant: Option<&Variant>) -> Result<PairedRunSpec> {
    let training = cfg.training()?;
    let mut optimizer = cfg.optimizer()?;
    let mut scheme = training.parameterization;
    if let Some(v) = variant {
        if let Some(r) = v.rate {
            optimizer.rate = r.0;
        }
        if let Some(s) = v.parameterization {
            scheme = s;
        }
    }
    Ok(PairedRunSpec {
        arch,
        scheme,
        orders: cfg.orders.clone(),
        optimizer,
        init_seed: seed,
        data_seed: seed,
        checkpoint_every: training.checkpoint_every,
        train_eval_limit: training.train_eval_limit,
        parallel: cfg.parallel,
    })
}

fn run_seed(spec: &PairedRunSpec, data: &Dataset, dir: &Path) -> Result<SeedSummary> {
    let run = paired_run(spec, data)?;
    if run.all_diverged() {
        return Err(Error::AllDiverged);
    }
    write_paired_run(&run, dir)
}

fn train_compare(cfg: &ExperimentConfig, base: &Path, out: &Path) -> Result<serde_json::Value> {
    let arch = cfg.architecture()?.clone();
    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        let data = load_dataset(cfg.dataset()?, seed, base)?;
        let spec = paired_spec(cfg, arch.clone(), seed, None)?;
        seeds.push(run_seed(&spec, &data, &out.join(format!("seed-{seed}")))?);
    }
    Ok(serde_json::json!({ "experiment": cfg.experiment.as_str(), "seeds": seeds }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub model_tag: String,
    pub final_test_acc: f64,
    pub mean_cos_param: Option<f64>,
    pub mean_cos_func: Option<f64>,
}

fn ablation(cfg: &ExperimentConfig, base: &Path, out: &Path) -> Result<serde_json::Value> {
    let ab = cfg.ablation.clone().unwrap_or_default();
    let arch = cfg.architecture()?.clone();
    let variants: Vec<(String, Architecture, Option<Variant>)> = match cfg.experiment {
        ExperimentKind::AblationWidth => ab
            .widths
            .iter()
            .map(|&w| (format!("width-{w}"), arch.clone().with_width(w), None))
            .collect(),
        _ => ab.variants.iter().map(|v| (v.name.clone(), arch.clone(), Some(v.clone()))).collect(),
    };
    let mut rows = Vec::new();
    let mut per_variant = BTreeMap::new();
    for (name, arch, variant) in &variants {
        let mut seeds = Vec::new();
        for &seed in &cfg.seeds {
            let data = load_dataset(cfg.dataset()?, seed, base)?;
            let spec = paired_spec(cfg, arch.clone(), seed, variant.as_ref())?;
            let s = run_seed(&spec, &data, &out.join(name).join(format!("seed-{seed}")))?;
            for (tag, acc) in &s.final_test_acc {
                rows.push(AblationRow {
                    variant: name.clone(),
                    seed,
                    model_tag: tag.clone(),
                    final_test_acc: *acc,
                    mean_cos_param: s.mean_cos_param.get(tag).copied().flatten(),
                    mean_cos_func: s.mean_cos_func.get(tag).copied().flatten(),
                });
            }
            seeds.push(s);
        }
        per_variant.insert(name.clone(), seeds);
    }
    write(&out.join("ablation.csv"), tables::ablation_csv(&rows)?)?;
    Ok(serde_json::json!({ "experiment": cfg.experiment.as_str(), "variants": per_variant }))
}

/// Per-order verdicts of a width-scaling run against its slope band.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderVerdict {
    pub k: usize,
    pub param_slope: f64,
    pub param_residual: f64,
    pub func_slope: f64,
    pub func_residual: f64,
    /// `−k/2 + band`.
    pub slope_bound: f64,
    pub within_band: bool,
    /// Slope at least `band` below the previous order's (true for the first).
    pub steeper_than_previous: bool,
    pub strictly_decreasing: bool,
}

pub fn scaling_verdicts(report: &ScalingReport, band: f64) -> Vec<OrderVerdict> {
    let fit = &report.fit;
    fit.orders
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let bound = -(k as f64) / 2.0 + band;
            OrderVerdict {
                k,
                param_slope: fit.param_slope[i],
                param_residual: fit.param_residual[i],
                func_slope: fit.func_slope[i],
                func_residual: fit.func_residual[i],
                slope_bound: bound,
                within_band: fit.param_slope[i] <= bound,
                steeper_than_previous: i == 0 || fit.param_slope[i] <= fit.param_slope[i - 1] - band,
                strictly_decreasing: fit.strictly_decreasing(i),
            }
        })
        .collect()
}

fn theory_scaling(cfg: &ExperimentConfig, out: &Path) -> Result<serde_json::Value> {
    let section = cfg.theory()?;
    let sc = section.scaling_config(&cfg.seeds, &cfg.orders, cfg.parallel);
    let report = theory::width_scaling_experiment(&sc)?;
    write(&out.join("scaling.csv"), tables::scaling_csv(&report.rows)?)?;
    write(&out.join("scaling_median.csv"), tables::scaling_median_csv(&report.fit)?)?;
    let verdicts = scaling_verdicts(&report, section.band);
    let summary = serde_json::json!({
        "experiment": cfg.experiment.as_str(),
        "orders": verdicts,
        "widths": report.fit.widths,
        "horizons": report.horizons,
        "excluded": report.excluded,
        "dataset_lambda_min": report.dataset_lambda_min,
    });
    Ok(summary)
}

/// Runs a validated config end to end and writes its manifest last.
pub fn run_experiment(cfg: &ExperimentConfig, base: &Path, out: &Path) -> Result<RunOutcome> {
    cfg.validate(base)?;
    mkdir(out)?;
    let stale = out.join(FAILURE_NAME);
    if stale.exists() {
        std::fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
    }
    let normalized = cfg.to_toml_string()?;
    write(&out.join("config.toml"), &normalized)?;
    let summary = match cfg.experiment {
        ExperimentKind::TrainCompare => train_compare(cfg, base, out)?,
        ExperimentKind::TheoryScaling => theory_scaling(cfg, out)?,
        ExperimentKind::AblationWidth | ExperimentKind::AblationLrParam => ablation(cfg, base, out)?,
    };
    write(&out.join("summary.json"), json_string(&summary)?)?;
    render_charts(out)?;
    let manifest = manifest::write_manifest(
        out,
        manifest::RunInfo {
            name: cfg.name.clone(),
            experiment: cfg.experiment.as_str().into(),
            config_sha256: manifest::sha256_hex(normalized.as_bytes()),
            seeds: cfg.seeds.clone(),
            code_version: env!("CARGO_PKG_VERSION").into(),
        },
    )?;
    Ok(RunOutcome { out_dir: out.to_path_buf(), manifest, summary })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub error_kind: String,
    pub message: String,
}

/// Best-effort machine-readable failure record in `out`.
pub fn write_failure(out: &Path, err: &Error) -> Result<PathBuf> {
    mkdir(out)?;
    let rec = FailureRecord { error_kind: err.kind().into(), message: err.to_string() };
    let path = out.join(FAILURE_NAME);
    write(&path, json_string(&rec)?)?;
    Ok(path)
}

/// Model tags in the order the runner emits them.
pub fn model_tags(orders: &[usize]) -> Vec<String> {
    std::iter::once(ModelKind::Full)
        .chain(orders.iter().map(|&k| ModelKind::Taylor(k)))
        .map(|m| m.tag())
        .collect()
}
