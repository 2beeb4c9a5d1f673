//! Experiment configuration files.
//!
//! The `[training]` table uses the column names of the usual setup table
//! (`train-for`, `batch`, `opt`, `rate`, `grad-clip`, `lr-decay-schedule`).
//! Durations may be given in epochs and are converted to steps once the
//! training-set size is known.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::BlobsSpec;
use crate::error::{Error, Result};
use crate::jet::MAX_ORDER;
use crate::nn::{ActivationKind, Architecture, InitScheme, LossKind};
use crate::theory::ScalingConfig;
use crate::train::{epochs_to_steps, OptimizerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    TrainCompare,
    TheoryScaling,
    AblationWidth,
    AblationLrParam,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::TrainCompare => "train-compare",
            ExperimentKind::TheoryScaling => "theory-scaling",
            ExperimentKind::AblationWidth => "ablation-width",
            ExperimentKind::AblationLrParam => "ablation-lr-param",
        }
    }

    pub fn is_ablation(&self) -> bool {
        matches!(self, ExperimentKind::AblationWidth | ExperimentKind::AblationLrParam)
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DurationUnit {
    Steps,
    Epochs,
}

impl DurationUnit {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "step" | "steps" => Some(DurationUnit::Steps),
            "epoch" | "epochs" => Some(DurationUnit::Epochs),
            _ => None,
        }
    }

    fn to_steps(self, v: f64, n_train: usize, batch: usize) -> usize {
        match self {
            DurationUnit::Steps => v.round() as usize,
            DurationUnit::Epochs => epochs_to_steps(v, n_train, batch),
        }
    }
}

impl fmt::Display for DurationUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DurationUnit::Steps => "steps",
            DurationUnit::Epochs => "epochs",
        })
    }
}

fn parse_number(s: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("not a number: {s:?}")))?;
    if !v.is_finite() || v < 0.0 {
        return Err(Error::Config(format!("expected a finite non-negative number, got {s:?}")));
    }
    Ok(v)
}

/// `"200 epochs"` or `"5000 steps"`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TrainFor {
    pub amount: f64,
    pub unit: DurationUnit,
}

impl FromStr for TrainFor {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        let (Some(num), Some(unit), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Config(format!("train-for must look like \"200 epochs\", got {s:?}")));
        };
        let unit = DurationUnit::parse(unit)
            .ok_or_else(|| Error::Config(format!("unknown train-for unit in {s:?}")))?;
        Ok(TrainFor { amount: parse_number(num)?, unit })
    }
}

impl TryFrom<String> for TrainFor {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TrainFor> for String {
    fn from(t: TrainFor) -> String {
        format!("{} {}", t.amount, t.unit)
    }
}

/// Learning rate written as a number or as text such as `"1e-1.5"`
/// (`10^-1.5`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RateRepr", into = "f64")]
pub struct Rate(pub f64);

#[derive(Deserialize)]
#[serde(untagged)]
enum RateRepr {
    Num(f64),
    Int(i64),
    Text(String),
}

impl FromStr for Rate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Ok(v) = s.parse::<f64>() {
            return Rate::checked(v);
        }
        // Fractional exponents: "<mantissa>e<exponent>".
        if let Some((m, e)) = s.split_once(['e', 'E']) {
            if let (Ok(m), Ok(e)) = (m.parse::<f64>(), e.parse::<f64>()) {
                return Rate::checked(m * 10f64.powf(e));
            }
        }
        Err(Error::Config(format!("cannot parse rate {s:?}")))
    }
}

impl Rate {
    fn checked(v: f64) -> Result<Self> {
        if v.is_finite() && v > 0.0 {
            Ok(Rate(v))
        } else {
            Err(Error::Config(format!("rate must be positive, got {v}")))
        }
    }
}

impl TryFrom<RateRepr> for Rate {
    type Error = Error;
    fn try_from(r: RateRepr) -> Result<Self> {
        match r {
            RateRepr::Num(v) => Rate::checked(v),
            RateRepr::Int(v) => Rate::checked(v as f64),
            RateRepr::Text(s) => s.parse(),
        }
    }
}

impl From<Rate> for f64 {
    fn from(r: Rate) -> f64 {
        r.0
    }
}

/// Clip norm, or `"none"`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ClipRepr", into = "ClipRepr")]
pub struct GradClip(pub Option<f64>);

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ClipRepr {
    Num(f64),
    Int(i64),
    Text(String),
}

impl TryFrom<ClipRepr> for GradClip {
    type Error = Error;
    fn try_from(r: ClipRepr) -> Result<Self> {
        let v = match r {
            ClipRepr::Num(v) => v,
            ClipRepr::Int(v) => v as f64,
            ClipRepr::Text(s) if s.trim().eq_ignore_ascii_case("none") => return Ok(GradClip(None)),
            ClipRepr::Text(s) => parse_number(&s)?,
        };
        if v.is_finite() && v > 0.0 {
            Ok(GradClip(Some(v)))
        } else {
            Err(Error::Config(format!("grad-clip must be positive or \"none\", got {v}")))
        }
    }
}

impl From<GradClip> for ClipRepr {
    fn from(c: GradClip) -> Self {
        match c.0 {
            Some(v) => ClipRepr::Num(v),
            None => ClipRepr::Text("none".into()),
        }
    }
}

/// `"10x drop at 100, 150 epochs"` or `"none"`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DecaySchedule {
    pub factor: f64,
    pub at: Vec<f64>,
    pub unit: Option<DurationUnit>,
}

impl DecaySchedule {
    pub fn is_none(&self) -> bool {
        self.at.is_empty()
    }
}

impl FromStr for DecaySchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("none") || t.is_empty() {
            return Ok(DecaySchedule::default());
        }
        let bad = || Error::Config(format!("lr-decay-schedule must look like \"10x drop at 100, 150 epochs\", got {s:?}"));
        let (factor, rest) = t.split_once("x drop at").ok_or_else(bad)?;
        let factor = parse_number(factor)?;
        if factor < 1.0 {
            return Err(Error::Config(format!("decay factor must be >= 1, got {factor}")));
        }
        let rest = rest.trim();
        let (list, unit) = rest.rsplit_once(' ').ok_or_else(bad)?;
        let unit = DurationUnit::parse(unit.trim()).ok_or_else(bad)?;
        let at = list
            .split(',')
            .map(|p| parse_number(p))
            .collect::<Result<Vec<f64>>>()?;
        if at.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("decay points must be strictly increasing in {s:?}")));
        }
        Ok(DecaySchedule { factor, at, unit: Some(unit) })
    }
}

impl TryFrom<String> for DecaySchedule {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DecaySchedule> for String {
    fn from(d: DecaySchedule) -> String {
        match d.unit {
            Some(unit) if !d.at.is_empty() => {
                let at: Vec<String> = d.at.iter().map(|v| v.to_string()).collect();
                format!("{}x drop at {} {}", d.factor, at.join(", "), unit)
            }
            _ => "none".into(),
        }
    }
}

fn default_opt() -> String {
    "SGD".into()
}

fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainingSection {
    pub train_for: TrainFor,
    pub batch: usize,
    #[serde(default = "default_opt")]
    pub opt: String,
    pub rate: Rate,
    #[serde(default, skip_serializing_if = "is_default")]
    pub grad_clip: GradClip,
    #[serde(default, skip_serializing_if = "DecaySchedule::is_none")]
    pub lr_decay_schedule: DecaySchedule,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default = "default_scheme")]
    pub parameterization: InitScheme,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_eval_limit: Option<usize>,
}

fn default_loss() -> LossKind {
    LossKind::CrossEntropy
}

fn default_scheme() -> InitScheme {
    InitScheme::Standard
}

impl TrainingSection {
    /// Effective optimizer settings for a training set of `n_train` examples.
    pub fn resolve(&self, n_train: usize) -> Result<OptimizerConfig> {
        if !self.opt.eq_ignore_ascii_case("sgd") {
            return Err(Error::Config(format!("only SGD is supported, got opt = {:?}", self.opt)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if n_train == 0 {
            return Err(Error::Config("training set is empty".into()));
        }
        let total_steps = self.train_for.unit.to_steps(self.train_for.amount, n_train, self.batch);
        let schedule = match self.lr_decay_schedule.unit {
            Some(unit) => self
                .lr_decay_schedule
                .at
                .iter()
                .map(|&v| (unit.to_steps(v, n_train, self.batch), 1.0 / self.lr_decay_schedule.factor))
                .collect(),
            None => Vec::new(),
        };
        let cfg = OptimizerConfig {
            rate: self.rate.0,
            schedule,
            clip: self.grad_clip.0,
            batch_size: self.batch,
            total_steps,
            loss: self.loss,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    SyntheticBlobs,
    SyntheticSphere,
    IdxFiles,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsShape {
    pub centers_per_class: usize,
    pub intrinsic_dim: usize,
    pub center_scale: f64,
    pub noise: f64,
}

impl Default for BlobsShape {
    fn default() -> Self {
        let d = BlobsSpec::default();
        BlobsShape {
            centers_per_class: d.centers_per_class,
            intrinsic_dim: d.intrinsic_dim,
            center_scale: d.center_scale,
            noise: d.noise,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub n_train: usize,
    pub n_test: usize,
    pub classes: usize,
    /// Input dimension of synthetic sources.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default)]
    pub standardize: bool,
    /// Channel count for per-channel standardization; 0 standardizes each
    /// feature separately.
    #[serde(default)]
    pub channels: usize,
    /// Dataset seed; when absent the run seed is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blobs: Option<BlobsShape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idx: Option<IdxPaths>,
}

impl DatasetSpec {
    /// The default synthetic task: two-class blobs in 32 dimensions.
    pub fn default_blobs() -> Self {
        DatasetSpec {
            source: DataSource::SyntheticBlobs,
            n_train: 2048,
            n_test: 512,
            classes: 2,
            dim: Some(32),
            standardize: false,
            channels: 0,
            seed: None,
            blobs: None,
            idx: None,
        }
    }

    pub fn blobs_spec(&self) -> Result<BlobsSpec> {
        let shape = self.blobs.clone().unwrap_or_default();
        Ok(BlobsSpec {
            dim: self.dim.ok_or_else(|| Error::Config("synthetic datasets need `dim`".into()))?,
            classes: self.classes,
            centers_per_class: shape.centers_per_class,
            intrinsic_dim: shape.intrinsic_dim,
            center_scale: shape.center_scale,
            noise: shape.noise,
        })
    }

    fn validate(&self, base: &Path) -> Result<()> {
        if self.n_train == 0 {
            return Err(Error::Config("dataset n_train must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("dataset needs >= 2 classes".into()));
        }
        match self.source {
            DataSource::SyntheticBlobs => {
                let spec = self.blobs_spec()?;
                if spec.intrinsic_dim == 0 || spec.intrinsic_dim > spec.dim || spec.centers_per_class == 0 {
                    return Err(Error::Config("invalid blobs shape".into()));
                }
                if self.idx.is_some() {
                    return Err(Error::Config("`idx` paths given for a synthetic source".into()));
                }
            }
            DataSource::SyntheticSphere => {
                self.dim.ok_or_else(|| Error::Config("synthetic datasets need `dim`".into()))?;
                if self.classes != 2 {
                    return Err(Error::Config("the sphere source has exactly 2 classes".into()));
                }
            }
            DataSource::IdxFiles => {
                let idx = self.idx.as_ref().ok_or_else(|| Error::Config("idx source needs an [dataset.idx] table".into()))?;
                for p in [&idx.train_images, &idx.train_labels, &idx.test_images, &idx.test_labels] {
                    let full = base.join(p);
                    if !full.is_file() {
                        return Err(Error::Config(format!("IDX file not found: {}", full.display())));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Theory-scaling parameters; seeds and orders come from the top level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheorySection {
    pub widths: Vec<usize>,
    pub n: usize,
    pub d: usize,
    pub n_test: usize,
    pub activation: ActivationKind,
    pub eta0: f64,
    pub h: f64,
    #[serde(default = "ten")]
    pub record_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t0: Option<f64>,
    pub max_t0: f64,
    #[serde(default = "one")]
    pub horizon_scale: f64,
    pub lambda_gate: f64,
    #[serde(default)]
    pub data_seed: u64,
    /// Slope acceptance band half-width.
    #[serde(default = "quarter")]
    pub band: f64,
}

fn ten() -> usize {
    10
}
fn one() -> f64 {
    1.0
}
fn quarter() -> f64 {
    0.25
}

impl TheorySection {
    pub fn scaling_config(&self, seeds: &[u64], orders: &[usize], parallel: bool) -> ScalingConfig {
        ScalingConfig {
            widths: self.widths.clone(),
            orders: orders.to_vec(),
            seeds: seeds.to_vec(),
            n: self.n,
            d: self.d,
            n_test: self.n_test,
            activation: self.activation,
            eta0: self.eta0,
            h: self.h,
            record_every: self.record_every,
            t0: self.t0,
            max_t0: self.max_t0,
            horizon_scale: self.horizon_scale,
            lambda_gate: self.lambda_gate,
            data_seed: self.data_seed,
            parallel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameterization: Option<InitScheme>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<Rate>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    /// Hidden widths (MLP) or channel counts (CNN) for `ablation-width`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub widths: Vec<usize>,
    /// Setting overrides for `ablation-lr-param`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub variants: Vec<Variant>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub experiment: ExperimentKind,
    pub seeds: Vec<u64>,
    pub orders: Vec<usize>,
    #[serde(default = "yes")]
    pub parallel: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<Architecture>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theory: Option<TheorySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationSection>,
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn architecture(&self) -> Result<&Architecture> {
        self.architecture
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} needs an [architecture] table", self.experiment)))
    }

    pub fn dataset(&self) -> Result<&DatasetSpec> {
        self.dataset
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} needs a [dataset] table", self.experiment)))
    }

    pub fn training(&self) -> Result<&TrainingSection> {
        self.training
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} needs a [training] table", self.experiment)))
    }

    pub fn theory(&self) -> Result<&TheorySection> {
        self.theory
            .as_ref()
            .ok_or_else(|| Error::Config("theory-scaling needs a [theory] table".into()))
    }

    /// Effective optimizer settings for the configured dataset size.
    pub fn optimizer(&self) -> Result<OptimizerConfig> {
        self.training()?.resolve(self.dataset()?.n_train)
    }

    /// Checks everything that can be checked without computing. Relative IDX
    /// paths resolve against `base`.
    pub fn validate(&self, base: &Path) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("name must be a plain non-empty string, got {:?}", self.name)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds given".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.orders.is_empty() {
            return Err(Error::Config("no Taylor orders given".into()));
        }
        if self.orders.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("orders must be strictly increasing".into()));
        }
        if let Some(&k) = self.orders.iter().find(|&&k| k == 0 || k > MAX_ORDER) {
            return Err(Error::Config(format!("order {k} outside 1..={MAX_ORDER}")));
        }
        match self.experiment {
            ExperimentKind::TheoryScaling => {
                let cfg = self.theory()?.scaling_config(&self.seeds, &self.orders, self.parallel);
                cfg.validate()?;
                if !(self.theory()?.band > 0.0) {
                    return Err(Error::Config("theory band must be positive".into()));
                }
            }
            kind => {
                let arch = self.architecture()?;
                arch.validate()?;
                let ds = self.dataset()?;
                ds.validate(base)?;
                self.optimizer()?;
                if arch.output_len() != ds.classes {
                    return Err(Error::Config(format!(
                        "architecture outputs {} classes but the dataset has {}",
                        arch.output_len(),
                        ds.classes
                    )));
                }
                if let (Some(dim), DataSource::SyntheticBlobs | DataSource::SyntheticSphere) = (ds.dim, ds.source) {
                    if dim != arch.input_len() {
                        return Err(Error::Config(format!(
                            "architecture expects {} inputs but the dataset has dim {dim}",
                            arch.input_len()
                        )));
                    }
                }
                let ab = self.ablation.clone().unwrap_or_default();
                match kind {
                    ExperimentKind::AblationWidth => {
                        if ab.widths.is_empty() || ab.widths.contains(&0) {
                            return Err(Error::Config("ablation-width needs positive [ablation] widths".into()));
                        }
                    }
                    ExperimentKind::AblationLrParam => {
                        if ab.variants.len() < 2 {
                            return Err(Error::Config("ablation-lr-param needs >= 2 [[ablation.variants]]".into()));
                        }
                        let mut names: Vec<&str> = ab.variants.iter().map(|v| v.name.as_str()).collect();
                        names.sort_unstable();
                        names.dedup();
                        if names.len() != ab.variants.len() || names.iter().any(|n| n.is_empty() || n.contains(['/', '\\'])) {
                            return Err(Error::Config("variant names must be distinct plain strings".into()));
                        }
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}
