//! Minibatch SGD with step schedules and clipping, and the paired runner that
//! trains the full network and its Taylorizations side by side.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::demean_logits;
use crate::nn::{self, init_params, Architecture, InitScheme, LossKind, ModelKind, ParamSet};
use crate::rng::RngStream;
use crate::tape::GradientMap;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub rate: f64,
    /// `(step, multiplier)`: from `step` on, the rate is multiplied by
    /// `multiplier` (cumulatively).
    pub schedule: Vec<(usize, f64)>,
    pub clip: Option<f64>,
    pub batch_size: usize,
    pub total_steps: usize,
    pub loss: LossKind,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate >= 0.0 && self.rate.is_finite()) {
            return Err(Error::Config(format!("rate must be finite and >= 0, got {}", self.rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        for w in self.schedule.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config("schedule steps must be strictly increasing".into()));
            }
        }
        if let Some(&(_, m)) = self.schedule.iter().find(|(_, m)| !(*m > 0.0 && *m <= 1.0)) {
            return Err(Error::Config(format!("schedule multipliers must be in (0, 1], got {m}")));
        }
        Ok(())
    }
}

/// Learning rate in effect for the update taken at `step`.
pub fn lr_at(cfg: &OptimizerConfig, step: usize) -> f64 {
    cfg.schedule
        .iter()
        .filter(|(s, _)| *s <= step)
        .fold(cfg.rate, |lr, (_, m)| lr * m)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub clipped: bool,
}

/// `θ ← θ − η·g`, with `g` rescaled to norm `clip` first when its global
/// norm exceeds `clip`.
pub fn sgd_step(params: &mut ParamSet, grads: &GradientMap, lr: f64, clip: Option<f64>) -> Result<StepInfo> {
    if !grads.is_finite() {
        let bad: Vec<&str> = grads
            .iter()
            .filter(|(_, g)| !g.is_finite())
            .map(|(n, _)| n.as_str())
            .collect();
        return Err(Error::NonFinite(format!("gradient of {}", bad.join(", "))));
    }
    let grad_norm = grads.global_norm();
    let (scale, clipped) = match clip {
        Some(c) if grad_norm > c => (c / grad_norm, true),
        _ => (1.0, false),
    };
    for (name, g) in grads.iter() {
        let theta = params.theta_mut(name)?;
        if clipped {
            for (t, &gv) in theta.iter_mut().zip(g.data()) {
                *t -= lr * (scale * gv);
            }
        } else {
            for (t, &gv) in theta.iter_mut().zip(g.data()) {
                *t -= lr * gv;
            }
        }
    }
    Ok(StepInfo { grad_norm, clipped })
}

/// Epoch-wise shuffled minibatches. Each epoch uses its own permutation
/// stream, and the last partial batch of an epoch is kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MinibatchStream {
    pub n: usize,
    pub batch_size: usize,
    pub seed: u64,
}

const DATA_STREAM: u64 = 1 << 50;

impl MinibatchStream {
    pub fn steps_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    /// Index sequence of the first `steps` batches.
    pub fn batches(&self, steps: usize) -> Vec<Vec<usize>> {
        let spe = self.steps_per_epoch();
        let mut out = Vec::with_capacity(steps);
        let mut perm = Vec::new();
        for s in 0..steps {
            let (epoch, b) = (s / spe, s % spe);
            if b == 0 {
                perm = RngStream::new(self.seed, DATA_STREAM + epoch as u64).permutation(self.n);
            }
            let lo = b * self.batch_size;
            out.push(perm[lo..(lo + self.batch_size).min(self.n)].to_vec());
        }
        out
    }
}

pub fn epochs_to_steps(epochs: f64, n_train: usize, batch_size: usize) -> usize {
    (epochs * n_train.div_ceil(batch_size) as f64).round() as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedRunSpec {
    pub arch: Architecture,
    pub scheme: InitScheme,
    pub orders: Vec<usize>,
    pub optimizer: OptimizerConfig,
    pub init_seed: u64,
    pub data_seed: u64,
    /// Checkpoint spacing in steps; `None` uses `total_steps / 100`.
    pub checkpoint_every: Option<usize>,
    /// Number of training examples used for the recorded train loss.
    pub train_eval_limit: Option<usize>,
    /// Train the models concurrently on the current rayon pool.
    pub parallel: bool,
}

impl PairedRunSpec {
    pub fn models(&self) -> Vec<ModelKind> {
        std::iter::once(ModelKind::Full)
            .chain(self.orders.iter().map(|&k| ModelKind::Taylor(k)))
            .collect()
    }

    /// Sorted checkpoint steps: the cadence, the final step, and the steps
    /// right at and after each rate change.
    pub fn checkpoint_steps(&self) -> Vec<usize> {
        let total = self.optimizer.total_steps;
        let every = self.checkpoint_every.unwrap_or((total / 100).max(1)).max(1);
        let mut steps: Vec<usize> = (0..=total).step_by(every).collect();
        steps.push(total);
        for &(s, _) in &self.optimizer.schedule {
            steps.extend([s, s + 1].into_iter().filter(|&v| v <= total));
        }
        steps.sort_unstable();
        steps.dedup();
        steps
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub theta: Vec<f64>,
    pub train_loss: f64,
    pub test_acc: f64,
    /// Test logits with the per-example mean removed.
    pub test_logits: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub model: ModelKind,
    pub checkpoints: Vec<Checkpoint>,
    /// First step whose loss or gradient was non-finite. Later checkpoints
    /// repeat the last finite one.
    pub diverged_at: Option<usize>,
}

impl TrajectoryRecord {
    pub fn last(&self) -> &Checkpoint {
        self.checkpoints.last().expect("at least the step-0 checkpoint")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedRun {
    /// Shared initialization (`θ == θ0`).
    pub init: ParamSet,
    pub steps: Vec<usize>,
    pub records: Vec<TrajectoryRecord>,
}

impl PairedRun {
    pub fn theta0(&self) -> Vec<f64> {
        self.init.anchor_flat()
    }

    pub fn record(&self, model: ModelKind) -> Option<&TrajectoryRecord> {
        self.records.iter().find(|r| r.model == model)
    }

    /// Parameters of `model` at checkpoint index `i`, anchored at `θ0`.
    pub fn params_at(&self, model: ModelKind, i: usize) -> Result<ParamSet> {
        let rec = self
            .record(model)
            .ok_or_else(|| Error::InvalidArgument(format!("no record for {model}")))?;
        let mut p = self.init.clone();
        p.set_theta_flat(&rec.checkpoints[i].theta)?;
        Ok(p)
    }

    pub fn all_diverged(&self) -> bool {
        self.records.iter().all(|r| r.diverged_at.is_some())
    }
}

fn rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (_, d) = x.dims2()?;
    let data = idx.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
    Tensor::new(vec![idx.len(), d], data)
}

const EVAL_CHUNK: usize = 512;

fn eval_logits(arch: &Architecture, params: &ParamSet, model: ModelKind, x: &Tensor) -> Result<Tensor> {
    let (n, _) = x.dims2()?;
    let mut data = Vec::new();
    let mut classes = arch.output_len();
    for lo in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (lo..(lo + EVAL_CHUNK).min(n)).collect();
        let out = nn::forward_model(arch, params, &rows(x, &idx)?, model)?;
        classes = out.shape()[1];
        data.extend(out.into_data());
    }
    Tensor::new(vec![n, classes], data)
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, c) = logits.dims2()?;
    if n == 0 {
        return Ok(0.0);
    }
    let correct = (0..n)
        .filter(|&r| {
            let row = logits.row(r);
            let best = (0..c).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == labels[r]
        })
        .count();
    Ok(correct as f64 / n as f64)
}

struct Evaluator<'a> {
    arch: &'a Architecture,
    data: &'a Dataset,
    train_x: Tensor,
    train_y: Vec<usize>,
    loss: LossKind,
}

impl Evaluator<'_> {
    fn checkpoint(&self, params: &ParamSet, model: ModelKind, step: usize) -> Result<Checkpoint> {
        let train_logits = eval_logits(self.arch, params, model, &self.train_x)?;
        let train_loss = if train_logits.is_finite() {
            nn::loss_eval(self.loss, &train_logits, &self.train_y)?
        } else {
            f64::NAN
        };
        let test = eval_logits(self.arch, params, model, &self.data.x_test)?;
        Ok(Checkpoint {
            step,
            theta: params.theta_flat(),
            train_loss,
            test_acc: accuracy(&test, &self.data.y_test)?,
            test_logits: demean_logits(&test)?,
        })
    }
}

fn train_one(
    spec: &PairedRunSpec,
    init: &ParamSet,
    model: ModelKind,
    data: &Dataset,
    batches: &[Vec<usize>],
    ckpt_steps: &[usize],
    eval: &Evaluator<'_>,
) -> Result<TrajectoryRecord> {
    let cfg = &spec.optimizer;
    let mut params = init.clone();
    let mut checkpoints = Vec::with_capacity(ckpt_steps.len());
    let mut next = 0;
    let mut diverged_at = None;
    for step in 0..=cfg.total_steps {
        if next < ckpt_steps.len() && ckpt_steps[next] == step {
            let ck = eval.checkpoint(&params, model, step)?;
            if !ck.train_loss.is_finite() || !ck.test_logits.is_finite() {
                diverged_at = Some(step);
                break;
            }
            checkpoints.push(ck);
            next += 1;
        }
        if step == cfg.total_steps {
            break;
        }
        let x = rows(&data.x_train, &batches[step])?;
        let y: Vec<usize> = batches[step].iter().map(|&i| data.y_train[i]).collect();
        let (loss, grads) = nn::loss_and_grad(&spec.arch, &params, model, &x, &y, cfg.loss)?;
        if !loss.is_finite() || !grads.is_finite() {
            diverged_at = Some(step);
            break;
        }
        sgd_step(&mut params, &grads, lr_at(cfg, step), cfg.clip)?;
        if !params.is_finite() {
            diverged_at = Some(step + 1);
            break;
        }
    }
    if diverged_at.is_some() {
        let frozen = checkpoints.last().cloned().ok_or_else(|| {
            Error::NonFinite(format!("{model} is non-finite at initialization"))
        })?;
        for &s in &ckpt_steps[checkpoints.len()..] {
            checkpoints.push(Checkpoint { step: s, ..frozen.clone() });
        }
    }
    Ok(TrajectoryRecord { model, checkpoints, diverged_at })
}

/// Trains the full model and one Taylorized model per order from one shared
/// initialization, minibatch sequence, and rate schedule.
pub fn paired_run(spec: &PairedRunSpec, data: &Dataset) -> Result<PairedRun> {
    spec.optimizer.validate()?;
    data.validate()?;
    if data.features() != spec.arch.input_len() {
        return Err(Error::Dataset(format!(
            "dataset has {} features but the architecture expects {}",
            data.features(),
            spec.arch.input_len()
        )));
    }
    if data.classes != spec.arch.output_len() {
        return Err(Error::Dataset(format!(
            "dataset has {} classes but the architecture outputs {}",
            data.classes,
            spec.arch.output_len()
        )));
    }
    if let Some(&k) = spec.orders.iter().find(|&&k| k == 0 || k > crate::jet::MAX_ORDER) {
        return Err(Error::Config(format!("order {k} outside 1..={}", crate::jet::MAX_ORDER)));
    }
    let init = init_params(&spec.arch, spec.scheme, spec.init_seed)?;
    let stream = MinibatchStream {
        n: data.n_train(),
        batch_size: spec.optimizer.batch_size,
        seed: spec.data_seed,
    };
    let batches = stream.batches(spec.optimizer.total_steps);
    let steps = spec.checkpoint_steps();
    let limit = spec.train_eval_limit.unwrap_or(data.n_train()).min(data.n_train());
    let idx: Vec<usize> = (0..limit).collect();
    let eval = Evaluator {
        arch: &spec.arch,
        data,
        train_x: rows(&data.x_train, &idx)?,
        train_y: data.y_train[..limit].to_vec(),
        loss: spec.optimizer.loss,
    };
    let models = spec.models();
    let run = |m: &ModelKind| train_one(spec, &init, *m, data, &batches, &steps, &eval);
    let records: Vec<TrajectoryRecord> = if spec.parallel {
        models.par_iter().map(run).collect::<Result<_>>()?
    } else {
        models.iter().map(run).collect::<Result<_>>()?
    };
    Ok(PairedRun { init, steps, records })
}
