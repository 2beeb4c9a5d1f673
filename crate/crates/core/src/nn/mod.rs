//! Architectures, parameters, and the full and Taylorized model evaluators.

mod activation;
pub mod serialize;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jet::Jet;
use crate::rng::{gaussian_fill, RngStream};
use crate::tape::{GradientMap, NodeId, Tape};
use crate::tensor::Tensor;

pub use activation::ActivationKind;

fn default_true() -> bool {
    true
}

fn default_kernel() -> usize {
    3
}

/// Network shape. Layers are numbered from 1; `frozen_layers` lists layers
/// whose parameters stay at their initial values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Architecture {
    /// Dense layers `dims[0] → dims[1] → … → dims[L]`.
    Mlp {
        dims: Vec<usize>,
        activation: ActivationKind,
        #[serde(default = "default_true")]
        bias: bool,
        #[serde(default)]
        frozen_layers: Vec<usize>,
    },
    /// `depth` same-padded conv layers of `channels` filters, global average
    /// pooling, then one dense classifier.
    Cnn {
        /// `[channels, height, width]` of one input image.
        input: [usize; 3],
        depth: usize,
        channels: usize,
        classes: usize,
        activation: ActivationKind,
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default = "default_true")]
        bias: bool,
        #[serde(default)]
        frozen_layers: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Dense { fan_in: usize, fan_out: usize },
    Conv { in_channels: usize, out_channels: usize, kernel: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub index: usize,
    pub kind: LayerKind,
    pub bias: bool,
    pub trainable: bool,
}

impl LayerSpec {
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Dense { fan_in, .. } => fan_in,
            LayerKind::Conv { in_channels, kernel, .. } => in_channels * kernel * kernel,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Dense { fan_in, fan_out } => vec![fan_out, fan_in],
            LayerKind::Conv { in_channels, out_channels, kernel } => {
                vec![out_channels, in_channels, kernel, kernel]
            }
        }
    }

    pub fn bias_len(&self) -> usize {
        match self.kind {
            LayerKind::Dense { fan_out, .. } => fan_out,
            LayerKind::Conv { out_channels, .. } => out_channels,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("layer{}.weight", self.index)
    }

    pub fn bias_name(&self) -> String {
        format!("layer{}.bias", self.index)
    }
}

impl Architecture {
    pub fn mlp(dims: &[usize], activation: ActivationKind) -> Self {
        Architecture::Mlp {
            dims: dims.to_vec(),
            activation,
            bias: true,
            frozen_layers: vec![],
        }
    }

    pub fn activation(&self) -> ActivationKind {
        match self {
            Architecture::Mlp { activation, .. } | Architecture::Cnn { activation, .. } => *activation,
        }
    }

    pub fn frozen_layers(&self) -> &[usize] {
        match self {
            Architecture::Mlp { frozen_layers, .. } | Architecture::Cnn { frozen_layers, .. } => {
                frozen_layers
            }
        }
    }

    pub fn with_frozen_layers(mut self, layers: &[usize]) -> Self {
        match &mut self {
            Architecture::Mlp { frozen_layers, .. } | Architecture::Cnn { frozen_layers, .. } => {
                *frozen_layers = layers.to_vec()
            }
        }
        self
    }

    pub fn with_bias(mut self, on: bool) -> Self {
        match &mut self {
            Architecture::Mlp { bias, .. } | Architecture::Cnn { bias, .. } => *bias = on,
        }
        self
    }

    /// Sets every hidden width (MLP) or the channel count (CNN).
    pub fn with_width(mut self, width: usize) -> Self {
        match &mut self {
            Architecture::Mlp { dims, .. } => {
                let n = dims.len();
                if n > 2 {
                    dims[1..n - 1].iter_mut().for_each(|d| *d = width);
                }
            }
            Architecture::Cnn { channels, .. } => *channels = width,
        }
        self
    }

    pub fn input_len(&self) -> usize {
        match self {
            Architecture::Mlp { dims, .. } => dims[0],
            Architecture::Cnn { input, .. } => input.iter().product(),
        }
    }

    pub fn output_len(&self) -> usize {
        match self {
            Architecture::Mlp { dims, .. } => *dims.last().unwrap_or(&0),
            Architecture::Cnn { classes, .. } => *classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::Mlp { dims, .. } => {
                if dims.len() < 2 || dims.contains(&0) {
                    return Err(Error::Config(format!(
                        "mlp dims must list at least two positive sizes, got {dims:?}"
                    )));
                }
            }
            Architecture::Cnn { input, depth, channels, classes, kernel, .. } => {
                if input.contains(&0) || *depth == 0 || *channels == 0 || *classes == 0 {
                    return Err(Error::Config("cnn sizes must be positive".into()));
                }
                if kernel % 2 == 0 {
                    return Err(Error::Config(format!("cnn kernel must be odd, got {kernel}")));
                }
            }
        }
        let n = self.layers_unchecked().len();
        if let Some(bad) = self.frozen_layers().iter().find(|&&l| l == 0 || l > n) {
            return Err(Error::Config(format!(
                "frozen layer {bad} does not exist (layers are 1..={n})"
            )));
        }
        Ok(())
    }

    fn layers_unchecked(&self) -> Vec<LayerSpec> {
        let frozen = self.frozen_layers();
        let mk = |index: usize, kind: LayerKind, bias: bool| LayerSpec {
            index,
            kind,
            bias,
            trainable: !frozen.contains(&index),
        };
        match self {
            Architecture::Mlp { dims, bias, .. } => dims
                .windows(2)
                .enumerate()
                .map(|(i, w)| mk(i + 1, LayerKind::Dense { fan_in: w[0], fan_out: w[1] }, *bias))
                .collect(),
            Architecture::Cnn { input, depth, channels, classes, kernel, bias, .. } => {
                let mut layers: Vec<LayerSpec> = (0..*depth)
                    .map(|i| {
                        let cin = if i == 0 { input[0] } else { *channels };
                        mk(
                            i + 1,
                            LayerKind::Conv { in_channels: cin, out_channels: *channels, kernel: *kernel },
                            *bias,
                        )
                    })
                    .collect();
                layers.push(mk(
                    depth + 1,
                    LayerKind::Dense { fan_in: *channels, fan_out: *classes },
                    *bias,
                ));
                layers
            }
        }
    }

    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        self.validate()?;
        Ok(self.layers_unchecked())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    Standard,
    Ntk,
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitScheme::Standard => "standard",
            InitScheme::Ntk => "ntk",
        })
    }
}

impl FromStr for InitScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "standard" => Ok(InitScheme::Standard),
            "ntk" => Ok(InitScheme::Ntk),
            other => Err(Error::Config(format!("unknown init scheme {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Weight,
    Bias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub layer: usize,
    pub role: ParamRole,
    pub trainable: bool,
    pub theta: Tensor,
    pub anchor: Tensor,
}

/// Live parameters `θ` with their frozen initial copy `θ0`, in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    scheme: InitScheme,
    seed: u64,
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn from_entries(scheme: InitScheme, seed: u64, entries: Vec<ParamEntry>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if e.theta.shape() != e.anchor.shape() {
                return Err(Error::shape("param_set", e.theta.shape(), e.anchor.shape()));
            }
            if entries[..i].iter().any(|o| o.name == e.name) {
                return Err(Error::InvalidArgument(format!("duplicate parameter {:?}", e.name)));
            }
        }
        Ok(Self { scheme, seed, entries })
    }

    pub fn scheme(&self) -> InitScheme {
        self.scheme
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry> {
        self.entries
            .iter_mut()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name:?}")))
    }

    pub fn theta(&self, name: &str) -> Option<&Tensor> {
        self.get(name).map(|e| &e.theta)
    }

    pub fn anchor(&self, name: &str) -> Option<&Tensor> {
        self.get(name).map(|e| &e.anchor)
    }

    pub fn set_theta(&mut self, name: &str, value: Tensor) -> Result<()> {
        let e = self.get_mut(name)?;
        if e.theta.shape() != value.shape() {
            return Err(Error::shape("set_theta", e.theta.shape(), value.shape()));
        }
        e.theta = value;
        Ok(())
    }

    /// Mutable access to the live values of one parameter.
    pub fn theta_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        Ok(self.get_mut(name)?.theta.data_mut())
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.name.clone()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|e| e.theta.len()).sum()
    }

    /// All live values concatenated in entry order.
    pub fn theta_flat(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.theta.data().iter().copied()).collect()
    }

    pub fn anchor_flat(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.anchor.data().iter().copied()).collect()
    }

    pub fn set_theta_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape("set_theta_flat", &[self.num_params()], &[flat.len()]));
        }
        let mut off = 0;
        for e in &mut self.entries {
            let n = e.theta.len();
            e.theta.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Resets the live values to the anchor.
    pub fn reset_to_anchor(&mut self) {
        for e in &mut self.entries {
            e.theta = e.anchor.clone();
        }
    }

    /// Makes the current live values the new anchor.
    pub fn reanchor(&mut self) {
        for e in &mut self.entries {
            e.anchor = e.theta.clone();
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.theta.is_finite())
    }
}

/// Per-parameter random streams, so the draws of one tensor do not depend on
/// the scheme or on the sizes of other layers.
fn param_stream(seed: u64, layer: usize, role: ParamRole) -> RngStream {
    let r = match role {
        ParamRole::Weight => 0,
        ParamRole::Bias => 1,
    };
    RngStream::new(seed, 2 * layer as u64 + r)
}

/// Standard: `W ~ N(0, 1/fan_in)`. NTK: `W ~ N(0, 1)` with the `1/√fan_in`
/// factor applied in the forward pass. Biases are `N(0, 1)` in both. Both
/// schemes use the same underlying normal draws for a given seed.
pub fn init_params(arch: &Architecture, scheme: InitScheme, seed: u64) -> Result<ParamSet> {
    let mut entries = Vec::new();
    for layer in arch.layers()? {
        let std = match scheme {
            InitScheme::Standard => 1.0 / (layer.fan_in() as f64).sqrt(),
            InitScheme::Ntk => 1.0,
        };
        let w = gaussian_fill(&layer.weight_shape(), std, &param_stream(seed, layer.index, ParamRole::Weight))?;
        entries.push(ParamEntry {
            name: layer.weight_name(),
            layer: layer.index,
            role: ParamRole::Weight,
            trainable: layer.trainable,
            theta: w.clone(),
            anchor: w,
        });
        if layer.bias {
            let b = gaussian_fill(&[layer.bias_len()], 1.0, &param_stream(seed, layer.index, ParamRole::Bias))?;
            entries.push(ParamEntry {
                name: layer.bias_name(),
                layer: layer.index,
                role: ParamRole::Bias,
                trainable: layer.trainable,
                theta: b.clone(),
                anchor: b,
            });
        }
    }
    ParamSet::from_entries(scheme, seed, entries)
}

/// Which model a parameter set is evaluated as.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    Full,
    /// Order-`k` Taylor expansion around the anchor.
    Taylor(usize),
}

impl ModelKind {
    pub fn order(&self) -> usize {
        match self {
            ModelKind::Full => 0,
            ModelKind::Taylor(k) => *k,
        }
    }

    pub fn tag(&self) -> String {
        match self {
            ModelKind::Full => "full".into(),
            ModelKind::Taylor(k) => format!("k{k}"),
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        if tag == "full" {
            return Ok(ModelKind::Full);
        }
        tag.strip_prefix('k')
            .and_then(|k| k.parse().ok())
            .filter(|k| (1..=crate::jet::MAX_ORDER).contains(k))
            .map(ModelKind::Taylor)
            .ok_or_else(|| Error::Config(format!("unknown model tag {tag:?}")))
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

/// Records the network on `tape` and returns the `[N × C_out]` output node.
/// Order 0 is the plain network; order `k >= 1` is the order-`k` Taylor jet.
pub fn record_forward(
    tape: &mut Tape,
    arch: &Architecture,
    params: &ParamSet,
    x: &Tensor,
    order: usize,
) -> Result<NodeId> {
    let layers = arch.layers()?;
    let (n, feat) = x.dims2()?;
    if feat != arch.input_len() {
        return Err(Error::shape("forward", &[n, arch.input_len()], x.shape()));
    }
    let act: crate::tape::ElementaryFn = Arc::new(arch.activation());
    let mut h = match arch {
        Architecture::Mlp { .. } => tape.constant(x, order)?,
        Architecture::Cnn { input, .. } => {
            tape.constant(&x.reshape(&[n, input[0], input[1], input[2]])?, order)?
        }
    };
    let last = layers.len();
    for layer in &layers {
        let leaf = |tape: &mut Tape, name: String| -> Result<NodeId> {
            let e = params
                .get(&name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name:?}")))?;
            if layer.trainable {
                tape.param(&name, &e.theta, &e.anchor, order)
            } else {
                tape.constant(&e.theta, order)
            }
        };
        if matches!(layer.kind, LayerKind::Dense { .. }) && tape.value(h).shape().len() == 4 {
            h = tape.global_avg_pool(h)?;
        }
        let w = leaf(tape, layer.weight_name())?;
        h = match layer.kind {
            LayerKind::Dense { .. } => tape.matmul_tb(h, w)?,
            LayerKind::Conv { .. } => tape.conv2d(h, w)?,
        };
        if params.scheme() == InitScheme::Ntk {
            h = tape.scale(h, 1.0 / (layer.fan_in() as f64).sqrt())?;
        }
        if layer.bias {
            let b = leaf(tape, layer.bias_name())?;
            h = tape.add_bias(h, b)?;
        }
        if layer.index != last {
            h = tape.activation(h, act.clone())?;
        }
    }
    Ok(h)
}

/// The order-`k` output jet: coefficient `j` is the `j`-th Taylor term of
/// `r ↦ f_{θ0 + r(θ-θ0)}(x)`.
pub fn output_jet(arch: &Architecture, params: &ParamSet, x: &Tensor, k: usize) -> Result<Jet> {
    let mut tape = Tape::new();
    let out = record_forward(&mut tape, arch, params, x, k)?;
    Ok(tape.value(out).clone())
}

/// `f_θ(x)`
pub fn forward_full(arch: &Architecture, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let out = record_forward(&mut tape, arch, params, x, 0)?;
    Ok(tape.value(out).coeff(0).clone())
}

/// `f^(k)_{θ;θ0}(x)`, the order-`k` Taylor polynomial around the anchor
/// evaluated at the live parameters.
pub fn forward_taylorized(arch: &Architecture, params: &ParamSet, x: &Tensor, k: usize) -> Result<Tensor> {
    if k == 0 || k > crate::jet::MAX_ORDER {
        return Err(Error::InvalidArgument(format!(
            "Taylor order must be in 1..={}, got {k}",
            crate::jet::MAX_ORDER
        )));
    }
    let mut tape = Tape::new();
    let out = record_forward(&mut tape, arch, params, x, k)?;
    Ok(tape.value(out).eval_sum())
}

pub fn forward_model(arch: &Architecture, params: &ParamSet, x: &Tensor, model: ModelKind) -> Result<Tensor> {
    match model {
        ModelKind::Full => forward_full(arch, params, x),
        ModelKind::Taylor(k) => forward_taylorized(arch, params, x, k),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    /// `½‖f - onehot(y)‖²` per example.
    Squared,
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        t.data_mut()[i * classes + y] = 1.0;
    }
    Ok(t)
}

fn record_loss(tape: &mut Tape, out: NodeId, labels: &[usize], loss: LossKind) -> Result<NodeId> {
    let out = if tape.value(out).order() > 0 { tape.eval_sum(out)? } else { out };
    match loss {
        LossKind::CrossEntropy => tape.cross_entropy(out, labels),
        LossKind::Squared => {
            let classes = tape.value(out).shape()[1];
            tape.squared_error(out, &one_hot(labels, classes)?)
        }
    }
}

/// Mean loss of a batch of logits. Errors on non-finite logits.
pub fn loss_eval(kind: LossKind, logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if !logits.is_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    let mut tape = Tape::new();
    let z = tape.constant(logits, 0)?;
    let l = record_loss(&mut tape, z, labels, kind)?;
    Ok(tape.value(l).coeff(0).data()[0])
}

/// Loss and gradient over the trainable parameters for one batch.
pub fn loss_and_grad(
    arch: &Architecture,
    params: &ParamSet,
    model: ModelKind,
    x: &Tensor,
    labels: &[usize],
    loss: LossKind,
) -> Result<(f64, GradientMap)> {
    let mut tape = Tape::new();
    let out = record_forward(&mut tape, arch, params, x, model.order())?;
    let l = record_loss(&mut tape, out, labels, loss)?;
    let value = tape.value(l).coeff(0).data()[0];
    let grads = tape.backward(l)?;
    Ok((value, grads))
}

/// Compares `analytic` with finite differences of `loss` over a random sample
/// of coordinates and returns the largest
/// `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)`.
///
/// The numeric derivative is a central difference at `step` refined by one
/// Richardson step with `step/2`, which removes the `O(step²)` term.
pub fn grad_check(
    loss: impl Fn(&ParamSet) -> Result<f64>,
    params: &ParamSet,
    analytic: &GradientMap,
    step: f64,
    samples: usize,
    rng: &RngStream,
) -> Result<f64> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("grad_check step must be positive, got {step}")));
    }
    let mut coords: Vec<(String, usize)> = analytic
        .iter()
        .flat_map(|(name, g)| (0..g.len()).map(move |i| (name.clone(), i)))
        .collect();
    if samples < coords.len() {
        let perm = rng.permutation(coords.len());
        coords = perm[..samples].iter().map(|&i| coords[i].clone()).collect();
    }
    let mut work = params.clone();
    let mut eval = |name: &str, i: usize, h: f64| -> Result<f64> {
        let orig = work.theta(name).expect("name from gradient map").data()[i];
        work.theta_mut(name)?[i] = orig + h;
        let up = loss(&work)?;
        work.theta_mut(name)?[i] = orig - h;
        let down = loss(&work)?;
        work.theta_mut(name)?[i] = orig;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite("loss during finite differencing".into()));
        }
        Ok((up - down) / (2.0 * h))
    };
    let mut worst: f64 = 0.0;
    for (name, i) in coords {
        let d1 = eval(&name, i, step)?;
        let d2 = eval(&name, i, step / 2.0)?;
        let numeric = (4.0 * d2 - d1) / 3.0;
        let a = analytic.get(&name).expect("present").data()[i];
        worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12));
    }
    Ok(worst)
}

/// Named view of the trainable live values, used by checkpoint metadata and
/// the bindings.
pub fn trainable_tensors(params: &ParamSet) -> BTreeMap<String, Tensor> {
    params
        .entries()
        .iter()
        .filter(|e| e.trainable)
        .map(|e| (e.name.clone(), e.theta.clone()))
        .collect()
}
