//! Wide two-layer networks under gradient flow.
//!
//! `f_W(x) = m^{-1/2} Σ_r a_r σ(w_rᵀx)` with a frozen ±1 output layer, its
//! analytic order-k Taylorization around `W0`, empirical NTKs, an RK4
//! integrator for `Ẇ = −η0 ∇L(W)` and the width-scaling study of the
//! coupling between the two flows.
//!
//! `W` is stored row-per-neuron (`[m × d]`, row `r` is `w_r`), the transpose
//! of the column layout used in the math.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::sphere_points;
use crate::error::{Error, Result};
use crate::jet::{Elementary, MAX_ORDER};
use crate::nn::{ActivationKind, ModelKind};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Inputs must have unit norm to this tolerance.
pub const UNIT_NORM_TOL: f64 = 1e-10;
/// Largest dataset accepted by [`empirical_ntk`].
pub const NTK_MAX_POINTS: usize = 2048;

#[derive(Clone, Debug, PartialEq)]
pub struct TwoLayerNet {
    m: usize,
    d: usize,
    w0: Vec<f64>,
    a: Vec<f64>,
    activation: ActivationKind,
}

fn check_smooth(act: ActivationKind) -> Result<()> {
    if matches!(act, ActivationKind::Relu) {
        return Err(Error::InvalidArgument(
            "two-layer theory needs a smooth activation; relu has no usable higher derivatives".into(),
        ));
    }
    Ok(())
}

impl TwoLayerNet {
    /// `w_{r,0} ~ N(0, I_d)`, `a_r ~ Unif{±1}`.
    pub fn init(m: usize, d: usize, activation: ActivationKind, seed: u64) -> Result<Self> {
        let w0 = RngStream::new(seed, 0).normal_vec(m * d);
        let a = RngStream::new(seed, 1)
            .uniform_vec(m, 0.0, 1.0)
            .into_iter()
            .map(|u| if u < 0.5 { -1.0 } else { 1.0 })
            .collect();
        Self::from_parts(w0, a, d, activation)
    }

    pub fn from_parts(w0: Vec<f64>, a: Vec<f64>, d: usize, activation: ActivationKind) -> Result<Self> {
        check_smooth(activation)?;
        let m = a.len();
        if m == 0 || d == 0 || w0.len() != m * d {
            return Err(Error::shape("TwoLayerNet", &[w0.len()], &[m, d]));
        }
        if a.iter().any(|&v| v != 1.0 && v != -1.0) {
            return Err(Error::InvalidArgument("output weights must be +1 or -1".into()));
        }
        Ok(TwoLayerNet { m, d, w0, a, activation })
    }

    pub fn width(&self) -> usize {
        self.m
    }

    pub fn input_dim(&self) -> usize {
        self.d
    }

    pub fn activation(&self) -> ActivationKind {
        self.activation
    }

    /// The anchor `W0` as `[m × d]`.
    pub fn w0(&self) -> &[f64] {
        &self.w0
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn with_negated_output(&self) -> Self {
        let mut out = self.clone();
        out.a.iter_mut().for_each(|v| *v = -*v);
        out
    }

    fn check_w(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.m * self.d {
            return Err(Error::shape("two-layer weights", &[w.len()], &[self.m, self.d]));
        }
        Ok(())
    }
}

pub fn check_unit_norm(x: &[f64]) -> Result<()> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::InvalidArgument(format!("input must have unit norm, got {n}")));
    }
    Ok(())
}

fn check_rows_unit_norm(x: &Tensor, d: usize) -> Result<usize> {
    let (n, dx) = x.dims2()?;
    if dx != d {
        return Err(Error::shape("two-layer inputs", x.shape(), &[n, d]));
    }
    for i in 0..n {
        check_unit_norm(x.row(i))?;
    }
    Ok(n)
}

fn check_order(k: usize) -> Result<()> {
    if k == 0 || k > MAX_ORDER {
        return Err(Error::InvalidArgument(format!("Taylor order must be in 1..={MAX_ORDER}, got {k}")));
    }
    Ok(())
}

/// `m^{-1/2} Σ_r a_r σ(w_rᵀx)`.
pub fn two_layer_forward(net: &TwoLayerNet, w: &[f64], x: &[f64]) -> Result<f64> {
    net.check_w(w)?;
    if x.len() != net.d {
        return Err(Error::shape("two_layer_forward", &[x.len()], &[net.d]));
    }
    check_unit_norm(x)?;
    let s: f64 = w
        .chunks(net.d)
        .zip(&net.a)
        .map(|(wr, a)| a * net.activation.value(dot(wr, x)))
        .sum();
    Ok(s / (net.m as f64).sqrt())
}

/// Order-k Taylorized output, computed from the derivatives of σ at
/// `w_{r,0}ᵀx`.
pub fn taylorized_two_layer_forward(net: &TwoLayerNet, k: usize, w: &[f64], x: &[f64]) -> Result<f64> {
    check_order(k)?;
    net.check_w(w)?;
    if x.len() != net.d {
        return Err(Error::shape("taylorized_two_layer_forward", &[x.len()], &[net.d]));
    }
    check_unit_norm(x)?;
    let mut c = vec![0.0; k + 1];
    let mut s = 0.0;
    for ((wr, w0r), a) in w.chunks(net.d).zip(net.w0.chunks(net.d)).zip(&net.a) {
        let z0 = dot(w0r, x);
        net.activation.taylor_coeffs(z0, &mut c);
        s += a * horner(&c, dot(wr, x) - z0);
    }
    Ok(s / (net.m as f64).sqrt())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn horner(c: &[f64], delta: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &cj| acc * delta + cj)
}

fn horner_derivative(c: &[f64], delta: f64) -> f64 {
    c.iter()
        .enumerate()
        .skip(1)
        .rev()
        .fold(0.0, |acc, (j, &cj)| acc * delta + j as f64 * cj)
}

/// Evaluates one model (full or Taylorized) on a fixed set of inputs.
struct Evaluator<'a> {
    net: &'a TwoLayerNet,
    x: &'a Tensor,
    n: usize,
    model: ModelKind,
    /// For Taylorized models: `z0[i*m + r]` and series coefficients.
    z0: Vec<f64>,
    coeffs: Vec<f64>,
}

impl<'a> Evaluator<'a> {
    fn new(net: &'a TwoLayerNet, model: ModelKind, x: &'a Tensor) -> Result<Self> {
        let n = check_rows_unit_norm(x, net.d)?;
        let mut ev = Evaluator { net, x, n, model, z0: Vec::new(), coeffs: Vec::new() };
        if let ModelKind::Taylor(k) = model {
            check_order(k)?;
            ev.z0 = ev.preactivations(&net.w0);
            ev.coeffs = vec![0.0; ev.z0.len() * (k + 1)];
            for (z, c) in ev.z0.iter().zip(ev.coeffs.chunks_mut(k + 1)) {
                net.activation.taylor_coeffs(*z, c);
            }
        }
        Ok(ev)
    }

    fn preactivations(&self, w: &[f64]) -> Vec<f64> {
        let (m, d) = (self.net.m, self.net.d);
        let mut z = vec![0.0; self.n * m];
        for i in 0..self.n {
            let xi = self.x.row(i);
            for (r, wr) in w.chunks(d).enumerate() {
                z[i * m + r] = dot(wr, xi);
            }
        }
        z
    }

    /// Outputs `f_i` and slopes `φ'_{r,i}(z_{ri})`.
    fn outputs_and_slopes(&self, w: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m = self.net.m;
        let z = self.preactivations(w);
        let mut slopes = vec![0.0; z.len()];
        let mut f = vec![0.0; self.n];
        let scale = 1.0 / (m as f64).sqrt();
        for i in 0..self.n {
            let mut s = 0.0;
            for r in 0..m {
                let idx = i * m + r;
                let (v, dv) = match self.model {
                    ModelKind::Full => {
                        (self.net.activation.value(z[idx]), self.net.activation.derivative(z[idx]))
                    }
                    ModelKind::Taylor(k) => {
                        let c = &self.coeffs[idx * (k + 1)..(idx + 1) * (k + 1)];
                        let delta = z[idx] - self.z0[idx];
                        (horner(c, delta), horner_derivative(c, delta))
                    }
                };
                s += self.net.a[r] * v;
                slopes[idx] = dv;
            }
            f[i] = s * scale;
        }
        (f, slopes)
    }

    fn outputs(&self, w: &[f64]) -> Vec<f64> {
        self.outputs_and_slopes(w).0
    }

    /// `∇L` for `L = (1/2n) Σ (f_i − y_i)²`, plus the residual `g = f − y`.
    fn loss_grad(&self, w: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (m, d) = (self.net.m, self.net.d);
        let (f, slopes) = self.outputs_and_slopes(w);
        let g: Vec<f64> = f.iter().zip(y).map(|(a, b)| a - b).collect();
        let scale = 1.0 / (self.n as f64 * (m as f64).sqrt());
        let mut grad = vec![0.0; m * d];
        for (r, gr) in grad.chunks_mut(d).enumerate() {
            let ar = self.net.a[r] * scale;
            for i in 0..self.n {
                let c = ar * g[i] * slopes[i * m + r];
                if c != 0.0 {
                    gr.iter_mut().zip(self.x.row(i)).for_each(|(o, xv)| *o += c * xv);
                }
            }
        }
        (grad, g)
    }

    /// Explicit `J` with rows `∇_W f(x_i)` flattened row-per-neuron.
    fn jacobian(&self, w: &[f64]) -> DMatrix<f64> {
        let (m, d) = (self.net.m, self.net.d);
        let (_, slopes) = self.outputs_and_slopes(w);
        let scale = 1.0 / (m as f64).sqrt();
        let mut j = DMatrix::zeros(self.n, m * d);
        for i in 0..self.n {
            let xi = self.x.row(i);
            for r in 0..m {
                let c = scale * self.net.a[r] * slopes[i * m + r];
                for (q, xv) in xi.iter().enumerate() {
                    j[(i, r * d + q)] = c * xv;
                }
            }
        }
        j
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NtkMatrix {
    /// `Θ̂ = J Jᵀ`, `[n × n]`.
    pub theta: Tensor,
    pub lambda_min: f64,
    pub width: usize,
}

fn symmetric_min_eigen(mat: DMatrix<f64>) -> Result<f64> {
    if mat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigen("matrix has non-finite entries".into()));
    }
    let eig = SymmetricEigen::try_new(mat, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Eigen("symmetric eigensolver did not converge".into()))?;
    Ok(eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Empirical NTK of `model` at weights `w` on inputs `x` (`[n × d]`, unit rows).
pub fn empirical_ntk(net: &TwoLayerNet, model: ModelKind, w: &[f64], x: &Tensor) -> Result<NtkMatrix> {
    net.check_w(w)?;
    let (n, _) = x.dims2()?;
    if n > NTK_MAX_POINTS {
        return Err(Error::InvalidArgument(format!("NTK limited to {NTK_MAX_POINTS} points, got {n}")));
    }
    let ev = Evaluator::new(net, model, x)?;
    let j = ev.jacobian(w);
    let gram = &j * j.transpose();
    // Symmetrize away roundoff so the Gram structure is exact.
    let gram = (&gram + gram.transpose()) * 0.5;
    let lambda_min = symmetric_min_eigen(gram.clone())?;
    let theta = Tensor::new(vec![n, n], (0..n * n).map(|idx| gram[(idx / n, idx % n)]).collect())?;
    Ok(NtkMatrix { theta, lambda_min, width: net.m })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientFlowConfig {
    pub eta0: f64,
    pub t0: f64,
    pub h: f64,
    /// Grid spacing in integrator steps.
    #[serde(default = "default_record_every")]
    pub record_every: usize,
}

fn default_record_every() -> usize {
    10
}

impl GradientFlowConfig {
    pub fn new(eta0: f64, t0: f64, h: f64) -> Self {
        GradientFlowConfig { eta0, t0, h, record_every: default_record_every() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::Config(format!("step h must be positive, got {}", self.h)));
        }
        if !(self.t0 > 0.0 && self.t0.is_finite()) {
            return Err(Error::Config(format!("horizon t0 must be positive, got {}", self.t0)));
        }
        if !(self.eta0 >= 0.0 && self.eta0.is_finite()) {
            return Err(Error::Config(format!("eta0 must be >= 0, got {}", self.eta0)));
        }
        if self.record_every == 0 {
            return Err(Error::Config("record_every must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of RK4 steps; the last step may overshoot `t0` by less than `h`.
    pub fn num_steps(&self) -> usize {
        (self.t0 / self.h - 1e-9).ceil().max(1.0) as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowTrajectory {
    pub model: ModelKind,
    pub times: Vec<f64>,
    /// Weights at each grid time, `[m × d]` flattened.
    pub weights: Vec<Vec<f64>>,
    /// Residual `g = f − y` on the training inputs at each grid time.
    pub residuals: Vec<Vec<f64>>,
    /// `λ_min(Θ̂_0)` of this model.
    pub lambda_min0: f64,
    /// Time of the last finite state if the flow blew up.
    pub aborted_at: Option<f64>,
}

impl FlowTrajectory {
    pub fn residual_norms(&self) -> Vec<f64> {
        self.residuals.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
    }

    /// `λ_min(Θ̂_0) > 0` and the flow stayed finite.
    pub fn is_well_posed(&self) -> bool {
        self.lambda_min0 > 0.0 && self.aborted_at.is_none()
    }
}

fn rk4_integrate(
    ev: &Evaluator,
    y: &[f64],
    cfg: &GradientFlowConfig,
    mut stop: impl FnMut(&[f64]) -> bool,
) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>, Option<f64>) {
    let steps = cfg.num_steps();
    let h = cfg.h;
    let eta = cfg.eta0;
    let mut w = ev.net.w0.clone();
    let (_, g0) = ev.loss_grad(&w, y);
    let mut times = vec![0.0];
    let mut weights = vec![w.clone()];
    let mut residuals = vec![g0];
    let field = |w: &[f64]| -> Vec<f64> {
        let (grad, _) = ev.loss_grad(w, y);
        grad.into_iter().map(|v| -eta * v).collect()
    };
    let shifted = |w: &[f64], k: &[f64], c: f64| -> Vec<f64> {
        w.iter().zip(k).map(|(a, b)| a + c * b).collect()
    };
    for s in 1..=steps {
        let k1 = field(&w);
        let k2 = field(&shifted(&w, &k1, h / 2.0));
        let k3 = field(&shifted(&w, &k2, h / 2.0));
        let k4 = field(&shifted(&w, &k3, h));
        let next: Vec<f64> = (0..w.len())
            .map(|q| w[q] + h / 6.0 * (k1[q] + 2.0 * k2[q] + 2.0 * k3[q] + k4[q]))
            .collect();
        if next.iter().any(|v| !v.is_finite()) {
            return (times, weights, residuals, Some((s - 1) as f64 * h));
        }
        w = next;
        if s % cfg.record_every == 0 || s == steps {
            let (_, g) = ev.loss_grad(&w, y);
            if g.iter().any(|v| !v.is_finite()) {
                return (times, weights, residuals, Some((s - 1) as f64 * h));
            }
            times.push(s as f64 * h);
            weights.push(w.clone());
            let done = stop(&g);
            residuals.push(g);
            if done {
                break;
            }
        }
    }
    (times, weights, residuals, None)
}

fn check_labels(x: &Tensor, y: &[f64]) -> Result<()> {
    let (n, _) = x.dims2()?;
    if y.len() != n {
        return Err(Error::shape("gradient flow labels", &[y.len()], &[n]));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("labels".into()));
    }
    Ok(())
}

/// RK4 on `Ẇ = −η0 ∇L(W)` with `L = (1/2n) Σ (f_i − y_i)²`, from `W0`.
pub fn gradient_flow_integrate(
    net: &TwoLayerNet,
    model: ModelKind,
    x: &Tensor,
    y: &[f64],
    cfg: &GradientFlowConfig,
) -> Result<FlowTrajectory> {
    cfg.validate()?;
    check_labels(x, y)?;
    let ev = Evaluator::new(net, model, x)?;
    let lambda_min0 = empirical_ntk(net, model, &net.w0, x)?.lambda_min;
    let (times, weights, residuals, aborted_at) = rk4_integrate(&ev, y, cfg, |_| false);
    Ok(FlowTrajectory { model, times, weights, residuals, lambda_min0, aborted_at })
}

/// First grid time at which the full flow's residual norm drops to half its
/// initial value, searching up to `cfg.t0`.
pub fn residual_halving_time(
    net: &TwoLayerNet,
    x: &Tensor,
    y: &[f64],
    cfg: &GradientFlowConfig,
) -> Result<Option<f64>> {
    cfg.validate()?;
    check_labels(x, y)?;
    let ev = Evaluator::new(net, ModelKind::Full, x)?;
    let (_, g0) = ev.loss_grad(&net.w0, y);
    let target = 0.5 * g0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (times, _, residuals, aborted) = rk4_integrate(&ev, y, cfg, |g| {
        g.iter().map(|v| v * v).sum::<f64>().sqrt() <= target
    });
    if aborted.is_some() {
        return Ok(None);
    }
    let last = residuals.last().map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt());
    Ok(match last {
        Some(r) if r <= target => times.last().copied(),
        _ => None,
    })
}

/// Residual of the linear flow `ġ = −(η0/n) Θ̂ g` at time `t`, via the
/// eigendecomposition of `Θ̂`.
pub fn linear_flow_residual(theta: &Tensor, g0: &[f64], eta0: f64, t: f64) -> Result<Vec<f64>> {
    let (n, n2) = theta.dims2()?;
    if n != n2 || g0.len() != n {
        return Err(Error::shape("linear_flow_residual", theta.shape(), &[g0.len()]));
    }
    let mat = DMatrix::from_row_slice(n, n, theta.data());
    let eig = SymmetricEigen::try_new(mat, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Eigen("symmetric eigensolver did not converge".into()))?;
    let q = &eig.eigenvectors;
    let coords = q.transpose() * DVector::from_column_slice(g0);
    let rate = eta0 * t / n as f64;
    let decayed = DVector::from_iterator(
        n,
        coords.iter().zip(eig.eigenvalues.iter()).map(|(c, l)| c * (-rate * l).exp()),
    );
    Ok((q * decayed).iter().copied().collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviationReport {
    pub times: Vec<f64>,
    /// `‖W_t − W^(k)_t‖_F` per grid time.
    pub param_dev: Vec<f64>,
    /// `max_x |f_{W_t}(x) − f^(k)_{W^(k)_t}(x)|` per grid time.
    pub func_dev: Vec<f64>,
    pub sup_param_dev: f64,
    pub sup_func_dev: f64,
    pub residual_full: Vec<Vec<f64>>,
    pub residual_taylor: Vec<Vec<f64>>,
}

/// Grid-wise coupling between a full and a Taylorized trajectory of `net`.
pub fn coupling_deviation(
    net: &TwoLayerNet,
    full: &FlowTrajectory,
    taylor: &FlowTrajectory,
    test_points: &Tensor,
) -> Result<DeviationReport> {
    if full.model != ModelKind::Full {
        return Err(Error::InvalidArgument("first trajectory must be the full model".into()));
    }
    if full.times != taylor.times {
        return Err(Error::InvalidArgument(format!(
            "time grids differ ({} vs {} points)",
            full.times.len(),
            taylor.times.len()
        )));
    }
    if full.weights[0] != taylor.weights[0] {
        return Err(Error::InvalidArgument("trajectories do not share W0".into()));
    }
    let ev_full = Evaluator::new(net, ModelKind::Full, test_points)?;
    let ev_taylor = Evaluator::new(net, taylor.model, test_points)?;
    let mut param_dev = Vec::with_capacity(full.times.len());
    let mut func_dev = Vec::with_capacity(full.times.len());
    for (wf, wk) in full.weights.iter().zip(&taylor.weights) {
        param_dev.push(wf.iter().zip(wk).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
        let ff = ev_full.outputs(wf);
        let fk = ev_taylor.outputs(wk);
        func_dev.push(ff.iter().zip(&fk).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    Ok(DeviationReport {
        times: full.times.clone(),
        sup_param_dev: param_dev.iter().copied().fold(0.0, f64::max),
        sup_func_dev: func_dev.iter().copied().fold(0.0, f64::max),
        param_dev,
        func_dev,
        residual_full: full.residuals.clone(),
        residual_taylor: taylor.residuals.clone(),
    })
}

/// `sup_t ‖Θ̂_0 − Θ̂_t‖_F` over the grid of a trajectory.
pub fn kernel_drift(net: &TwoLayerNet, traj: &FlowTrajectory, x: &Tensor) -> Result<f64> {
    let theta0 = empirical_ntk(net, traj.model, &traj.weights[0], x)?.theta;
    let mut sup: f64 = 0.0;
    for w in &traj.weights[1..] {
        let t = empirical_ntk(net, traj.model, w, x)?.theta;
        sup = sup.max(t.sub(&theta0)?.frobenius_norm());
    }
    Ok(sup)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingDataset {
    pub x: Tensor,
    pub y: Vec<f64>,
    pub test_points: Tensor,
    /// `λ_min(Θ̂_0)` of the reference network used for the gate.
    pub lambda_min: f64,
    pub attempts: usize,
}

/// `n` points on the unit sphere with random ±1 labels. Draws whose
/// finite-width `λ_min(Θ̂_0)` (on a reference net of `ref_width`) falls below
/// `gate` are rejected.
pub fn scaling_dataset(
    n: usize,
    d: usize,
    n_test: usize,
    activation: ActivationKind,
    ref_width: usize,
    gate: f64,
    seed: u64,
) -> Result<ScalingDataset> {
    const MAX_ATTEMPTS: usize = 100;
    if n == 0 || n_test == 0 {
        return Err(Error::Config("scaling dataset needs n > 0 and n_test > 0".into()));
    }
    let reference = TwoLayerNet::init(ref_width, d, activation, seed ^ 0x5eed_0000_0000)?;
    for attempt in 0..MAX_ATTEMPTS {
        let base = RngStream::new(seed, (1 << 44) + attempt as u64);
        let x = sphere_points(n, d, &base.substream(0))?;
        let y = base
            .substream(1)
            .uniform_vec(n, 0.0, 1.0)
            .into_iter()
            .map(|u| if u < 0.5 { -1.0 } else { 1.0 })
            .collect();
        let lambda_min = empirical_ntk(&reference, ModelKind::Full, reference.w0(), &x)?.lambda_min;
        if lambda_min >= gate {
            let test_points = sphere_points(n_test, d, &base.substream(2))?;
            return Ok(ScalingDataset { x, y, test_points, lambda_min, attempts: attempt + 1 });
        }
    }
    Err(Error::Dataset(format!(
        "no dataset with lambda_min >= {gate} in {MAX_ATTEMPTS} draws"
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingConfig {
    pub widths: Vec<usize>,
    pub orders: Vec<usize>,
    pub seeds: Vec<u64>,
    pub n: usize,
    pub d: usize,
    pub n_test: usize,
    pub activation: ActivationKind,
    pub eta0: f64,
    pub h: f64,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    /// Fixed horizon; when absent each seed uses the residual-halving time of
    /// its full flow at the largest width.
    #[serde(default)]
    pub t0: Option<f64>,
    /// Search limit for the residual-halving horizon.
    pub max_t0: f64,
    /// Multiplies the residual-halving horizon.
    #[serde(default = "one")]
    pub horizon_scale: f64,
    pub lambda_gate: f64,
    pub data_seed: u64,
    #[serde(default)]
    pub parallel: bool,
}

fn one() -> f64 {
    1.0
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            widths: vec![64, 256, 1024, 4096],
            orders: vec![1, 2],
            seeds: vec![0, 1, 2, 3, 4],
            n: 16,
            d: 16,
            n_test: 32,
            activation: ActivationKind::Tanh,
            eta0: 1.0,
            h: 0.1,
            record_every: 10,
            t0: None,
            max_t0: 200.0,
            horizon_scale: 1.0,
            lambda_gate: 1e-3,
            data_seed: 0,
            parallel: true,
        }
    }
}

impl ScalingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 4 || self.widths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("need >= 4 strictly increasing widths".into()));
        }
        if self.widths[self.widths.len() - 1] < 16 * self.widths[0] {
            return Err(Error::Config("widths must span at least a 16x range".into()));
        }
        if self.orders.is_empty() {
            return Err(Error::Config("no Taylor orders given".into()));
        }
        for &k in &self.orders {
            check_order(k)?;
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds given".into()));
        }
        check_smooth(self.activation)?;
        if let Some(t0) = self.t0 {
            GradientFlowConfig { eta0: self.eta0, t0, h: self.h, record_every: self.record_every }.validate()?;
        }
        if !(self.horizon_scale > 0.0) {
            return Err(Error::Config("horizon_scale must be positive".into()));
        }
        GradientFlowConfig { eta0: self.eta0, t0: self.max_t0, h: self.h, record_every: self.record_every }
            .validate()
    }

    fn flow(&self, t0: f64) -> GradientFlowConfig {
        GradientFlowConfig { eta0: self.eta0, t0, h: self.h, record_every: self.record_every }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub width: usize,
    pub k: usize,
    pub seed: u64,
    pub t0: f64,
    pub sup_param_dev: f64,
    pub sup_func_dev: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcludedRun {
    pub width: usize,
    pub seed: u64,
    pub model: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub widths: Vec<usize>,
    pub orders: Vec<usize>,
    /// `[order][width]` medians over seeds; NaN where every seed was excluded.
    pub median_param_dev: Vec<Vec<f64>>,
    pub median_func_dev: Vec<Vec<f64>>,
    pub param_slope: Vec<f64>,
    pub param_residual: Vec<f64>,
    pub func_slope: Vec<f64>,
    pub func_residual: Vec<f64>,
}

impl ScalingFit {
    /// Medians strictly decreasing in width for order index `ki`.
    pub fn strictly_decreasing(&self, ki: usize) -> bool {
        self.median_param_dev[ki].windows(2).all(|w| w[1] < w[0])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    pub fit: ScalingFit,
    pub excluded: Vec<ExcludedRun>,
    pub horizons: Vec<(u64, f64)>,
    pub dataset_lambda_min: f64,
}

/// Least-squares slope of `ln y` against `ln x` and the RMS residual.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument("log-log fit needs >= 2 paired points".into()));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidArgument("log-log fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let rss: f64 = lx.iter().zip(&ly).map(|(a, b)| (b - my - slope * (a - mx)).powi(2)).sum();
    Ok((slope, (rss / n).sqrt()))
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

type Cell = (Vec<ScalingRow>, Vec<ExcludedRun>);

/// Couples full and order-k flows across widths and seeds and fits the decay
/// exponent of the sup deviations in the width.
pub fn width_scaling_experiment(cfg: &ScalingConfig) -> Result<ScalingReport> {
    cfg.validate()?;
    let largest = *cfg.widths.last().expect("validated");
    let ds = scaling_dataset(cfg.n, cfg.d, cfg.n_test, cfg.activation, largest, cfg.lambda_gate, cfg.data_seed)?;

    let horizon_for = |seed: u64| -> Result<Option<f64>> {
        if let Some(t0) = cfg.t0 {
            return Ok(Some(t0));
        }
        let net = TwoLayerNet::init(largest, cfg.d, cfg.activation, seed)?;
        Ok(residual_halving_time(&net, &ds.x, &ds.y, &cfg.flow(cfg.max_t0))?.map(|t| t * cfg.horizon_scale))
    };
    let horizons: Vec<Result<Option<f64>>> = if cfg.parallel {
        cfg.seeds.par_iter().map(|&s| horizon_for(s)).collect()
    } else {
        cfg.seeds.iter().map(|&s| horizon_for(s)).collect()
    };
    let mut seed_t0 = Vec::new();
    let mut excluded = Vec::new();
    for (&seed, h) in cfg.seeds.iter().zip(horizons) {
        match h? {
            Some(t0) => seed_t0.push((seed, t0)),
            None => excluded.push(ExcludedRun {
                width: largest,
                seed,
                model: ModelKind::Full.tag(),
                reason: format!("residual did not halve by t = {}", cfg.max_t0),
            }),
        }
    }

    let cells: Vec<(usize, u64, f64)> = cfg
        .widths
        .iter()
        .flat_map(|&m| seed_t0.iter().map(move |&(s, t0)| (m, s, t0)))
        .collect();
    let run_cell = |&(m, seed, t0): &(usize, u64, f64)| -> Result<Cell> {
        let net = TwoLayerNet::init(m, cfg.d, cfg.activation, seed)?;
        let flow = cfg.flow(t0);
        let full = gradient_flow_integrate(&net, ModelKind::Full, &ds.x, &ds.y, &flow)?;
        let mut rows = Vec::new();
        let mut skipped = Vec::new();
        let flag = |traj: &FlowTrajectory| -> Option<String> {
            if traj.lambda_min0 <= 0.0 {
                Some(format!("lambda_min(NTK_0) = {:e}", traj.lambda_min0))
            } else {
                traj.aborted_at.map(|t| format!("non-finite state after t = {t}"))
            }
        };
        if let Some(reason) = flag(&full) {
            skipped.push(ExcludedRun { width: m, seed, model: full.model.tag(), reason });
            return Ok((rows, skipped));
        }
        for &k in &cfg.orders {
            let taylor = gradient_flow_integrate(&net, ModelKind::Taylor(k), &ds.x, &ds.y, &flow)?;
            if let Some(reason) = flag(&taylor) {
                skipped.push(ExcludedRun { width: m, seed, model: taylor.model.tag(), reason });
                continue;
            }
            let dev = coupling_deviation(&net, &full, &taylor, &ds.test_points)?;
            rows.push(ScalingRow {
                width: m,
                k,
                seed,
                t0,
                sup_param_dev: dev.sup_param_dev,
                sup_func_dev: dev.sup_func_dev,
            });
        }
        Ok((rows, skipped))
    };
    let results: Vec<Result<Cell>> = if cfg.parallel {
        cells.par_iter().map(run_cell).collect()
    } else {
        cells.iter().map(run_cell).collect()
    };
    let mut rows = Vec::new();
    for r in results {
        let (rs, ex) = r?;
        rows.extend(rs);
        excluded.extend(ex);
    }

    let mut fit = ScalingFit {
        widths: cfg.widths.clone(),
        orders: cfg.orders.clone(),
        median_param_dev: Vec::new(),
        median_func_dev: Vec::new(),
        param_slope: Vec::new(),
        param_residual: Vec::new(),
        func_slope: Vec::new(),
        func_residual: Vec::new(),
    };
    let widths_f: Vec<f64> = cfg.widths.iter().map(|&m| m as f64).collect();
    for &k in &cfg.orders {
        let med = |pick: fn(&ScalingRow) -> f64| -> Vec<f64> {
            cfg.widths
                .iter()
                .map(|&m| median(rows.iter().filter(|r| r.k == k && r.width == m).map(pick).collect()))
                .collect()
        };
        let p = med(|r| r.sup_param_dev);
        let f = med(|r| r.sup_func_dev);
        let (ps, pr) = loglog_slope(&widths_f, &p).unwrap_or((f64::NAN, f64::NAN));
        let (fs, fr) = loglog_slope(&widths_f, &f).unwrap_or((f64::NAN, f64::NAN));
        fit.median_param_dev.push(p);
        fit.median_func_dev.push(f);
        fit.param_slope.push(ps);
        fit.param_residual.push(pr);
        fit.func_slope.push(fs);
        fit.func_residual.push(fr);
    }
    if rows.is_empty() {
        return Err(Error::AllDiverged);
    }
    Ok(ScalingReport { rows, fit, excluded, horizons: seed_t0, dataset_lambda_min: ds.lambda_min })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularityProbe {
    pub width: usize,
    pub max_jacobian_norm: f64,
    pub max_lipschitz_ratio: f64,
    /// `max|σ'| · max‖x‖ · √n`, or infinity when σ' is unbounded.
    pub envelope: f64,
}

fn derivative_bound(act: ActivationKind) -> f64 {
    match act {
        ActivationKind::Tanh | ActivationKind::Identity | ActivationKind::Relu => 1.0,
        ActivationKind::Softplus { .. } => 1.0,
        ActivationKind::Square => f64::INFINITY,
    }
}

/// Samples `samples` pairs in the Frobenius ball `B(W0, radius)` and reports
/// the largest `‖J(W)‖_F` and `‖J(W) − J(W̃)‖_F / ‖W − W̃‖_F` seen.
pub fn jacobian_regularity_probe(
    net: &TwoLayerNet,
    model: ModelKind,
    x: &Tensor,
    radius: f64,
    samples: usize,
    seed: u64,
) -> Result<RegularityProbe> {
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(Error::InvalidArgument(format!("radius must be >= 0, got {radius}")));
    }
    let ev = Evaluator::new(net, model, x)?;
    let dim = net.m * net.d;
    let point = |stream: u64| -> Vec<f64> {
        let rng = RngStream::new(seed, stream);
        let dir = rng.substream(0).normal_vec(dim);
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rho = radius * rng.substream(1).uniform_vec(1, 0.0, 1.0)[0];
        net.w0.iter().zip(&dir).map(|(w, u)| w + rho * u / norm).collect()
    };
    let mut max_norm = ev.jacobian(&net.w0).norm();
    let mut max_ratio: f64 = 0.0;
    for s in 0..samples as u64 {
        let (w1, w2) = (point(2 * s), point(2 * s + 1));
        let (j1, j2) = (ev.jacobian(&w1), ev.jacobian(&w2));
        max_norm = max_norm.max(j1.norm()).max(j2.norm());
        let dw = w1.iter().zip(&w2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if dw > 0.0 {
            max_ratio = max_ratio.max((j1 - j2).norm() / dw);
        }
    }
    let max_x = (0..ev.n)
        .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    Ok(RegularityProbe {
        width: net.m,
        max_jacobian_norm: max_norm,
        max_lipschitz_ratio: max_ratio,
        envelope: derivative_bound(net.activation) * max_x * (ev.n as f64).sqrt(),
    })
}
