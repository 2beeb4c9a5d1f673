//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::ops::{Add, Mul, Sub};

use taylorlab::nn::ParamSet;
use taylorlab::{InitScheme, Tensor};

/// First-order dual number `v + ε t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub t: f64,
}

impl Dual {
    pub fn new(v: f64, t: f64) -> Self {
        Self { v, t }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.v + o.v, self.t + o.t)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.v - o.v, self.t - o.t)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.v * o.v, self.v * o.t + self.t * o.v)
    }
}

pub trait Scalar: Copy + Add<Output = Self> + Mul<Output = Self> + Sub<Output = Self> {
    fn cst(v: f64) -> Self;
    fn tanh(self) -> Self;
    fn square(self) -> Self {
        self * self
    }
    fn softplus(self, beta: f64) -> Self;
}

impl Scalar for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn softplus(self, beta: f64) -> Self {
        (1.0 + (beta * self).exp()).ln() / beta
    }
}

impl Scalar for Dual {
    fn cst(v: f64) -> Self {
        Dual::new(v, 0.0)
    }
    fn tanh(self) -> Self {
        let y = self.v.tanh();
        Dual::new(y, (1.0 - y * y) * self.t)
    }
    fn softplus(self, beta: f64) -> Self {
        let s = 1.0 / (1.0 + (-beta * self.v).exp());
        Dual::new((1.0 + (beta * self.v).exp()).ln() / beta, s * self.t)
    }
}

/// Dense layer `[fan_out × fan_in]` weights and optional bias.
#[derive(Clone, Debug)]
pub struct NaiveLayer<T> {
    pub w: Vec<T>,
    pub b: Option<Vec<T>>,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Splits a flat parameter vector (entry order of an MLP `ParamSet`) into
/// layers.
pub fn naive_layers<T: Scalar>(params: &ParamSet, flat: &[T]) -> Vec<NaiveLayer<T>> {
    let mut layers: Vec<NaiveLayer<T>> = Vec::new();
    let mut off = 0;
    for e in params.entries() {
        let n = e.theta.len();
        let slice = flat[off..off + n].to_vec();
        off += n;
        if e.name.ends_with(".weight") {
            let s = e.theta.shape();
            layers.push(NaiveLayer { w: slice, b: None, fan_in: s[1], fan_out: s[0] });
        } else {
            layers.last_mut().unwrap().b = Some(slice);
        }
    }
    layers
}

/// Plain triple-loop MLP evaluation for one example.
pub fn naive_mlp<T: Scalar>(
    layers: &[NaiveLayer<T>],
    x: &[f64],
    act: impl Fn(T) -> T,
    scheme: InitScheme,
) -> Vec<T> {
    let mut h: Vec<T> = x.iter().map(|&v| T::cst(v)).collect();
    for (li, l) in layers.iter().enumerate() {
        let scale = match scheme {
            InitScheme::Standard => 1.0,
            InitScheme::Ntk => 1.0 / (l.fan_in as f64).sqrt(),
        };
        let mut out = Vec::with_capacity(l.fan_out);
        for o in 0..l.fan_out {
            let mut acc = T::cst(0.0);
            for i in 0..l.fan_in {
                acc = acc + l.w[o * l.fan_in + i] * h[i];
            }
            acc = acc * T::cst(scale);
            if let Some(b) = &l.b {
                acc = acc + b[o];
            }
            out.push(acc);
        }
        h = if li + 1 < layers.len() { out.into_iter().map(&act).collect() } else { out };
    }
    h
}

/// Naive batch evaluation in f64.
pub fn naive_batch(params: &ParamSet, flat: &[f64], x: &Tensor, act: impl Fn(f64) -> f64 + Copy) -> Tensor {
    let layers = naive_layers(params, flat);
    let (n, _) = x.dims2().unwrap();
    let mut data = Vec::new();
    for r in 0..n {
        data.extend(naive_mlp(&layers, x.row(r), act, params.scheme()));
    }
    let c = data.len() / n;
    Tensor::new(vec![n, c], data).unwrap()
}

/// Central-difference estimates of `g^(j)(0)/j!` for `j = 0..=4`, refined by
/// two Richardson steps over `h, h/2, h/4`.
pub fn fd_taylor_coeffs(g: impl Fn(f64) -> Vec<f64>, h: f64) -> Vec<Vec<f64>> {
    let stencil = |h: f64| -> Vec<Vec<f64>> {
        let (m2, m1, z, p1, p2) = (g(-2.0 * h), g(-h), g(0.0), g(h), g(2.0 * h));
        let n = z.len();
        let mut d = vec![vec![0.0; n]; 5];
        for i in 0..n {
            d[0][i] = z[i];
            d[1][i] = (p1[i] - m1[i]) / (2.0 * h);
            d[2][i] = (p1[i] - 2.0 * z[i] + m1[i]) / (h * h);
            d[3][i] = (p2[i] - 2.0 * p1[i] + 2.0 * m1[i] - m2[i]) / (2.0 * h * h * h);
            d[4][i] = (p2[i] - 4.0 * p1[i] + 6.0 * z[i] - 4.0 * m1[i] + m2[i]) / (h * h * h * h);
        }
        d
    };
    let (a, b, c) = (stencil(h), stencil(h / 2.0), stencil(h / 4.0));
    let fact = [1.0, 1.0, 2.0, 6.0, 24.0];
    (0..5)
        .map(|j| {
            (0..a[j].len())
                .map(|i| {
                    let r1 = (4.0 * b[j][i] - a[j][i]) / 3.0;
                    let r2 = (4.0 * c[j][i] - b[j][i]) / 3.0;
                    ((16.0 * r2 - r1) / 15.0) / fact[j]
                })
                .collect()
        })
        .collect()
}

/// `max|a - b| / max|b|`
pub fn normwise_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    num / den.max(1e-300)
}

pub fn random_tensor(shape: &[usize], seed: u64, stream: u64, std: f64) -> Tensor {
    taylorlab::gaussian_fill(shape, std, &taylorlab::RngStream::new(seed, stream)).unwrap()
}

/// Sets `θ = θ0 + t·Δ` on a copy of `params`.
pub fn displaced(params: &ParamSet, delta: &[f64], t: f64) -> ParamSet {
    let mut p = params.clone();
    let flat: Vec<f64> = params.anchor_flat().iter().zip(delta).map(|(a, d)| a + t * d).collect();
    p.set_theta_flat(&flat).unwrap();
    p
}
