//! Truncated Taylor series ("jets") along the ray `r ↦ θ0 + r·Δθ`.
//!
//! A [`Jet`] of order `k` stores `k + 1` tensors of one shape, where
//! `coeffs[j] = (1/j!) dʲ/drʲ value(r) |_{r=0}`. Pushing jets through a
//! network computes every term of the order-`k` Taylor polynomial of the
//! output in one forward pass; evaluating the polynomial at `r = 1` gives the
//! Taylorized model.
//!
//! Each jet also remembers how many leading coefficients may be nonzero
//! (`active`). Parameters carry two (base and direction), inputs carry one,
//! and products skip the structurally zero terms. Skipped terms are exact
//! zeros, so results are identical to the dense computation.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Highest supported expansion order.
pub const MAX_ORDER: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Jet {
    coeffs: Vec<Tensor>,
    active: usize,
}

/// Taylor coefficients of an elementary scalar function.
pub trait Elementary {
    /// Writes `σ⁽ʲ⁾(t) / j!` for `j = 0..out.len()`.
    fn taylor_coeffs(&self, t: f64, out: &mut [f64]);
}

impl<F: Fn(f64, &mut [f64])> Elementary for F {
    fn taylor_coeffs(&self, t: f64, out: &mut [f64]) {
        self(t, out)
    }
}

/// Taylor coefficients `σ⁽ʲ⁾(point) / j!`, `j = 0..=order`, of one scalar
/// function at one expansion point.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarSeries {
    pub point: f64,
    pub coeffs: Vec<f64>,
}

impl ScalarSeries {
    pub fn expand(f: &impl Elementary, point: f64, order: usize) -> Self {
        let mut coeffs = vec![0.0; order + 1];
        f.taylor_coeffs(point, &mut coeffs);
        Self { point, coeffs }
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    /// Composes this series with a scalar series `a` whose constant term is
    /// the expansion point. Only `a[1..]` is read.
    pub fn compose(&self, a: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; a.len()];
        compose_series(&self.coeffs, a, &mut out);
        out
    }
}

/// Horner evaluation of `Σ_j s_j u^j` in the truncated power-series ring,
/// where `u = a - a[0]` is nilpotent. `s` must have at least `out.len()`
/// entries; `a` and `out` have the same length.
pub(crate) fn compose_series(s: &[f64], a: &[f64], out: &mut [f64]) {
    let len = out.len();
    out.iter_mut().for_each(|v| *v = 0.0);
    let top = len - 1;
    out[0] = s[top];
    for j in (0..top).rev() {
        // out ← out · u, truncated; u[0] = 0 so the product is causal.
        for n in (1..len).rev() {
            let mut acc = 0.0;
            for i in 1..=n {
                acc += a[i] * out[n - i];
            }
            out[n] = acc;
        }
        out[0] = s[j];
    }
}

#[cfg(test)]
/// Truncated Cauchy product of two scalar series.
pub(crate) fn cauchy_scalar(a: &[f64], b: &[f64], out: &mut [f64]) {
    for n in 0..out.len() {
        let mut acc = 0.0;
        for i in 0..=n {
            acc += a[i] * b[n - i];
        }
        out[n] = acc;
    }
}

fn check_order(k: usize) -> Result<()> {
    if k > MAX_ORDER {
        return Err(Error::InvalidArgument(format!(
            "jet order {k} exceeds the supported maximum {MAX_ORDER}"
        )));
    }
    Ok(())
}

impl Jet {
    /// Lifts a parameter onto the ray `base + r·direction`.
    pub fn lift_param(base: &Tensor, direction: &Tensor, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument(
                "a parameter lift needs order >= 1".into(),
            ));
        }
        check_order(k)?;
        if base.shape() != direction.shape() {
            return Err(Error::shape("lift_param", base.shape(), direction.shape()));
        }
        let mut coeffs = Vec::with_capacity(k + 1);
        coeffs.push(base.clone());
        coeffs.push(direction.clone());
        coeffs.extend((2..=k).map(|_| Tensor::zeros(base.shape())));
        Ok(Self { coeffs, active: 2 })
    }

    /// A value with no dependence on `r`. Order 0 is allowed and is the
    /// representation used for plain (non-Taylorized) evaluation.
    pub fn lift_const(value: &Tensor, k: usize) -> Result<Self> {
        check_order(k)?;
        let mut coeffs = Vec::with_capacity(k + 1);
        coeffs.push(value.clone());
        coeffs.extend((1..=k).map(|_| Tensor::zeros(value.shape())));
        Ok(Self { coeffs, active: 1 })
    }

    pub fn from_coeffs(coeffs: Vec<Tensor>) -> Result<Self> {
        let first = coeffs
            .first()
            .ok_or_else(|| Error::InvalidArgument("a jet needs at least one coefficient".into()))?;
        check_order(coeffs.len() - 1)?;
        if let Some(bad) = coeffs.iter().find(|c| c.shape() != first.shape()) {
            return Err(Error::shape("from_coeffs", first.shape(), bad.shape()));
        }
        let active = coeffs.len();
        Ok(Self { coeffs, active })
    }

    pub(crate) fn from_parts(coeffs: Vec<Tensor>, active: usize) -> Self {
        debug_assert!(active >= 1 && active <= coeffs.len());
        Self { coeffs, active }
    }

    pub fn zeros(shape: &[usize], k: usize) -> Self {
        Self {
            coeffs: (0..=k).map(|_| Tensor::zeros(shape)).collect(),
            active: 1,
        }
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn shape(&self) -> &[usize] {
        self.coeffs[0].shape()
    }

    pub fn coeffs(&self) -> &[Tensor] {
        &self.coeffs
    }

    pub fn coeff(&self, j: usize) -> &Tensor {
        &self.coeffs[j]
    }

    /// Number of leading coefficients that may be nonzero.
    pub fn active(&self) -> usize {
        self.active
    }

    pub fn into_coeffs(self) -> Vec<Tensor> {
        self.coeffs
    }

    fn check_pair(&self, other: &Jet, op: &'static str) -> Result<()> {
        if self.order() != other.order() {
            return Err(Error::OrderMismatch {
                op,
                lhs: self.order(),
                rhs: other.order(),
            });
        }
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn add(&self, other: &Jet) -> Result<Jet> {
        self.check_pair(other, "jet_add")?;
        let coeffs = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| a.add(b))
            .collect::<Result<_>>()?;
        Ok(Jet::from_parts(coeffs, self.active.max(other.active)))
    }

    pub fn scale(&self, c: f64) -> Jet {
        Jet::from_parts(self.coeffs.iter().map(|t| t.scale(c)).collect(), self.active)
    }

    /// Elementwise truncated Cauchy product.
    pub fn mul(&self, other: &Jet) -> Result<Jet> {
        self.check_pair(other, "jet_mul")?;
        let shape = self.shape().to_vec();
        Ok(bilinear(self, other, &shape, |a, b, out| kernels::mul_acc(a, b, out)))
    }

    /// Matrix product `[m×n]·[n×p]` with truncated Cauchy structure.
    pub fn matmul(&self, other: &Jet) -> Result<Jet> {
        if self.order() != other.order() {
            return Err(Error::OrderMismatch {
                op: "jet_matmul",
                lhs: self.order(),
                rhs: other.order(),
            });
        }
        let (m, n) = self.coeffs[0].dims2()?;
        let (n2, p) = other.coeffs[0].dims2()?;
        if n != n2 {
            return Err(Error::shape("jet_matmul", self.shape(), other.shape()));
        }
        Ok(bilinear(self, other, &[m, p], |a, b, out| {
            kernels::matmul_acc(a, b, out, m, n, p)
        }))
    }

    /// `r ↦ σ(a(r))`, entrywise.
    pub fn compose(&self, f: &impl Elementary) -> Jet {
        compose_jet(self, f)
    }

    /// Evaluates the polynomial at `r = 1`: `Σ_j coeffs[j]`.
    pub fn eval_sum(&self) -> Tensor {
        let mut out = self.coeffs[0].clone();
        for c in &self.coeffs[1..self.active] {
            kernels::axpy(1.0, c.data(), out.data_mut());
        }
        out
    }

    /// Evaluates the polynomial at an arbitrary `r` (Horner).
    pub fn eval_at(&self, r: f64) -> Tensor {
        let k = self.active - 1;
        let mut out = self.coeffs[k].clone();
        for j in (0..k).rev() {
            let c = self.coeffs[j].data();
            for (o, &v) in out.data_mut().iter_mut().zip(c) {
                *o = *o * r + v;
            }
        }
        out
    }

    /// Drops the coefficients above order `k`.
    pub fn truncate(&self, k: usize) -> Result<Jet> {
        if k > self.order() {
            return Err(Error::InvalidArgument(format!(
                "cannot truncate an order-{} jet to order {k}",
                self.order()
            )));
        }
        Ok(Jet::from_parts(
            self.coeffs[..=k].to_vec(),
            self.active.min(k + 1),
        ))
    }
}

/// Truncated Cauchy product of a bilinear map:
/// `out_j = Σ_{i+l=j} kernel(a_i, b_l)`, skipping structural zeros.
pub(crate) fn bilinear(
    a: &Jet,
    b: &Jet,
    out_shape: &[usize],
    kernel: impl Fn(&[f64], &[f64], &mut [f64]),
) -> Jet {
    let k = a.order();
    let mut coeffs: Vec<Tensor> = (0..=k).map(|_| Tensor::zeros(out_shape)).collect();
    let active = (a.active + b.active - 1).min(k + 1);
    for (j, out) in coeffs.iter_mut().enumerate().take(active) {
        for i in 0..a.active.min(j + 1) {
            let l = j - i;
            if l < b.active {
                kernel(a.coeffs[i].data(), b.coeffs[l].data(), out.data_mut());
            }
        }
    }
    Jet::from_parts(coeffs, active)
}

pub(crate) fn compose_jet<F: Elementary + ?Sized>(a: &Jet, f: &F) -> Jet {
    let k = a.order();
    let shape = a.shape().to_vec();
    let n = a.coeffs[0].len();
    if a.active == 1 {
        let value = a.coeffs[0].map(|t| {
            let mut s = [0.0; 1];
            f.taylor_coeffs(t, &mut s);
            s[0]
        });
        let mut coeffs = vec![value];
        coeffs.extend((1..=k).map(|_| Tensor::zeros(&shape)));
        return Jet::from_parts(coeffs, 1);
    }
    let mut out_data: Vec<Vec<f64>> = (0..=k).map(|_| vec![0.0; n]).collect();
    let mut s = vec![0.0; k + 1];
    let mut local = vec![0.0; k + 1];
    let mut res = vec![0.0; k + 1];
    for e in 0..n {
        for (j, slot) in local.iter_mut().enumerate() {
            *slot = if j < a.active { a.coeffs[j].data()[e] } else { 0.0 };
        }
        f.taylor_coeffs(local[0], &mut s);
        compose_series(&s, &local, &mut res);
        for (j, col) in out_data.iter_mut().enumerate() {
            col[e] = res[j];
        }
    }
    let coeffs = out_data
        .into_iter()
        .map(|d| Tensor::new(shape.clone(), d).expect("shape preserved"))
        .collect();
    Jet::from_parts(coeffs, k + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    fn values(j: &Jet) -> Vec<f64> {
        j.coeffs().iter().map(|c| c.data()[0]).collect()
    }

    fn exp_series(t: f64, out: &mut [f64]) {
        let mut fact = 1.0;
        for (j, o) in out.iter_mut().enumerate() {
            if j > 0 {
                fact *= j as f64;
            }
            *o = t.exp() / fact;
        }
    }

    fn square_series(t: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        out[0] = t * t;
        if out.len() > 1 {
            out[1] = 2.0 * t;
        }
        if out.len() > 2 {
            out[2] = 1.0;
        }
    }

    #[test]
    fn lift_param_layout() {
        let j = Jet::lift_param(&s(2.0), &s(3.0), 2).unwrap();
        assert_eq!(values(&j), vec![2.0, 3.0, 0.0]);
        assert!(Jet::lift_param(&s(2.0), &Tensor::zeros(&[2]), 2).is_err());
        assert!(Jet::lift_param(&s(2.0), &s(3.0), 0).is_err());
        assert!(Jet::lift_param(&s(2.0), &s(3.0), MAX_ORDER + 1).is_err());
    }

    #[test]
    fn lift_const_layout() {
        let j = Jet::lift_const(&s(5.0), 3).unwrap();
        assert_eq!(values(&j), vec![5.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_direction_gives_constant_outputs() {
        let a = Jet::lift_param(&s(1.3), &s(0.0), 3).unwrap();
        let out = a.mul(&a).unwrap().compose(&exp_series);
        assert!(values(&out)[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn const_times_jet_is_scale() {
        let a = Jet::from_coeffs(vec![s(1.0), s(-2.0), s(0.5)]).unwrap();
        let c = Jet::lift_const(&s(3.0), 2).unwrap();
        assert_eq!(values(&c.mul(&a).unwrap()), values(&a.scale(3.0)));
    }

    #[test]
    fn const_jets_stay_constant_under_composition() {
        let c = Jet::lift_const(&s(0.7), 4).unwrap();
        let out = c.compose(&exp_series);
        assert_eq!(out.active(), 1);
        assert!(values(&out)[1..].iter().all(|&v| v == 0.0));
        assert_eq!(values(&out)[0], 0.7f64.exp());
    }

    #[test]
    fn add_and_scale() {
        let a = Jet::from_coeffs(vec![s(1.0), s(2.0)]).unwrap();
        let b = Jet::from_coeffs(vec![s(3.0), s(4.0)]).unwrap();
        assert_eq!(values(&a.add(&b).unwrap()), vec![4.0, 6.0]);
        let z = Jet::zeros(&[1], 1);
        assert_eq!(a.add(&z).unwrap().coeffs(), a.coeffs());
        let cancel = a.scale(-1.0).add(&a).unwrap();
        assert_eq!(values(&cancel), vec![0.0, 0.0]);
        let c = Jet::from_coeffs(vec![s(1.0), s(2.0), s(3.0)]).unwrap();
        assert!(matches!(a.add(&c), Err(Error::OrderMismatch { .. })));
    }

    #[test]
    fn cauchy_products() {
        let a = Jet::from_coeffs(vec![s(1.0), s(2.0)]).unwrap();
        let b = Jet::from_coeffs(vec![s(3.0), s(4.0)]).unwrap();
        assert_eq!(values(&a.mul(&b).unwrap()), vec![3.0, 10.0]);

        let p = Jet::lift_param(&s(1.0), &s(1.0), 2).unwrap();
        assert_eq!(values(&p.mul(&p).unwrap()), vec![1.0, 2.0, 1.0]);

        let t = Jet::lift_param(&s(2.0), &s(1.0), 3).unwrap();
        let cube = t.mul(&t).unwrap().mul(&t).unwrap();
        assert_eq!(values(&cube), vec![8.0, 12.0, 6.0, 1.0]);
    }

    #[test]
    fn exp_of_identity_ray() {
        let a = Jet::lift_param(&s(0.0), &s(1.0), 3).unwrap();
        let out = a.compose(&exp_series);
        let v = values(&out);
        let expect = [1.0, 1.0, 0.5, 1.0 / 6.0];
        for (x, y) in v.iter().zip(expect) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn square_composition_and_polynomial_exactness() {
        let a = Jet::lift_param(&s(3.0), &s(1.0), 2).unwrap();
        let out = a.compose(&square_series);
        assert_eq!(values(&out), vec![9.0, 6.0, 1.0]);
        assert_eq!(out.eval_sum().data(), &[16.0]);
    }

    #[test]
    fn eval_sum_of_zero_direction_is_base() {
        let a = Jet::lift_param(&s(0.3), &s(0.0), 4).unwrap();
        let out = a.compose(&exp_series);
        assert_eq!(out.eval_sum().data(), &[0.3f64.exp()]);
    }

    #[test]
    fn matmul_jets() {
        let a = Jet::lift_param(
            &Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap(),
            &Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            2,
        )
        .unwrap();
        let b = Jet::lift_param(
            &Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap(),
            &Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap(),
            2,
        )
        .unwrap();
        // (1+r)(3+r) + 2(4+r) = 11 + 6r + r²
        assert_eq!(values(&a.matmul(&b).unwrap()), vec![11.0, 6.0, 1.0]);
    }

    #[test]
    fn truncation_and_eval_at() {
        let a = Jet::from_coeffs(vec![s(1.0), s(2.0), s(3.0)]).unwrap();
        assert_eq!(values(&a.truncate(1).unwrap()), vec![1.0, 2.0]);
        assert_eq!(a.eval_at(2.0).data(), &[1.0 + 4.0 + 12.0]);
        assert!(a.truncate(3).is_err());
    }

    #[test]
    fn series_composition_matches_direct_cauchy_powers() {
        // σ(a) with σ = square should equal a·a.
        let a = [0.4, -1.2, 0.3, 2.0];
        let series = ScalarSeries::expand(&square_series, a[0], 3);
        let composed = series.compose(&a);
        let mut direct = [0.0; 4];
        cauchy_scalar(&a, &a, &mut direct);
        for (x, y) in composed.iter().zip(direct) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}
