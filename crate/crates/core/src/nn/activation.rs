//! Pointwise nonlinearities and their Taylor coefficients.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jet::Elementary;

/// Written in configs as `tanh`, `relu`, `square`, `identity`, or
/// `softplus` / `softplus:<beta>` (beta defaults to 1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ActivationKind {
    Tanh,
    Softplus { beta: f64 },
    Relu,
    Square,
    Identity,
}

impl ActivationKind {
    /// `σ(t)`
    pub fn value(&self, t: f64) -> f64 {
        match *self {
            ActivationKind::Tanh => t.tanh(),
            ActivationKind::Softplus { beta } => softplus(beta, t),
            ActivationKind::Relu => t.max(0.0),
            ActivationKind::Square => t * t,
            ActivationKind::Identity => t,
        }
    }

    /// `σ'(t)`
    pub fn derivative(&self, t: f64) -> f64 {
        match *self {
            ActivationKind::Tanh => {
                let y = t.tanh();
                1.0 - y * y
            }
            ActivationKind::Softplus { beta } => sigmoid(beta * t),
            ActivationKind::Relu => {
                if t > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Square => 2.0 * t,
            ActivationKind::Identity => 1.0,
        }
    }

    /// True when every derivative of order >= 2 vanishes almost everywhere,
    /// so Taylorized models of every order coincide with the linearization.
    pub fn is_piecewise_linear(&self) -> bool {
        matches!(self, ActivationKind::Relu | ActivationKind::Identity)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(beta: f64, t: f64) -> f64 {
    let x = beta * t;
    (x.max(0.0) + (-x.abs()).exp().ln_1p()) / beta
}

impl Elementary for ActivationKind {
    fn taylor_coeffs(&self, t: f64, out: &mut [f64]) {
        if out.is_empty() {
            return;
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        let n = out.len();
        match *self {
            ActivationKind::Tanh => {
                // (j+1) T_{j+1} = δ_{j0} - Σ_{i≤j} T_i T_{j-i}
                out[0] = t.tanh();
                for j in 0..n - 1 {
                    let mut conv = 0.0;
                    for i in 0..=j {
                        conv += out[i] * out[j - i];
                    }
                    let delta = if j == 0 { 1.0 } else { 0.0 };
                    out[j + 1] = (delta - conv) / (j + 1) as f64;
                }
            }
            ActivationKind::Softplus { beta } => {
                // With S the logistic series of βt: S' = β S (1 - S), and
                // softplus' = S.
                let mut s = vec![0.0; n];
                s[0] = sigmoid(beta * t);
                for j in 0..n.saturating_sub(2) {
                    let mut conv = 0.0;
                    for i in 0..=j {
                        conv += s[i] * s[j - i];
                    }
                    s[j + 1] = beta * (s[j] - conv) / (j + 1) as f64;
                }
                out[0] = softplus(beta, t);
                for j in 0..n - 1 {
                    out[j + 1] = s[j] / (j + 1) as f64;
                }
            }
            ActivationKind::Relu => {
                out[0] = t.max(0.0);
                if n > 1 {
                    out[1] = if t > 0.0 { 1.0 } else { 0.0 };
                }
            }
            ActivationKind::Square => {
                out[0] = t * t;
                if n > 1 {
                    out[1] = 2.0 * t;
                }
                if n > 2 {
                    out[2] = 1.0;
                }
            }
            ActivationKind::Identity => {
                out[0] = t;
                if n > 1 {
                    out[1] = 1.0;
                }
            }
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActivationKind::Tanh => write!(f, "tanh"),
            ActivationKind::Softplus { beta } if *beta == 1.0 => write!(f, "softplus"),
            ActivationKind::Softplus { beta } => write!(f, "softplus:{beta}"),
            ActivationKind::Relu => write!(f, "relu"),
            ActivationKind::Square => write!(f, "square"),
            ActivationKind::Identity => write!(f, "identity"),
        }
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s.as_str(), None),
        };
        let kind = match (name, arg) {
            ("tanh", None) => ActivationKind::Tanh,
            ("relu", None) => ActivationKind::Relu,
            ("square", None) => ActivationKind::Square,
            ("identity", None) => ActivationKind::Identity,
            ("softplus", None) => ActivationKind::Softplus { beta: 1.0 },
            ("softplus", Some(b)) => {
                let beta: f64 = b
                    .parse()
                    .map_err(|_| Error::Config(format!("bad softplus beta {b:?}")))?;
                if !(beta > 0.0 && beta.is_finite()) {
                    return Err(Error::Config(format!("softplus beta must be positive, got {beta}")));
                }
                ActivationKind::Softplus { beta }
            }
            _ => return Err(Error::Config(format!("unknown activation {s:?}"))),
        };
        Ok(kind)
    }
}

impl TryFrom<String> for ActivationKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ActivationKind> for String {
    fn from(a: ActivationKind) -> String {
        a.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coeffs(a: ActivationKind, t: f64, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        a.taylor_coeffs(t, &mut out);
        out
    }

    #[test]
    fn tanh_coefficients_at_zero() {
        // tanh x = x - x³/3 + 2x⁵/15
        let c = coeffs(ActivationKind::Tanh, 0.0, 6);
        let expect = [0.0, 1.0, 0.0, -1.0 / 3.0, 0.0, 2.0 / 15.0];
        for (x, y) in c.iter().zip(expect) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn softplus_coefficients_at_zero() {
        // ln(1+e^x) = ln2 + x/2 + x²/8 - x⁴/192
        let c = coeffs(ActivationKind::Softplus { beta: 1.0 }, 0.0, 5);
        let expect = [2f64.ln(), 0.5, 0.125, 0.0, -1.0 / 192.0];
        for (x, y) in c.iter().zip(expect) {
            assert!((x - y).abs() < 1e-15, "{c:?}");
        }
    }

    #[test]
    fn softplus_beta_scaling() {
        // softplus_β(t) = softplus_1(βt)/β, so c_j scales by β^{j-1}.
        let b = 3.0;
        let c1 = coeffs(ActivationKind::Softplus { beta: 1.0 }, 0.6, 6);
        let cb = coeffs(ActivationKind::Softplus { beta: b }, 0.2, 6);
        for j in 0..6 {
            let expect = c1[j] * b.powi(j as i32 - 1);
            assert!((cb[j] - expect).abs() < 1e-12 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn first_coefficient_is_derivative() {
        for a in [
            ActivationKind::Tanh,
            ActivationKind::Softplus { beta: 2.5 },
            ActivationKind::Relu,
            ActivationKind::Square,
            ActivationKind::Identity,
        ] {
            for t in [-1.3, -0.2, 0.4, 2.0] {
                let c = coeffs(a, t, 2);
                assert!((c[0] - a.value(t)).abs() < 1e-15);
                assert!((c[1] - a.derivative(t)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        let a = ActivationKind::Softplus { beta: 1.0 };
        assert_eq!(a.value(800.0), 800.0);
        assert!(a.value(-800.0) >= 0.0);
    }

    #[test]
    fn parse_and_display_roundtrip() {
        for s in ["tanh", "relu", "square", "identity", "softplus", "softplus:4"] {
            let a: ActivationKind = s.parse().unwrap();
            assert_eq!(a.to_string(), s);
        }
        assert!("gelu".parse::<ActivationKind>().is_err());
        assert!("softplus:-1".parse::<ActivationKind>().is_err());
    }
}
