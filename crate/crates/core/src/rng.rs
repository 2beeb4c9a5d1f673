//! Seeded, splittable random streams.
//!
//! Every stream is a ChaCha20 keystream addressed by `(seed, stream id)`.
//! ChaCha is counter based, so two streams never share state and the draws
//! of one stream do not depend on how many draws other streams made.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// A derived stream id, used to give sub-components their own streams.
    pub fn substream(&self, tag: u64) -> Self {
        Self {
            seed: self.seed,
            stream: self
                .stream
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(tag.wrapping_add(1)),
        }
    }

    pub fn generator(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    pub fn permutation(&self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.generator());
        idx
    }

    pub fn uniform_vec(&self, n: usize, low: f64, high: f64) -> Vec<f64> {
        let mut rng = self.generator();
        (0..n).map(|_| rng.random_range(low..high)).collect()
    }

    pub fn normal_vec(&self, n: usize) -> Vec<f64> {
        let mut rng = self.generator();
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }
}

/// I.i.d. `N(0, std²)` entries drawn from `rng`.
pub fn gaussian_fill(shape: &[usize], std: f64, rng: &RngStream) -> Result<Tensor> {
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "gaussian_fill needs a positive finite std, got {std}"
        )));
    }
    let n = shape.iter().product();
    let data = rng.normal_vec(n).into_iter().map(|z| z * std).collect();
    Tensor::new(shape.to_vec(), data)
}
