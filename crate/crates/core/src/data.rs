//! Classification datasets: synthetic Gaussian blobs, points on the unit
//! sphere, and IDX image files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// A train/test split of feature rows with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x_train: Tensor,
    pub y_train: Vec<usize>,
    pub x_test: Tensor,
    pub y_test: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn n_train(&self) -> usize {
        self.y_train.len()
    }

    pub fn n_test(&self) -> usize {
        self.y_test.len()
    }

    pub fn features(&self) -> usize {
        self.x_train.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train() == 0 {
            return Err(Error::Dataset("training split is empty".into()));
        }
        if self.n_test() == 0 {
            return Err(Error::Dataset("test split is empty".into()));
        }
        let (rows, cols) = self.x_train.dims2()?;
        let (trows, tcols) = self.x_test.dims2()?;
        if rows != self.n_train() || trows != self.n_test() || cols != tcols {
            return Err(Error::Dataset("feature/label counts disagree".into()));
        }
        if let Some(y) = self.y_train.iter().chain(&self.y_test).find(|&&y| y >= self.classes) {
            return Err(Error::Dataset(format!("label {y} out of range for {} classes", self.classes)));
        }
        if !(self.x_train.is_finite() && self.x_test.is_finite()) {
            return Err(Error::Dataset("non-finite features".into()));
        }
        Ok(())
    }

    /// Standardizes features with statistics of the training split only.
    /// `channels == 0` standardizes every feature on its own; otherwise rows
    /// are `[channels × pixels]` images and each channel gets one mean/std.
    pub fn standardize(&mut self, channels: usize) -> Result<()> {
        let (n, d) = self.x_train.dims2()?;
        let groups = if channels == 0 { d } else { channels };
        if d % groups != 0 {
            return Err(Error::Dataset(format!("{d} features do not split into {groups} channels")));
        }
        let per = d / groups;
        let group_of = |j: usize| if channels == 0 { j } else { j / per };
        let mut sum = vec![0.0; groups];
        let mut count = vec![0.0; groups];
        for r in 0..n {
            for (j, v) in self.x_train.row(r).iter().enumerate() {
                sum[group_of(j)] += v;
                count[group_of(j)] += 1.0;
            }
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, c)| s / c).collect();
        let mut sq = vec![0.0; groups];
        for r in 0..n {
            for (j, v) in self.x_train.row(r).iter().enumerate() {
                sq[group_of(j)] += (v - mean[group_of(j)]).powi(2);
            }
        }
        let std: Vec<f64> = sq
            .iter()
            .zip(&count)
            .map(|(s, c)| {
                let sd = (s / c).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        for t in [&mut self.x_train, &mut self.x_test] {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                let g = group_of(i % d);
                *v = (*v - mean[g]) / std[g];
            }
        }
        Ok(())
    }
}

/// Gaussian mixture classification. Each class owns `centers_per_class`
/// centers drawn as `N(0, center_scale²)` in the first `intrinsic_dim`
/// coordinates; a sample is a random center of its class plus isotropic
/// `N(0, noise²)` noise in all `dim` coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsSpec {
    pub dim: usize,
    pub classes: usize,
    pub centers_per_class: usize,
    pub intrinsic_dim: usize,
    pub center_scale: f64,
    pub noise: f64,
}

/// The default task: two classes of eight tight clusters on a 4-dimensional
/// subspace of `ℝ^32`. Clusters of opposite classes interleave, so the
/// decision boundary is curved and a linearized model cannot fit it.
impl Default for BlobsSpec {
    fn default() -> Self {
        Self {
            dim: 32,
            classes: 2,
            centers_per_class: 8,
            intrinsic_dim: 4,
            center_scale: 1.0,
            noise: 0.15,
        }
    }
}

fn draw_split(n_train: usize, n_test: usize, seed: u64, mut sample: impl FnMut(usize, &mut Vec<f64>) -> usize) -> (Vec<Vec<f64>>, Vec<usize>, Vec<usize>) {
    let total = n_train + n_test;
    let mut rows = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let mut row = Vec::new();
        labels.push(sample(i, &mut row));
        rows.push(row);
    }
    let perm = RngStream::new(seed, 1 << 40).permutation(total);
    (rows, labels, perm)
}

fn assemble(rows: Vec<Vec<f64>>, labels: Vec<usize>, perm: Vec<usize>, n_train: usize, dim: usize, classes: usize) -> Result<Dataset> {
    let pick = |idx: &[usize]| -> Result<(Tensor, Vec<usize>)> {
        let data = idx.iter().flat_map(|&i| rows[i].iter().copied()).collect();
        Ok((Tensor::new(vec![idx.len(), dim], data)?, idx.iter().map(|&i| labels[i]).collect()))
    };
    let (x_train, y_train) = pick(&perm[..n_train])?;
    let (x_test, y_test) = pick(&perm[n_train..])?;
    Ok(Dataset { x_train, y_train, x_test, y_test, classes })
}

pub fn blobs(spec: &BlobsSpec, n_train: usize, n_test: usize, seed: u64) -> Result<Dataset> {
    if spec.dim == 0 || spec.classes < 2 || spec.centers_per_class == 0 {
        return Err(Error::Config("blobs need dim > 0, >= 2 classes and >= 1 center".into()));
    }
    if spec.intrinsic_dim == 0 || spec.intrinsic_dim > spec.dim {
        return Err(Error::Config(format!(
            "blobs intrinsic_dim must be in 1..={}, got {}",
            spec.dim, spec.intrinsic_dim
        )));
    }
    let n_centers = spec.classes * spec.centers_per_class;
    let raw = RngStream::new(seed, 1 << 41).normal_vec(n_centers * spec.intrinsic_dim);
    let centers: Vec<Vec<f64>> = raw
        .chunks(spec.intrinsic_dim)
        .map(|c| c.iter().map(|v| v * spec.center_scale).collect())
        .collect();
    let picks = RngStream::new(seed, (1 << 41) + 1).uniform_vec(n_train + n_test, 0.0, 1.0);
    let noise_stream = RngStream::new(seed, (1 << 41) + 2);
    let noise = noise_stream.normal_vec((n_train + n_test) * spec.dim);
    let (rows, labels, perm) = draw_split(n_train, n_test, seed, |i, row| {
        let c = ((picks[i] * n_centers as f64) as usize).min(n_centers - 1);
        row.extend((0..spec.dim).map(|j| {
            let base = if j < spec.intrinsic_dim { centers[c][j] } else { 0.0 };
            base + spec.noise * noise[i * spec.dim + j]
        }));
        c % spec.classes
    });
    assemble(rows, labels, perm, n_train, spec.dim, spec.classes)
}

/// `n` points uniform on the unit sphere in `ℝ^dim`.
pub fn sphere_points(n: usize, dim: usize, rng: &RngStream) -> Result<Tensor> {
    if dim == 0 {
        return Err(Error::Config("sphere dimension must be positive".into()));
    }
    let mut data = rng.normal_vec(n * dim);
    for row in data.chunks_mut(dim) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Tensor::new(vec![n, dim], data)
}

/// Unit-sphere inputs with uniformly random binary labels.
pub fn sphere(dim: usize, n_train: usize, n_test: usize, seed: u64) -> Result<Dataset> {
    let x = sphere_points(n_train + n_test, dim, &RngStream::new(seed, 1 << 42))?;
    let coin = RngStream::new(seed, (1 << 42) + 1).uniform_vec(n_train + n_test, 0.0, 1.0);
    let (rows, labels, perm) = draw_split(n_train, n_test, seed, |i, row| {
        row.extend_from_slice(x.row(i));
        usize::from(coin[i] >= 0.5)
    });
    assemble(rows, labels, perm, n_train, dim, 2)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn parse_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

fn be_u32(buf: &[u8], off: usize, path: &Path, what: &str) -> Result<u32> {
    buf.get(off..off + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| parse_err(path, buf.len(), format!("truncated while reading {what}")))
}

/// Parses an IDX image file (`0x00000803`, `u8` pixels). Returns the first
/// `limit` images as rows scaled to `[0, 1]` plus `(rows, cols)`.
pub fn parse_idx_images(buf: &[u8], path: &Path, limit: usize) -> Result<(Tensor, usize, usize)> {
    let magic = be_u32(buf, 0, path, "magic")?;
    if magic != IDX_IMAGES {
        return Err(parse_err(path, 0, format!("bad image magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let count = be_u32(buf, 4, path, "image count")? as usize;
    let rows = be_u32(buf, 8, path, "row count")? as usize;
    let cols = be_u32(buf, 12, path, "column count")? as usize;
    let n = count.min(limit);
    let px = rows * cols;
    let need = 16 + n * px;
    if buf.len() < need {
        return Err(parse_err(path, buf.len(), format!("truncated: {n} images need {need} bytes")));
    }
    let data = buf[16..need].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((Tensor::new(vec![n, px], data)?, rows, cols))
}

/// Parses an IDX label file (`0x00000801`) and checks every label is below
/// `classes`.
pub fn parse_idx_labels(buf: &[u8], path: &Path, limit: usize, classes: usize) -> Result<Vec<usize>> {
    let magic = be_u32(buf, 0, path, "magic")?;
    if magic != IDX_LABELS {
        return Err(parse_err(path, 0, format!("bad label magic {magic:#010x}, expected {IDX_LABELS:#010x}")));
    }
    let count = be_u32(buf, 4, path, "label count")? as usize;
    let n = count.min(limit);
    if buf.len() < 8 + n {
        return Err(parse_err(path, buf.len(), format!("truncated: {n} labels need {} bytes", 8 + n)));
    }
    buf[8..8 + n]
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let y = usize::from(b);
            if y >= classes {
                Err(parse_err(path, 8 + i, format!("label {y} out of range for {classes} classes")))
            } else {
                Ok(y)
            }
        })
        .collect()
}

/// Reads the first `limit` examples of an IDX image/label pair.
pub fn load_idx(images: &Path, labels: &Path, limit: usize, classes: usize) -> Result<(Tensor, Vec<usize>)> {
    let ib = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lb = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let (x, _, _) = parse_idx_images(&ib, images, limit)?;
    let y = parse_idx_labels(&lb, labels, limit, classes)?;
    if x.shape()[0] != y.len() {
        return Err(Error::Dataset(format!(
            "{} images but {} labels",
            x.shape()[0],
            y.len()
        )));
    }
    Ok((x, y))
}

/// Encodes images (values in `[0,1]`) and labels in IDX format.
pub fn encode_idx(x: &Tensor, rows: usize, cols: usize, labels: &[usize]) -> (Vec<u8>, Vec<u8>) {
    let n = labels.len();
    let mut img = Vec::with_capacity(16 + x.len());
    for v in [IDX_IMAGES, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(x.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lab = Vec::with_capacity(8 + n);
    for v in [IDX_LABELS, n as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(labels.iter().map(|&y| y as u8));
    (img, lab)
}
