//! Agreement metrics between Taylorized and full training trajectories.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::nn::ModelKind;
use crate::tensor::Tensor;
use crate::train::PairedRun;

/// Displacement norms below this make a cosine undefined.
pub const MIN_DISPLACEMENT: f64 = 1e-30;

fn cosine_of_displacements(a: &[f64], b: &[f64], origin: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() || a.len() != origin.len() {
        return Err(Error::shape("cosine", &[a.len(), b.len()], &[origin.len()]));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for ((&x, &y), &o) in a.iter().zip(b).zip(origin) {
        let (dx, dy) = (x - o, y - o);
        dot += dx * dy;
        na += dx * dx;
        nb += dy * dy;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < MIN_DISPLACEMENT || nb < MIN_DISPLACEMENT {
        return Ok(None);
    }
    Ok(Some((dot / (na * nb)).clamp(-1.0, 1.0)))
}

/// Cosine between `θk − θ0` and `θ − θ0`; `None` when either is zero.
pub fn cos_param(theta_k: &[f64], theta: &[f64], theta0: &[f64]) -> Result<Option<f64>> {
    cosine_of_displacements(theta_k, theta, theta0)
}

/// Cosine between `fk − f0` and `f − f0` over all (example, class) entries.
/// Inputs are expected to be demeaned already.
pub fn cos_func(fk: &Tensor, f: &Tensor, f0: &Tensor) -> Result<Option<f64>> {
    if fk.shape() != f.shape() || f.shape() != f0.shape() {
        return Err(Error::shape("cos_func", fk.shape(), f.shape()));
    }
    cosine_of_displacements(fk.data(), f.data(), f0.data())
}

/// Subtracts each row's mean over the class axis.
pub fn demean_logits(logits: &Tensor) -> Result<Tensor> {
    let (n, c) = logits.dims2()?;
    let mut out = logits.clone().into_data();
    for row in out.chunks_mut(c.max(1)) {
        let mean = row.iter().sum::<f64>() / c as f64;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    Tensor::new(vec![n, c], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilaritySeries {
    pub model: ModelKind,
    pub steps: Vec<usize>,
    pub cos_param: Vec<Option<f64>>,
    pub cos_func: Vec<Option<f64>>,
}

impl SimilaritySeries {
    /// Mean of the defined `cos_func` values.
    pub fn mean_cos_func(&self) -> Option<f64> {
        mean_defined(&self.cos_func)
    }

    pub fn mean_cos_param(&self) -> Option<f64> {
        mean_defined(&self.cos_param)
    }
}

fn mean_defined(v: &[Option<f64>]) -> Option<f64> {
    let vals: Vec<f64> = v.iter().flatten().copied().collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// One series per Taylorized model of the run, against the full model.
pub fn similarity_series(run: &PairedRun) -> Result<Vec<SimilaritySeries>> {
    let full = run
        .record(ModelKind::Full)
        .ok_or_else(|| Error::InvalidArgument("run has no full model".into()))?;
    let theta0 = run.theta0();
    let f0 = &full.checkpoints[0].test_logits;
    run.records
        .iter()
        .filter(|r| r.model != ModelKind::Full)
        .map(|r| {
            let mut cp = Vec::new();
            let mut cf = Vec::new();
            for (a, b) in r.checkpoints.iter().zip(&full.checkpoints) {
                cp.push(cos_param(&a.theta, &b.theta, &theta0)?);
                cf.push(cos_func(&a.test_logits, &b.test_logits, f0)?);
            }
            Ok(SimilaritySeries {
                model: r.model,
                steps: run.steps.clone(),
                cos_param: cp,
                cos_func: cf,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerMovementProfile {
    pub step: usize,
    pub layers: Vec<String>,
    pub distance: Vec<f64>,
    /// `distance / ‖θ_{ℓ,0}‖`, `None` where the initial layer is zero.
    pub normalized: Vec<Option<f64>>,
}

/// Per-layer Frobenius distance from the anchor. Weights and biases of one
/// layer are pooled.
pub fn layer_movement(params: &crate::nn::ParamSet, step: usize) -> LayerMovementProfile {
    let mut layers: Vec<(usize, f64, f64)> = Vec::new();
    for e in params.entries() {
        let d2: f64 = e
            .theta
            .data()
            .iter()
            .zip(e.anchor.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let n2: f64 = e.anchor.data().iter().map(|v| v * v).sum();
        match layers.last_mut() {
            Some(l) if l.0 == e.layer => {
                l.1 += d2;
                l.2 += n2;
            }
            _ => layers.push((e.layer, d2, n2)),
        }
    }
    LayerMovementProfile {
        step,
        layers: layers.iter().map(|l| format!("layer{}", l.0)).collect(),
        distance: layers.iter().map(|l| l.1.sqrt()).collect(),
        normalized: layers
            .iter()
            .map(|l| if l.2 > 0.0 { Some(l.1.sqrt() / l.2.sqrt()) } else { None })
            .collect(),
    }
}

/// L² distance between two profiles after scaling each to unit norm.
pub fn profile_shape_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("profile_shape_distance", &[a.len()], &[b.len()]));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(MIN_DISPLACEMENT);
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(MIN_DISPLACEMENT);
    Ok(a.iter().zip(b).map(|(x, y)| (x / na - y / nb).powi(2)).sum::<f64>().sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaEmbedding {
    /// `[n_rows × 2]` projected coordinates, in input row order.
    pub coords: Vec<[f64; 2]>,
    pub explained: [f64; 2],
    /// The two principal directions (unit vectors).
    pub components: [Vec<f64>; 2],
}

/// Joint 2-D PCA of flattened snapshots (one row each) via the SVD of the
/// centered matrix.
pub fn pca_embed(rows: &[Vec<f64>]) -> Result<PcaEmbedding> {
    if rows.len() < 3 {
        return Err(Error::InvalidArgument(format!("PCA needs >= 3 snapshots, got {}", rows.len())));
    }
    let dim = rows[0].len();
    if dim == 0 || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::InvalidArgument("PCA snapshots must share a nonzero length".into()));
    }
    let n = rows.len();
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, dim, |i, j| rows[i][j] - mean[j]);
    let svd = centered.clone().svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Eigen("SVD did not return right vectors".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    let mut components: [Vec<f64>; 2] = [vec![0.0; dim], vec![0.0; dim]];
    let mut explained = [0.0; 2];
    let top = svd.singular_values[order[0]];
    for (slot, &idx) in order.iter().take(2).enumerate() {
        let s = svd.singular_values[idx];
        // Components at roundoff level relative to the leading one carry no
        // signal; report them as absent.
        if total > 0.0 && s > 1e-12 * top.max(f64::MIN_POSITIVE) {
            explained[slot] = s * s / total;
            let mut comp: Vec<f64> = v_t.row(idx).iter().copied().collect();
            // Sign convention: largest-magnitude entry positive.
            let lead = comp.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            if lead < 0.0 {
                comp.iter_mut().for_each(|v| *v = -*v);
            }
            components[slot] = comp;
        }
    }
    let coords = (0..n)
        .map(|i| {
            let row = centered.row(i);
            let proj = |c: &[f64]| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [proj(&components[0]), proj(&components[1])]
        })
        .collect();
    Ok(PcaEmbedding { coords, explained, components })
}

/// Joint PCA over every (model, checkpoint) test-logit snapshot of a run.
/// Returns `(model, step, pc1, pc2)` rows and the embedding.
pub fn pca_of_run(run: &PairedRun) -> Result<(Vec<(ModelKind, usize, f64, f64)>, PcaEmbedding)> {
    let mut keys = Vec::new();
    let mut rows = Vec::new();
    for r in &run.records {
        for c in &r.checkpoints {
            keys.push((r.model, c.step));
            rows.push(c.test_logits.data().to_vec());
        }
    }
    let emb = pca_embed(&rows)?;
    let out = keys
        .into_iter()
        .zip(&emb.coords)
        .map(|((m, s), c)| (m, s, c[0], c[1]))
        .collect();
    Ok((out, emb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        let o = [0.0, 0.0];
        assert_eq!(cos_param(&[1.0, 0.0], &[0.0, 1.0], &o).unwrap(), Some(0.0));
        let c = cos_param(&[1.0, 1.0], &[1.0, 0.0], &o).unwrap().unwrap();
        assert!((c - 0.5f64.sqrt()).abs() < 1e-15);
        let same = cos_param(&[2.0, 3.0], &[2.0, 3.0], &[1.0, 1.0]).unwrap().unwrap();
        assert!((same - 1.0).abs() < 1e-15);
        assert_eq!(cos_param(&o, &[1.0, 0.0], &o).unwrap(), None);
        assert!(cos_param(&[1.0], &o, &o).is_err());
    }

    #[test]
    fn demean_examples() {
        let t = Tensor::from_rows(&[vec![5.0, 5.0, 5.0], vec![1.0, 2.0, 3.0]]).unwrap();
        let d = demean_logits(&t).unwrap();
        assert_eq!(d.data(), &[0.0, 0.0, 0.0, -1.0, 0.0, 1.0]);
        assert_eq!(demean_logits(&d).unwrap(), d);
    }

    #[test]
    fn antipodal_function_displacement() {
        let f0 = Tensor::from_rows(&[vec![0.5, -0.5]]).unwrap();
        let u = Tensor::from_rows(&[vec![0.2, -0.2]]).unwrap();
        let c = cos_func(&f0.sub(&u).unwrap(), &f0.add(&u).unwrap(), &f0).unwrap();
        assert!((c.unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn pca_of_collinear_snapshots_is_rank_one() {
        let base = [1.0, -2.0, 0.5, 3.0];
        let u = [0.3, 0.1, -0.7, 0.2];
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|t| base.iter().zip(&u).map(|(b, v)| b + t as f64 * v).collect())
            .collect();
        let e = pca_embed(&rows).unwrap();
        assert!((e.explained[0] - 1.0).abs() < 1e-12);
        assert_eq!(e.explained[1], 0.0);
        let scale = e.coords.iter().map(|c| c[0].abs()).fold(0.0, f64::max);
        assert!(e.coords.iter().all(|c| c[1].abs() < 1e-10 * scale));
    }

    #[test]
    fn layer_movement_of_a_single_layer() {
        let arch = crate::nn::Architecture::mlp(&[2, 3, 3, 1], crate::nn::ActivationKind::Tanh);
        let mut p = crate::nn::init_params(&arch, crate::nn::InitScheme::Standard, 0).unwrap();
        let zero = layer_movement(&p, 0);
        assert!(zero.distance.iter().all(|&d| d == 0.0));
        let mut w = p.theta("layer2.weight").unwrap().clone().into_data();
        w[0] += 0.6;
        w[4] += 0.8;
        p.set_theta("layer2.weight", Tensor::new(vec![3, 3], w).unwrap()).unwrap();
        let prof = layer_movement(&p, 5);
        assert_eq!(prof.layers, vec!["layer1", "layer2", "layer3"]);
        assert_eq!(prof.distance[0], 0.0);
        assert!((prof.distance[1] - 1.0).abs() < 1e-15);
        assert_eq!(prof.distance[2], 0.0);
    }
}
