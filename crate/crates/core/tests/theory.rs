mod common;

use taylorlab::data::sphere_points;
use taylorlab::nn::{ParamEntry, ParamRole};
use taylorlab::theory::*;
use taylorlab::*;

fn unit_inputs(n: usize, d: usize, seed: u64) -> Tensor {
    sphere_points(n, d, &RngStream::new(seed, 7)).unwrap()
}

fn labels(n: usize) -> Vec<f64> {
    (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect()
}

fn perturbed(w: &[f64], scale: f64, seed: u64) -> Vec<f64> {
    let noise = RngStream::new(seed, 3).normal_vec(w.len());
    w.iter().zip(noise).map(|(a, b)| a + scale * b).collect()
}

/// `exp(A)` by scaling and squaring of the Taylor series.
fn expm(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let norm: f64 = a.iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let s = (norm.max(1.0).log2().ceil() as i32 + 4).max(0);
    let scale = 0.5f64.powi(s);
    let mul = |x: &[Vec<f64>], y: &[Vec<f64>]| -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..n).map(|j| (0..n).map(|k| x[i][k] * y[k][j]).sum()).collect()).collect()
    };
    let b: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
    let mut term: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
    let mut sum = term.clone();
    for k in 1..30 {
        term = mul(&term, &b).into_iter().map(|r| r.into_iter().map(|v| v / k as f64).collect()).collect();
        for i in 0..n {
            for j in 0..n {
                sum[i][j] += term[i][j];
            }
        }
    }
    for _ in 0..s {
        sum = mul(&sum, &sum);
    }
    sum
}

#[test]
fn linear_ntk_is_the_input_gram_matrix() {
    let (m, d, n) = (40, 5, 6);
    let net = TwoLayerNet::init(m, d, ActivationKind::Identity, 2).unwrap();
    let x = unit_inputs(n, d, 1);
    let ntk = empirical_ntk(&net, ModelKind::Full, net.w0(), &x).unwrap();
    for i in 0..n {
        for j in 0..n {
            let g: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| a * b).sum();
            assert!((ntk.theta.data()[i * n + j] - g).abs() < 1e-12);
        }
    }
}

#[test]
fn ntk_is_symmetric_psd_and_singular_on_duplicates() {
    let net = TwoLayerNet::init(64, 4, ActivationKind::Tanh, 5).unwrap();
    let x = unit_inputs(8, 4, 2);
    let ntk = empirical_ntk(&net, ModelKind::Full, net.w0(), &x).unwrap();
    let t = ntk.theta.data();
    for i in 0..8 {
        for j in 0..8 {
            assert_eq!(t[i * 8 + j], t[j * 8 + i]);
        }
    }
    assert!(ntk.lambda_min > 0.0);
    let mut rows: Vec<Vec<f64>> = (0..8).map(|i| x.row(i).to_vec()).collect();
    rows[5] = rows[2].clone();
    let dup = Tensor::from_rows(&rows).unwrap();
    let lam = empirical_ntk(&net, ModelKind::Full, net.w0(), &dup).unwrap().lambda_min;
    assert!(lam.abs() < 1e-10, "{lam}");
}

#[test]
fn taylorized_two_layer_matches_network_jets() {
    // The two-layer net as a bias-free NTK-parameterized MLP with a frozen
    // output layer; inputs are scaled by √d to cancel the first-layer factor.
    let (m, d) = (12, 3);
    for act in [ActivationKind::Tanh, ActivationKind::Softplus { beta: 1.0 }] {
        let net = TwoLayerNet::init(m, d, act, 4).unwrap();
        let arch = Architecture::mlp(&[d, m, 1], act).with_bias(false).with_frozen_layers(&[2]);
        let w = perturbed(net.w0(), 0.3, 1);
        let entries = vec![
            ParamEntry {
                name: "layer1.weight".into(),
                layer: 1,
                role: ParamRole::Weight,
                trainable: true,
                theta: Tensor::new(vec![m, d], w.clone()).unwrap(),
                anchor: Tensor::new(vec![m, d], net.w0().to_vec()).unwrap(),
            },
            ParamEntry {
                name: "layer2.weight".into(),
                layer: 2,
                role: ParamRole::Weight,
                trainable: false,
                theta: Tensor::new(vec![1, m], net.a().to_vec()).unwrap(),
                anchor: Tensor::new(vec![1, m], net.a().to_vec()).unwrap(),
            },
        ];
        let params = ParamSet::from_entries(InitScheme::Ntk, 0, entries).unwrap();
        let x = unit_inputs(5, d, 3);
        let scaled = x.scale((d as f64).sqrt());
        for k in 1..=4 {
            let jet = forward_taylorized(&arch, &params, &scaled, k).unwrap();
            for i in 0..5 {
                let ours = taylorized_two_layer_forward(&net, k, &w, x.row(i)).unwrap();
                let rel = (ours - jet.data()[i]).abs() / jet.data()[i].abs().max(1e-3);
                assert!(rel < 1e-10, "{act} k={k} row {i}: {ours} vs {}", jet.data()[i]);
            }
        }
        let full = forward_full(&arch, &params, &scaled).unwrap();
        for i in 0..5 {
            let ours = two_layer_forward(&net, &w, x.row(i)).unwrap();
            assert!((ours - full.data()[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn square_activation_is_exact_at_order_two() {
    let net = TwoLayerNet::init(9, 4, ActivationKind::Square, 8).unwrap();
    let x = unit_inputs(10, 4, 4);
    for s in 0..5 {
        let w = perturbed(net.w0(), 2.0, s);
        for i in 0..10 {
            let f = two_layer_forward(&net, &w, x.row(i)).unwrap();
            for k in 2..=4 {
                let fk = taylorized_two_layer_forward(&net, k, &w, x.row(i)).unwrap();
                assert!((f - fk).abs() < 1e-10 * f.abs().max(1.0));
            }
        }
    }
}

#[test]
fn zero_rate_flow_stays_at_init() {
    let net = TwoLayerNet::init(8, 3, ActivationKind::Tanh, 1).unwrap();
    let x = unit_inputs(4, 3, 5);
    for model in [ModelKind::Full, ModelKind::Taylor(2)] {
        let traj = gradient_flow_integrate(&net, model, &x, &labels(4), &GradientFlowConfig::new(0.0, 2.0, 0.1)).unwrap();
        assert!(traj.weights.iter().all(|w| w == net.w0()));
    }
}

#[test]
fn linear_flow_matches_matrix_exponential() {
    let (m, d, n) = (30, 6, 5);
    let net = TwoLayerNet::init(m, d, ActivationKind::Identity, 3).unwrap();
    let x = unit_inputs(n, d, 6);
    let y = labels(n);
    let (eta0, t) = (1.0, 2.0);
    let mut cfg = GradientFlowConfig::new(eta0, t, 1e-3);
    cfg.record_every = 500;
    let traj = gradient_flow_integrate(&net, ModelKind::Full, &x, &y, &cfg).unwrap();
    assert!((traj.times.last().unwrap() - t).abs() < 1e-12);
    let ntk = empirical_ntk(&net, ModelKind::Full, net.w0(), &x).unwrap();
    // L = (1/2n)Σ(f−y)² makes the residual decay with rate η0/n.
    let a: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| -eta0 * t / n as f64 * ntk.theta.data()[i * n + j]).collect())
        .collect();
    let e = expm(&a);
    let g0 = &traj.residuals[0];
    let expect: Vec<f64> = (0..n).map(|i| (0..n).map(|j| e[i][j] * g0[j]).sum()).collect();
    let got = traj.residuals.last().unwrap();
    assert!(common::normwise_rel_err(got, &expect) < 1e-6);
    let closed = linear_flow_residual(&ntk.theta, g0, eta0, t).unwrap();
    assert!(common::normwise_rel_err(&closed, &expect) < 1e-10);
}

#[test]
fn rk4_self_convergence() {
    let net = TwoLayerNet::init(32, 4, ActivationKind::Tanh, 2).unwrap();
    let x = unit_inputs(6, 4, 8);
    let y = labels(6);
    let run = |h: f64| {
        let traj = gradient_flow_integrate(&net, ModelKind::Taylor(2), &x, &y, &GradientFlowConfig::new(1.0, 5.0, h)).unwrap();
        traj.weights.last().unwrap().clone()
    };
    let (coarse, fine) = (run(0.1), run(0.05));
    let moved: f64 = fine.iter().zip(net.w0()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let diff: f64 = fine.iter().zip(&coarse).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(diff / moved < 0.01, "{}", diff / moved);
}

#[test]
fn kernel_drift_shrinks_with_width() {
    let x = unit_inputs(6, 4, 9);
    let y = labels(6);
    let drift = |m: usize| {
        let net = TwoLayerNet::init(m, 4, ActivationKind::Tanh, 0).unwrap();
        let traj = gradient_flow_integrate(&net, ModelKind::Full, &x, &y, &GradientFlowConfig::new(1.0, 10.0, 0.1)).unwrap();
        kernel_drift(&net, &traj, &x).unwrap()
    };
    let (small, large) = (drift(16), drift(1024));
    assert!(large < small / 2.0, "{small} -> {large}");
}

#[test]
fn coupling_is_zero_between_identical_models() {
    let net = TwoLayerNet::init(16, 3, ActivationKind::Tanh, 1).unwrap();
    let x = unit_inputs(4, 3, 1);
    let cfg = GradientFlowConfig::new(1.0, 1.0, 0.1);
    let a = gradient_flow_integrate(&net, ModelKind::Full, &x, &labels(4), &cfg).unwrap();
    let rep = coupling_deviation(&net, &a, &a, &unit_inputs(5, 3, 2)).unwrap();
    assert_eq!(rep.sup_param_dev, 0.0);
    assert_eq!(rep.sup_func_dev, 0.0);
}

#[test]
fn regularity_probe_respects_envelope_and_smooths_with_width() {
    let x = unit_inputs(8, 4, 3);
    let probe = |m: usize| {
        let net = TwoLayerNet::init(m, 4, ActivationKind::Tanh, 0).unwrap();
        jacobian_regularity_probe(&net, ModelKind::Full, &x, 1.0, 8, 1).unwrap()
    };
    let ps: Vec<RegularityProbe> = [16, 256, 4096].iter().map(|&m| probe(m)).collect();
    for p in &ps {
        assert!(p.max_jacobian_norm <= p.envelope * (1.0 + 1e-12));
    }
    // Lipschitz constant of the Jacobian decays like m^{-1/2}.
    assert!(ps[2].max_lipschitz_ratio < ps[0].max_lipschitz_ratio / 4.0);
}

#[test]
fn halving_horizon_and_dataset_gate() {
    let ds = scaling_dataset(8, 6, 10, ActivationKind::Tanh, 256, 1e-3, 0).unwrap();
    assert_eq!(ds.x.shape(), &[8, 6]);
    assert!(ds.lambda_min >= 1e-3);
    let net = TwoLayerNet::init(256, 6, ActivationKind::Tanh, 0).unwrap();
    let t = residual_halving_time(&net, &ds.x, &ds.y, &GradientFlowConfig::new(1.0, 200.0, 0.1)).unwrap().unwrap();
    let traj = gradient_flow_integrate(&net, ModelKind::Full, &ds.x, &ds.y, &GradientFlowConfig::new(1.0, t, 0.1)).unwrap();
    let r = traj.residual_norms();
    assert!(r.last().unwrap() <= &(0.5 * r[0]));
}

#[test]
fn loglog_slope_rejects_bad_input() {
    assert!(loglog_slope(&[1.0, 2.0], &[1.0]).is_err());
    assert!(loglog_slope(&[1.0, 2.0], &[1.0, -1.0]).is_err());
}
