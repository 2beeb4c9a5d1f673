mod common;

use common::*;
use taylorlab::nn::{self, forward_model, output_jet, serialize, ModelKind};
use taylorlab::tape::Tape;
use taylorlab::{
    forward_full, forward_taylorized, init_params, loss_eval, ActivationKind, Architecture, InitScheme,
    Jet, LossKind, Tensor,
};

fn tanh_mlp() -> (Architecture, taylorlab::ParamSet) {
    let arch = Architecture::mlp(&[5, 16, 12, 3], ActivationKind::Tanh);
    let params = init_params(&arch, InitScheme::Standard, 11).unwrap();
    (arch, params)
}

fn direction(params: &taylorlab::ParamSet, seed: u64, scale: f64) -> Vec<f64> {
    let d = random_tensor(&[params.num_params()], seed, 99, 1.0);
    let norm = d.frobenius_norm();
    d.data().iter().map(|v| v * scale / norm).collect()
}

#[test]
fn jet_coefficients_match_finite_difference_taylor_terms() {
    let (arch, params) = tanh_mlp();
    let x = random_tensor(&[4, 5], 3, 0, 1.0);
    let delta = direction(&params, 5, 3.0);
    let theta = displaced(&params, &delta, 1.0);
    let jet = output_jet(&arch, &theta, &x, 4).unwrap();
    let fd = fd_taylor_coeffs(
        |t| naive_batch(&params, &displaced(&params, &delta, t).theta_flat(), &x, f64::tanh).into_data(),
        0.1,
    );
    for j in 0..=4 {
        let err = normwise_rel_err(jet.coeff(j).data(), &fd[j]);
        assert!(err < 1e-5, "order {j}: rel err {err}");
    }
}

#[test]
fn first_order_jet_matches_dual_numbers() {
    let (arch, params) = tanh_mlp();
    let x = random_tensor(&[3, 5], 8, 0, 1.0);
    let delta = direction(&params, 2, 1.0);
    let theta = displaced(&params, &delta, 1.0);
    let jet = output_jet(&arch, &theta, &x, 1).unwrap();
    let duals: Vec<Dual> = params.anchor_flat().iter().zip(&delta).map(|(&a, &d)| Dual::new(a, d)).collect();
    let layers = naive_layers(&params, &duals);
    let mut tangents = Vec::new();
    for r in 0..3 {
        tangents.extend(naive_mlp(&layers, x.row(r), |d: Dual| d.tanh(), InitScheme::Standard).iter().map(|d| d.t));
    }
    for (a, b) in jet.coeff(1).data().iter().zip(&tangents) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn linearized_model_matches_reverse_mode_jvp() {
    // f^(1)(θ) = f(θ0) + <∇f(θ0), Δθ>; ∇f per output from backward on
    // Σ_i f_i·c_i with a one-hot c.
    let (arch, params) = tanh_mlp();
    let x = random_tensor(&[1, 5], 4, 0, 1.0);
    let delta = direction(&params, 6, 0.5);
    let theta = displaced(&params, &delta, 1.0);
    let f1 = forward_taylorized(&arch, &theta, &x, 1).unwrap();
    let f0 = forward_full(&arch, &params, &x).unwrap();
    for c in 0..3 {
        let mut tape = Tape::new();
        let out = nn::record_forward(&mut tape, &arch, &params, &x, 0).unwrap();
        let mut sel = vec![0.0; 3];
        sel[c] = 1.0;
        let sel = Tensor::new(vec![1, 3], sel).unwrap();
        let s = tape.constant(&sel, 0).unwrap();
        let m = tape.mul(out, s).unwrap();
        let l = tape.sum(m).unwrap();
        let g = tape.backward(l).unwrap();
        let mut jvp = 0.0;
        let mut off = 0;
        for e in params.entries() {
            let gi = g.get(&e.name).unwrap();
            for (a, b) in gi.data().iter().zip(&delta[off..off + e.theta.len()]) {
                jvp += a * b;
            }
            off += e.theta.len();
        }
        let expect = f0.data()[c] + jvp;
        assert!((f1.data()[c] - expect).abs() < 1e-10);
    }
}

#[test]
fn forward_full_matches_naive_evaluator() {
    let (arch, params) = tanh_mlp();
    let x = random_tensor(&[7, 5], 1, 0, 1.5);
    let got = forward_full(&arch, &params, &x).unwrap();
    let expect = naive_batch(&params, &params.theta_flat(), &x, f64::tanh);
    assert!(got.max_abs_diff(&expect).unwrap() < 1e-12);

    let ntk = init_params(&arch, InitScheme::Ntk, 3).unwrap();
    let got = forward_full(&arch, &ntk, &x).unwrap();
    let expect = naive_batch(&ntk, &ntk.theta_flat(), &x, f64::tanh);
    assert!(got.max_abs_diff(&expect).unwrap() < 1e-12);
}

#[test]
fn zero_input_zero_bias_tanh_gives_zero_logits() {
    let arch = Architecture::mlp(&[4, 8, 2], ActivationKind::Tanh).with_bias(false);
    let params = init_params(&arch, InitScheme::Standard, 2).unwrap();
    let out = forward_full(&arch, &params, &Tensor::zeros(&[3, 4])).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn one_layer_net_is_affine() {
    let arch = Architecture::mlp(&[3, 2], ActivationKind::Tanh);
    let params = init_params(&arch, InitScheme::Standard, 9).unwrap();
    let x = random_tensor(&[4, 3], 2, 0, 1.0);
    let w = params.theta("layer1.weight").unwrap();
    let b = params.theta("layer1.bias").unwrap();
    let mut expect = x.matmul(&w.transpose().unwrap()).unwrap().into_data();
    for (i, v) in expect.iter_mut().enumerate() {
        *v += b.data()[i % 2];
    }
    assert_eq!(forward_full(&arch, &params, &x).unwrap().data(), expect.as_slice());
}

#[test]
fn taylorized_at_anchor_equals_full() {
    let (arch, params) = tanh_mlp();
    let x = random_tensor(&[5, 5], 12, 0, 1.0);
    let full = forward_full(&arch, &params, &x).unwrap();
    for k in 1..=4 {
        assert_eq!(forward_taylorized(&arch, &params, &x, k).unwrap(), full);
    }
}

#[test]
fn square_net_is_reproduced_exactly_at_order_four() {
    let arch = Architecture::mlp(&[4, 6, 2], ActivationKind::Square);
    for trial in 0..20 {
        let params = init_params(&arch, InitScheme::Standard, trial).unwrap();
        let delta = direction(&params, 100 + trial, 2.0);
        let theta = displaced(&params, &delta, 1.0);
        let x = random_tensor(&[5, 4], trial, 7, 1.0);
        let full = forward_full(&arch, &theta, &x).unwrap();
        let taylor = forward_taylorized(&arch, &theta, &x, 4).unwrap();
        assert!(full.max_abs_diff(&taylor).unwrap() < 1e-10);
    }
}

#[test]
fn nesting_equivalence() {
    let (arch, params) = tanh_mlp();
    let x = random_tensor(&[3, 5], 5, 0, 1.0);
    let theta = displaced(&params, &direction(&params, 1, 1.0), 1.0);
    let j1 = output_jet(&arch, &theta, &x, 1).unwrap();
    for k in 2..=6 {
        let jk = output_jet(&arch, &theta, &x, k).unwrap();
        assert!(jk.coeff(0).max_abs_diff(j1.coeff(0)).unwrap() < 1e-14);
        assert!(jk.coeff(1).max_abs_diff(j1.coeff(1)).unwrap() < 1e-14);
    }
}

#[test]
fn final_layer_only_training_is_linear() {
    let arch = Architecture::mlp(&[4, 10, 10, 3], ActivationKind::Tanh).with_frozen_layers(&[1, 2]);
    let params = init_params(&arch, InitScheme::Standard, 4).unwrap();
    let mut theta = params.clone();
    for name in ["layer3.weight", "layer3.bias"] {
        let t = theta.theta(name).unwrap().map(|v| v + 0.3);
        theta.set_theta(name, t).unwrap();
    }
    let x = random_tensor(&[4, 4], 9, 0, 1.0);
    let jet = output_jet(&arch, &theta, &x, 4).unwrap();
    for j in 2..=4 {
        assert!(jet.coeff(j).data().iter().all(|&v| v == 0.0));
    }
    assert_eq!(params.trainable_names(), vec!["layer3.weight", "layer3.bias"]);
}

#[test]
fn monotone_local_approximation() {
    let arch = Architecture::mlp(&[5, 20, 20, 3], ActivationKind::Softplus { beta: 1.0 });
    let trials = 40;
    let mut good = 0;
    for trial in 0..trials {
        let params = init_params(&arch, InitScheme::Standard, 500 + trial).unwrap();
        let scale = 0.01 * params.anchor_flat().iter().map(|v| v * v).sum::<f64>().sqrt();
        let theta = displaced(&params, &direction(&params, trial, scale), 1.0);
        let x = random_tensor(&[8, 5], trial, 3, 1.0);
        let full = forward_full(&arch, &theta, &x).unwrap();
        let errs: Vec<f64> = (1..=4)
            .map(|k| forward_taylorized(&arch, &theta, &x, k).unwrap().sub(&full).unwrap().frobenius_norm())
            .collect();
        if errs.windows(2).all(|w| w[1] <= w[0]) {
            good += 1;
        }
    }
    assert!(good as f64 >= 0.95 * trials as f64, "{good}/{trials}");
}

#[test]
fn init_variances() {
    let arch = Architecture::mlp(&[4, 100, 1], ActivationKind::Tanh);
    for (scheme, expect) in [(InitScheme::Standard, 0.25), (InitScheme::Ntk, 1.0)] {
        let mut vals = Vec::new();
        for seed in 0..50 {
            let p = init_params(&arch, scheme, seed).unwrap();
            vals.extend_from_slice(p.theta("layer1.weight").unwrap().data());
            assert_eq!(p.theta_flat(), p.anchor_flat());
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var / expect - 1.0).abs() < 0.1, "{scheme}: {var}");
    }
}

#[test]
fn ntk_and_standard_agree_at_init() {
    let arch = Architecture::mlp(&[6, 32, 32, 4], ActivationKind::Tanh);
    let x = random_tensor(&[5, 6], 0, 0, 1.0);
    let a = forward_full(&arch, &init_params(&arch, InitScheme::Standard, 21).unwrap(), &x).unwrap();
    let b = forward_full(&arch, &init_params(&arch, InitScheme::Ntk, 21).unwrap(), &x).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
}

#[test]
fn loss_examples() {
    let z = Tensor::zeros(&[3, 10]);
    let ce = loss_eval(LossKind::CrossEntropy, &z, &[0, 4, 9]).unwrap();
    assert!((ce - 10f64.ln()).abs() < 1e-12);
    assert!((ce - 2.302585).abs() < 1e-6);

    let logits = random_tensor(&[4, 5], 3, 0, 2.0);
    let labels = [1, 0, 4, 2];
    let a = loss_eval(LossKind::CrossEntropy, &logits, &labels).unwrap();
    let b = loss_eval(LossKind::CrossEntropy, &logits.map(|v| v + 7.0), &labels).unwrap();
    assert!((a - b).abs() < 1e-12);

    let mut onehot = Tensor::zeros(&[2, 3]).into_data();
    onehot[1] = 1.0;
    onehot[5] = 1.0;
    let onehot = Tensor::new(vec![2, 3], onehot).unwrap();
    assert_eq!(loss_eval(LossKind::Squared, &onehot, &[1, 2]).unwrap(), 0.0);

    let bad = Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap();
    assert!(loss_eval(LossKind::CrossEntropy, &bad, &[0]).is_err());
}

#[test]
fn relu_taylor_convention() {
    // With ReLU every order-≥2 coefficient of a one-hidden-layer net vanishes
    // except through products of first-layer and second-layer directions.
    let arch = Architecture::mlp(&[3, 8, 2], ActivationKind::Relu);
    let params = init_params(&arch, InitScheme::Standard, 1).unwrap();
    let theta = displaced(&params, &direction(&params, 3, 1.0), 1.0);
    let x = random_tensor(&[4, 3], 2, 0, 1.0);
    let jet = output_jet(&arch, &theta, &x, 4).unwrap();
    for j in 3..=4 {
        assert!(jet.coeff(j).data().iter().all(|&v| v == 0.0));
    }
    assert_eq!(
        forward_model(&arch, &theta, &x, ModelKind::Taylor(2)).unwrap(),
        forward_model(&arch, &theta, &x, ModelKind::Taylor(4)).unwrap()
    );
}

#[test]
fn cnn_forward_runs_and_matches_taylor_at_anchor() {
    let arch = Architecture::Cnn {
        input: [2, 5, 4],
        depth: 2,
        channels: 3,
        classes: 4,
        activation: ActivationKind::Tanh,
        kernel: 3,
        bias: true,
        frozen_layers: vec![],
    };
    let params = init_params(&arch, InitScheme::Standard, 8).unwrap();
    let x = random_tensor(&[2, 40], 1, 0, 1.0);
    let full = forward_full(&arch, &params, &x).unwrap();
    assert_eq!(full.shape(), &[2, 4]);
    assert_eq!(forward_taylorized(&arch, &params, &x, 3).unwrap(), full);

    let delta = direction(&params, 4, 1.0);
    let theta = displaced(&params, &delta, 1.0);
    let jet = output_jet(&arch, &theta, &x, 3).unwrap();
    let fd = fd_taylor_coeffs(
        |t| forward_full(&arch, &displaced(&params, &delta, t), &x).unwrap().into_data(),
        0.1,
    );
    for j in 0..=3 {
        assert!(normwise_rel_err(jet.coeff(j).data(), &fd[j]) < 1e-5, "order {j}");
    }
}

#[test]
fn param_set_serialization_roundtrip() {
    let (_, params) = tanh_mlp();
    let mut p = displaced(&params, &direction(&params, 1, 1.0), 1.0);
    p.set_theta("layer1.bias", Tensor::new(vec![16], vec![f64::MIN_POSITIVE; 16]).unwrap()).unwrap();
    let bytes = serialize::to_bytes(&p);
    let back = serialize::from_bytes(&bytes, &serialize::memory_path()).unwrap();
    assert_eq!(back, p);
    assert_eq!(serialize::to_bytes(&back), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.bin");
    serialize::save(&p, &path).unwrap();
    assert_eq!(serialize::load(&path).unwrap(), p);

    let err = serialize::from_bytes(&bytes[..bytes.len() - 3], &path).unwrap_err();
    assert!(err.to_string().contains("byte offset"), "{err}");
    assert!(serialize::from_bytes(b"NOPE", &path).is_err());
}

#[test]
fn jet_api_const_lift_rejects_excess_order() {
    assert!(Jet::lift_const(&Tensor::scalar(1.0), taylorlab::MAX_ORDER + 1).is_err());
}
