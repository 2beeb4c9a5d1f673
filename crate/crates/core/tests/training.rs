use taylorlab::data::{blobs, BlobsSpec};
use taylorlab::exp::ExperimentConfig;
use taylorlab::train::*;
use taylorlab::*;

fn small_data(seed: u64) -> taylorlab::data::Dataset {
    let spec = BlobsSpec { dim: 6, classes: 3, centers_per_class: 2, intrinsic_dim: 3, center_scale: 1.0, noise: 0.3 };
    blobs(&spec, 96, 40, seed).unwrap()
}

fn spec(clip: Option<f64>, schedule: Vec<(usize, f64)>, parallel: bool) -> PairedRunSpec {
    PairedRunSpec {
        arch: Architecture::mlp(&[6, 12, 3], ActivationKind::Tanh),
        scheme: InitScheme::Standard,
        orders: vec![1, 2, 3],
        optimizer: OptimizerConfig {
            rate: 0.1,
            schedule,
            clip,
            batch_size: 16,
            total_steps: 40,
            loss: LossKind::CrossEntropy,
        },
        init_seed: 3,
        data_seed: 4,
        checkpoint_every: Some(10),
        train_eval_limit: None,
        parallel,
    }
}

#[test]
fn paired_run_shares_init_and_step_zero_logits() {
    let data = small_data(1);
    let run = paired_run(&spec(Some(5.0), vec![], false), &data).unwrap();
    let theta0 = run.theta0();
    for r in &run.records {
        let c0 = &r.checkpoints[0];
        assert_eq!(c0.step, 0);
        assert!(c0.theta.iter().zip(&theta0).all(|(a, b)| a.to_bits() == b.to_bits()), "{}", r.model);
        let l0 = &run.records[0].checkpoints[0].test_logits;
        assert!(c0.test_logits.data().iter().zip(l0.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn reruns_are_bit_reproducible_sequential_or_parallel() {
    let data = small_data(2);
    let a = paired_run(&spec(Some(5.0), vec![(20, 0.1)], false), &data).unwrap();
    let b = paired_run(&spec(Some(5.0), vec![(20, 0.1)], false), &data).unwrap();
    let c = paired_run(&spec(Some(5.0), vec![(20, 0.1)], true), &data).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn huge_clip_is_inactive() {
    let data = small_data(5);
    let a = paired_run(&spec(None, vec![], false), &data).unwrap();
    let b = paired_run(&spec(Some(1e12), vec![], false), &data).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoints_cover_cadence_final_and_rate_changes() {
    let mut s = spec(None, vec![(15, 0.1), (33, 0.5)], false);
    s.optimizer.total_steps = 37;
    assert_eq!(s.checkpoint_steps(), vec![0, 10, 15, 16, 20, 30, 33, 34, 37]);
    s.checkpoint_every = None;
    s.optimizer.total_steps = 300;
    let steps = s.checkpoint_steps();
    assert_eq!(steps[..3], [0, 3, 6]);
    assert_eq!(*steps.last().unwrap(), 300);
}

#[test]
fn learning_rate_schedule_is_cumulative() {
    let cfg = OptimizerConfig {
        rate: 0.1,
        schedule: vec![(100, 0.1), (150, 0.1)],
        clip: None,
        batch_size: 1,
        total_steps: 200,
        loss: LossKind::CrossEntropy,
    };
    assert_eq!(lr_at(&cfg, 0), 0.1);
    assert_eq!(lr_at(&cfg, 99), 0.1);
    assert!((lr_at(&cfg, 100) - 0.01).abs() < 1e-15);
    assert!((lr_at(&cfg, 199) - 0.001).abs() < 1e-15);
}

#[test]
fn minibatches_cover_each_epoch_once() {
    let s = MinibatchStream { n: 10, batch_size: 4, seed: 9 };
    assert_eq!(s.steps_per_epoch(), 3);
    let b = s.batches(6);
    assert_eq!(b[2].len(), 2);
    for epoch in b.chunks(3) {
        let mut all: Vec<usize> = epoch.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
    assert_ne!(b[0], b[3], "epochs reshuffle");
}

#[test]
fn sgd_step_clips_to_norm() {
    let arch = Architecture::mlp(&[2, 3, 2], ActivationKind::Tanh);
    let params = init_params(&arch, InitScheme::Standard, 0).unwrap();
    let x = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.5]]).unwrap();
    let (_, grads) =
        taylorlab::nn::loss_and_grad(&arch, &params, ModelKind::Full, &x, &[0, 1], LossKind::CrossEntropy).unwrap();
    let norm = grads.global_norm();
    let mut p = params.clone();
    let info = sgd_step(&mut p, &grads, 1.0, Some(norm / 4.0)).unwrap();
    assert!(info.clipped);
    let moved: f64 = p
        .theta_flat()
        .iter()
        .zip(params.theta_flat())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    assert!((moved - norm / 4.0).abs() < 1e-12 * norm);
}

#[test]
fn diverged_model_is_frozen_at_last_finite_checkpoint() {
    let data = small_data(6);
    let mut s = spec(None, vec![], false);
    s.arch = Architecture::mlp(&[6, 12, 3], ActivationKind::Square);
    s.optimizer.rate = 1e6;
    s.optimizer.loss = LossKind::Squared;
    let run = paired_run(&s, &data).unwrap();
    let full = run.record(ModelKind::Full).unwrap();
    let at = full.diverged_at.expect("a 1e6 rate on a square net diverges");
    let frozen: Vec<_> = full.checkpoints.iter().filter(|c| c.step >= at).collect();
    for c in &frozen {
        assert!(c.theta.iter().all(|v| v.is_finite()));
        assert_eq!(c.theta, frozen[0].theta);
    }
}

#[test]
fn thin_cnn_setup_converts_epochs_to_steps() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/cnnthin.toml")).unwrap();
    let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
    let opt = cfg.optimizer().unwrap();
    assert_eq!(opt.total_steps, 39200);
    assert_eq!(opt.batch_size, 256);
    assert_eq!(opt.clip, Some(5.0));
    assert_eq!(opt.schedule, vec![(19600, 0.1), (29400, 0.1)]);
    assert_eq!(epochs_to_steps(200.0, 50000, 256), 39200);
}
