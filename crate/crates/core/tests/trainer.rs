use xvector::checkpoint::{encode_checkpoint, SpeakerModel};
use xvector::dataio::{generate_synthetic, FeatureArchive, SynthConfig};
use xvector::losses::{LossConfig, LossKind};
use xvector::network::NetConfig;
use xvector::trainer::{sample_segments, sgd_step, train, OptimizerState, TrainConfig};
use xvector::{Matrix, Rng};

fn small_data(speakers: usize, seed: u64) -> FeatureArchive {
    generate_synthetic(&SynthConfig {
        n_speakers: speakers,
        utts_per_speaker: 4,
        frames_range: (40, 60),
        dim: 10,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn small_net() -> NetConfig {
    NetConfig::with_widths(10, [16, 16, 16, 16, 32], [16, 16])
}

fn small_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lr_peak: 0.01,
        warmup_batches: 5,
        batch_size: 16,
        segment_frames: (20, 30),
        seed: 5,
        ..TrainConfig::default()
    }
}

fn model(kind: LossKind, classes: usize, seed: u64) -> SpeakerModel {
    SpeakerModel::new(small_net(), LossConfig::new(kind), classes, &mut Rng::new(seed)).unwrap()
}

fn bytes(m: &SpeakerModel) -> Vec<u8> {
    let mut out = Vec::new();
    encode_checkpoint(&mut out, m).unwrap();
    out
}

#[test]
fn crop_lengths_are_uniform() {
    let archive = small_data(4, 1);
    let cfg = TrainConfig {
        batch_size: 1,
        segment_frames: (50, 100),
        ..TrainConfig::default()
    };
    let mut rng = Rng::new(77);
    let n = 10_000;
    let mut counts = [0usize; 51];
    for _ in 0..n {
        let b = sample_segments(&archive, &cfg, &mut rng).unwrap();
        let len = b.frames[0].rows();
        assert!((50..=100).contains(&len));
        counts[len - 50] += 1;
    }
    let expected = n as f64 / 51.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 50 degrees of freedom, p = 0.001
    assert!(chi2 < 86.66, "chi2 = {chi2}");
}

#[test]
fn momentum_accumulates_in_closed_form() {
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut p = Matrix::from_rows(&[[0.3, -1.2, 2.0]]).unwrap();
    let p0 = p.clone();
    let g1 = Matrix::from_rows(&[[1.0, 0.5, -2.0]]).unwrap();
    let g2 = Matrix::from_rows(&[[-0.25, 3.0, 1.0]]).unwrap();
    let lr = 0.1;
    let mut st = OptimizerState::new(&[&p]);
    sgd_step(&mut [&mut p], std::slice::from_ref(&g1), &[true], &mut st, &cfg, lr).unwrap();
    sgd_step(&mut [&mut p], std::slice::from_ref(&g2), &[true], &mut st, &cfg, lr).unwrap();
    for i in 0..3 {
        let v2 = 0.7 * g1.as_slice()[i] + g2.as_slice()[i];
        assert!((st.velocity[0].as_slice()[i] - v2).abs() < 1e-15);
        let expect = p0.as_slice()[i] - lr * g1.as_slice()[i] - lr * v2;
        assert!((p.as_slice()[i] - expect).abs() < 1e-14);
    }
}

#[test]
fn weight_decay_only_touches_flagged_tensors() {
    let cfg = TrainConfig {
        momentum: 0.0,
        weight_decay: 0.5,
        ..TrainConfig::default()
    };
    let mut w = Matrix::from_rows(&[[2.0]]).unwrap();
    let mut b = Matrix::from_rows(&[[2.0]]).unwrap();
    let g = Matrix::zeros(1, 1);
    let mut st = OptimizerState::new(&[&w, &b]);
    sgd_step(&mut [&mut w, &mut b], &[g.clone(), g], &[true, false], &mut st, &cfg, 0.1).unwrap();
    assert_eq!(w.as_slice(), &[2.0 - 0.1 * 0.5 * 2.0]);
    assert_eq!(b.as_slice(), &[2.0]);
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let mut rng = Rng::new(9);
    let mut a = Matrix::random_normal(4, 3, 1.0, &mut rng);
    let mut b = Matrix::random_normal(1, 3, 1.0, &mut rng);
    let (a0, b0) = (a.clone(), b.clone());
    let cfg = TrainConfig::default();
    let mut st = OptimizerState::new(&[&a, &b]);
    for _ in 0..5 {
        let ga = Matrix::random_normal(4, 3, 10.0, &mut rng);
        let gb = Matrix::random_normal(1, 3, 10.0, &mut rng);
        sgd_step(&mut [&mut a, &mut b], &[ga, gb], &[true, false], &mut st, &cfg, 0.0).unwrap();
    }
    assert_eq!(a, a0);
    assert_eq!(b, b0);
}

#[test]
fn clipping_keeps_direction_and_never_grows_the_step() {
    let mut rng = Rng::new(10);
    for trial in 0..50 {
        let scale = if trial % 2 == 0 { 1.0 } else { 1e4 };
        let cfg = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            max_grad_norm: 100.0,
            ..TrainConfig::default()
        };
        let mut p = Matrix::zeros(5, 4);
        let g = Matrix::random_normal(5, 4, scale, &mut rng);
        let mut st = OptimizerState::new(&[&p]);
        let stats = sgd_step(&mut [&mut p], std::slice::from_ref(&g), &[true], &mut st, &cfg, 1.0).unwrap();
        let step = p.map(|x| -x);
        let step_norm = step.frobenius_norm();
        assert!(step_norm <= g.frobenius_norm() * (1.0 + 1e-12));
        assert!(step_norm <= cfg.max_grad_norm * (1.0 + 1e-12) || !stats.clipped);
        assert_eq!(stats.clipped, g.frobenius_norm() > 100.0);
        let cos = xvector::numeric::dot(step.as_slice(), g.as_slice()) / (step_norm * g.frobenius_norm());
        assert!((cos - 1.0).abs() < 1e-12, "cos = {cos}");
    }
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let archive = small_data(6, 2);
    let mut m = model(LossKind::AamSoftmax, 6, 3);
    let before = m.clone();
    let report = train(&archive, &mut m, &small_train(0), &mut ()).unwrap();
    assert!(report.records.is_empty());
    assert_eq!(m, before);
}

#[test]
fn training_is_reproducible_bit_for_bit() {
    let archive = small_data(8, 3);
    let run = || {
        let mut m = model(LossKind::AmSoftmax, 8, 4);
        let r = train(&archive, &mut m, &small_train(2), &mut ()).unwrap();
        (bytes(&m), r)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}

#[test]
fn loss_falls_for_every_objective() {
    let archive = small_data(64, 4);
    for kind in [LossKind::Softmax, LossKind::ASoftmax, LossKind::AmSoftmax, LossKind::AamSoftmax] {
        let mut m = model(kind, 64, 6);
        let r = train(&archive, &mut m, &small_train(3), &mut ()).unwrap();
        let first = r.epoch_mean_loss[0];
        let last = *r.epoch_mean_loss.last().unwrap();
        assert!(last < first, "{kind:?}: {:?}", r.epoch_mean_loss);
        assert!(r.records.iter().all(|rec| rec.loss.is_finite()));
    }
}

#[test]
fn sampling_from_an_empty_archive_fails() {
    let empty = FeatureArchive::new(10);
    let err = sample_segments(&empty, &TrainConfig::default(), &mut Rng::new(0)).unwrap_err();
    assert!(err.to_string().contains("empty"), "{err}");
}

#[test]
fn mismatched_class_count_is_rejected() {
    let archive = small_data(6, 5);
    let mut m = model(LossKind::Softmax, 5, 0);
    assert!(train(&archive, &mut m, &small_train(1), &mut ()).is_err());
}
