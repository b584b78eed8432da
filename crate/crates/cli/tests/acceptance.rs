use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use xvector::backend::EmbeddingSet;
use xvector::gradcheck::{central_difference, max_relative_error, FD_STEP};
use xvector::losses::{
    a_softmax_loss, aam_softmax_loss, am_softmax_loss, compute_loss, phi_a_softmax, LossConfig,
    LossKind, ProjectionLayer,
};
use xvector::metrics::{eer, min_dcf, DcfParams, ScoredTrials};
use xvector::network::{Mode, NetConfig, XVectorNet};
use xvector::{Matrix, Rng};
use xvector_cli::config::ExperimentConfig;
use xvector_cli::pipeline::{backend_and_evaluate, run_experiment, write_experiment, Experiment};

const DESK_CONFIG: &str = include_str!("../../../configs/desk.toml");

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- criterion 1 ----

struct LossInstance {
    x: Matrix,
    labels: Vec<usize>,
    layer: ProjectionLayer,
}

fn sample_loss_instance(cfg: &LossConfig, rng: &mut Rng) -> LossInstance {
    loop {
        let n = 2 + rng.below(4);
        let e = 3 + rng.below(4);
        let c = 2 + rng.below(5);
        let x = Matrix::random_normal(n, e, 0.5 + rng.uniform() * 2.0, rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let mut layer = ProjectionLayer::new(e, c, cfg.kind, rng);
        if let Some(b) = &mut layer.bias {
            *b = Matrix::random_normal(1, c, 0.5, rng);
        }
        let cos = x
            .row_l2_normalize(1e-12)
            .matmul(&layer.weight.col_l2_normalize(1e-12))
            .unwrap();
        if cos.as_slice().iter().any(|c| c.abs() > 0.999) {
            continue;
        }
        let smooth = labels.iter().enumerate().all(|(i, &y)| {
            let theta = cos[(i, y)].acos();
            match cfg.kind {
                LossKind::ASoftmax => {
                    let m = cfg.m as u32;
                    (0..=m).all(|k| (theta - k as f64 * PI / m as f64).abs() > 1e-3)
                }
                LossKind::AamSoftmax => theta > 1e-3 && (theta - (PI - cfg.m)).abs() > 1e-3,
                _ => true,
            }
        });
        if smooth {
            return LossInstance { x, labels, layer };
        }
    }
}

fn loss_gradient_error(cfg: &LossConfig, inst: &LossInstance) -> f64 {
    let loss_at = |x: &Matrix, layer: &ProjectionLayer| compute_loss(cfg, x, &inst.labels, layer).unwrap().loss;
    let out = compute_loss(cfg, &inst.x, &inst.labels, &inst.layer).unwrap();
    let num_x = central_difference(
        |v| loss_at(&Matrix::new(inst.x.rows(), inst.x.cols(), v.to_vec()).unwrap(), &inst.layer),
        inst.x.as_slice(),
        FD_STEP,
    );
    let num_w = central_difference(
        |v| {
            let mut layer = inst.layer.clone();
            layer.weight = Matrix::new(layer.weight.rows(), layer.weight.cols(), v.to_vec()).unwrap();
            loss_at(&inst.x, &layer)
        },
        inst.layer.weight.as_slice(),
        FD_STEP,
    );
    let mut err = max_relative_error(out.grad_x.as_slice(), &num_x)
        .max(max_relative_error(out.grad_w.as_slice(), &num_w));
    if let Some(b) = &inst.layer.bias {
        let num_b = central_difference(
            |v| {
                let mut layer = inst.layer.clone();
                layer.bias = Some(Matrix::row_vector(v));
                loss_at(&inst.x, &layer)
            },
            b.as_slice(),
            FD_STEP,
        );
        err = err.max(max_relative_error(out.grad_b.as_ref().unwrap().as_slice(), &num_b));
    }
    err
}

fn net_objective(net: &XVectorNet, batch: &[Matrix], g: &Matrix) -> f64 {
    let (out, _) = net.clone().forward(batch, Mode::Train).unwrap();
    out.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum()
}

/// Max relative error over every parameter tensor (TDNN affine, BN scale and
/// shift, segment affine) and the input, which also exercises stats pooling.
fn network_gradient_error(batchnorm: bool, rng: &mut Rng) -> f64 {
    let (net, batch, g) = loop {
        let mut cfg = NetConfig::with_widths(3, [4, 4, 3, 3, 4], [4, 3]);
        cfg.batchnorm = batchnorm;
        let mut net = XVectorNet::new(cfg, rng).unwrap();
        for p in net.parameters_mut() {
            for v in p.as_mut_slice() {
                *v += 0.1 * rng.normal();
            }
        }
        let batch: Vec<Matrix> = (0..8)
            .map(|_| Matrix::random_normal(16 + rng.below(4), 3, 1.0, rng))
            .collect();
        let (out, cache) = net.clone().forward(&batch, Mode::Train).unwrap();
        let near_kink = cache
            .pre_activations()
            .iter()
            .any(|m| m.as_slice().iter().any(|v| v.abs() < 2e-4));
        if !near_kink {
            let g = Matrix::random_normal(out.rows(), out.cols(), 1.0, rng);
            break (net, batch, g);
        }
    };
    let mut work = net.clone();
    let (_, cache) = work.forward(&batch, Mode::Train).unwrap();
    let grads = work.backward(&cache, &g).unwrap();
    let mut err: f64 = 0.0;
    for (i, param) in net.parameters().iter().enumerate() {
        let numeric = central_difference(
            |v| {
                let mut probe = net.clone();
                probe.parameters_mut()[i].as_mut_slice().copy_from_slice(v);
                net_objective(&probe, &batch, &g)
            },
            param.as_slice(),
            FD_STEP,
        );
        err = err.max(max_relative_error(grads.params[i].as_slice(), &numeric));
    }
    for (s, seq) in batch.iter().enumerate() {
        let numeric = central_difference(
            |v| {
                let mut b = batch.clone();
                b[s] = Matrix::new(seq.rows(), seq.cols(), v.to_vec()).unwrap();
                net_objective(&net, &b, &g)
            },
            seq.as_slice(),
            FD_STEP,
        );
        err = err.max(max_relative_error(grads.input[s].as_slice(), &numeric));
    }
    err
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(1001);
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    let loss_cases: [(LossKind, &[f64]); 4] = [
        (LossKind::Softmax, &[0.0]),
        (LossKind::ASoftmax, &[1.0, 2.0, 3.0, 4.0]),
        (LossKind::AmSoftmax, &[0.0, 0.2, 0.35]),
        (LossKind::AamSoftmax, &[0.0, 0.2, 0.3, 0.5]),
    ];
    for (kind, margins) in loss_cases {
        for &m in margins {
            let cfg = LossConfig { kind, m, s: 32.0 };
            for _ in 0..(12 / margins.len()).max(3) {
                worst = worst.max(loss_gradient_error(&cfg, &sample_loss_instance(&cfg, &mut rng)));
                instances += 1;
            }
        }
    }
    for trial in 0..12 {
        worst = worst.max(network_gradient_error(trial % 4 != 3, &mut rng));
        instances += 1;
    }
    let elapsed = start.elapsed();
    check(
        instances >= 50 && worst < 1e-3 && elapsed < Duration::from_secs(60),
        format!("{instances} instances, max relative error {worst:.2e} (< 1e-3), {:.1} s (< 60 s)", elapsed.as_secs_f64()),
    )
}

// ---- criterion 2 ----

fn margin_algebra() -> Outcome {
    let mut jump: f64 = 0.0;
    for m in 2..=4u32 {
        for k in 1..m {
            let b = k as f64 * PI / m as f64;
            let l = phi_a_softmax(b - 1e-9, m).unwrap();
            let r = phi_a_softmax(b + 1e-9, m).unwrap();
            jump = jump.max((l - r).abs());
        }
    }

    let mut rng = Rng::new(1002);
    let mut am_aam: f64 = 0.0;
    let mut unit_margin: f64 = 0.0;
    for _ in 0..50 {
        let cfg = LossConfig::new(LossKind::AmSoftmax);
        let inst = sample_loss_instance(&cfg, &mut rng);
        let am = am_softmax_loss(&inst.x, &inst.labels, &inst.layer, 0.0, 32.0).unwrap().loss;
        let aam = aam_softmax_loss(&inst.x, &inst.labels, &inst.layer, 0.0, 32.0).unwrap().loss;
        am_aam = am_aam.max((am - aam).abs());

        let cfg = LossConfig::new(LossKind::ASoftmax);
        let inst = sample_loss_instance(&cfg, &mut rng);
        let got = a_softmax_loss(&inst.x, &inst.labels, &inst.layer, 1).unwrap().loss;
        let logits = inst.x.matmul(&inst.layer.weight.col_l2_normalize(1e-12)).unwrap();
        let mut expected = 0.0;
        for (i, &y) in inst.labels.iter().enumerate() {
            let z = logits.row(i);
            expected += z.iter().map(|v| v.exp()).sum::<f64>().ln() - z[y];
        }
        expected /= inst.labels.len() as f64;
        unit_margin = unit_margin.max((got - expected).abs());
    }

    let mut violations = 0;
    let n = 10_000;
    for i in 0..n {
        let theta = PI * i as f64 / (n - 1) as f64;
        let c = theta.cos();
        for m in 2..=4 {
            if phi_a_softmax(theta, m).unwrap() > c + 1e-12 {
                violations += 1;
            }
        }
        if c - 0.2 > c {
            violations += 1;
        }
        if theta <= PI - 0.3 && (theta + 0.3).cos() > c + 1e-12 {
            violations += 1;
        }
    }
    check(
        jump < 1e-5 && am_aam < 1e-12 && unit_margin < 1e-12 && violations == 0,
        format!(
            "phi jump {jump:.1e} (< 1e-5), AM vs AAM at m=0 {am_aam:.1e} (< 1e-12), \
             A-Softmax m=1 vs modified softmax {unit_margin:.1e} (< 1e-12), \
             {violations} dominance violations on {n} angles"
        ),
    )
}

// ---- criterion 3 ----

fn architecture_bookkeeping() -> Outcome {
    let cfg = NetConfig::full_scale(30);
    let context = cfg.total_context();
    let shapes = cfg.affine_shapes();
    let expected_shapes = [
        (150, 512),
        (1536, 512),
        (1536, 512),
        (512, 512),
        (512, 1500),
        (3000, 512),
        (512, 512),
    ];
    let net = XVectorNet::new(cfg.clone(), &mut Rng::new(0)).unwrap();
    let actual: Vec<(usize, usize)> = net
        .param_info()
        .iter()
        .zip(net.parameters())
        .filter(|(info, _)| info.name.ends_with(".weight"))
        .map(|(_, p)| p.shape())
        .collect();
    check(
        context == [5, 9, 15, 15, 15] && shapes == expected_shapes && actual == expected_shapes,
        format!("total context {context:?}, affine shapes {shapes:?}"),
    )
}

// ---- criterion 4 ----

fn brute_force(t: &ScoredTrials, params: &[DcfParams]) -> (f64, Vec<f64>) {
    let mut distinct = t.scores().to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut thresholds = vec![distinct[0] - 1.0];
    thresholds.extend(distinct.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    thresholds.push(distinct[distinct.len() - 1] + 1.0);
    let nt = t.n_target() as f64;
    let nn = t.n_nontarget() as f64;
    let rates: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&th| {
            let (mut miss, mut fa) = (0.0, 0.0);
            for (&s, &tar) in t.scores().iter().zip(t.targets()) {
                if tar && s < th {
                    miss += 1.0;
                }
                if !tar && s >= th {
                    fa += 1.0;
                }
            }
            (miss / nt, fa / nn)
        })
        .collect();
    let mut e = f64::NAN;
    for i in 1..rates.len() {
        let (m1, f1) = rates[i];
        if m1 >= f1 {
            let (m0, f0) = rates[i - 1];
            e = if m1 == f1 {
                m1
            } else {
                let (a, b) = (f0 - m0, f1 - m1);
                m0 + a / (a - b) * (m1 - m0)
            };
            break;
        }
    }
    let dcfs = params
        .iter()
        .map(|p| rates.iter().map(|&(m, f)| p.cost(m, f)).fold(f64::INFINITY, f64::min))
        .collect();
    (e, dcfs)
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(1004);
    let params = [DcfParams::new(0.01), DcfParams::new(0.001)];
    let mut worst: f64 = 0.0;
    let mut lists = 0;
    while lists < 100 {
        let ties = lists % 2 == 0;
        let mut scores = Vec::with_capacity(1000);
        let mut targets = Vec::with_capacity(1000);
        for _ in 0..1000 {
            let t = rng.uniform() < 0.2;
            let s = rng.normal() + if t { 1.5 } else { 0.0 };
            scores.push(if ties { (s * 10.0).round() / 10.0 } else { s });
            targets.push(t);
        }
        let Ok(t) = ScoredTrials::new(scores, targets) else {
            continue;
        };
        let (e_ref, dcf_ref) = brute_force(&t, &params);
        worst = worst.max((eer(&t).0 - e_ref).abs());
        for (p, d) in params.iter().zip(dcf_ref) {
            worst = worst.max((min_dcf(&t, p).unwrap().0 - d).abs());
        }
        lists += 1;
    }
    let elapsed = start.elapsed();
    check(
        worst < 1e-9 && elapsed < Duration::from_secs(30),
        format!("{lists} lists of 1000 trials, max deviation {worst:.1e} (< 1e-9), {:.1} s (< 30 s)", elapsed.as_secs_f64()),
    )
}

// ---- criterion 5 ----

fn random_spd(d: usize, scale: f64, floor: f64, rng: &mut Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.normal());
    &a * a.transpose() * (scale / d as f64) + DMatrix::identity(d, d) * floor
}

fn to_matrix(m: &DMatrix<f64>) -> Matrix {
    Matrix::new(m.nrows(), m.ncols(), m.transpose().as_slice().to_vec()).unwrap()
}

fn plda_recovery() -> Outcome {
    let mut rng = Rng::new(1005);
    let d = 8;
    let b = random_spd(d, 2.0, 0.5, &mut rng);
    let w = random_spd(d, 1.0, 0.2, &mut rng);
    let lb = b.clone().cholesky().unwrap().l();
    let lw = w.clone().cholesky().unwrap().l();
    let (speakers, per) = (500, 20);
    let mut data = Vec::with_capacity(speakers * per * d);
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for s in 0..speakers {
        let y = &lb * nalgebra::DVector::from_fn(d, |_, _| rng.normal());
        for k in 0..per {
            let x = &y + &lw * nalgebra::DVector::from_fn(d, |_, _| rng.normal());
            data.extend(x.iter().map(|v| v + 1.0));
            ids.push(format!("s{s}-{k}"));
            labels.push(format!("s{s}"));
        }
    }
    let set = EmbeddingSet::new(ids, Some(labels), Matrix::new(speakers * per, d, data).unwrap()).unwrap();
    let fit = xvector::backend::fit_plda(&set, 10).unwrap();
    let rel = |est: &Matrix, truth: &DMatrix<f64>| {
        let t = to_matrix(truth);
        est.sub(&t).unwrap().frobenius_norm() / t.frobenius_norm()
    };
    let eb = rel(&fit.model.between, &b);
    let ew = rel(&fit.model.within, &w);
    let monotone = fit.log_likelihood.windows(2).all(|p| p[1] >= p[0] - 1e-8);
    check(
        eb < 0.15 && ew < 0.15 && monotone && fit.log_likelihood.len() == 11,
        format!("between error {:.1}%, within error {:.1}% (< 15%), log-likelihood nondecreasing over 10 iterations: {monotone}", 100.0 * eb, 100.0 * ew),
    )
}

// ---- criteria 6 to 8 ----

struct Run {
    kind: LossKind,
    seed: u64,
    eer: f64,
    elapsed: Duration,
}

fn desk_config(kind: LossKind, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml_str(DESK_CONFIG).expect("desk config parses");
    cfg.loss = kind;
    cfg.margin = None;
    cfg.seed = seed;
    cfg
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn directional_claim(runs: &[Run]) -> Outcome {
    let med = |kind| median(runs.iter().filter(|r| r.kind == kind).map(|r| r.eer).collect());
    let softmax = med(LossKind::Softmax);
    let am = med(LossKind::AmSoftmax);
    let aam = med(LossKind::AamSoftmax);
    let slowest = runs.iter().map(|r| r.elapsed).max().unwrap();
    let per_run: Vec<String> = runs
        .iter()
        .map(|r| format!("{}/{}={:.2}%", r.kind, r.seed, 100.0 * r.eer))
        .collect();
    check(
        aam < softmax && am < softmax && slowest < Duration::from_secs(600),
        format!(
            "median EER softmax {:.2}%, AM-Softmax {:.2}% ({:+.1}% relative), AAM-Softmax {:.2}% ({:+.1}% relative); \
             slowest run {:.0} s (< 600 s); runs: {}",
            100.0 * softmax,
            100.0 * am,
            100.0 * (am / softmax - 1.0),
            100.0 * aam,
            100.0 * (aam / softmax - 1.0),
            slowest.as_secs_f64(),
            per_run.join(" ")
        ),
    )
}

fn files_in(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn pipeline_determinism(cfg: &ExperimentConfig, first: &Experiment) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    write_experiment(cfg, first, &a).map_err(|e| e.to_string())?;
    let second = run_experiment(cfg).map_err(|e| e.to_string())?;
    write_experiment(cfg, &second, &b).map_err(|e| e.to_string())?;
    let fa = files_in(&a);
    let fb = files_in(&b);
    let differing: Vec<&str> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    check(
        fa.len() == fb.len() && differing.is_empty() && fa.len() >= 10,
        format!("{} files compared byte for byte, differing: {differing:?}", fa.len()),
    )
}

fn rotation_invariance(cfg: &ExperimentConfig, exp: &Experiment) -> Outcome {
    let d = exp.train_embs.embeddings.dim();
    let mut rng = Rng::new(1008);
    let q = DMatrix::from_fn(d, d, |_, _| rng.normal()).qr().q();
    let r = to_matrix(&q);
    let rotate = |s: &EmbeddingSet| s.with_vectors(s.vectors.matmul(&r).unwrap()).unwrap();
    let (_, _, rotated, _) = backend_and_evaluate(
        cfg,
        &rotate(&exp.train_embs.embeddings),
        &rotate(&exp.eval_embs.embeddings),
        &exp.trials,
    )
    .map_err(|e| e.to_string())?;
    let base = &exp.summary.report;
    let deltas = [
        (rotated.eer - base.eer).abs(),
        (rotated.min_dcf_p01 - base.min_dcf_p01).abs(),
        (rotated.min_dcf_p001 - base.min_dcf_p001).abs(),
    ];
    let worst = deltas.iter().cloned().fold(0.0, f64::max);
    check(
        worst < 1e-6,
        format!("largest metric change {worst:.1e} (< 1e-6) on {} trials", exp.trials.len()),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        let (status, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n} {status} {name}: {detail}");
    };

    report(1, "gradient integrity", gradient_integrity());
    report(2, "margin algebra", margin_algebra());
    report(3, "architecture bookkeeping", architecture_bookkeeping());
    report(4, "metric oracle", metric_oracle());
    report(5, "PLDA recovery", plda_recovery());

    let mut runs = Vec::new();
    let mut keep: Option<(ExperimentConfig, Experiment)> = None;
    let mut run_error = None;
    for kind in [LossKind::Softmax, LossKind::AmSoftmax, LossKind::AamSoftmax] {
        for seed in 0..3 {
            let cfg = desk_config(kind, seed);
            let start = Instant::now();
            match run_experiment(&cfg) {
                Ok(exp) => {
                    runs.push(Run {
                        kind,
                        seed,
                        eer: exp.summary.report.eer,
                        elapsed: start.elapsed(),
                    });
                    if kind == LossKind::AamSoftmax && seed == 0 {
                        keep = Some((cfg, exp));
                    }
                }
                Err(e) => run_error = Some(format!("{kind} seed {seed}: {e}")),
            }
        }
    }
    match (run_error, keep) {
        (None, Some((cfg, exp))) => {
            report(6, "directional margin claim", directional_claim(&runs));
            report(7, "pipeline determinism", pipeline_determinism(&cfg, &exp));
            report(8, "rotation invariance", rotation_invariance(&cfg, &exp));
        }
        (err, _) => {
            let msg = err.unwrap_or_else(|| "no experiment ran".into());
            report(6, "directional margin claim", Err(msg.clone()));
            report(7, "pipeline determinism", Err(msg.clone()));
            report(8, "rotation invariance", Err(msg));
        }
    }

    if failed == 0 {
        println!("all acceptance criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
