//! Segment sampling, SGD with momentum, weight decay and gradient clipping,
//! and the linear warmup schedule.

use serde::{Deserialize, Serialize};

use crate::checkpoint::SpeakerModel;
use crate::dataio::FeatureArchive;
use crate::error::{Error, Result};
use crate::losses::compute_loss;
use crate::network::Mode;
use crate::numeric::{Matrix, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_peak: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub warmup_batches: usize,
    pub batch_size: usize,
    /// Inclusive crop length range in frames.
    pub segment_frames: (usize, usize),
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            lr_peak: 1e-4,
            momentum: 0.7,
            weight_decay: 1e-5,
            max_grad_norm: 1e3,
            warmup_batches: 500,
            batch_size: 32,
            segment_frames: (50, 100),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_peak", self.lr_peak),
            ("max_grad_norm", self.max_grad_norm),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        let (lo, hi) = self.segment_frames;
        if lo == 0 || lo > hi {
            return Err(Error::config(format!(
                "segment_frames must satisfy 0 < min <= max, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

/// Learning rate after `step` completed batches: a linear ramp from 0 to
/// `lr_peak` over `warmup_batches`, then constant.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step >= cfg.warmup_batches {
        cfg.lr_peak
    } else {
        cfg.lr_peak * step as f64 / cfg.warmup_batches as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Matrix>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[&Matrix]) -> Self {
        OptimizerState {
            velocity: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Global norm of the decayed gradient before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// One SGD update. `decay[i]` says whether weight decay applies to
/// `params[i]`. Nothing is modified if any gradient is non-finite.
pub fn sgd_step(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    decay: &[bool],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepStats> {
    if grads.len() != params.len() || decay.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::dim(format!(
            "{} parameters, {} gradients, {} decay flags, {} velocity buffers",
            params.len(),
            grads.len(),
            decay.len(),
            state.velocity.len()
        )));
    }
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(&state.velocity).enumerate() {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::dim(format!("tensor {i}: parameter, gradient and velocity shapes differ")));
        }
        if let Some(j) = g.as_slice().iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in tensor {i} at entry {j}"
            )));
        }
    }

    let mut total: Vec<Matrix> = Vec::with_capacity(grads.len());
    for ((p, g), &d) in params.iter().zip(grads).zip(decay) {
        let mut t = g.clone();
        if d && cfg.weight_decay != 0.0 {
            for (ti, &pi) in t.as_mut_slice().iter_mut().zip(p.as_slice()) {
                *ti += cfg.weight_decay * pi;
            }
        }
        total.push(t);
    }
    let grad_norm = total
        .iter()
        .flat_map(|g| g.as_slice())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {grad_norm}")));
    }
    let clipped = grad_norm > cfg.max_grad_norm;
    let factor = if clipped { cfg.max_grad_norm / grad_norm } else { 1.0 };

    for ((p, g), v) in params.iter_mut().zip(&total).zip(&mut state.velocity) {
        let pv = p.as_mut_slice();
        for ((pi, &gi), vi) in pv.iter_mut().zip(g.as_slice()).zip(v.as_mut_slice()) {
            *vi = cfg.momentum * *vi + gi * factor;
            *pi -= lr * *vi;
        }
    }
    state.step += 1;
    Ok(StepStats { grad_norm, clipped })
}

/// Equal-length crops with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub frames: Vec<Matrix>,
    pub labels: Vec<usize>,
    pub utt_indices: Vec<usize>,
}

/// Contiguous crop of `len` frames starting at a uniform random offset.
/// Utterances shorter than `len` are extended by cyclic repetition first.
pub fn crop(frames: &Matrix, len: usize, rng: &mut Rng) -> Matrix {
    let t = frames.rows();
    let padded = t * len.div_ceil(t);
    let start = rng.below(padded - len + 1);
    let rows: Vec<&[f64]> = (0..len).map(|i| frames.row((start + i) % t)).collect();
    let mut data = Vec::with_capacity(len * frames.cols());
    for r in rows {
        data.extend_from_slice(r);
    }
    Matrix::new(len, frames.cols(), data).expect("crop of a finite matrix")
}

/// Crops the given utterances to one shared length drawn uniformly from
/// `cfg.segment_frames`.
pub fn crop_batch(
    archive: &FeatureArchive,
    utt_indices: &[usize],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Batch> {
    if archive.is_empty() {
        return Err(Error::Domain("cannot sample from an empty archive".into()));
    }
    let (lo, hi) = cfg.segment_frames;
    let len = rng.range_inclusive(lo, hi);
    let utts = archive.utterances();
    let mut frames = Vec::with_capacity(utt_indices.len());
    let mut labels = Vec::with_capacity(utt_indices.len());
    for &i in utt_indices {
        let u = utts.get(i).ok_or_else(|| {
            Error::Domain(format!("utterance index {i} out of range ({} utterances)", utts.len()))
        })?;
        frames.push(crop(&u.frames, len, rng));
        labels.push(archive.class_of(&u.speaker_id).expect("speaker of a stored utterance"));
    }
    Ok(Batch {
        frames,
        labels,
        utt_indices: utt_indices.to_vec(),
    })
}

/// A batch of `cfg.batch_size` utterances drawn uniformly with replacement.
pub fn sample_segments(archive: &FeatureArchive, cfg: &TrainConfig, rng: &mut Rng) -> Result<Batch> {
    if archive.is_empty() {
        return Err(Error::Domain("cannot sample from an empty archive".into()));
    }
    let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.below(archive.len())).collect();
    crop_batch(archive, &idx, cfg, rng)
}

/// Utterance order for each epoch: every utterance once, shuffled, cut into
/// batches. A final batch smaller than two utterances is merged into the
/// previous one so batch statistics stay defined.
pub fn epoch_batches(n_utts: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_utts).collect();
    rng.shuffle(&mut order);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub mean_target_theta: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<BatchRecord>,
    pub epoch_mean_loss: Vec<f64>,
}

/// Callbacks fired during [`train`]. Errors abort training.
pub trait TrainObserver {
    fn on_batch(&mut self, _record: &BatchRecord) -> Result<()> {
        Ok(())
    }

    fn on_epoch_end(&mut self, _epoch: usize, _model: &SpeakerModel, _mean_loss: f64) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Trains `model` on every utterance of `archive` for `cfg.epochs` epochs.
/// Fully determined by the model's initial state, the archive and `cfg.seed`.
pub fn train(
    archive: &FeatureArchive,
    model: &mut SpeakerModel,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainReport> {
    cfg.validate()?;
    model.loss.validate()?;
    if archive.is_empty() {
        return Err(Error::Domain("training archive is empty".into()));
    }
    if archive.num_speakers() != model.classes() {
        return Err(Error::config(format!(
            "archive has {} speakers but the classifier has {} classes",
            archive.num_speakers(),
            model.classes()
        )));
    }
    if archive.dim() != model.net.config().input_dim {
        return Err(Error::dim(format!(
            "archive features are {}-dim, network expects {}",
            archive.dim(),
            model.net.config().input_dim
        )));
    }
    let rf = model.net.config().receptive_field();
    if cfg.segment_frames.0 < rf {
        return Err(Error::config(format!(
            "minimum segment length {} is below the network's receptive field {rf}",
            cfg.segment_frames.0
        )));
    }

    let mut decay: Vec<bool> = model.net.param_info().iter().map(|p| p.decay).collect();
    decay.push(true);
    if model.head.bias.is_some() {
        decay.push(false);
    }
    let mut state = {
        let mut p = model.net.parameters();
        p.push(&model.head.weight);
        if let Some(b) = &model.head.bias {
            p.push(b);
        }
        OptimizerState::new(&p)
    };

    let mut rng = Rng::new(cfg.seed).substream(1);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        let batches = epoch_batches(archive.len(), cfg.batch_size, &mut rng);
        for idx in &batches {
            let step = state.step;
            let batch = crop_batch(archive, idx, cfg, &mut rng)?;
            let (rec, _) = train_step(model, &batch, &decay, &mut state, cfg, epoch)
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!("batch {step}: {msg}")),
                    other => other,
                })?;
            sum += rec.loss;
            observer.on_batch(&rec)?;
            report.records.push(rec);
        }
        let mean = sum / batches.len() as f64;
        report.epoch_mean_loss.push(mean);
        observer.on_epoch_end(epoch, model, mean)?;
    }
    Ok(report)
}

fn train_step(
    model: &mut SpeakerModel,
    batch: &Batch,
    decay: &[bool],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(BatchRecord, StepStats)> {
    let (out, cache) = model.net.forward(&batch.frames, Mode::Train)?;
    let loss = compute_loss(&model.loss, &out, &batch.labels, &model.head)?;
    if !loss.loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {}", loss.loss)));
    }
    let grads = model.net.backward(&cache, &loss.grad_x)?;
    let mut all_grads = grads.params;
    all_grads.push(loss.grad_w);
    if let Some(gb) = loss.grad_b {
        all_grads.push(gb);
    }
    let lr = lr_at(state.step as usize, cfg);
    let step = state.step;
    let stats = {
        let mut params = model.net.parameters_mut();
        params.push(&mut model.head.weight);
        if let Some(b) = &mut model.head.bias {
            params.push(b);
        }
        sgd_step(&mut params, &all_grads, decay, state, cfg, lr)?
    };
    Ok((
        BatchRecord {
            epoch,
            step,
            loss: loss.loss,
            lr,
            grad_norm: stats.grad_norm,
            mean_target_theta: loss.diagnostics.mean_target_theta,
        },
        stats,
    ))
}
