//! Flat experiment configuration, read from TOML and overridden by flags.

use std::path::Path;

use clap::Args;
use serde::{Deserialize, Serialize};
use xvector::backend::BackendConfig;
use xvector::dataio::SynthConfig;
use xvector::losses::{LossConfig, LossKind, DEFAULT_SCALE};
use xvector::network::NetConfig;
use xvector::trainer::TrainConfig;
use xvector::{Error, Result, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,

    pub train_speakers: usize,
    pub eval_speakers: usize,
    pub utts_per_speaker: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub dim: usize,
    pub between_speaker_scale: f64,
    pub within_speaker_scale: f64,
    pub channel_scale: f64,

    pub frame_widths: Vec<usize>,
    pub segment_widths: Vec<usize>,
    pub batchnorm: bool,

    pub loss: LossKind,
    /// Defaults to the loss kind's own margin.
    pub margin: Option<f64>,
    pub scale: f64,

    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub warmup_batches: usize,
    pub batch_size: usize,
    pub segment_min: usize,
    pub segment_max: usize,

    /// Defaults to `min(128, embedding dim, speakers - 1)`.
    pub lda_dim: Option<usize>,
    pub plda_iters: usize,

    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let train = TrainConfig::default();
        ExperimentConfig {
            seed: 0,
            train_speakers: 64,
            eval_speakers: 32,
            utts_per_speaker: synth.utts_per_speaker,
            frames_min: synth.frames_range.0,
            frames_max: synth.frames_range.1,
            dim: synth.dim,
            between_speaker_scale: synth.between_speaker_scale,
            within_speaker_scale: synth.within_speaker_scale,
            channel_scale: synth.channel_scale,
            frame_widths: vec![64, 64, 64, 64, 128],
            segment_widths: vec![64, 64],
            batchnorm: true,
            loss: LossKind::AamSoftmax,
            margin: None,
            scale: DEFAULT_SCALE,
            epochs: train.epochs,
            lr: train.lr_peak,
            momentum: train.momentum,
            weight_decay: train.weight_decay,
            max_grad_norm: train.max_grad_norm,
            warmup_batches: train.warmup_batches,
            batch_size: train.batch_size,
            segment_min: train.segment_frames.0,
            segment_max: train.segment_frames.1,
            lda_dim: None,
            plda_iters: xvector::backend::DEFAULT_PLDA_ITERS,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

/// Which synthetic corpus to draw: the training speakers or the disjoint
/// evaluation speakers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn speaker_prefix(self) -> &'static str {
        match self {
            Split::Train => "spk",
            Split::Eval => "eval",
        }
    }
}

/// Stream indices for seeds derived from the experiment seed.
const TRAIN_DATA_STREAM: u64 = 1;
const EVAL_DATA_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;
const TRAIN_STREAM: u64 = 4;

pub fn derived_seed(seed: u64, stream: u64) -> u64 {
    Rng::new(seed).substream(stream).next_u64()
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn synth_config(&self, split: Split) -> SynthConfig {
        let (n, stream) = match split {
            Split::Train => (self.train_speakers, TRAIN_DATA_STREAM),
            Split::Eval => (self.eval_speakers, EVAL_DATA_STREAM),
        };
        SynthConfig {
            n_speakers: n,
            utts_per_speaker: self.utts_per_speaker,
            frames_range: (self.frames_min, self.frames_max),
            dim: self.dim,
            between_speaker_scale: self.between_speaker_scale,
            within_speaker_scale: self.within_speaker_scale,
            channel_scale: self.channel_scale,
            seed: derived_seed(self.seed, stream),
        }
    }

    pub fn net_config(&self) -> Result<NetConfig> {
        let frame: [usize; 5] = self.frame_widths.clone().try_into().map_err(|_| {
            Error::Config(format!(
                "frame_widths must list 5 widths, got {}",
                self.frame_widths.len()
            ))
        })?;
        let segment: [usize; 2] = self.segment_widths.clone().try_into().map_err(|_| {
            Error::Config(format!(
                "segment_widths must list 2 widths, got {}",
                self.segment_widths.len()
            ))
        })?;
        let mut cfg = NetConfig::with_widths(self.dim, frame, segment);
        cfg.batchnorm = self.batchnorm;
        Ok(cfg)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            kind: self.loss,
            m: self.margin.unwrap_or(self.loss.default_margin()),
            s: self.scale,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr_peak: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
            warmup_batches: self.warmup_batches,
            batch_size: self.batch_size,
            segment_frames: (self.segment_min, self.segment_max),
            seed: derived_seed(self.seed, TRAIN_STREAM),
        }
    }

    pub fn init_rng(&self) -> Rng {
        Rng::new(derived_seed(self.seed, INIT_STREAM))
    }

    pub fn backend_config(&self) -> BackendConfig {
        BackendConfig {
            lda_dim: self.lda_dim,
            plda_iters: self.plda_iters,
        }
    }

    /// Checks every section and their mutual consistency.
    pub fn validate(&self) -> Result<()> {
        self.synth_config(Split::Train).validate()?;
        self.synth_config(Split::Eval).validate()?;
        if self.train_speakers < 2 {
            return Err(Error::Config(format!(
                "train_speakers must be at least 2, got {}",
                self.train_speakers
            )));
        }
        if self.eval_speakers < 2 {
            return Err(Error::Config(format!(
                "eval_speakers must be at least 2, got {}",
                self.eval_speakers
            )));
        }
        let net = self.net_config()?;
        net.validate()?;
        self.loss_config().validate()?;
        let train = self.train_config();
        train.validate()?;
        let rf = net.receptive_field();
        if self.segment_min < rf {
            return Err(Error::Config(format!(
                "segment_min {} is below the network's receptive field {rf}",
                self.segment_min
            )));
        }
        if self.frames_min < rf {
            return Err(Error::Config(format!(
                "frames_min {} is below the network's receptive field {rf}",
                self.frames_min
            )));
        }
        if let Some(p) = self.lda_dim {
            let emb = net.embedding_dim().unwrap_or(0);
            let max = emb.min(self.train_speakers - 1);
            if p == 0 || p > max {
                return Err(Error::Config(format!(
                    "lda_dim {p} is not achievable: must lie in 1..={max}"
                )));
            }
        }
        if self.plda_iters == 0 {
            return Err(Error::Config("plda_iters must be positive".into()));
        }
        for (name, v) in [("c_miss", self.c_miss), ("c_fa", self.c_fa)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Flags mirroring [`ExperimentConfig`] one-to-one. Set flags win over the
/// config file, which wins over defaults.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// TOML config file
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_speakers: Option<usize>,
    #[arg(long)]
    pub eval_speakers: Option<usize>,
    #[arg(long)]
    pub utts_per_speaker: Option<usize>,
    #[arg(long)]
    pub frames_min: Option<usize>,
    #[arg(long)]
    pub frames_max: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub between_speaker_scale: Option<f64>,
    #[arg(long)]
    pub within_speaker_scale: Option<f64>,
    #[arg(long)]
    pub channel_scale: Option<f64>,
    /// Five comma-separated widths
    #[arg(long, value_delimiter = ',')]
    pub frame_widths: Option<Vec<usize>>,
    /// Two comma-separated widths
    #[arg(long, value_delimiter = ',')]
    pub segment_widths: Option<Vec<usize>>,
    #[arg(long)]
    pub batchnorm: Option<bool>,
    /// softmax, a_softmax, am_softmax or aam_softmax
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long, visible_alias = "m")]
    pub margin: Option<f64>,
    #[arg(long, visible_alias = "s")]
    pub scale: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub max_grad_norm: Option<f64>,
    #[arg(long)]
    pub warmup_batches: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub segment_min: Option<usize>,
    #[arg(long)]
    pub segment_max: Option<usize>,
    #[arg(long)]
    pub lda_dim: Option<usize>,
    #[arg(long)]
    pub plda_iters: Option<usize>,
    #[arg(long)]
    pub c_miss: Option<f64>,
    #[arg(long)]
    pub c_fa: Option<f64>,
}

impl ConfigArgs {
    /// Defaults, then the config file, then flags; validated.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! apply {
            ($($f:ident),*) => {
                $(if let Some(v) = &self.$f { cfg.$f = v.clone(); })*
            };
        }
        apply!(
            seed,
            train_speakers,
            eval_speakers,
            utts_per_speaker,
            frames_min,
            frames_max,
            dim,
            between_speaker_scale,
            within_speaker_scale,
            channel_scale,
            frame_widths,
            segment_widths,
            batchnorm,
            loss,
            scale,
            epochs,
            lr,
            momentum,
            weight_decay,
            max_grad_norm,
            warmup_batches,
            batch_size,
            segment_min,
            segment_max,
            plda_iters,
            c_miss,
            c_fa
        );
        if self.margin.is_some() {
            cfg.margin = self.margin;
        }
        if self.lda_dim.is_some() {
            cfg.lda_dim = self.lda_dim;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml_str("epochz = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = ExperimentConfig::from_toml_str("loss = \"am_softmax\"\nepochs = 1\n").unwrap();
        assert_eq!(cfg.loss, LossKind::AmSoftmax);
        assert_eq!(cfg.epochs, 1);
        assert_eq!(cfg.loss_config().m, 0.2);
        assert_eq!(cfg.dim, 30);
    }

    #[test]
    fn splits_use_different_seeds() {
        let cfg = ExperimentConfig::default();
        assert_ne!(cfg.synth_config(Split::Train).seed, cfg.synth_config(Split::Eval).seed);
    }
}
