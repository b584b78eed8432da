//! Feature archives (the `SPKF` container), trial lists, and the synthetic
//! speaker generator used in place of real acoustic features.
//!
//! `SPKF` layout, all integers little-endian:
//!
//! ```text
//! "SPKF" | version u32 = 1 | dim u32 | n_utts u64
//! per utterance:
//!   id_len u16 | id utf-8 | spk_len u16 | spk utf-8 | T u32 | T*dim f32 row-major
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::binio::{write_str16, Tracked};
use crate::error::{Error, Result};
use crate::numeric::{Matrix, Rng};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"SPKF";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    pub speaker_id: String,
    /// `T × dim`; entries are exactly representable as `f32`.
    pub frames: Matrix,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }
}

/// Ordered utterances sharing one feature dimension, with a dense speaker
/// index assigned in order of first appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureArchive {
    dim: usize,
    utterances: Vec<Utterance>,
    speakers: Vec<String>,
    speaker_index: BTreeMap<String, usize>,
    utt_index: BTreeMap<String, usize>,
}

impl FeatureArchive {
    pub fn new(dim: usize) -> Self {
        FeatureArchive {
            dim,
            utterances: Vec::new(),
            speakers: Vec::new(),
            speaker_index: BTreeMap::new(),
            utt_index: BTreeMap::new(),
        }
    }

    /// Appends an utterance. Frames are rounded to `f32` so that the in-memory
    /// archive equals what a write/read cycle produces.
    pub fn push(&mut self, utt_id: &str, speaker_id: &str, frames: &Matrix) -> Result<()> {
        if frames.cols() != self.dim {
            return Err(Error::dim(format!(
                "utterance {utt_id} has {} columns, archive dim is {}",
                frames.cols(),
                self.dim
            )));
        }
        if frames.rows() == 0 {
            return Err(Error::Domain(format!("utterance {utt_id} has no frames")));
        }
        if self.utt_index.contains_key(utt_id) {
            return Err(Error::Domain(format!("duplicate utterance id {utt_id}")));
        }
        if utt_id.len() > u16::MAX as usize || speaker_id.len() > u16::MAX as usize {
            return Err(Error::Domain(format!("id too long for utterance {utt_id}")));
        }
        let frames = frames.map(|x| x as f32 as f64);
        frames.ensure_finite(utt_id)?;
        if !self.speaker_index.contains_key(speaker_id) {
            self.speaker_index
                .insert(speaker_id.to_string(), self.speakers.len());
            self.speakers.push(speaker_id.to_string());
        }
        self.utt_index
            .insert(utt_id.to_string(), self.utterances.len());
        self.utterances.push(Utterance {
            utt_id: utt_id.to_string(),
            speaker_id: speaker_id.to_string(),
            frames,
        });
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn num_speakers(&self) -> usize {
        self.speakers.len()
    }

    /// Speaker ids in class-index order.
    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn class_of(&self, speaker_id: &str) -> Option<usize> {
        self.speaker_index.get(speaker_id).copied()
    }

    /// Class index of every utterance, in archive order.
    pub fn labels(&self) -> Vec<usize> {
        self.utterances
            .iter()
            .map(|u| self.speaker_index[&u.speaker_id])
            .collect()
    }

    pub fn get(&self, utt_id: &str) -> Option<&Utterance> {
        self.utt_index.get(utt_id).map(|&i| &self.utterances[i])
    }
}

pub fn write_archive(path: impl AsRef<Path>, archive: &FeatureArchive) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    encode_archive(&mut w, archive)?;
    w.flush()?;
    Ok(())
}

pub fn encode_archive<W: Write>(w: &mut W, archive: &FeatureArchive) -> Result<()> {
    w.write_all(ARCHIVE_MAGIC)?;
    w.write_u32::<LittleEndian>(ARCHIVE_VERSION)?;
    w.write_u32::<LittleEndian>(archive.dim as u32)?;
    w.write_u64::<LittleEndian>(archive.utterances.len() as u64)?;
    for u in &archive.utterances {
        write_str16(w, &u.utt_id)?;
        write_str16(w, &u.speaker_id)?;
        w.write_u32::<LittleEndian>(u.frames.rows() as u32)?;
        for &x in u.frames.as_slice() {
            w.write_f32::<LittleEndian>(x as f32)?;
        }
    }
    Ok(())
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<FeatureArchive> {
    let r = BufReader::new(File::open(path)?);
    decode_archive(r)
}

pub fn decode_archive<R: Read>(reader: R) -> Result<FeatureArchive> {
    let mut r = Tracked::new(reader);
    r.magic(ARCHIVE_MAGIC)?;
    let version = r.u32("version")?;
    if version != ARCHIVE_VERSION {
        return Err(r.fail(format!("unsupported archive version {version}")));
    }
    let dim = r.u32("dim")? as usize;
    let count = r.u64("utterance count")?;
    let mut archive = FeatureArchive::new(dim);
    for _ in 0..count {
        let record_start = r.pos;
        let utt_id = r.string("utterance id")?;
        let spk_id = r.string("speaker id")?;
        let t = r.u32("frame count")? as usize;
        if t == 0 {
            return Err(r.fail(format!("utterance {utt_id} has zero frames")));
        }
        let mut raw = vec![0u8; t * dim * 4];
        r.exact(&mut raw, "frame data")?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let frames = Matrix::new(t, dim, data).map_err(|e| Error::Format {
            offset: record_start,
            msg: e.to_string(),
        })?;
        archive
            .push(&utt_id, &spk_id, &frames)
            .map_err(|e| Error::Format {
                offset: record_start,
                msg: e.to_string(),
            })?;
    }
    r.expect_end()?;
    Ok(archive)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialLabel {
    Target,
    Nontarget,
}

impl TrialLabel {
    pub fn is_target(self) -> bool {
        self == TrialLabel::Target
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrialLabel::Target => "target",
            TrialLabel::Nontarget => "nontarget",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub enroll_id: String,
    pub test_id: String,
    pub label: TrialLabel,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn num_targets(&self) -> usize {
        self.trials.iter().filter(|t| t.label.is_target()).count()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.trials {
            s.push_str(&format!("{} {} {}\n", t.enroll_id, t.test_id, t.label.as_str()));
        }
        s
    }

    /// Every unordered pair of distinct utterances, labelled by speaker identity.
    pub fn all_pairs(archive: &FeatureArchive) -> TrialList {
        let utts = archive.utterances();
        let mut trials = Vec::new();
        for i in 0..utts.len() {
            for j in i + 1..utts.len() {
                let label = if utts[i].speaker_id == utts[j].speaker_id {
                    TrialLabel::Target
                } else {
                    TrialLabel::Nontarget
                };
                trials.push(Trial {
                    enroll_id: utts[i].utt_id.clone(),
                    test_id: utts[j].utt_id.clone(),
                    label,
                });
            }
        }
        TrialList { trials }
    }
}

/// Parses `enroll_id test_id target|nontarget` lines. Blank lines are skipped.
pub fn parse_trials_str(text: &str) -> Result<TrialList> {
    let mut trials = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let label = match fields[2] {
            "target" => TrialLabel::Target,
            "nontarget" => TrialLabel::Nontarget,
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("unknown label {other:?}"),
                })
            }
        };
        trials.push(Trial {
            enroll_id: fields[0].to_string(),
            test_id: fields[1].to_string(),
            label,
        });
    }
    Ok(TrialList { trials })
}

pub fn parse_trials(path: impl AsRef<Path>) -> Result<TrialList> {
    parse_trials_str(&std::fs::read_to_string(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub frames_range: (usize, usize),
    pub dim: usize,
    pub between_speaker_scale: f64,
    pub within_speaker_scale: f64,
    pub channel_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_speakers: 64,
            utts_per_speaker: 20,
            frames_range: (100, 200),
            dim: 30,
            between_speaker_scale: 3.0,
            within_speaker_scale: 1.0,
            channel_scale: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers == 0 {
            return Err(Error::config("n_speakers must be positive"));
        }
        if self.utts_per_speaker == 0 {
            return Err(Error::config("utts_per_speaker must be positive"));
        }
        if self.dim < 2 {
            return Err(Error::config(format!("dim must be at least 2, got {}", self.dim)));
        }
        let (lo, hi) = self.frames_range;
        if lo == 0 || lo > hi {
            return Err(Error::config(format!(
                "frames_range must satisfy 1 <= min <= max, got ({lo}, {hi})"
            )));
        }
        for (name, v) in [
            ("between_speaker_scale", self.between_speaker_scale),
            ("within_speaker_scale", self.within_speaker_scale),
            ("channel_scale", self.channel_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Draws a Gaussian speaker corpus: per-speaker means, a per-utterance channel
/// offset, and per-frame noise around their sum.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<FeatureArchive> {
    generate_synthetic_named(cfg, "spk")
}

/// As [`generate_synthetic`], with speaker ids `{prefix}{index:04}`.
pub fn generate_synthetic_named(cfg: &SynthConfig, prefix: &str) -> Result<FeatureArchive> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let d = cfg.dim;
    let mut archive = FeatureArchive::new(d);
    for s in 0..cfg.n_speakers {
        let spk = format!("{prefix}{s:04}");
        let mean: Vec<f64> = (0..d)
            .map(|_| cfg.between_speaker_scale * rng.normal())
            .collect();
        for u in 0..cfg.utts_per_speaker {
            let centre: Vec<f64> = mean
                .iter()
                .map(|m| m + cfg.channel_scale * rng.normal())
                .collect();
            let t = rng.range_inclusive(cfg.frames_range.0, cfg.frames_range.1);
            let mut frames = Matrix::zeros(t, d);
            for r in 0..t {
                for (x, c) in frames.row_mut(r).iter_mut().zip(&centre) {
                    *x = c + cfg.within_speaker_scale * rng.normal();
                }
            }
            archive.push(&format!("{spk}-u{u:03}"), &spk, &frames)?;
        }
    }
    Ok(archive)
}
