//! The stages behind each subcommand, as in-memory functions, plus the
//! file-level chain used by `run-experiment`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;
use xvector::backend::{apply_backend, fit_backend, BackendConfig, BackendFit, BackendModel, EmbeddingSet, PldaScorer};
use xvector::checkpoint::{encode_checkpoint, SpeakerModel};
use xvector::dataio::{encode_archive, generate_synthetic_named, FeatureArchive, TrialList};
use xvector::metrics::{align_scores, det_csv, evaluate, scores_to_text, EvalReport, ScoreLine, ScoredTrials};
use xvector::network::XVectorNet;
use xvector::trainer::{train, BatchRecord, TrainObserver, TrainReport};
use xvector::{Error, Matrix, Result};

use crate::config::{ExperimentConfig, Split};

pub fn generate(cfg: &ExperimentConfig, split: Split) -> Result<FeatureArchive> {
    generate_synthetic_named(&cfg.synth_config(split), split.speaker_prefix())
}

pub struct TrainOutcome {
    pub model: SpeakerModel,
    pub report: TrainReport,
    /// Snapshot after each epoch.
    pub epoch_models: Vec<SpeakerModel>,
}

struct Snapshots(Vec<SpeakerModel>);

impl TrainObserver for Snapshots {
    fn on_batch(&mut self, r: &BatchRecord) -> Result<()> {
        log::debug!(
            "step {} loss {:.4} lr {:.3e} grad_norm {:.3}",
            r.step,
            r.loss,
            r.lr,
            r.grad_norm
        );
        Ok(())
    }

    fn on_epoch_end(&mut self, epoch: usize, model: &SpeakerModel, mean_loss: f64) -> Result<()> {
        info!("epoch {} mean loss {mean_loss:.4}", epoch + 1);
        self.0.push(model.clone());
        Ok(())
    }
}

/// Initializes a classifier for the archive's speakers and trains it.
pub fn train_model(cfg: &ExperimentConfig, archive: &FeatureArchive) -> Result<TrainOutcome> {
    let mut rng = cfg.init_rng();
    let mut model = SpeakerModel::new(cfg.net_config()?, cfg.loss_config(), archive.num_speakers(), &mut rng)?;
    let mut snaps = Snapshots(Vec::new());
    let report = train(archive, &mut model, &cfg.train_config(), &mut snaps)?;
    Ok(TrainOutcome {
        model,
        report,
        epoch_models: snaps.0,
    })
}

pub fn log_jsonl(records: &[BatchRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("records serialize"));
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct Skipped {
    pub utt_id: String,
    pub frames: usize,
    pub min_frames: usize,
}

pub struct Extraction {
    /// Stored at archive precision, exactly as a round trip through a file.
    pub embeddings: EmbeddingSet,
    pub archive: FeatureArchive,
    pub skipped: Vec<Skipped>,
}

/// Evaluation-mode embedding of every utterance long enough for the
/// network's receptive field.
pub fn extract(net: &XVectorNet, features: &FeatureArchive) -> Result<Extraction> {
    if features.dim() != net.config().input_dim {
        return Err(Error::Dimension(format!(
            "checkpoint expects {}-dim features, archive has {}",
            net.config().input_dim,
            features.dim()
        )));
    }
    let dim = net
        .config()
        .embedding_dim()
        .ok_or_else(|| Error::Config("network has no embedding layer".into()))?;
    let min = net.config().receptive_field();
    let mut archive = FeatureArchive::new(dim);
    let mut skipped = Vec::new();
    for u in features.utterances() {
        if u.frames.rows() < min {
            warn!("skipping {}: {} frames, need {min}", u.utt_id, u.frames.rows());
            skipped.push(Skipped {
                utt_id: u.utt_id.clone(),
                frames: u.frames.rows(),
                min_frames: min,
            });
            continue;
        }
        let e = net.extract_embedding(&u.frames)?;
        archive.push(&u.utt_id, &u.speaker_id, &Matrix::row_vector(&e))?;
    }
    Ok(Extraction {
        embeddings: EmbeddingSet::from_archive(&archive)?,
        archive,
        skipped,
    })
}

pub fn skipped_report(skipped: &[Skipped]) -> String {
    let mut s = String::new();
    for k in skipped {
        s.push_str(&format!("{} {} {}\n", k.utt_id, k.frames, k.min_frames));
    }
    s
}

pub fn train_backend(embs: &EmbeddingSet, cfg: &BackendConfig) -> Result<BackendFit> {
    fit_backend(embs, cfg)
}

/// Looks up an id as an utterance, or else as a speaker whose embeddings are
/// averaged.
fn resolve_ids(embs: &EmbeddingSet, ids: &[&str]) -> Result<HashMap<String, Vec<f64>>> {
    let by_utt: HashMap<&str, usize> = embs.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut by_spk: HashMap<&str, Vec<usize>> = HashMap::new();
    if let Some(labels) = &embs.labels {
        for (i, l) in labels.iter().enumerate() {
            by_spk.entry(l.as_str()).or_default().push(i);
        }
    }
    let mut out = HashMap::new();
    let mut missing = Vec::new();
    for &id in ids {
        if out.contains_key(id) {
            continue;
        }
        if let Some(&i) = by_utt.get(id) {
            out.insert(id.to_string(), embs.vectors.row(i).to_vec());
        } else if let Some(rows) = by_spk.get(id) {
            let mut mean = vec![0.0; embs.dim()];
            for &r in rows {
                for (m, x) in mean.iter_mut().zip(embs.vectors.row(r)) {
                    *m += x;
                }
            }
            for m in &mut mean {
                *m /= rows.len() as f64;
            }
            out.insert(id.to_string(), mean);
        } else if !missing.contains(&id) {
            missing.push(id);
        }
    }
    if !missing.is_empty() {
        return Err(Error::Domain(format!(
            "{} trial ids are missing from the embeddings, first: {}",
            missing.len(),
            missing.iter().take(10).copied().collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(out)
}

/// PLDA score of every trial, in trial order.
pub fn score(model: &BackendModel, embs: &EmbeddingSet, trials: &TrialList) -> Result<Vec<ScoreLine>> {
    let mut ids: Vec<&str> = Vec::with_capacity(2 * trials.len());
    for t in &trials.trials {
        ids.push(&t.enroll_id);
        ids.push(&t.test_id);
    }
    let raw = resolve_ids(embs, &ids)?;
    let mut names: Vec<&String> = raw.keys().collect();
    names.sort();
    let mut data = Vec::with_capacity(names.len() * embs.dim());
    for n in &names {
        data.extend_from_slice(&raw[*n]);
    }
    let set = EmbeddingSet::new(
        names.iter().map(|s| s.to_string()).collect(),
        None,
        Matrix::new(names.len(), embs.dim(), data)?,
    )?;
    let (processed, zero) = apply_backend(model, &set)?;
    if zero > 0 {
        warn!("{zero} trial embeddings have zero norm after LDA");
    }
    let row: HashMap<&str, usize> = processed.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let scorer = PldaScorer::new(&model.plda)?;
    let mut out = Vec::with_capacity(trials.len());
    for t in &trials.trials {
        let e = processed.vectors.row(row[t.enroll_id.as_str()]);
        let x = processed.vectors.row(row[t.test_id.as_str()]);
        out.push(ScoreLine {
            enroll_id: t.enroll_id.clone(),
            test_id: t.test_id.clone(),
            score: scorer.score(e, x)?,
        });
    }
    Ok(out)
}

pub fn evaluate_scores(
    lines: &[ScoreLine],
    trials: &TrialList,
    c_miss: f64,
    c_fa: f64,
) -> Result<(EvalReport, ScoredTrials)> {
    let scored = align_scores(trials, lines)?;
    let report = evaluate(&scored, c_miss, c_fa)?;
    Ok((report, scored))
}

/// Back-end fit on training embeddings, then scoring and evaluation of the
/// evaluation trials, all in memory.
pub fn backend_and_evaluate(
    cfg: &ExperimentConfig,
    train_embs: &EmbeddingSet,
    eval_embs: &EmbeddingSet,
    trials: &TrialList,
) -> Result<(BackendFit, Vec<ScoreLine>, EvalReport, ScoredTrials)> {
    let fit = train_backend(train_embs, &cfg.backend_config())?;
    let lines = score(&fit.model, eval_embs, trials)?;
    let (report, scored) = evaluate_scores(&lines, trials, cfg.c_miss, cfg.c_fa)?;
    Ok((fit, lines, report, scored))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentSummary {
    pub loss: String,
    pub margin: f64,
    pub scale: f64,
    pub seed: u64,
    pub epoch_mean_loss: Vec<f64>,
    pub report: EvalReport,
    pub skipped_utterances: usize,
}

/// Every artifact of one experiment, in memory.
pub struct Experiment {
    pub train: FeatureArchive,
    pub eval: FeatureArchive,
    pub trials: TrialList,
    pub training: TrainOutcome,
    pub train_embs: Extraction,
    pub eval_embs: Extraction,
    pub backend: BackendFit,
    pub scores: Vec<ScoreLine>,
    pub scored: ScoredTrials,
    pub summary: ExperimentSummary,
}

/// gen-data → train → extract → train-backend → score → evaluate.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate()?;
    let train_data = generate(cfg, Split::Train)?;
    let eval_data = generate(cfg, Split::Eval)?;
    let trials = TrialList::all_pairs(&eval_data);
    let training = train_model(cfg, &train_data)?;
    let train_embs = extract(&training.model.net, &train_data)?;
    let eval_embs = extract(&training.model.net, &eval_data)?;
    let (backend, scores, report, scored) =
        backend_and_evaluate(cfg, &train_embs.embeddings, &eval_embs.embeddings, &trials)?;
    let loss = cfg.loss_config();
    let summary = ExperimentSummary {
        loss: loss.kind.to_string(),
        margin: loss.m,
        scale: loss.s,
        seed: cfg.seed,
        epoch_mean_loss: training.report.epoch_mean_loss.clone(),
        report,
        skipped_utterances: train_embs.skipped.len() + eval_embs.skipped.len(),
    };
    Ok(Experiment {
        train: train_data,
        eval: eval_data,
        trials,
        training,
        train_embs,
        eval_embs,
        backend,
        scores,
        scored,
        summary,
    })
}

pub fn epoch_checkpoint_path(path: &Path, epoch: usize) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(format!(".epoch{epoch}"));
    PathBuf::from(s)
}

fn archive_bytes(a: &FeatureArchive) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    encode_archive(&mut buf, a)?;
    Ok(buf)
}

fn checkpoint_bytes(m: &SpeakerModel) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    encode_checkpoint(&mut buf, m)?;
    Ok(buf)
}

pub fn report_json(report: &EvalReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

/// File names written by [`write_experiment`].
pub mod files {
    pub const CONFIG: &str = "config.toml";
    pub const TRAIN_ARCHIVE: &str = "train.spkf";
    pub const EVAL_ARCHIVE: &str = "eval.spkf";
    pub const TRIALS: &str = "eval_trials.txt";
    pub const CHECKPOINT: &str = "model.ckpt";
    pub const TRAIN_LOG: &str = "train_log.jsonl";
    pub const TRAIN_EMBEDDINGS: &str = "train_embeddings.spkf";
    pub const EVAL_EMBEDDINGS: &str = "eval_embeddings.spkf";
    pub const SKIPPED: &str = "skipped.txt";
    pub const BACKEND: &str = "backend.bin";
    pub const SCORES: &str = "scores.txt";
    pub const REPORT: &str = "report.json";
    pub const DET: &str = "det.csv";
    pub const SUMMARY: &str = "summary.json";
}

/// Serializes every artifact first, then writes them into `dir`.
pub fn write_experiment(cfg: &ExperimentConfig, exp: &Experiment, dir: &Path) -> Result<()> {
    let ckpt = dir.join(files::CHECKPOINT);
    let mut outputs: Vec<(PathBuf, Vec<u8>)> = vec![
        (dir.join(files::CONFIG), cfg.to_toml_string().into_bytes()),
        (dir.join(files::TRAIN_ARCHIVE), archive_bytes(&exp.train)?),
        (dir.join(files::EVAL_ARCHIVE), archive_bytes(&exp.eval)?),
        (dir.join(files::TRIALS), exp.trials.to_text().into_bytes()),
        (ckpt.clone(), checkpoint_bytes(&exp.training.model)?),
        (dir.join(files::TRAIN_LOG), log_jsonl(&exp.training.report.records).into_bytes()),
        (dir.join(files::TRAIN_EMBEDDINGS), archive_bytes(&exp.train_embs.archive)?),
        (dir.join(files::EVAL_EMBEDDINGS), archive_bytes(&exp.eval_embs.archive)?),
        (dir.join(files::BACKEND), {
            let mut buf = Vec::new();
            xvector::backend::encode_backend(&mut buf, &exp.backend.model)?;
            buf
        }),
        (dir.join(files::SCORES), scores_to_text(&exp.scores).into_bytes()),
        (dir.join(files::REPORT), report_json(&exp.summary.report).into_bytes()),
        (dir.join(files::DET), det_csv(&exp.scored).into_bytes()),
        (dir.join(files::SUMMARY), {
            let mut s = serde_json::to_string_pretty(&exp.summary).expect("summary serializes");
            s.push('\n');
            s.into_bytes()
        }),
    ];
    let mut skipped = exp.train_embs.skipped.clone();
    skipped.extend(exp.eval_embs.skipped.iter().cloned());
    outputs.push((dir.join(files::SKIPPED), skipped_report(&skipped).into_bytes()));
    for (i, m) in exp.training.epoch_models.iter().enumerate() {
        outputs.push((epoch_checkpoint_path(&ckpt, i + 1), checkpoint_bytes(m)?));
    }
    fs::create_dir_all(dir)?;
    for (path, bytes) in outputs {
        fs::write(path, bytes)?;
    }
    Ok(())
}
