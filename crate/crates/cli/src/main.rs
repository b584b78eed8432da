use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use xvector::backend::{encode_backend, read_backend, EmbeddingSet};
use xvector::checkpoint::{encode_checkpoint, read_checkpoint};
use xvector::dataio::{encode_archive, parse_trials, read_archive, TrialList};
use xvector::metrics::{det_csv, parse_scores, scores_to_text};
use xvector::Error;
use xvector_cli::config::{ConfigArgs, Split};
use xvector_cli::pipeline::{self, epoch_checkpoint_path};

#[derive(Parser)]
#[command(name = "xvector", version, about = "x-vector speaker verification on synthetic or pre-extracted features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature archive
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        /// Also write every same/different-speaker pair as a trial list
        #[arg(long)]
        trials: Option<PathBuf>,
    },
    /// Train a speaker classifier and write its checkpoint
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines training log [default: <out>.log.jsonl]
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Extract embeddings for every utterance of an archive
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Utterances too short for the network [default: <out>.skipped.txt]
        #[arg(long)]
        skipped: Option<PathBuf>,
    },
    /// Fit LDA and PLDA on labelled embeddings
    TrainBackend {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trial list with a trained back-end
    Score {
        #[arg(long)]
        backend: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute EER and minDCF for a score file
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// DET points as CSV
        #[arg(long)]
        det: Option<PathBuf>,
    },
    /// Run every stage end to end into one directory
    RunExperiment {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

struct Failure {
    context: String,
    err: Error,
}

trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, Failure>;
}

impl<T> Context<T> for xvector::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, Failure> {
        self.map_err(|err| Failure { context: what(), err })
    }
}

fn reading(p: &Path) -> impl FnOnce() -> String + '_ {
    move || format!("reading {}", p.display())
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_all(outputs: Vec<(PathBuf, Vec<u8>)>) -> Result<(), Failure> {
    for (path, bytes) in outputs {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)
                .map_err(Error::from)
                .context(|| format!("creating {}", parent.display()))?;
        }
        fs::write(&path, bytes)
            .map_err(Error::from)
            .context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn resolve(config: &ConfigArgs) -> Result<xvector_cli::config::ExperimentConfig, Failure> {
    config.resolve().context(|| "configuration".to_string())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData {
            config,
            split,
            out,
            trials,
        } => {
            let cfg = resolve(&config)?;
            let archive = pipeline::generate(&cfg, split).context(|| "generating data".into())?;
            let mut bytes = Vec::new();
            encode_archive(&mut bytes, &archive).context(|| "encoding archive".into())?;
            let mut outputs = vec![(out, bytes)];
            if let Some(t) = trials {
                outputs.push((t, TrialList::all_pairs(&archive).to_text().into_bytes()));
            }
            write_all(outputs)
        }
        Command::Train {
            config,
            archive,
            out,
            log,
        } => {
            let cfg = resolve(&config)?;
            let data = read_archive(&archive).context(reading(&archive))?;
            let outcome = pipeline::train_model(&cfg, &data).context(|| "training".into())?;
            let mut outputs = Vec::new();
            let encode = |m| {
                let mut buf = Vec::new();
                encode_checkpoint(&mut buf, m).map(|_| buf)
            };
            outputs.push((out.clone(), encode(&outcome.model).context(|| "encoding checkpoint".into())?));
            for (i, m) in outcome.epoch_models.iter().enumerate() {
                outputs.push((
                    epoch_checkpoint_path(&out, i + 1),
                    encode(m).context(|| "encoding checkpoint".into())?,
                ));
            }
            let log = log.unwrap_or_else(|| with_suffix(&out, ".log.jsonl"));
            outputs.push((log, pipeline::log_jsonl(&outcome.report.records).into_bytes()));
            write_all(outputs)
        }
        Command::Extract {
            checkpoint,
            archive,
            out,
            skipped,
        } => {
            let model = read_checkpoint(&checkpoint).context(reading(&checkpoint))?;
            let data = read_archive(&archive).context(reading(&archive))?;
            let ex = pipeline::extract(&model.net, &data).context(|| "extracting embeddings".into())?;
            let mut bytes = Vec::new();
            encode_archive(&mut bytes, &ex.archive).context(|| "encoding embeddings".into())?;
            let skipped = skipped.unwrap_or_else(|| with_suffix(&out, ".skipped.txt"));
            write_all(vec![
                (out, bytes),
                (skipped, pipeline::skipped_report(&ex.skipped).into_bytes()),
            ])
        }
        Command::TrainBackend {
            config,
            embeddings,
            out,
        } => {
            let cfg = resolve(&config)?;
            let archive = read_archive(&embeddings).context(reading(&embeddings))?;
            let embs = EmbeddingSet::from_archive(&archive).context(reading(&embeddings))?;
            let fit = pipeline::train_backend(&embs, &cfg.backend_config()).context(|| "fitting back-end".into())?;
            let mut bytes = Vec::new();
            encode_backend(&mut bytes, &fit.model).context(|| "encoding back-end".into())?;
            write_all(vec![(out, bytes)])
        }
        Command::Score {
            backend,
            embeddings,
            trials,
            out,
        } => {
            let model = read_backend(&backend).context(reading(&backend))?;
            let archive = read_archive(&embeddings).context(reading(&embeddings))?;
            let embs = EmbeddingSet::from_archive(&archive).context(reading(&embeddings))?;
            let list = parse_trials(&trials).context(reading(&trials))?;
            let lines = pipeline::score(&model, &embs, &list).context(|| "scoring".into())?;
            write_all(vec![(out, scores_to_text(&lines).into_bytes())])
        }
        Command::Evaluate {
            config,
            scores,
            trials,
            out,
            det,
        } => {
            let cfg = resolve(&config)?;
            let lines = parse_scores(&scores).context(reading(&scores))?;
            let list = parse_trials(&trials).context(reading(&trials))?;
            let (report, scored) =
                pipeline::evaluate_scores(&lines, &list, cfg.c_miss, cfg.c_fa).context(|| "evaluating".into())?;
            let mut outputs = vec![(out, pipeline::report_json(&report).into_bytes())];
            if let Some(d) = det {
                outputs.push((d, det_csv(&scored).into_bytes()));
            }
            write_all(outputs)?;
            println!(
                "EER {:.4}%  minDCF(0.01) {:.4}  minDCF(0.001) {:.4}",
                100.0 * report.eer,
                report.min_dcf_p01,
                report.min_dcf_p001
            );
            Ok(())
        }
        Command::RunExperiment { config, out_dir } => {
            let cfg = resolve(&config)?;
            let exp = pipeline::run_experiment(&cfg).context(|| "running experiment".into())?;
            pipeline::write_experiment(&cfg, &exp, &out_dir).context(|| format!("writing {}", out_dir.display()))?;
            let r = &exp.summary.report;
            println!(
                "{} m={} s={}: EER {:.4}%  minDCF(0.01) {:.4}  minDCF(0.001) {:.4}",
                exp.summary.loss,
                exp.summary.margin,
                exp.summary.scale,
                100.0 * r.eer,
                r.min_dcf_p01,
                r.min_dcf_p001
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}: {}", f.context, f.err);
            ExitCode::from(xvector_cli::exit_code(&f.err) as u8)
        }
    }
}
