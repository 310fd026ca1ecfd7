//! Command-line interface.
//!
//! Every subcommand reads and writes the standard file names of
//! [`crate::pipeline::files`] inside `--out`, so running the stages one by
//! one produces the same artifacts as `run-all`.
//!
//! Failures print one line to stderr, `ERROR <code> <message>`, and exit
//! with:
//!
//! | exit | code        | meaning                                        |
//! |------|-------------|------------------------------------------------|
//! | 0    |             | success                                        |
//! | 1    | `internal`  | unexpected failure                             |
//! | 2    | `config`    | bad configuration or arguments                 |
//! | 3    | `io`        | file could not be read or written              |
//! | 4    | `data`      | malformed file, label or dimension problem     |
//! | 5    | `numeric`   | non-finite or degenerate values during a stage |
//! | 6    | `gradcheck` | gradient check above tolerance                 |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::clustering::{ClusterFile, ClusterState};
use crate::config::Config;
use crate::datagen::{read_trials, write_trials, SpeakerDataset};
use crate::embednet::{embed_all, grad_check_suite, Checkpoint};
use crate::metrics::{self, MetricsReport};
use crate::pipeline::{self, files, ClusterSnapshot, Regime};
use crate::{Error, Result};

/// Writes a stdout line, ignoring a closed pipe.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

/// Tolerance of `grad-check`.
pub const GRAD_CHECK_TOL: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(name = "cguda", version, about = "Cluster-guided domain adaptation for speaker embeddings")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed (overrides `train.seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for all inputs and outputs.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Number of clusters (overrides `cluster.k`).
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Also write FRR/FAR sweep points as CSV.
    #[arg(long, global = true)]
    pub emit_curves: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate source data, target data and target trials.
    GenData,
    /// Train the baseline, contrastive-only and joint pre-training models.
    Pretrain,
    /// Cluster the target embeddings of the pre-trained model.
    Cluster {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fine-tune with the contrastive center loss.
    Finetune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        clusters: Option<PathBuf>,
    },
    /// Pseudo-label the target data with the fine-tuned model.
    PseudoLabel {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the final model on source plus pseudo-labeled target data.
    TrainFinal,
    /// Score a checkpoint on a trial list and print the metrics document.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        trials: Option<PathBuf>,
        /// Evaluation data (with evaluation labels).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write the metrics document here as well as to stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run every stage and write the results document.
    RunAll,
    /// Compare analytic gradients with central differences.
    GradCheck {
        #[arg(long, default_value_t = 1e-4)]
        epsilon: f64,
        #[arg(long, default_value_t = 10)]
        instances: usize,
    },
}

/// Failure category, exit status and error-line code.
pub fn classify(err: &Error) -> (u8, &'static str) {
    match err.root() {
        Error::InvalidConfig(_) | Error::ConfigParse { .. } => (2, "config"),
        Error::Io { .. } => (3, "io"),
        Error::Format { .. }
        | Error::Labels(_)
        | Error::DimensionMismatch { .. }
        | Error::IndexOutOfRange { .. }
        | Error::Empty(_)
        | Error::HiddenLabelsPresent(_)
        | Error::Unsatisfiable(_)
        | Error::NotNormalized(_) => (4, "data"),
        Error::NonFinite(_) | Error::Degenerate(_) => (5, "numeric"),
        Error::Stage { .. } => (1, "internal"),
    }
}

/// Why a command did not succeed.
pub enum Failure {
    Error(Error),
    GradCheck(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Error(e) => classify(e).0,
            Failure::GradCheck(_) => 6,
        }
    }

    pub fn error_line(&self) -> String {
        let (code, msg) = match self {
            Failure::Error(e) => (classify(e).1, e.to_string()),
            Failure::GradCheck(m) => ("gradcheck", m.clone()),
        };
        format!("ERROR {code} {}", msg.replace('\n', " "))
    }
}

/// Parses arguments, runs the command and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("invalid arguments");
            eprintln!("ERROR usage {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.error_line());
            ExitCode::from(f.exit_code())
        }
    }
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::from_file(p)?,
        None => Config::default(),
    };
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(k) = common.k {
        cfg.cluster.k = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

struct Dirs<'a> {
    out: &'a Path,
}

impl Dirs<'_> {
    fn file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn or(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.file(default))
    }

    /// Training view of a dataset file (evaluation labels removed).
    fn training_set(&self, name: &str) -> Result<SpeakerDataset> {
        Ok(SpeakerDataset::read(&self.file(name))?.split_hidden().0)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut v = serde_json::to_vec_pretty(value).expect("document serializes");
    v.push(b'\n');
    pipeline::write_atomic(path, &v)
}

fn curve_csv(sweep: &[metrics::SweepPoint]) -> String {
    let mut s = String::from("threshold,frr,far\n");
    for p in sweep {
        let _ = writeln!(s, "{:?},{:?},{:?}", p.threshold, p.frr, p.far);
    }
    s
}

fn write_curve(params_path: &Path, eval: &SpeakerDataset, trials: &metrics::TrialList, out: &Path) -> Result<()> {
    let ck = Checkpoint::read(params_path)?;
    let emb = embed_all(&ck.params, eval.utterances())?;
    let scored = metrics::score_trials(eval.ids(), &emb, trials)?;
    pipeline::write_atomic(out, curve_csv(&metrics::error_sweep(&scored)?).as_bytes())
}

/// Metrics document of `evaluate`.
#[derive(Debug, Serialize)]
struct EvalDocument {
    #[serde(flatten)]
    metrics: MetricsReport,
    config_hash: String,
    seed: u64,
}

pub fn run(cli: &Cli) -> std::result::Result<(), Failure> {
    let cfg = load_config(&cli.common)?;
    let dirs = Dirs { out: &cli.common.out };
    ensure_dir(dirs.out)?;
    match &cli.command {
        Command::GenData => {
            let b = pipeline::generate_benchmark(&cfg).map_err(|e| e.in_stage("gen-data"))?;
            b.source.write(&dirs.file(files::SOURCE))?;
            b.target.write(&dirs.file(files::TARGET))?;
            write_trials(&b.trials, &dirs.file(files::TRIALS))?;
        }
        Command::Pretrain => {
            let source = dirs.training_set(files::SOURCE)?;
            let target = dirs.training_set(files::TARGET)?;
            for (regime, file) in [
                (Regime::SourceOnly, files::BASELINE),
                (Regime::ContrastiveOnly, files::CSL),
                (Regime::Joint, files::PRETRAIN),
            ] {
                let (ck, record) = pipeline::pretrain_regime(&source, &target, &cfg, regime)?;
                ck.write(&dirs.file(file))?;
                pipeline::write_atomic(
                    &dirs.file(&files::record(regime.stage_name())),
                    &record.to_json(),
                )?;
            }
        }
        Command::Cluster { checkpoint } => {
            let ck = Checkpoint::read(&dirs.or(checkpoint, files::PRETRAIN))?;
            let target = dirs.training_set(files::TARGET)?;
            let state = pipeline::initial_clustering(&ck.params, &target, &cfg)?;
            state.write(target.ids(), &dirs.file(files::CLUSTERS_INITIAL))?;
        }
        Command::Finetune {
            checkpoint,
            clusters,
        } => {
            let ck = Checkpoint::read(&dirs.or(checkpoint, files::PRETRAIN))?;
            let source = dirs.training_set(files::SOURCE)?;
            let target = dirs.training_set(files::TARGET)?;
            let initial = load_clusters(&dirs.or(clusters, files::CLUSTERS_INITIAL), &ck, &target)?;
            let mut observer = |_: &ClusterSnapshot, _: &ClusterState| Ok(());
            let out = pipeline::finetune(&ck.params, &source, &target, initial, &cfg, &mut observer)?;
            out.checkpoint.write(&dirs.file(files::FINETUNE))?;
            out.clusters
                .write(target.ids(), &dirs.file(files::CLUSTERS_FINETUNE))?;
            pipeline::write_atomic(&dirs.file(&files::record("finetune")), &out.record.to_json())?;
        }
        Command::PseudoLabel { checkpoint } => {
            let ck = Checkpoint::read(&dirs.or(checkpoint, files::FINETUNE))?;
            let target = dirs.training_set(files::TARGET)?;
            let (pseudo, state) = pipeline::pseudo_label_target(&ck.params, &target, &cfg)?;
            state.write(target.ids(), &dirs.file(files::PSEUDO))?;
            pseudo.write(&dirs.file(files::TARGET_PSEUDO))?;
        }
        Command::TrainFinal => {
            let source = dirs.training_set(files::SOURCE)?;
            let pseudo = dirs.training_set(files::TARGET_PSEUDO)?;
            let combined = pipeline::combine(&source, Some(&pseudo)).map_err(|e| e.in_stage("combine"))?;
            let warm = if cfg.train.warm_start_final {
                Some(Checkpoint::read(&dirs.file(files::FINETUNE))?.params)
            } else {
                None
            };
            let (ck, record) = pipeline::train_final(&combined, &cfg, warm.as_ref())?;
            ck.write(&dirs.file(files::FINAL))?;
            pipeline::write_atomic(&dirs.file(&files::record("final")), &record.to_json())?;
        }
        Command::Evaluate {
            checkpoint,
            trials,
            data,
            report,
        } => {
            let ck = Checkpoint::read(checkpoint)?;
            let trial_list = read_trials(&dirs.or(trials, files::TRIALS))?;
            let (eval_set, hidden) = SpeakerDataset::read(&dirs.or(data, files::TARGET))?.split_hidden();
            let hidden = hidden.ok_or_else(|| {
                Error::Labels("evaluation data carries no evaluation labels".into())
            })?;
            let m = pipeline::evaluate_model(&ck.params, &eval_set, &hidden, &trial_list, &cfg)
                .map_err(|e| e.in_stage("evaluate"))?;
            let doc = EvalDocument {
                metrics: m,
                config_hash: cfg.hash(),
                seed: cfg.train.seed,
            };
            let text = serde_json::to_string_pretty(&doc).expect("document serializes");
            say!("{text}");
            if let Some(r) = report {
                write_json(r, &doc)?;
            }
            if cli.common.emit_curves {
                let stem = checkpoint
                    .file_stem()
                    .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
                write_curve(checkpoint, &eval_set, &trial_list, &dirs.file(&format!("{stem}.curve.csv")))?;
            }
        }
        Command::RunAll => {
            let (results, _) = pipeline::run_full(&cfg, Some(dirs.out))?;
            let s = &results.stages;
            for (name, m) in [
                ("baseline", &s.baseline.metrics),
                ("csl", &s.csl.metrics),
                ("pretrain", &s.pretrain.metrics),
                ("finetune", &s.finetune.metrics),
                ("final", &s.final_.metrics),
            ] {
                say!(
                    "{name:<9} eer={} min_dcf={} nmi={}",
                    fmt_metric(m.eer),
                    fmt_metric(m.min_dcf),
                    fmt_metric(m.nmi)
                );
            }
            say!("results written to {}", dirs.file(files::RESULTS).display());
            if cli.common.emit_curves {
                let eval = SpeakerDataset::read(&dirs.file(files::TARGET))?;
                let trials = read_trials(&dirs.file(files::TRIALS))?;
                for (stage, file) in [
                    ("baseline", files::BASELINE),
                    ("csl", files::CSL),
                    ("pretrain", files::PRETRAIN),
                    ("finetune", files::FINETUNE),
                    ("final", files::FINAL),
                ] {
                    write_curve(&dirs.file(file), &eval, &trials, &dirs.file(&format!("{stage}.curve.csv")))?;
                }
            }
        }
        Command::GradCheck {
            epsilon,
            instances,
        } => {
            let report = grad_check_suite(cfg.train.seed, *instances, *epsilon)?;
            let mut failed = Vec::new();
            for (name, err) in &report {
                let ok = *err < GRAD_CHECK_TOL;
                say!("{name:<22} max_rel_error={err:.3e} {}", if ok { "ok" } else { "FAIL" });
                if !ok {
                    failed.push(*name);
                }
            }
            if !failed.is_empty() {
                return Err(Failure::GradCheck(format!(
                    "relative error above {GRAD_CHECK_TOL:e} for {}",
                    failed.join(", ")
                )));
            }
        }
    }
    Ok(())
}

fn fmt_metric(v: metrics::MetricValue) -> String {
    v.value()
        .map_or_else(|| "degenerate".to_string(), |x| format!("{x:.4}"))
}

/// Reads a cluster file and checks it against the target set; the
/// objective is recomputed from the checkpoint's embeddings.
fn load_clusters(path: &Path, ck: &Checkpoint, target: &SpeakerDataset) -> Result<ClusterState> {
    let file = ClusterFile::read(path)?;
    if file.ids != target.ids() {
        return Err(Error::Labels(format!(
            "cluster file {} does not match the target utterances",
            path.display()
        )));
    }
    let emb = embed_all(&ck.params, target.utterances())?;
    ClusterState::from_parts(&emb, file.assignments, file.centers)
}
