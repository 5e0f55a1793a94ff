//! Command-line front end: `gen`, `train`, `eval`, `dump-affinity`,
//! `dump-curves`.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{
    gen_synthetic, load_features, read_config, save_features, FeatureFormat, FeatureMatrix, Split, SyntheticSpec,
    TrainConfig,
};
use crate::error::{Error, Result};
use crate::graph_cut::build_affinity;
use crate::network::ModelParams;
use crate::trainer::{embed_all, evaluate, train, TrainLog};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.json";
pub const ITER_CSV: &str = "iters.csv";
pub const EVAL_CSV: &str = "evals.csv";

#[derive(Parser, Debug)]
#[command(name = "cgmcr", version, about = "Subspace embedding and clustering by graph-cut guided rate reduction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Subspaces,
    Blobs,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic labeled dataset.
    Gen {
        #[arg(long, value_enum, default_value = "subspaces")]
        kind: Kind,
        #[arg(long)]
        k: usize,
        /// Ambient dimension.
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 200)]
        per_cluster: usize,
        /// Subspace dimension (subspaces).
        #[arg(long, default_value_t = 3)]
        rank: usize,
        /// Noise std before re-normalization (subspaces).
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        /// Blob std (blobs).
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output path; `.csv` selects CSV, anything else cgf.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a feature file; writes checkpoint and logs into the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Held-out features for periodic evaluation.
        #[arg(long)]
        eval_features: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Print clustering metrics as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Run config supplying sparsity, affinity and seed for spectral clustering.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the affinity graph of the eval-mode embeddings as `i j w` lines.
    DumpAffinity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a training log into iteration and evaluation CSV files.
    DumpCurves {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn load(path: &Path) -> Result<FeatureMatrix> {
    load_features(path, FeatureFormat::from_path(path))
}

fn eval_config(path: Option<&Path>, model: &ModelParams) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            let cfg = read_config(p)?;
            if cfg.k != model.arch.clusters {
                return Err(Error::Config(format!(
                    "config has k = {}, checkpoint has {} clusters",
                    cfg.k, model.arch.clusters
                )));
            }
            Ok(cfg)
        }
        None => Ok(TrainConfig::new(model.arch.clusters)),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_curves(log: &TrainLog, dir: &Path) -> Result<()> {
    let mut w = create(&dir.join(ITER_CSV))?;
    log.write_iter_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&dir.join(EVAL_CSV))?;
    log.write_eval_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn run_command(cmd: Command, stdout: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Gen {
            kind,
            k,
            dim,
            per_cluster,
            rank,
            noise,
            sigma,
            seed,
            out,
        } => {
            let spec = match kind {
                Kind::Subspaces => SyntheticSpec::subspaces(k, rank, dim, per_cluster, noise, seed),
                Kind::Blobs => SyntheticSpec::blobs(k, dim, per_cluster, sigma, seed),
            };
            let fm = gen_synthetic(&spec)?;
            save_features(&fm, &out, FeatureFormat::from_path(&out))?;
        }
        Command::Train {
            config,
            features,
            eval_features,
            out_dir,
        } => {
            let cfg = read_config(&config)?;
            let data = load(&features)?.with_split(Split::Train);
            let held_out = eval_features.as_deref().map(load).transpose()?.map(|f| f.with_split(Split::Test));
            std::fs::create_dir_all(&out_dir)?;
            let outcome = train(&cfg, &data, held_out.as_ref())?;
            save_checkpoint(&outcome.model, &out_dir.join(CHECKPOINT_FILE))?;
            let mut w = create(&out_dir.join(LOG_FILE))?;
            serde_json::to_writer_pretty(&mut w, &outcome.log).map_err(std::io::Error::other)?;
            w.flush()?;
            write_curves(&outcome.log, &out_dir)?;
        }
        Command::Eval {
            checkpoint,
            features,
            config,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let cfg = eval_config(config.as_deref(), &model)?;
            let data = load(&features)?;
            let rep = evaluate(&model, &data, &cfg)?;
            let value = if data.labels().is_some() {
                json!({
                    "acc_ch": rep.acc_ch,
                    "nmi_ch": rep.nmi_ch,
                    "acc_sc": rep.acc_sc,
                    "nmi_sc": rep.nmi_sc,
                    "n": rep.n,
                    "k": rep.k,
                })
            } else {
                json!({
                    "n": rep.n,
                    "k": rep.k,
                    "pseudo_label_histogram": rep.histogram(),
                })
            };
            writeln!(stdout, "{value}")?;
        }
        Command::DumpAffinity {
            checkpoint,
            features,
            config,
            out,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let cfg = eval_config(config.as_deref(), &model)?;
            let data = load(&features)?;
            let (z, _) = embed_all(&model, data.features())?;
            let g = build_affinity(&z, &cfg.affinity_config()?)?;
            let mut w = create(&out)?;
            g.write_triples(&mut w)?;
            w.flush()?;
        }
        Command::DumpCurves { log, out_dir } => {
            let text = std::fs::read_to_string(&log)?;
            let parsed: TrainLog = serde_json::from_str(&text).map_err(|e| Error::Format {
                path: log.clone(),
                location: format!("line {}, column {}", e.line(), e.column()),
                message: e.to_string(),
            })?;
            std::fs::create_dir_all(&out_dir)?;
            write_curves(&parsed, &out_dir)?;
        }
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render();
            let _ = if code == 0 {
                write!(stdout, "{text}")
            } else {
                write!(stderr, "{text}")
            };
            return code;
        }
    };
    match run_command(cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
