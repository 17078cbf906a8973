//! Command-line entry point: `prepare`, `train`, `eval`, `baseline`, and
//! `plot`, sharing one TOML configuration with `--seed`/`--out` overrides.
//! Exit code 0 means the requested artifact was fully produced.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vaclust::commands::{cmd_baseline, cmd_eval, cmd_plot, cmd_prepare, cmd_train, BaselineMethod};
use vaclust::config::RunConfig;
use vaclust_core::Split;

#[derive(Parser)]
#[command(
    name = "vaclust",
    version,
    about = "Unsupervised variational acoustic clustering of spoken digits"
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override; every random choice derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory override; all artifacts land under it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Kmeans,
    GmmEm,
}

impl From<MethodArg> for BaselineMethod {
    fn from(m: MethodArg) -> BaselineMethod {
        match m {
            MethodArg::Kmeans => BaselineMethod::KMeans,
            MethodArg::GmmEm => BaselineMethod::GmmEm,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Scan the corpus, fix train/val/test splits, and build the
    /// spectrogram cache. Incremental and safe to re-run.
    Prepare {
        /// Directory holding the spoken-digit corpus.
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Train the clustering model on the prepared data.
    Train {
        /// Repeat training with seeds seed..seed+N and report mean
        /// held-out metrics (N > 1 writes each run under run-<i>/).
        #[arg(long, default_value_t = 1)]
        runs: u32,
    },
    /// Score a checkpoint on one split.
    Eval {
        /// Checkpoint to score; defaults to <out>/best.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Score the truth labels as if they were the clustering.
        #[arg(long)]
        use_labels: bool,
    },
    /// Cluster raw spectrograms with a classical method.
    Baseline {
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Number of seeds to average over.
        #[arg(long, default_value_t = 1)]
        runs: u32,
    },
    /// Embed a split in 2-D and render a cluster scatter.
    Plot {
        /// Checkpoint for latent features; defaults to <out>/best.ckpt
        /// when present, otherwise raw spectrograms are embedded.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        /// Color by spoken digit instead of predicted cluster.
        #[arg(long)]
        color_by_truth: bool,
        /// Neighborhood size for the embedding.
        #[arg(long)]
        perplexity: Option<f64>,
    },
}

fn print_report(title: &str, report: &vaclust_core::MetricsReport) {
    println!(
        "{title}: accuracy {:.2}%  NMI {:.4}  silhouette {:.4}  DBI {:.4}",
        report.accuracy_pct, report.nmi, report.silhouette, report.dbi
    );
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), cli.seed, cli.out.as_deref())?;
    match cli.command {
        Command::Prepare { corpus } => {
            let s = cmd_prepare(&cfg, &corpus)?;
            println!(
                "prepared {} clips -> {} train / {} val / {} test ({}x{} grids)",
                s.clips, s.train, s.val, s.test, cfg.dsp.freq_bins, cfg.dsp.frames
            );
            println!(
                "cache: {} reused, {} regenerated, {} corrupt dropped -> {}",
                s.reused,
                s.regenerated,
                s.corrupt_dropped,
                s.cache_path.display()
            );
            println!("manifest: {}", s.manifest_path.display());
        }
        Command::Train { runs } => {
            let summary = cmd_train(&cfg, runs)?;
            for (i, outcome) in summary.outcomes.iter().enumerate() {
                println!(
                    "run {i}: best epoch {} (val loss {:.4}) -> {}",
                    outcome.best_epoch,
                    outcome.best_val_total,
                    outcome.best_path.display()
                );
            }
            if let Some(mean) = &summary.mean_metrics {
                print_report("mean held-out metrics", mean);
                if let Some(p) = &summary.mean_metrics_path {
                    println!("written to {}", p.display());
                }
            }
        }
        Command::Eval {
            checkpoint,
            split,
            use_labels,
        } => {
            let split = Split::from(split);
            let (report, path) = cmd_eval(&cfg, checkpoint.as_deref(), split, use_labels)?;
            let title = if use_labels {
                format!("labels on {}", split.name())
            } else {
                format!("checkpoint on {}", split.name())
            };
            print_report(&title, &report);
            println!("written to {}", path.display());
        }
        Command::Baseline {
            method,
            split,
            runs,
        } => {
            let method = BaselineMethod::from(method);
            let split = Split::from(split);
            let (reports, mean, path) = cmd_baseline(&cfg, method, split, runs)?;
            for (i, r) in reports.iter().enumerate() {
                print_report(
                    &format!("{} seed {}", method.name(), cfg.seed + i as u64),
                    r,
                );
            }
            if reports.len() > 1 {
                print_report(
                    &format!("{} mean of {}", method.name(), reports.len()),
                    &mean,
                );
            }
            println!("written to {}", path.display());
        }
        Command::Plot {
            checkpoint,
            split,
            color_by_truth,
            perplexity,
        } => {
            let split = Split::from(split);
            let paths = cmd_plot(
                &cfg,
                checkpoint.as_deref(),
                split,
                color_by_truth,
                perplexity,
            )?;
            println!(
                "plotted {} points in {} clusters -> {}",
                paths.points,
                paths.clusters,
                paths.image.display()
            );
            println!("coordinates: {}", paths.coordinates.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
