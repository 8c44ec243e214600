//! Command-line front end: six subcommands covering the individual stages
//! and the full pipeline. Exit codes classify failures (2 configuration,
//! 3 data/format, 4 numerical); `ELASTIC_SUPERNET_PRECISION` selects the
//! working float width.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use elastic_core::scalar::Scalar;
use elastic_supernet::checkpoint::{self, Checkpoint};
use elastic_supernet::config::RunConfig;
use elastic_supernet::csvio;
use elastic_supernet::error::{CliError, Result};
use elastic_supernet::pipeline;
use elastic_supernet::stages;

#[derive(Parser)]
#[command(
    name = "elastic-supernet",
    about = "Train one weight-sharing transformer supernet, search its submodels, and route compute budgets to them",
    arg_required_else_help = false
)]
struct Cli {
    /// Print the default configuration as TOML and exit.
    #[arg(long)]
    dump_default_config: bool,
    #[command(subcommand)]
    command: Option<Cmd>,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Reorder embedding channels, MLP units, and heads by importance.
    Rearrange {
        #[command(flatten)]
        common: Common,
        /// Supernet checkpoint to rearrange.
        #[arg(long)]
        checkpoint_in: PathBuf,
        /// Where the rearranged checkpoint lands.
        #[arg(long)]
        checkpoint_out: PathBuf,
        /// Permutation audit file (default: `<checkpoint-out>.permutations.txt`).
        #[arg(long)]
        audit_out: Option<PathBuf>,
    },
    /// Curriculum adaptation: train uniformly sampled submodels under
    /// stepwise-opening lower bounds.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint_in: PathBuf,
        #[arg(long)]
        checkpoint_out: PathBuf,
    },
    /// Multi-objective evolutionary search for Pareto-optimal submodels.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint_in: PathBuf,
        /// Full ranked archive CSV.
        #[arg(long, default_value = "archive.csv")]
        archive_out: PathBuf,
        /// Non-dominated front CSV (consumed by train-router).
        #[arg(long, default_value = "front0.csv")]
        front_out: PathBuf,
        /// Per-generation front history CSV.
        #[arg(long, default_value = "search_history.csv")]
        history_out: PathBuf,
    },
    /// Train the budget router against a searched front, then fine-tune
    /// jointly with the backbone.
    TrainRouter {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint_in: PathBuf,
        /// Front CSV from `search`.
        #[arg(long)]
        front: PathBuf,
        /// Combined backbone + router checkpoint.
        #[arg(long)]
        checkpoint_out: PathBuf,
    },
    /// Route budgets through a trained router and measure the selected
    /// submodels.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Combined checkpoint from `train-router`.
        #[arg(long)]
        checkpoint_in: PathBuf,
        /// Comma-separated normalized budgets (default: the config's list).
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<f64>>,
        /// Output CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage in order into the configured output directory.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Existing output directory to continue; completed stages are
        /// skipped based on its progress file.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.dump_default_config {
        print!("{}", RunConfig::default().to_toml());
        return ExitCode::SUCCESS;
    }
    let Some(cmd) = cli.command else {
        eprintln!("error: a subcommand is required (try --help)");
        return ExitCode::from(2);
    };
    let precision = std::env::var("ELASTIC_SUPERNET_PRECISION").unwrap_or_else(|_| "f32".into());
    let outcome = match precision.as_str() {
        "f32" => run::<f32>(cmd),
        "f64" => run::<f64>(cmd),
        other => Err(CliError::Config(format!(
            "ELASTIC_SUPERNET_PRECISION must be f32 or f64, got {other:?}"
        ))),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn master_seed(common: &Common, cfg: &RunConfig) -> u64 {
    common.seed.unwrap_or(cfg.run.seed)
}

/// Load a checkpoint and insist it matches the configured backbone.
fn load_matching<T: Scalar>(path: &Path, cfg: &RunConfig) -> Result<Checkpoint<T>> {
    let spec = cfg.spec()?;
    let ckpt = checkpoint::load::<T>(path)?;
    if ckpt.spec != spec {
        return Err(CliError::Config(format!(
            "{}: checkpoint was trained with a different backbone than the config describes",
            path.display()
        )));
    }
    Ok(ckpt)
}

fn print_log(log: &[String]) {
    for line in log {
        println!("{line}");
    }
}

fn run<T: Scalar>(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Rearrange {
            common,
            checkpoint_in,
            checkpoint_out,
            audit_out,
        } => {
            let cfg = load_config(&common)?;
            let spec = cfg.spec()?;
            let mut ckpt = load_matching::<T>(&checkpoint_in, &cfg)?;
            let (train, _) = stages::build_dataset::<T>(&cfg, &spec)?;
            let mut log = Vec::new();
            let (perm, report) =
                stages::run_rearrange(&cfg, &spec, &mut ckpt.params, &train, &mut log)?;
            checkpoint::save(&checkpoint_out, &spec, &ckpt.params, None)?;
            let audit = audit_out.unwrap_or_else(|| {
                let mut p = checkpoint_out.as_os_str().to_owned();
                p.push(".permutations.txt");
                PathBuf::from(p)
            });
            std::fs::write(&audit, stages::permutation_audit(&perm, &report))
                .map_err(CliError::io(&audit))?;
            print_log(&log);
            println!("wrote {} and {}", checkpoint_out.display(), audit.display());
            Ok(())
        }
        Cmd::Adapt {
            common,
            checkpoint_in,
            checkpoint_out,
        } => {
            let cfg = load_config(&common)?;
            let spec = cfg.spec()?;
            let seed = master_seed(&common, &cfg);
            let mut ckpt = load_matching::<T>(&checkpoint_in, &cfg)?;
            let (train, _) = stages::build_dataset::<T>(&cfg, &spec)?;
            let mut log = Vec::new();
            let total = cfg.curriculum.stage.steps;
            let mid = {
                let mut p = checkpoint_out.as_os_str().to_owned();
                p.push(".mid");
                PathBuf::from(p)
            };
            stages::run_stage1(
                &cfg,
                &spec,
                &mut ckpt.params,
                &train,
                seed,
                &mut log,
                &mut |step, p| {
                    let path = if step == total { &checkpoint_out } else { &mid };
                    checkpoint::save(path, &spec, p, None)
                },
            )?;
            print_log(&log);
            println!("wrote {}", checkpoint_out.display());
            Ok(())
        }
        Cmd::Search {
            common,
            checkpoint_in,
            archive_out,
            front_out,
            history_out,
        } => {
            let cfg = load_config(&common)?;
            let spec = cfg.spec()?;
            let seed = master_seed(&common, &cfg);
            let ckpt = load_matching::<T>(&checkpoint_in, &cfg)?;
            let (_, val) = stages::build_dataset::<T>(&cfg, &spec)?;
            let mut log = Vec::new();
            let archive = stages::run_search(&cfg, &spec, &ckpt.params, &val, seed, &mut log)?;
            csvio::write_archive(&archive_out, &archive, false)?;
            csvio::write_archive(&front_out, &archive, true)?;
            csvio::write_history(&history_out, &archive)?;
            print_log(&log);
            println!(
                "wrote {}, {} and {}",
                archive_out.display(),
                front_out.display(),
                history_out.display()
            );
            Ok(())
        }
        Cmd::TrainRouter {
            common,
            checkpoint_in,
            front,
            checkpoint_out,
        } => {
            let cfg = load_config(&common)?;
            let spec = cfg.spec()?;
            let seed = master_seed(&common, &cfg);
            let mut ckpt = load_matching::<T>(&checkpoint_in, &cfg)?;
            let archive = csvio::read_archive(&front, &spec)?;
            let (train, _) = stages::build_dataset::<T>(&cfg, &spec)?;
            let mut log = Vec::new();
            let router = stages::run_train_router(
                &cfg,
                &spec,
                &mut ckpt.params,
                &archive,
                &train,
                seed,
                &mut log,
            )?;
            checkpoint::save(&checkpoint_out, &spec, &ckpt.params, Some(&router))?;
            print_log(&log);
            println!("wrote {}", checkpoint_out.display());
            Ok(())
        }
        Cmd::Eval {
            common,
            checkpoint_in,
            budgets,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(b) = budgets {
                cfg.eval.budgets = b;
                cfg.validate()?;
            }
            let spec = cfg.spec()?;
            let ckpt = load_matching::<T>(&checkpoint_in, &cfg)?;
            let router = ckpt.router.ok_or_else(|| {
                CliError::Data(format!(
                    "{}: checkpoint holds no router tensors; run train-router first",
                    checkpoint_in.display()
                ))
            })?;
            let (_, val) = stages::build_dataset::<T>(&cfg, &spec)?;
            let mut log = Vec::new();
            let rows = stages::run_eval(&cfg, &spec, &ckpt.params, &router, &val, &mut log)?;
            print_log(&log);
            match out {
                Some(path) => {
                    csvio::write_eval(&path, &rows)?;
                    println!("wrote {}", path.display());
                }
                None => {
                    println!("{}", csvio::EVAL_HEADER);
                    for r in &rows {
                        println!(
                            "{:?},{},{:?},{:?},{}",
                            r.m_t, r.realized_macs, r.macs_norm, r.accuracy, r.genome_hex
                        );
                    }
                }
            }
            Ok(())
        }
        Cmd::Pipeline { common, resume } => {
            let cfg = load_config(&common)?;
            let outcome =
                pipeline::run_pipeline::<T>(&cfg, common.seed, resume.as_deref())?;
            println!(
                "pipeline complete: {} budgets evaluated, artifacts in {}",
                outcome.eval_rows.len(),
                outcome.out_dir.display()
            );
            for r in &outcome.eval_rows {
                println!(
                    "budget {:?}: macs_norm {:?}, accuracy {:?}",
                    r.m_t, r.macs_norm, r.accuracy
                );
            }
            Ok(())
        }
    }
}
