use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use g3dk::commands::{self, Scope, Source};
use g3dk::error::CliError;
use g3dk_core::config::RunConfig;
use g3dk_core::model::Ablation;

#[derive(Parser)]
#[command(name = "g3dk", version, about = "Toy multi-view 3D visual grounding: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Proposals {
    Gt,
    Jitter,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stub {
    Oracle,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum GradScope {
    Op,
    Block,
    Model,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic episode dataset.
    Gen {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model and write its checkpoint and step log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Step log CSV; defaults to `<out>.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Component to switch off: sg, mpe, attn or lg.
        #[arg(long, value_parser = parse_ablation)]
        ablate: Option<Ablation>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Evaluate a checkpoint or a baseline stub.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "stub", conflicts_with = "stub")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        stub: Option<Stub>,
        #[arg(long, value_parser = parse_ablation)]
        ablate: Option<Ablation>,
        #[arg(long, value_enum, default_value = "gt")]
        proposals: Proposals,
        /// Metrics CSV; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every ablation variant.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, value_enum, default_value = "op")]
        scope: GradScope,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Divided versus joint attention cost.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4, 8])]
        views: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [64usize, 256])]
        patches: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print every config key with its default.
    Config,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    Ablation::parse(s).ok_or_else(|| format!("unknown ablation {s:?}; expected sg, mpe, attn or lg"))
}

fn with_ablation(mut cfg: RunConfig, ablate: Option<Ablation>) -> RunConfig {
    if let Some(a) = ablate {
        cfg.model = a.apply(&cfg.model);
    }
    cfg
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { seed, count, out, config } => {
            let cfg = commands::load_config(config.as_deref())?;
            let summary = commands::gen(&cfg, seed.unwrap_or(cfg.model.seed), count, &out)?;
            println!("{summary}");
        }
        Command::Train {
            config,
            data,
            out,
            log,
            ablate,
            workers,
        } => {
            let mut cfg = with_ablation(commands::load_config(config.as_deref())?, ablate);
            if let Some(w) = workers {
                cfg.model.train.workers = w;
                cfg.validate()?;
            }
            let log = log.unwrap_or_else(|| commands::default_log_path(&out));
            println!("{}", commands::train_cmd(&cfg, &data, &out, &log)?);
        }
        Command::Eval {
            config,
            data,
            checkpoint,
            stub,
            ablate,
            proposals,
            out,
        } => {
            let cfg = with_ablation(commands::load_config(config.as_deref())?, ablate);
            let source = match (&checkpoint, stub) {
                (Some(p), _) => Source::Checkpoint(p),
                (None, Some(Stub::Oracle)) => Source::Oracle,
                (None, Some(Stub::Random)) => Source::Random,
                (None, None) => return Err(CliError::Usage("--checkpoint or --stub is required".into())),
            };
            let jitter = matches!(proposals, Proposals::Jitter);
            let report = commands::eval_cmd(&cfg, source, &data, jitter)?;
            let split = if jitter { "jitter" } else { "gt" };
            emit(out.as_ref(), &report.to_csv(split))?;
            if out.is_some() {
                print!("{}", report.error_table());
            } else {
                eprint!("{}", report.error_table());
            }
        }
        Command::Ablate {
            config,
            data,
            test,
            seeds,
            out,
        } => {
            let cfg = commands::load_config(config.as_deref())?;
            let rows = commands::ablate(&cfg, &data, &test, seeds)?;
            emit(out.as_ref(), &commands::ablation_csv(&rows))?;
        }
        Command::Gradcheck { scope, seed } => {
            let scope = match scope {
                GradScope::Op => Scope::Op,
                GradScope::Block => Scope::Block,
                GradScope::Model => Scope::Model,
            };
            let units = commands::gradcheck(scope, seed)?;
            print!("{}", commands::gradcheck_report(&units));
            if let Some(bad) = units.iter().find(|u| !u.passed()) {
                return Err(CliError::Numeric(format!(
                    "{}: relative error {:e} exceeds {:e}",
                    bad.name, bad.worst, bad.threshold
                )));
            }
        }
        Command::Bench {
            views,
            patches,
            dim,
            heads,
            reps,
            out,
        } => {
            if views.contains(&0) || patches.contains(&0) || dim == 0 || heads == 0 || dim % heads != 0 {
                return Err(CliError::Usage("views, patches and dim must be positive, dim divisible by heads".into()));
            }
            emit(out.as_ref(), &commands::bench(&views, &patches, dim, heads, reps)?)?;
        }
        Command::Config => print!("{}", RunConfig::default().to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
