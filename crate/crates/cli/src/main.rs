//! `comlearn gen | train | eval | repro`
//!
//! Exit codes: 0 success, 1 solver failure / aborted run / failed
//! reproduction band, 2 bad arguments, config or dataset.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use comlearn::experiments::{
    check_bands, evaluate_theta, gen_dataset, read_theta, repro, repro_seed_count, repro_seeds, run_experiment, Dataset,
    ExperimentConfig, ExperimentError, ExperimentKind, Summary, TrainOverrides,
};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "comlearn", about = "Learn convex optimization models from data", version)]
struct Cli {
    /// TOML file with defaults for any of the options below
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset directory
    Gen {
        #[arg(long)]
        experiment: Option<ExperimentKind>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on a dataset (generated from --experiment/--seed unless --data is given)
    Train {
        #[arg(long)]
        experiment: Option<ExperimentKind>,
        /// Training seed (initial θ, batch order); also the dataset seed when generating
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Validation loss of a saved θ on a dataset
    Eval {
        /// Checked against the dataset's own experiment
        #[arg(long)]
        experiment: Option<ExperimentKind>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        theta: Option<PathBuf>,
    },
    /// Rerun an experiment over its seeds and check the reproduction bands
    Repro {
        /// An experiment name or `all`
        #[arg(long)]
        experiment: Option<String>,
        /// Number of seeds (default: 5 for monotone/resource, 3 otherwise)
        #[arg(long)]
        seeds: Option<usize>,
        /// Also write one run directory per seed here
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
}

#[derive(Args, Default)]
struct TrainFlags {
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long = "batch", alias = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long)]
    step0: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    experiment: Option<String>,
    seed: Option<u64>,
    seeds: Option<usize>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    theta: Option<PathBuf>,
    train: TrainOverrides,
}

enum Failure {
    Usage(String),
    Run(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::UnknownExperiment(_) | ExperimentError::InvalidDataset(_) => Failure::Usage(e.to_string()),
            other => Failure::Run(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<FileConfig, Failure> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn parse_kind(s: &str) -> Result<ExperimentKind, Failure> {
    s.parse().map_err(Failure::from)
}

fn existing(path: Option<PathBuf>, flag: &str) -> Result<PathBuf, Failure> {
    let path = required(path, flag)?;
    if !path.exists() {
        return Err(Failure::Usage(format!("--{flag} {} does not exist", path.display())));
    }
    Ok(path)
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T, Failure> {
    v.ok_or_else(|| Failure::Usage(format!("missing --{flag} (flag or config key)")))
}

fn merge_train(file: TrainOverrides, flags: TrainFlags) -> TrainOverrides {
    TrainOverrides {
        iters: flags.iters.or(file.iters),
        batch_size: flags.batch_size.or(file.batch_size),
        step0: flags.step0.or(file.step0),
        ..file
    }
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn run(cli: Cli) -> Result<ExitCode, Failure> {
    let file = load_config(cli.config.as_deref())?;
    let file_kind = file.experiment.as_deref().map(parse_kind).transpose();
    match cli.command {
        Command::Gen { experiment, seed, out } => {
            let kind = required(experiment.or(file_kind?), "experiment")?;
            let out = required(out.or(file.out), "out")?;
            let ds = gen_dataset(kind, seed.or(file.seed).unwrap_or(0))?;
            ds.write_dir(&out)?;
            println!("wrote {} ({} train / {} val) to {}", kind, ds.train.len(), ds.val.len(), out.display());
        }
        Command::Train { experiment, seed, data, out, train } => {
            let data = data.or(file.data).map(|d| existing(Some(d), "data")).transpose()?;
            let experiment = experiment.or(file_kind?);
            if data.is_none() && experiment.is_none() {
                return Err(Failure::Usage("train needs --data or --experiment".into()));
            }
            let seed = seed.or(file.seed);
            let mut overrides = merge_train(file.train, train);
            overrides.seed = seed.or(overrides.seed);
            let config = ExperimentConfig {
                experiment,
                seed: seed.unwrap_or(0),
                overrides,
                data_dir: data,
                out_dir: required(out.or(file.out), "out")?,
            };
            print_json(&run_experiment(&config)?);
        }
        Command::Eval { experiment, data, theta } => {
            let ds = Dataset::read_dir(&existing(data.or(file.data), "data")?)?;
            if let Some(kind) = experiment.or(file_kind?) {
                if kind != ds.experiment {
                    return Err(Failure::Usage(format!("dataset holds {}, not {kind}", ds.experiment)));
                }
            }
            let theta = read_theta(&existing(theta.or(file.theta), "theta")?)?;
            let expected = ds.family()?.theta_len();
            if theta.len() != expected {
                return Err(Failure::Usage(format!("θ has {} entries, {} expects {expected}", theta.len(), ds.experiment)));
            }
            let val = evaluate_theta(&ds, &theta)?;
            print_json(&serde_json::json!({ "experiment": ds.experiment, "val_loss": val }));
        }
        Command::Repro { experiment, seeds, out, train } => {
            let which = required(experiment.or(file.experiment), "experiment")?;
            let kinds = if which == "all" { ExperimentKind::ALL.to_vec() } else { vec![parse_kind(&which)?] };
            let overrides = merge_train(file.train, train);
            let mut all_pass = true;
            for kind in kinds {
                let seeds = repro_seeds(seeds.or(file.seeds).unwrap_or_else(|| repro_seed_count(kind)));
                let (runs, checks) = match &out {
                    Some(root) => {
                        let runs = seeds
                            .iter()
                            .map(|&seed| {
                                run_experiment(&ExperimentConfig {
                                    experiment: Some(kind),
                                    seed,
                                    overrides,
                                    data_dir: None,
                                    out_dir: root.join(format!("{kind}-seed{seed}")),
                                })
                            })
                            .collect::<Result<Vec<Summary>, _>>()?;
                        let checks = check_bands(kind, &runs);
                        (runs, checks)
                    }
                    None => repro(kind, &seeds, &overrides)?,
                };
                for s in &runs {
                    println!(
                        "{kind} seed {}: com_val {:.5} ({} val {:.5}), initial {:.5}",
                        s.seed, s.com_val, s.baseline, s.baseline_val, s.com_initial_val
                    );
                }
                for c in &checks {
                    println!("{} {kind}: {} [{}]", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
                    all_pass &= c.pass;
                }
            }
            if !all_pass {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
