use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use coprlab::pipeline::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "coprlab", version, about = "Consistency-oriented pre-ranking experiments on a synthetic ad world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Built-in defaults are used when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set world.n_users=2000`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for `--set output_dir=DIR`.
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world and write catalog.json.
    GenWorld(Common),
    /// Run the exploration phase, train the ranking model and collect ranking logs.
    TrainTeacher(Common),
    /// Train one pre-ranking student (or `all` configured runs).
    TrainPrerank {
        #[command(flatten)]
        common: Common,
        /// Run name from the config: base, distill, rankflow, copr_uniform, copr, or `all`.
        #[arg(short, long)]
        method: String,
    },
    /// Run the evaluation cascade and write consistency, system and RPC CSVs.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Runs to evaluate (default: every configured run). `teacher` evaluates the ranker against itself.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
    },
    /// Print the evaluation CSVs as a table.
    Report(Common),
    /// Print the effective configuration as TOML.
    Config(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig, String> {
    let text = match &common.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| format!("cannot read {}: {e}", p.display()))?,
        None => String::new(),
    };
    let mut overrides = Vec::new();
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| format!("override `{o}` must look like KEY=VALUE"))?;
        overrides.push((k.trim().to_owned(), v.trim().to_owned()));
    }
    if let Some(s) = common.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(d) = &common.output_dir {
        overrides.push(("output_dir".into(), d.display().to_string()));
    }
    ExperimentConfig::from_toml_with_overrides(&text, &overrides).map_err(|e| e.to_string())
}

fn run(cli: Cli) -> Result<(), String> {
    let t0 = Instant::now();
    let err = |e: coprlab::Error| e.to_string();
    match cli.command {
        Command::GenWorld(c) => {
            let cfg = load(&c)?;
            let s = pipeline::step_gen_world(&cfg).map_err(err)?;
            println!(
                "wrote {}: {} users, {} ads, mean bid {:.3}, base CTR {:.4}",
                pipeline::Layout::new(&cfg).catalog().display(),
                s.n_users,
                s.n_ads,
                s.mean_bid,
                s.base_ctr
            );
        }
        Command::TrainTeacher(c) => {
            let cfg = load(&c)?;
            let out = pipeline::step_train_teacher(&cfg).map_err(err)?;
            for e in &out.history {
                println!("epoch {:>3}  log-loss {:.5}", e.epoch, e.loss.l_ctr);
            }
            println!(
                "held-out log-loss {:.5} (untrained {:.5})",
                out.heldout_logloss, out.initial_heldout_logloss
            );
        }
        Command::TrainPrerank { common, method } => {
            let cfg = load(&common)?;
            let names: Vec<String> = if method == "all" {
                cfg.students.iter().map(|r| r.name.clone()).collect()
            } else {
                vec![method]
            };
            if let Some(bad) = names.iter().find(|n| cfg.run(n).is_err()) {
                let known: Vec<&str> = cfg.students.iter().map(|r| r.name.as_str()).collect();
                Cli::command()
                    .error(
                        ErrorKind::InvalidValue,
                        format!("unknown method `{bad}` (configured: {}, or all)", known.join(", ")),
                    )
                    .exit();
            }
            for name in names {
                let history = pipeline::step_train_prerank(&cfg, &name).map_err(err)?;
                for e in &history {
                    let l = e.loss;
                    println!(
                        "{name:<14} epoch {:>3}  l_ctr {:.5}  l_rank {:.5}  l_reg {:.5}  total {:.5}",
                        e.epoch, l.l_ctr, l.l_rank, l.l_reg, l.total
                    );
                }
            }
        }
        Command::Evaluate { common, methods } => {
            let cfg = load(&common)?;
            pipeline::step_evaluate(&cfg, &methods).map_err(err)?;
            print!("{}", pipeline::report(&cfg).map_err(err)?);
        }
        Command::Report(c) => {
            let cfg = load(&c)?;
            print!("{}", pipeline::report(&cfg).map_err(err)?);
        }
        Command::Config(c) => {
            let cfg = load(&c)?;
            print!("{}", cfg.to_toml());
            return Ok(());
        }
    }
    eprintln!("done in {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
