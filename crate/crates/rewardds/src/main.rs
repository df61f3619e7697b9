use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use rewardds::pipeline::Mode;
use rewardds::runner::{
    cmd_attack, cmd_evaluate, cmd_gen_toy_data, cmd_run, cmd_synthesize, cmd_train_proxies,
    load_config, read_report, report_diff, write_report, ExperimentConfig, RunnerError,
};

#[derive(Parser)]
#[command(
    name = "rewardds",
    about = "Reward-guided synthetic data pipeline with DP proxy training",
    version
)]
struct Cli {
    /// Experiment config JSON (defaults are built in).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path config overrides, e.g. --set pipeline.fold=10.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    RewardDs,
    DpGeneration,
    DpInstruct,
    KnowledgeSg,
    LocallyFinetune,
    Vanilla,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::RewardDs => Mode::RewardDs,
            ModeArg::DpGeneration => Mode::DpGeneration,
            ModeArg::DpInstruct => Mode::DpInstruct,
            ModeArg::KnowledgeSg => Mode::KnowledgeSg,
            ModeArg::LocallyFinetune => Mode::LocallyFinetune,
            ModeArg::Vanilla => Mode::Vanilla,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the built-in toy corpora (private/dev/test JSONL).
    GenToyData,
    /// DP-train the generation and reward proxies; write checkpoints,
    /// budgets, histories, and preference pairs.
    TrainProxies,
    /// Materialize the initial synthetic pool D_0 as JSON Lines.
    Synthesize {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute a mode end to end and write its run report.
    Run {
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Report output path (default: report_dir/<mode>-<hash>.json,
        /// refusing to overwrite).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Baseline report to judge against (embeds win/tie/lose counts).
        #[arg(long)]
        judge_baseline: Option<PathBuf>,
    },
    /// Run the extraction and membership-inference attacks against a
    /// checkpoint.
    Attack {
        #[arg(long)]
        model: PathBuf,
        /// Member corpus (default: the private split).
        #[arg(long)]
        members: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-score an existing LM checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a side-by-side table of two run reports with judge verdicts.
    ReportDiff {
        ours: PathBuf,
        baseline: PathBuf,
        /// Tie margin for the judge comparison.
        #[arg(long, default_value_t = 1.0)]
        margin: f64,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> Result<(), RunnerError> {
    let cfg: ExperimentConfig = load_config(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::GenToyData => {
            let written = cmd_gen_toy_data(&cfg)?;
            for (split, n) in written {
                println!("wrote {n} records to {split:?}");
            }
        }
        Command::TrainProxies => {
            let proxies = cmd_train_proxies(&cfg)?;
            println!(
                "generation proxy: sigma = {:.4}, spent = ({}, {})",
                proxies.budgets.sigma_gen,
                proxies.budgets.gen.epsilon,
                proxies.budgets.gen.delta
            );
            println!(
                "reward proxy:     sigma = {:.4}, spent = ({}, {}), {} pairs",
                proxies.budgets.sigma_rwd,
                proxies.budgets.rwd.epsilon,
                proxies.budgets.rwd.delta,
                proxies.budgets.pair_count
            );
            println!("checkpoints in {}", cfg.paths.checkpoint_dir.display());
        }
        Command::Synthesize { out } => {
            let path = cmd_synthesize(&cfg, out.as_deref())?;
            println!("wrote initial pool to {}", path.display());
        }
        Command::Run {
            mode,
            out,
            judge_baseline,
        } => {
            let (report, pools) = cmd_run(&cfg, mode.into(), judge_baseline.as_deref())?;
            let path = write_report(&cfg, &report, &pools, out.as_deref())?;
            println!(
                "mode {} | rouge1 {:.4} rougeL {:.4} ppl {:.3} | eps_total {}",
                report.mode,
                report.metrics.rouge1,
                report.metrics.rouge_l,
                report.metrics.ppl,
                report.budget_total.epsilon
            );
            for (k, v) in &report.metrics.pass_at {
                println!("{k} = {v:.4}");
            }
            if let Some(j) = &report.judge_vs_baseline {
                println!(
                    "judge vs {}: win {} tie {} lose {}",
                    j.baseline, j.win, j.tie, j.lose
                );
            }
            println!("report written to {}", path.display());
        }
        Command::Attack {
            model,
            members,
            out,
        } => {
            let report = cmd_attack(&cfg, &model, members.as_deref())?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            match out {
                Some(path) => {
                    std::fs::write(&path, format!("{json}\n")).map_err(|source| {
                        RunnerError::Io {
                            path: path.clone(),
                            source,
                        }
                    })?;
                    println!("attack report written to {}", path.display());
                }
                None => println!("{json}"),
            }
        }
        Command::Evaluate { checkpoint, out } => {
            let eval = cmd_evaluate(&cfg, &checkpoint)?;
            let json = serde_json::json!({
                "metrics": eval.metrics,
                "per_query": eval.per_query,
            });
            let pretty = serde_json::to_string_pretty(&json).expect("serializes");
            match out {
                Some(path) => {
                    std::fs::write(&path, format!("{pretty}\n")).map_err(|source| {
                        RunnerError::Io {
                            path: path.clone(),
                            source,
                        }
                    })?;
                    println!("evaluation written to {}", path.display());
                }
                None => println!("{pretty}"),
            }
        }
        Command::ReportDiff {
            ours,
            baseline,
            margin,
            csv,
        } => {
            let a = read_report(&ours)?;
            let b = read_report(&baseline)?;
            let (table, csv_text) = report_diff(&a, &b, margin);
            print!("{table}");
            if let Some(path) = csv {
                std::fs::write(&path, csv_text).map_err(|source| RunnerError::Io {
                    path: path.clone(),
                    source,
                })?;
                println!("csv written to {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // Die quietly when a pipe consumer (head, less) closes early.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
