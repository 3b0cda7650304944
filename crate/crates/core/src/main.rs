use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use modelsmith::baselines::{bench, render_bench_table, McgsParams, SearchPolicy, SyntheticTaskModel, DEFAULT_DRAFTS};
use modelsmith::lifecycle::{blend_sources, BlendMethod};
use modelsmith::pipeline::{cmd_replay, cmd_report, cmd_run, ExitStatus, ReportFormat};

#[derive(Parser)]
#[command(name = "modelsmith", version, about = "Hierarchical agent orchestration for building ML models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    JsonLines,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Greedy,
    Mcgs,
}

#[derive(Subcommand)]
enum Command {
    /// Run a task bundle end to end.
    Run {
        bundle: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Overrides paths.run_dir from the config.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Re-execute a scripted run from its transcript and compare artifacts.
    Replay { run_dir: PathBuf },
    /// Summarize a run from its transcript.
    Report {
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Compare the search baselines on the synthetic task model.
    BenchBaselines {
        /// Both policies when omitted.
        #[arg(long, value_enum)]
        policy: Option<Policy>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = DEFAULT_DRAFTS)]
        drafts: usize,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
    },
    /// Blend member prediction files into one.
    Blend {
        #[arg(long)]
        method: String,
        /// Comma-separated, one per input.
        #[arg(long, value_delimiter = ',')]
        weights: Vec<f64>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn exit(status: ExitStatus) -> ExitCode {
    ExitCode::from(status.code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stderr = std::io::stderr();
    match cli.command {
        Command::Run { bundle, config, run_dir } => {
            let outcome = cmd_run(&bundle, &config, run_dir.as_deref());
            for d in &outcome.diagnostics {
                let _ = writeln!(stderr, "modelsmith: {d}");
            }
            if let Some(s) = &outcome.submission {
                println!("submission: {}", outcome.run_dir.join("submission.json").display());
                println!("inference: {}", s.inference_command);
            }
            if outcome.status != ExitStatus::Ok {
                let _ = writeln!(stderr, "modelsmith: run finished with {}", outcome.status.word());
            }
            exit(outcome.status)
        }
        Command::Replay { run_dir } => {
            let outcome = cmd_replay(&run_dir);
            if let Some(d) = &outcome.diagnostic {
                let _ = writeln!(stderr, "modelsmith: {}: {d}", outcome.status.word());
            } else {
                println!("replay matches");
            }
            exit(outcome.status)
        }
        Command::Report { run_dir, format } => {
            let format = match format {
                Format::Text => ReportFormat::Text,
                Format::JsonLines => ReportFormat::JsonLines,
            };
            match cmd_report(&run_dir, format) {
                Ok(text) => {
                    print!("{text}");
                    exit(ExitStatus::Ok)
                }
                Err((status, d)) => {
                    let _ = writeln!(stderr, "modelsmith: {}: {d}", status.word());
                    exit(status)
                }
            }
        }
        Command::BenchBaselines { policy, seed, steps, drafts, trials } => {
            let model = SyntheticTaskModel::default();
            let policies: Vec<SearchPolicy> = match policy {
                Some(Policy::Greedy) => vec![SearchPolicy::Greedy { drafts }],
                Some(Policy::Mcgs) => vec![SearchPolicy::Mcgs(McgsParams { drafts, ..McgsParams::default() })],
                None => vec![
                    SearchPolicy::Greedy { drafts },
                    SearchPolicy::Mcgs(McgsParams { drafts, ..McgsParams::default() }),
                ],
            };
            let mut rows = Vec::new();
            for p in &policies {
                match bench(&model, p, steps, trials, seed) {
                    Ok(r) => rows.push(r),
                    Err(e) => {
                        let _ = writeln!(stderr, "modelsmith: {e}");
                        return exit(ExitStatus::Other);
                    }
                }
            }
            print!("{}", render_bench_table(&rows));
            exit(ExitStatus::Ok)
        }
        Command::Blend { method, weights, threshold, out, inputs } => {
            let result = (|| {
                let method = BlendMethod::parse(&method, threshold)?;
                let sources = inputs
                    .iter()
                    .map(|p| fs::read_to_string(p).map(|t| (p.display().to_string(), t)).map_err(|e| format!("{}: {e}", p.display())))
                    .collect::<Result<Vec<_>, _>>()?;
                let content = blend_sources(&sources, &weights, &method)?;
                if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                    fs::create_dir_all(parent).map_err(|e| e.to_string())?;
                }
                fs::write(&out, content).map_err(|e| format!("{}: {e}", out.display()))
            })();
            match result {
                Ok(()) => exit(ExitStatus::Ok),
                Err(e) => {
                    let _ = writeln!(stderr, "modelsmith: blend: {e}");
                    exit(ExitStatus::Other)
                }
            }
        }
    }
}
