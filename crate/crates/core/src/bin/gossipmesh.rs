use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gossipmesh::harness::{
    cmd_compare, cmd_run, cmd_sweep, parse_sweep, Format, HarnessError, RunArgs, ScenarioBundle,
    EXIT_EXPECTATION,
};
use gossipmesh::sim::Mode;

#[derive(Parser)]
#[command(name = "gossipmesh", version, about = "Run gossip coordination scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its metrics.
    Run {
        /// Scenario file, or the name of a bundled scenario.
        #[arg(long)]
        scenario: String,
        #[arg(long, env = "GOSSIPMESH_SEED")]
        seed: Option<u64>,
        /// Metrics output path (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "json")]
        format: Format,
        /// Write the JSONL trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Run a scenario across values of one knob and several seeds.
    Sweep {
        #[arg(long)]
        scenario: String,
        /// KEY=V1,V2,...
        #[arg(long)]
        sweep: String,
        #[arg(long, default_value_t = 30)]
        seeds: u64,
        /// First seed; later runs use consecutive seeds.
        #[arg(long, env = "GOSSIPMESH_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "csv")]
        format: Format,
    },
    /// Run a scenario under gossip and direct broadcast side by side.
    Compare {
        #[arg(long)]
        scenario: String,
        #[arg(long, env = "GOSSIPMESH_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "csv")]
        format: Format,
    },
    /// List bundled scenarios.
    List,
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<(), HarnessError> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| HarnessError::Io {
            path: path.clone(),
            message: e.to_string(),
        }),
        None => {
            let _ = std::io::stdout().write_all(text.as_bytes());
            Ok(())
        }
    }
}

fn json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn execute(cmd: Command) -> Result<(), HarnessError> {
    match cmd {
        Command::Run {
            scenario,
            seed,
            out,
            format,
            trace,
            mode,
        } => {
            let bundle = ScenarioBundle::load(&scenario)?;
            let args = RunArgs {
                seed,
                mode,
                format,
                out: out.clone(),
                trace,
            };
            let report = cmd_run(&bundle, &args)?;
            if out.is_none() {
                emit(None, &report.rendered)?;
            }
            if !report.failures.is_empty() {
                return Err(HarnessError::Expectation(report.failures));
            }
            Ok(())
        }
        Command::Sweep {
            scenario,
            sweep,
            seeds,
            seed,
            out,
            format,
        } => {
            let bundle = ScenarioBundle::load(&scenario)?;
            let (key, values) = parse_sweep(&sweep)?;
            let table = cmd_sweep(&bundle, &key, &values, seeds, seed)?;
            let text = match format {
                Format::Csv => table.to_csv(),
                Format::Json => json(&table),
            };
            emit(out.as_ref(), &text)
        }
        Command::Compare {
            scenario,
            seed,
            out,
            format,
        } => {
            let bundle = ScenarioBundle::load(&scenario)?;
            let cmp = cmd_compare(&bundle, seed)?;
            let text = match format {
                Format::Csv => cmp.to_csv(),
                Format::Json => json(&cmp),
            };
            emit(out.as_ref(), &text)
        }
        Command::List => {
            let mut s = String::new();
            for name in ScenarioBundle::bundled_names() {
                s.push_str(name);
                s.push('\n');
            }
            emit(None, &s)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gossipmesh: {e}");
            let code = e.exit_code();
            debug_assert!(code == 2 || code == EXIT_EXPECTATION);
            ExitCode::from(code as u8)
        }
    }
}
