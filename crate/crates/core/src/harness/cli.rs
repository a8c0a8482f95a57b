use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use super::{campaign, to_csv, ExperimentConfig, Method, Mode};
use crate::agent;
use crate::arch::{arch_run, generate_inputs, Input};
use crate::detect::detect_violation;
use crate::env::SpecEnv;
use crate::isa::{parse_program, Program};
use crate::uarch::hw_run;

const EXIT_OK: i32 = 0;
const EXIT_USAGE: i32 = 1;
const EXIT_LEAK: i32 = 2;
const EXIT_FAULT: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "specgym", version, about = "Search for speculative leaks in a simulated CPU")]
struct Cli {
    /// JSON experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the PPO agent.
    Train {
        /// Run the uniform random-search baseline instead.
        #[arg(long)]
        baseline: bool,
    },
    /// Fuzzing campaign over the configured sizes.
    Fuzz,
    /// Fuzzer and agent over the size grid; writes scaling.csv.
    Scaling,
    /// One-shot leak detection.
    Detect { program: PathBuf },
    /// Dump per-input traces as JSON lines.
    Simulate {
        program: PathBuf,
        /// Raw input file (repeatable); generated inputs are used otherwise.
        #[arg(long = "input")]
        inputs: Vec<PathBuf>,
        /// Write the inputs used to this directory.
        #[arg(long)]
        dump_inputs: Option<PathBuf>,
    },
}

/// Writes a line to stdout; a closed pipe is not an error.
fn emit(args: std::fmt::Arguments) {
    let _ = writeln!(std::io::stdout().lock(), "{args}");
}

enum Failure {
    Usage(String),
    Fault(String),
}

fn usage<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Usage(e.to_string())
}

fn fault<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Fault(e.to_string())
}

/// Entry point for the binary. Exit codes: 0 success, 1 usage or config
/// error, 2 leak found by `detect`, 3 internal fault.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Fault(m)) => {
            eprintln!("internal fault: {m}");
            EXIT_FAULT
        }
    }
}

fn load_config(cli: &Cli, mode: Mode) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    cfg.mode = mode;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.resolve();
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn write_config(cfg: &ExperimentConfig) -> Result<(), Failure> {
    fs::create_dir_all(&cfg.out_dir).map_err(fault)?;
    let json = serde_json::to_string_pretty(cfg).map_err(fault)?;
    fs::write(cfg.out_dir.join("config.json"), json + "\n").map_err(fault)
}

fn read_program(path: &Path) -> Result<Program, Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    parse_program(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<i32, Failure> {
    match &cli.command {
        Command::Train { baseline } => {
            let cfg = load_config(&cli, Mode::Train)?;
            write_config(&cfg)?;
            let mut env = SpecEnv::new(cfg.env.clone()).map_err(usage)?;
            let (log, name) = if *baseline {
                (agent::random_search_with(&mut env, &cfg.trainer).map_err(fault)?, "random")
            } else {
                (agent::train(&mut env, &cfg.trainer).map_err(fault)?, "training")
            };
            log.write_to(&cfg.out_dir, name).map_err(fault)?;
            emit(format_args!(
                "{}",
                json!({
                    "steps": log.steps,
                    "leaks": log.leaks.len(),
                    "first_leak_step": log.first_leak_step,
                    "out": cfg.out_dir.join(format!("{name}.jsonl")),
                })
            ));
            Ok(EXIT_OK)
        }
        Command::Fuzz | Command::Scaling => {
            let scaling = matches!(cli.command, Command::Scaling);
            let cfg = load_config(&cli, if scaling { Mode::Scaling } else { Mode::Fuzz })?;
            write_config(&cfg)?;
            let methods = if scaling { cfg.methods.clone() } else { vec![Method::Fuzz] };
            let res = campaign(&cfg, &methods).map_err(fault)?;
            let name = if scaling { "scaling" } else { "fuzz" };
            fs::write(cfg.out_dir.join(format!("{name}.csv")), to_csv(&res.rows)).map_err(fault)?;
            let summary = serde_json::to_string_pretty(&res.stats).map_err(fault)?;
            fs::write(cfg.out_dir.join(format!("{name}_summary.json")), summary + "\n").map_err(fault)?;
            for s in &res.stats {
                emit(format_args!(
                    "{}",
                    json!({"method": s.method, "n": s.n, "median": s.median, "censored": s.trials - s.uncensored(), "expected": s.expected})
                ));
            }
            Ok(EXIT_OK)
        }
        Command::Detect { program } => {
            let cfg = load_config(&cli, Mode::Detect)?;
            let p = read_program(program)?;
            let inputs = generate_inputs(cfg.env.input_seed, cfg.env.inputs).map_err(usage)?;
            let env = &cfg.env;
            match detect_violation(&p, &inputs, &env.contract, &env.spec, env.boosts_per_input) {
                Ok(Some(report)) => {
                    emit(format_args!("{}", report.to_json()));
                    if cli.out.is_some() {
                        fs::create_dir_all(&cfg.out_dir).map_err(fault)?;
                        fs::write(cfg.out_dir.join("report.json"), report.to_json() + "\n").map_err(fault)?;
                    }
                    Ok(EXIT_LEAK)
                }
                Ok(None) => {
                    emit(format_args!("no violation"));
                    Ok(EXIT_OK)
                }
                Err(e) => {
                    emit(format_args!("no violation ({e})"));
                    Ok(EXIT_OK)
                }
            }
        }
        Command::Simulate { program, inputs, dump_inputs } => {
            let cfg = load_config(&cli, Mode::Simulate)?;
            let p = read_program(program)?;
            let inputs = if inputs.is_empty() {
                generate_inputs(cfg.env.input_seed, cfg.env.inputs).map_err(usage)?
            } else {
                inputs
                    .iter()
                    .map(|f| {
                        let bytes = fs::read(f).map_err(|e| usage(format!("{}: {e}", f.display())))?;
                        Input::from_bytes(&bytes).map_err(|e| usage(format!("{}: {e}", f.display())))
                    })
                    .collect::<Result<_, _>>()?
            };
            if let Some(dir) = dump_inputs {
                fs::create_dir_all(dir).map_err(fault)?;
                for (i, input) in inputs.iter().enumerate() {
                    fs::write(dir.join(format!("input_{i:03}.bin")), input.to_bytes()).map_err(fault)?;
                }
            }
            let env = &cfg.env;
            for (i, input) in inputs.iter().enumerate() {
                let arch = arch_run(&p, input, &env.contract, env.spec.step_budget);
                let hw = hw_run(&p, input, &env.spec, env.spec.step_budget);
                let line = match (arch, hw) {
                    (Ok(a), Ok(h)) => json!({
                        "input": i,
                        "seed": input.seed,
                        "ctrace": a.trace,
                        "htrace": h.htrace,
                        "br_misses": h.counters.br_misses,
                        "uops_issued": h.counters.uops_issued,
                        "uops_retired": h.counters.uops_retired,
                        "tran_uops": h.counters.tran_uops(),
                        "regs": a.final_state.regs,
                        "flags": a.final_state.flags,
                    }),
                    _ => json!({"input": i, "seed": input.seed, "rejected": true}),
                };
                emit(format_args!("{line}"));
            }
            Ok(EXIT_OK)
        }
    }
}
