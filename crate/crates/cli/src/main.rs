mod compare;
mod config;
mod run;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use bm2::suite::{self, Status, Tier};
use clap::{Parser, Subcommand, ValueEnum};

use config::ConfigError;
use run::Overrides;

#[derive(Parser)]
#[command(name = "bm2", version, about = "Train and evaluate coupled bridge matching models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML experiment config.
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; relative paths resolve under $BM2_OUT_ROOT.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training steps (inner steps per iteration for ibm).
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum TierArg {
    Fast,
    Full,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the experiment described by a config file.
    Run(RunArgs),
    /// Group metric CSVs by (method, problem, d, eps) and report mean and std.
    Compare {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Run only the oracle cross-validations for a config's problem.
    OracleCheck(RunArgs),
    /// Run the named invariant checks.
    Suite {
        #[arg(long, value_enum, default_value = "fast")]
        tier: TierArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for suite.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn overrides(a: &RunArgs) -> Overrides {
    Overrides { seed: a.seed, out: a.out.clone(), steps: a.steps }
}

fn oracle_check(a: &RunArgs) -> Result<()> {
    let (r, dir) = run::prepare(&a.config, &overrides(a))?;
    let results = run::oracle_checks(&r)?;
    let mut out = run::OutDir::create(dir)?;
    out.write("oracle_checks.jsonl", |w| Ok(suite::write_jsonl(w, &results)?))?;
    print!("{}", suite::summary(&results));
    let failed = results.iter().filter(|c| c.status == Status::Fail).count();
    if failed > 0 {
        anyhow::bail!("{failed} oracle check(s) failed");
    }
    Ok(())
}

fn run_suite(tier: TierArg, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let tier = match tier {
        TierArg::Fast => Tier::Fast,
        TierArg::Full => Tier::Full,
    };
    let results = suite::run_suite(tier, seed);
    if let Some(dir) = out {
        let mut out = run::OutDir::create(run::resolve_out_dir(&dir)?)?;
        out.write("suite.jsonl", |w| Ok(suite::write_jsonl(w, &results)?))?;
    }
    print!("{}", suite::summary(&results));
    let failed = results.iter().filter(|c| c.status == Status::Fail).count();
    if failed > 0 {
        anyhow::bail!("{failed} check(s) failed");
    }
    Ok(())
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Run(a) => {
            let dir = run::run(&a.config, &overrides(&a))?;
            println!("artifacts written to {}", dir.display());
        }
        Cmd::Compare { csv, format } => {
            let s = compare::summarize(&csv)?;
            let stdout = std::io::stdout().lock();
            match format {
                Format::Text => compare::write_text(stdout, &s)?,
                Format::Csv => compare::write_csv(stdout, &s)?,
            }
        }
        Cmd::OracleCheck(a) => oracle_check(&a)?,
        Cmd::Suite { tier, seed, out } => run_suite(tier, seed, out)?,
    }
    Ok(())
}

/// 2: invalid config or arguments. 3: numerical abort. 1: anything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match e.downcast_ref::<bm2::Error>() {
        Some(b) if b.is_numerical() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
