mod commands;
mod config;
mod output;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::GateFailure;
use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "pmlab", version, about = "Linear response laboratory for the Pomeau-Manneville family")]
struct Cli {
    /// Print the resolved configuration as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Invariant density ρ_α on a graded mesh.
    Density(RunConfig),
    /// d/dα ∫ψ dμ_α by the response series or the susceptibility.
    Response(RunConfig),
    /// Series, forward series, susceptibility and finite differences side by side.
    Validate(RunConfig),
    /// Cone membership of L^k 1 and N L^k 1, and the Ω factors.
    Cones(RunConfig),
    /// Correlation decay, neutral orbit and Birkhoff averages.
    Decay(RunConfig),
    /// Response over a grid of α values.
    Sweep(RunConfig),
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<GateFailure>().is_some() {
            return 2;
        }
        if let Some(pe) = cause.downcast_ref::<pmlab::Error>() {
            return match pe {
                pmlab::Error::NotConverged { .. } | pmlab::Error::Divergent(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (name, cfg) = match cli.command {
        Command::Density(c) => ("density", c),
        Command::Response(c) => ("response", c),
        Command::Validate(c) => ("validate", c),
        Command::Cones(c) => ("cones", c),
        Command::Decay(c) => ("decay", c),
        Command::Sweep(c) => ("sweep", c),
    };
    let s = cfg.resolve()?;
    if cli.print_config {
        print!("{}", s.to_toml()?);
        return Ok(());
    }
    match name {
        "density" => commands::cmd_density(&s),
        "response" => commands::cmd_response(&s),
        "validate" => commands::cmd_validate(&s),
        "cones" => commands::cmd_cones(&s),
        "decay" => commands::cmd_decay(&s),
        _ => commands::cmd_sweep(&s),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
