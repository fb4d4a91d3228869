use std::process::ExitCode;

use clap::Parser;
use markov_equilibrium::cli::{run, Cli};

fn main() -> ExitCode {
    ExitCode::from(run(&Cli::parse()))
}
