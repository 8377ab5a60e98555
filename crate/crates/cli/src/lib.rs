//! Command-line front end: argument parsing, per-command drivers and their
//! JSON reports.

pub mod args;
pub mod commands;
pub mod report;

use std::io::Write;
use std::process::ExitCode;

use args::{Cli, Command};
use report::Report;

/// Exit code 2 for usage and precondition errors, 1 for everything else.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<armature::Error> for Failure {
    fn from(e: armature::Error) -> Self {
        use armature::Error::*;
        match e {
            Precondition(_) | Input(_) | Dimension { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

pub fn run(cli: &Cli) -> ExitCode {
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn dispatch(cli: &Cli) -> Result<u8, Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Failure::Runtime(format!("thread pool: {e}")))?;
    }
    let (report, code): (Report, u8) = match &cli.command {
        Command::MakeRig(a) => (commands::make_rig(a)?, 0),
        Command::Validate(a) => {
            let (r, ok) = commands::validate(a)?;
            (r, if ok { 0 } else { 1 })
        }
        Command::Synth(a) => (commands::synth(a)?, 0),
        Command::SynthObs(a) => (commands::synth_obs(a)?, 0),
        Command::Train(a) => (commands::train_cmd(a)?, 0),
        Command::Fit(a) => (commands::fit_cmd(a)?, 0),
        Command::Pose(a) => (commands::pose(a)?, 0),
        Command::Bench(a) => (commands::bench(a)?, 0),
        Command::Sample(a) => (commands::sample(a)?, 0),
        Command::Export(a) => (commands::export(a)?, 0),
        Command::Serve(a) => {
            commands::serve(a, cli.threads)?;
            return Ok(0);
        }
    };
    match &cli.report {
        Some(path) => commands::write_json(path, &report)?,
        None => {
            let text = serde_json::to_string_pretty(&report).expect("reports serialize");
            // a closed pipe (e.g. `| head`) is not a failure
            let mut out = std::io::stdout().lock();
            if let Err(e) = writeln!(out, "{text}").and_then(|_| out.flush()) {
                if e.kind() != std::io::ErrorKind::BrokenPipe {
                    return Err(Failure::Runtime(format!("stdout: {e}")));
                }
            }
        }
    }
    Ok(code)
}
