//! The `ldgm` executable: one subcommand per pipeline stage.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant
//! breach. Failures print `{"error": {"code", "message"}}` on stderr.

pub mod args;
mod commands;

use std::fs;
use std::path::Path;

use clap::error::ErrorKind;
use clap::Parser;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use ldgm_core::Error;

pub use args::{Cli, Command};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "LDGM_THREADS";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(Error::Invariant(_)) => EXIT_INVARIANT,
            CliError::Core(_) => EXIT_DATA,
        }
    }

    pub fn to_json(&self) -> Value {
        let (code, message) = match self {
            CliError::Usage(m) => ("usage", m.clone()),
            CliError::Core(e) => (e.code(), e.to_string()),
        };
        json!({"error": {"code": code, "message": message}})
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Provenance written into every artifact.
#[derive(Debug, Clone, Serialize)]
pub struct RunHeader {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub args: Vec<String>,
    pub seed: u64,
}

impl RunHeader {
    fn new(command: &'static str, argv: &[String], seed: u64) -> Self {
        Self {
            tool: "ldgm",
            version: env!("CARGO_PKG_VERSION"),
            command,
            args: argv.iter().skip(1).cloned().collect(),
            seed,
        }
    }
}

pub(crate) fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub(crate) fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    }
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e }.into())
}

pub(crate) fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("JSON values serialize") + "\n"))
}

/// Thread cap from the environment, if set.
pub fn thread_limit() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}

/// Run a parsed command line.
pub fn run(cli: Cli, argv: &[String]) -> CliResult<()> {
    if let Some(n) = thread_limit()? {
        // Fails only if a pool already exists, as in tests running several commands.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let out = match &cli.command {
        Command::SynthData(a) => commands::synth_data(a, argv)?,
        Command::Ingest(a) => commands::ingest(a, argv)?,
        Command::Train(a) => commands::train(a, argv)?,
        Command::Corrupt(a) => commands::corrupt(a, argv)?,
        Command::Generate(a) => commands::generate(a, argv)?,
        Command::Eval(a) => commands::eval(a, argv)?,
        Command::Ablate(a) => commands::ablate(a, argv)?,
        Command::Serve(a) => commands::serve(a)?,
    };
    println!("{out}");
    Ok(())
}

/// Parse `argv`, run it, and return the process exit code.
pub fn main_with(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let err = CliError::Usage(e.render().to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return err.exit_code();
        }
    };
    match run(cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_error_class() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), EXIT_USAGE);
        assert_eq!(CliError::Core(Error::Data("x".into())).exit_code(), EXIT_DATA);
        assert_eq!(CliError::Core(Error::Invariant("x".into())).exit_code(), EXIT_INVARIANT);
        assert_eq!(CliError::Core(Error::Invariant("x".into())).to_json()["error"]["code"], "invariant");
    }

    #[test]
    fn help_and_version_exit_zero() {
        assert_eq!(main_with(vec!["ldgm".into(), "--version".into()]), 0);
        assert_eq!(main_with(vec!["ldgm".into(), "--no-such-flag".into()]), EXIT_USAGE);
    }

    #[test]
    fn headers_drop_the_program_name() {
        let h = RunHeader::new("eval", &["ldgm".into(), "eval".into(), "--seed".into(), "3".into()], 3);
        assert_eq!(h.args, ["eval", "--seed", "3"]);
        assert_eq!(json!(h)["seed"], 3);
    }
}
