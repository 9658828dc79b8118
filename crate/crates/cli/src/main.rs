mod args;
mod commands;

use std::ffi::OsString;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{ArgMatches, CommandFactory, FromArgMatches};
use minibert::run_config::RunConfig;

use args::Cli;

/// Keys left out of the resolved config: where it was read from and where it
/// is written to. Keeping them out makes two runs into different directories
/// produce the same file.
const UNRESOLVED: [&str; 3] = ["help", "config", "out-dir"];

fn command() -> clap::Command {
    Cli::command().mut_subcommands(|s| s.args_override_self(true))
}

/// Splices the `--config` file into argv right after the subcommand name so
/// that explicit flags, which come later, override it.
fn expand_config(argv: Vec<OsString>) -> anyhow::Result<Vec<OsString>> {
    let Some(sub) = argv.get(1).and_then(|s| s.to_str()).map(str::to_string) else {
        return Ok(argv);
    };
    let mut path = None;
    for (i, a) in argv.iter().enumerate().skip(2) {
        let a = a.to_string_lossy();
        if a == "--config" {
            path = argv.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.into());
        }
    }
    let Some(path) = path else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("cannot read config {}", path.to_string_lossy()))?;
    let config = RunConfig::parse(&text).with_context(|| format!("in config {}", path.to_string_lossy()))?;
    let mut injected = Vec::new();
    for (k, v) in config.entries() {
        if k == "command" {
            if *v != sub {
                bail!("config {} is for `{v}`, not `{sub}`", path.to_string_lossy());
            }
            continue;
        }
        injected.push(OsString::from(format!("--{k}={v}")));
    }
    let mut out = argv[..2].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[2..]);
    Ok(out)
}

/// Every option of the subcommand with its effective value, in declaration
/// order, prefixed by the subcommand name.
fn resolved_config(name: &str, matches: &ArgMatches) -> anyhow::Result<RunConfig> {
    let root = command();
    let sub = root.find_subcommand(name).expect("parsed subcommand exists");
    let mut out = RunConfig::new();
    out.set("command", name)?;
    for arg in sub.get_arguments() {
        let Some(long) = arg.get_long() else { continue };
        if UNRESOLVED.contains(&long) {
            continue;
        }
        if let Some(raw) = matches.get_raw(arg.get_id().as_str()) {
            let values: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
            out.set(long, values.join(","))?;
        }
    }
    Ok(out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let argv = match expand_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    let (name, sub_matches) = matches.subcommand().expect("subcommand is required");
    let result = resolved_config(name, sub_matches).and_then(|resolved| commands::run(&cli.command, &resolved));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
