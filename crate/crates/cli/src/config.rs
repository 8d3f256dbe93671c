//! `--config FILE` support: `key = value` lines become long flags.

use std::ffi::OsString;
use std::fs;

use anyhow::{bail, Context, Result};

const COMMANDS: &[&str] = &["loss", "gradcheck", "bench", "calibrate", "entropy", "gen"];
const VALUED_GLOBALS: &[&str] = &["--threads", "--config"];

/// Inserts the config file's flags right after the subcommand, so flags given
/// on the command line come later and win.
pub fn expand_args(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path).with_context(|| format!("cannot read config file {path}"))?;
    let flags = parse_config(&text).with_context(|| format!("in config file {path}"))?;
    let Some(at) = command_position(&argv) else {
        return Ok(argv);
    };
    let mut out = argv[..=at].to_vec();
    out.extend(flags.into_iter().map(OsString::from));
    out.extend_from_slice(&argv[at + 1..]);
    Ok(out)
}

fn config_path(argv: &[OsString]) -> Option<String> {
    let mut it = argv.iter().skip(1).map(|a| a.to_string_lossy());
    while let Some(arg) = it.next() {
        if arg == "--config" {
            return it.next().map(|s| s.into_owned());
        }
        if let Some(rest) = arg.strip_prefix("--config=") {
            return Some(rest.to_string());
        }
    }
    None
}

fn command_position(argv: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let arg = argv[i].to_string_lossy();
        if COMMANDS.contains(&arg.as_ref()) {
            return Some(i);
        }
        i += if VALUED_GLOBALS.contains(&arg.as_ref()) { 2 } else { 1 };
    }
    None
}

/// Parses `key = value` lines. `#` starts a comment; `true`/`false` values
/// toggle switches; underscores in keys map to dashes.
pub fn parse_config(text: &str) -> Result<Vec<String>> {
    let mut flags = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("line {}: expected `key = value`, got `{line}`", i + 1);
        };
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if key.is_empty() {
            bail!("line {}: empty key", i + 1);
        }
        if key == "config" {
            bail!("line {}: config files cannot include other config files", i + 1);
        }
        match value {
            "true" => flags.push(format!("--{key}")),
            "false" => {}
            _ => {
                flags.push(format!("--{key}"));
                flags.push(value.to_string());
            }
        }
    }
    Ok(flags)
}
