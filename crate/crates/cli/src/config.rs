//! `key = value` configuration files.
//!
//! Precedence, highest first: command-line flag, `KEYTRUST_*` environment
//! variable, config file, built-in default. File entries are applied by
//! appending the matching flag to the argument list when neither of the
//! first two sources set it, so clap stays the single parser.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Command};

pub const ENV_PREFIX: &str = "KEYTRUST_";

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut entries = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("line {}: expected key = value", no + 1);
        };
        let key = key.trim().replace('_', "-").to_ascii_lowercase();
        if key.is_empty() {
            bail!("line {}: empty key", no + 1);
        }
        entries.push((key, value.trim().to_string()));
    }
    Ok(entries)
}

/// Locates `--config PATH`, `--config=PATH` or `KEYTRUST_CONFIG`.
fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut iter = args.iter();
    while let Some(arg) = iter.next() {
        let s = arg.to_string_lossy();
        if s == "--config" {
            return iter.next().cloned();
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(p.into());
        }
    }
    std::env::var_os(format!("{ENV_PREFIX}CONFIG"))
}

fn flag_given(args: &[OsString], long: &str) -> bool {
    let bare = format!("--{long}");
    let eq = format!("--{long}=");
    args.iter().any(|a| {
        let s = a.to_string_lossy();
        s == bare || s.starts_with(&eq)
    })
}

/// Returns `args` extended with flags from the config file, if any.
pub fn apply(command: &Command, args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = fs::read_to_string(Path::new(&path))
        .with_context(|| format!("reading config file {}", Path::new(&path).display()))?;
    let entries = parse(&text)?;
    let Some(sub) = args.iter().skip(1).find_map(|a| {
        command.find_subcommand(a.to_string_lossy().as_ref())
    }) else {
        return Ok(args);
    };
    let known_anywhere = |key: &str| {
        command
            .get_subcommands()
            .flat_map(|c| c.get_arguments())
            .any(|a| a.get_long() == Some(key))
    };
    let mut out = args.clone();
    for (key, value) in entries {
        if key == "config" {
            continue;
        }
        let Some(arg) = sub.get_arguments().find(|a| a.get_long() == Some(key.as_str())) else {
            if !known_anywhere(&key) {
                bail!("config file: unknown key {key:?}");
            }
            continue;
        };
        if flag_given(&args, &key) {
            continue;
        }
        if arg.get_env().is_some_and(|name| std::env::var_os(name).is_some()) {
            continue;
        }
        match arg.get_action() {
            ArgAction::SetTrue => match value.as_str() {
                "true" | "yes" | "1" => out.push(format!("--{key}").into()),
                "false" | "no" | "0" => {}
                other => bail!("config file: {key} expects a boolean, got {other:?}"),
            },
            _ => {
                out.push(format!("--{key}").into());
                out.push(value.into());
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_normalizes_keys() {
        let entries = parse("# c\n\nkey_bits = 512\n  seed=7 \n").unwrap();
        assert_eq!(
            entries,
            vec![("key-bits".into(), "512".into()), ("seed".into(), "7".into())]
        );
        assert!(parse("novalue\n").is_err());
        assert!(parse(" = 3\n").is_err());
    }
}
