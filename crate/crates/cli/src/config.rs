//! Run configuration files. A TOML document supplies defaults for command
//! flags; top-level keys apply to any command and a `[command-name]` table to
//! that command only. Flags given on the command line win.

use std::ffi::OsString;
use std::path::Path;

use crate::CliError;

fn scalar(key: &str, value: &toml::Value) -> Result<Option<String>, CliError> {
    Ok(match value {
        toml::Value::String(s) => Some(s.clone()),
        toml::Value::Integer(i) => Some(i.to_string()),
        toml::Value::Float(f) => Some(f.to_string()),
        toml::Value::Boolean(_) => None,
        _ => return Err(CliError::Config(format!("config key {key:?}: unsupported value type"))),
    })
}

fn push_key(out: &mut Vec<OsString>, key: &str, value: &toml::Value) -> Result<(), CliError> {
    let flag = format!("--{}", key.replace('_', "-"));
    match value {
        toml::Value::Boolean(true) => out.push(flag.into()),
        toml::Value::Boolean(false) => {}
        toml::Value::Array(items) => {
            for item in items {
                let v = scalar(key, item)?
                    .ok_or_else(|| CliError::Config(format!("config key {key:?}: arrays of booleans are not flags")))?;
                out.push(flag.clone().into());
                out.push(v.into());
            }
        }
        other => {
            let v = scalar(key, other)?.expect("booleans handled above");
            out.push(flag.into());
            out.push(v.into());
        }
    }
    Ok(())
}

/// Flag arguments for `command` read from the TOML file at `path`.
pub fn config_args(path: &Path, command: &str) -> Result<Vec<OsString>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("config file {}: {e}", path.display())))?;
    let doc: toml::Table = text
        .parse()
        .map_err(|e| CliError::Config(format!("config file {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (key, value) in &doc {
        match value {
            toml::Value::Table(section) if key == command => {
                for (k, v) in section {
                    if v.is_table() {
                        return Err(CliError::Config(format!("config section [{key}.{k}] is nested too deep")));
                    }
                    push_key(&mut out, k, v)?;
                }
            }
            toml::Value::Table(_) => {}
            _ if key == "config" => return Err(CliError::Config("a config file cannot name another".into())),
            _ => push_key(&mut out, key, value)?,
        }
    }
    Ok(out)
}

/// Inserts `extra` right after the subcommand token so that later,
/// user-given flags override them.
pub fn splice_after_command(argv: &[OsString], command: &str, extra: Vec<OsString>) -> Vec<OsString> {
    let at = argv
        .iter()
        .skip(1)
        .position(|a| a == command)
        .map_or(argv.len(), |p| p + 2);
    let mut out = argv[..at].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[at..]);
    out
}
