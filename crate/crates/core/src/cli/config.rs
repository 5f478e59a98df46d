use std::ffi::OsString;
use std::path::Path;

use crate::error::{Error, Result};

/// Turns `key = value` lines into `--key value` arguments. `true` yields a
/// bare flag, `false` nothing. Blank lines and `#` comments are skipped.
pub fn config_args(text: &str, path: &Path) -> Result<Vec<OsString>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("line {}: expected `key = value`", n + 1)))?;
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        let value = value.trim();
        if key.is_empty() {
            return Err(Error::format(path, format!("line {}: empty key", n + 1)));
        }
        if key == "config" {
            return Err(Error::format(path, format!("line {}: config files cannot include others", n + 1)));
        }
        match value {
            "true" => out.push(format!("--{key}").into()),
            "false" => {}
            _ => {
                out.push(format!("--{key}").into());
                out.push(value.into());
            }
        }
    }
    Ok(out)
}

/// Inserts the flags of `--config FILE` right after the subcommand name, so
/// that later command-line flags override them.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut path = None;
    let mut i = 0;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if a == "--config" {
            path = args.get(i + 1).map(|p| p.clone().into());
            i += 2;
            continue;
        }
        if let Some(p) = a.strip_prefix("--config=") {
            path = Some(std::path::PathBuf::from(p));
        }
        i += 1;
    }
    let Some(path) = path else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let extra = config_args(&text, &path)?;
    let sub = args.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')).map(|p| p + 1);
    let Some(sub) = sub else {
        return Ok(args);
    };
    let mut out = args[..=sub].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[sub + 1..]);
    Ok(out)
}
