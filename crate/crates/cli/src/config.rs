//! `--config FILE`: `key = value` lines that stand in for `--key value`
//! flags. Flags given on the command line win.

use std::ffi::OsString;
use std::fs;

use anyhow::{bail, Context, Result};

/// Parses config text into flag arguments.
pub fn config_args(text: &str) -> Result<Vec<OsString>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("config line {}: expected key = value, got {line:?}", n + 1);
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k == "config" || k.starts_with('-') {
            bail!("config line {}: bad key {k:?}", n + 1);
        }
        out.push(format!("--{k}").into());
        out.push(v.into());
    }
    Ok(out)
}

/// Splices the contents of every `--config FILE` right after the
/// subcommand, ahead of the explicit flags so that those override.
pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut rest = Vec::with_capacity(args.len());
    let mut files = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            files.push(it.next().context("--config needs a file")?);
        } else if let Some(f) = s.strip_prefix("--config=") {
            files.push(f.into());
        } else {
            rest.push(a);
        }
    }
    if files.is_empty() {
        return Ok(rest);
    }
    let mut injected = Vec::new();
    for f in &files {
        let text = fs::read_to_string(f)
            .with_context(|| format!("cannot read config {}", f.to_string_lossy()))?;
        injected.extend(config_args(&text)?);
    }
    // program name, subcommand, then the injected flags
    let at = rest.len().min(2);
    rest.splice(at..at, injected);
    Ok(rest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strs(v: &[OsString]) -> Vec<String> {
        v.iter().map(|s| s.to_string_lossy().into_owned()).collect()
    }

    #[test]
    fn parses_pairs_and_comments() {
        let a = config_args("# stage one\nsteps = 10\n\nseed=3  # trailing\n").unwrap();
        assert_eq!(strs(&a), ["--steps", "10", "--seed", "3"]);
        assert!(config_args("steps 10").is_err());
        assert!(config_args("=4").is_err());
    }

    #[test]
    fn injects_after_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.txt");
        fs::write(&f, "steps = 10\n").unwrap();
        let args: Vec<OsString> = [
            "poet",
            "train",
            "--config",
            f.to_str().unwrap(),
            "--steps",
            "2",
        ]
        .iter()
        .map(OsString::from)
        .collect();
        assert_eq!(
            strs(&expand(args).unwrap()),
            ["poet", "train", "--steps", "10", "--steps", "2"]
        );
    }
}
