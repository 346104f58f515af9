//! `key = value` config files expanded into command-line flags.

use std::path::Path;

use anyhow::{bail, Context, Result};

/// Parses a config file into `--key value` pairs (`--key` alone for `true`,
/// nothing for `false`). Blank lines and `#` comments are ignored.
pub fn config_args(text: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("line {}: expected key = value, got {raw:?}", n + 1);
        };
        let (key, value) = (key.trim().replace('_', "-"), value.trim());
        if key.is_empty() || key.starts_with('-') || key == "config" {
            bail!("line {}: bad key {key:?}", n + 1);
        }
        match value {
            "true" => out.push(format!("--{key}")),
            "false" => {}
            v => {
                out.push(format!("--{key}"));
                out.push(v.to_string());
            }
        }
    }
    Ok(out)
}

/// Replaces `--config FILE` (after the subcommand) with the file's entries.
/// They come before the remaining flags so explicit flags win.
pub fn expand_config(args: Vec<String>) -> Result<Vec<String>> {
    let pos = args
        .iter()
        .position(|a| a == "--config" || a.starts_with("--config="));
    let Some(pos) = pos else { return Ok(args) };
    let (path, consumed) = match args[pos].strip_prefix("--config=") {
        Some(p) => (p.to_string(), 1),
        None => match args.get(pos + 1) {
            Some(p) => (p.clone(), 2),
            None => bail!("--config needs a file"),
        },
    };
    let text = std::fs::read_to_string(Path::new(&path)).with_context(|| format!("reading config {path}"))?;
    let entries = config_args(&text).with_context(|| format!("in config {path}"))?;
    // args[0] is the program, args[1] the subcommand.
    let insert_at = pos.min(2).max(1);
    let mut out: Vec<String> = args[..insert_at].to_vec();
    out.extend(entries);
    out.extend(args[insert_at..pos].iter().cloned());
    out.extend(args[pos + consumed..].iter().cloned());
    Ok(out)
}
