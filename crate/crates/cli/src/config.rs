//! `key = value` config files, spliced into argv as flags.
//!
//! Entries are inserted right after the subcommand, so flags given on the
//! command line come later and override them. `true` becomes a bare flag
//! and `false` drops the entry. Blank lines and `#` comments are skipped.

use std::ffi::OsString;
use std::fs;

fn parse(text: &str) -> Result<Vec<OsString>, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected `key = value`", n + 1))?;
        let flag = format!("--{}", key.trim().replace('_', "-"));
        match value.trim() {
            "false" => {}
            "true" => out.push(flag.into()),
            v => {
                out.push(flag.into());
                out.push(v.into());
            }
        }
    }
    Ok(out)
}

pub fn expand(mut argv: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let mut path = None;
    let mut subcommand = None;
    let mut i = 1;
    while i < argv.len() {
        let arg = argv[i].to_string_lossy();
        if arg == "--config" {
            path = argv.get(i + 1).cloned();
            i += 2;
            continue;
        }
        if let Some(p) = arg.strip_prefix("--config=") {
            path = Some(p.into());
        } else if subcommand.is_none() && !arg.starts_with('-') {
            subcommand = Some(i);
        }
        i += 1;
    }
    let (Some(path), Some(at)) = (path, subcommand) else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path)
        .map_err(|e| format!("cannot read config {}: {e}", path.to_string_lossy()))?;
    let extra = parse(&text)?;
    argv.splice(at + 1..at + 1, extra);
    Ok(argv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn parses_entries() {
        let got = parse("# defaults\nk = 10\nseed=3\n\ntop_k = 4\nverbose = false\nflag = true\n").unwrap();
        assert_eq!(got, args(&["--k", "10", "--seed", "3", "--top-k", "4", "--flag"]));
        assert!(parse("nonsense").is_err());
    }

    #[test]
    fn splices_after_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, "k = 10\n").unwrap();
        let cfg = cfg.to_string_lossy().into_owned();
        let got = expand(args(&["imbalkit", "--config", &cfg, "split", "--k", "3"])).unwrap();
        assert_eq!(got, args(&["imbalkit", "--config", &cfg, "split", "--k", "10", "--k", "3"]));
        let untouched = args(&["imbalkit", "split", "--k", "3"]);
        assert_eq!(expand(untouched.clone()).unwrap(), untouched);
    }
}
