//! Run manifests and `--config` files.
//!
//! Both are line-oriented `key = value` (or `key: value`) text. Keys
//! containing a dot (`seed.init`, `stat.wall_s`) are informational and
//! ignored when a manifest is fed back through `--config`, so a manifest
//! doubles as a config that reproduces its run.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// Ordered key/value pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        let mut m = Self::default();
        m.set("command", command);
        m.set("version.topcomp", env!("CARGO_PKG_VERSION"));
        m
    }

    /// Insert or replace `key`.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            writeln!(out, "{k}: {v}").expect("write to String");
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut m = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let split = match (line.find('='), line.find(':')) {
                (Some(a), Some(b)) => a.min(b),
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => bail!("{}:{}: expected `key = value`", origin.display(), no + 1),
            };
            let key = line[..split].trim();
            if key.is_empty() {
                bail!("{}:{}: empty key", origin.display(), no + 1);
            }
            m.set(key, line[split + 1..].trim());
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text, path)
    }
}

/// Subcommand names, used to find where injected flags go.
pub const COMMANDS: &[&str] = &["gen", "partition", "precompute", "train", "eval", "invariance-report", "check"];

/// Flags that take no value; `true` in a config turns them on.
const SWITCHES: &[&str] = &["remove-eval-nodes", "gas-warm-start", "deterministic-time"];

/// Rewrite `argv` so that values from `--config <file>` come first and
/// the command line's own flags, appearing later, win.
pub fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(pos) = argv.iter().position(|a| a == "--config") else {
        return Ok(argv);
    };
    let Some(path) = argv.get(pos + 1) else {
        bail!("--config needs a file path");
    };
    let cfg = Manifest::read(Path::new(path))?;
    let mut rest: Vec<OsString> = argv[..pos].to_vec();
    rest.extend_from_slice(&argv[pos + 2..]);
    let Some(sub_at) = rest.iter().skip(1).position(|a| COMMANDS.iter().any(|c| a == c)).map(|p| p + 1) else {
        bail!("--config must follow a subcommand");
    };
    let sub = rest[sub_at].to_string_lossy().into_owned();
    if let Some(cmd) = cfg.get("command") {
        if cmd != sub {
            bail!("config {} is for `{cmd}`, not `{sub}`", Path::new(path).display());
        }
    }
    let mut injected = Vec::new();
    for (k, v) in cfg.entries() {
        if k == "command" || k.contains('.') {
            continue;
        }
        let key = k.replace('_', "-");
        if SWITCHES.contains(&key.as_str()) {
            match v.as_str() {
                "true" => injected.push(OsString::from(format!("--{key}"))),
                "false" => {}
                other => bail!("config key `{k}`: expected true or false, got `{other}`"),
            }
        } else {
            injected.push(OsString::from(format!("--{key}")));
            injected.push(OsString::from(v));
        }
    }
    let mut out = rest[..=sub_at].to_vec();
    out.extend(injected);
    out.extend_from_slice(&rest[sub_at + 1..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn parse_accepts_both_separators() {
        let m = Manifest::parse("# comment\nlr = 0.5\nepochs: 3\nseed.init: 9\n", Path::new("x")).unwrap();
        assert_eq!(m.get("lr"), Some("0.5"));
        assert_eq!(m.get("epochs"), Some("3"));
        assert_eq!(m.get("seed.init"), Some("9"));
        assert!(Manifest::parse("novalue\n", Path::new("x")).is_err());
    }

    #[test]
    fn render_round_trips() {
        let mut m = Manifest::new("train");
        m.set("data", "/tmp/a b");
        m.set("lr", 0.25);
        assert_eq!(Manifest::parse(&m.render(), Path::new("x")).unwrap(), m);
    }

    #[test]
    fn config_values_precede_cli_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "command: train\nlr = 0.1\ndeterministic_time = true\nstat.wall_s: 3\n").unwrap();
        let argv = os(&["topcomp", "--threads", "1", "train", "--config", path.to_str().unwrap(), "--lr", "0.2"]);
        let out = expand_config(argv).unwrap();
        let want = ["topcomp", "--threads", "1", "train", "--lr", "0.1", "--deterministic-time", "--lr", "0.2"];
        assert_eq!(out, os(&want));
    }

    #[test]
    fn config_for_other_command_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "command: gen\n").unwrap();
        assert!(expand_config(os(&["topcomp", "train", "--config", path.to_str().unwrap()])).is_err());
    }
}
