//! Configuration layering and output files shared by all commands.

use std::fs;
use std::path::{Path, PathBuf};

use dpclip_core::KvConfig;

use crate::cli::{CommonArgs, OutputFormat};
use crate::error::CliError;

pub const DEFAULT_OUTPUT_DIR: &str = "dpclip-out";
pub const MANIFEST: &str = "manifest.txt";

pub struct Context {
    pub command: &'static str,
    pub format: OutputFormat,
    pub output_dir: PathBuf,
    pub config: KvConfig,
}

impl Context {
    /// Layers, lowest precedence first: config file, `--set`, the command's
    /// own flags, `--seed`. A `command` key in the file must name this command.
    pub fn resolve(
        common: &CommonArgs,
        command: &'static str,
        allowed: &[&str],
        flags: KvConfig,
    ) -> Result<Self, CliError> {
        let mut config = match &common.config {
            Some(p) => KvConfig::parse(&read(p)?)?,
            None => KvConfig::new(),
        };
        for a in &common.set {
            config.set_assignment(a)?;
        }
        config.merge(&flags);
        if let Some(s) = common.seed {
            config.set("seed", s);
        }
        if let Some(c) = config.raw("command") {
            if c != command {
                return Err(CliError::Usage(format!("configuration is for `{c}`, not `{command}`")));
            }
        }
        let config = config.subset(&config.keys().filter(|k| *k != "command").collect::<Vec<_>>());
        config.check_keys(allowed)?;
        Ok(Self {
            command,
            format: common.output_format,
            output_dir: common
                .output_dir
                .clone()
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR)),
            config,
        })
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<(), CliError> {
        fs::create_dir_all(&self.output_dir).map_err(|e| CliError::io(&self.output_dir, e))?;
        let path = self.output_dir.join(name);
        log::debug!("writing {}", path.display());
        fs::write(&path, contents).map_err(|e| CliError::io(path, e))
    }

    /// Writes `resolved` plus the command name; feeding it back through
    /// `--config` reproduces the run.
    pub fn write_manifest(&self, resolved: &KvConfig) -> Result<(), CliError> {
        let mut kv = resolved.clone();
        kv.set("command", self.command);
        let text = format!("# dpclip {}\n{}", self.command, kv.to_text());
        self.write(MANIFEST, &text)
    }
}

pub fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Builds the flag layer from `(key, value)` pairs that were given.
pub fn flags<const N: usize>(pairs: [(&str, Option<String>); N]) -> KvConfig {
    let mut kv = KvConfig::new();
    for (k, v) in pairs {
        if let Some(v) = v {
            kv.set(k, v);
        }
    }
    kv
}

pub fn with_seed(keys: &[&'static str]) -> Vec<&'static str> {
    let mut v = keys.to_vec();
    if !v.contains(&"seed") {
        v.push("seed");
    }
    v
}

pub fn ndjson<T: serde::Serialize>(items: &[T]) -> Result<String, CliError> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    Ok(s)
}
