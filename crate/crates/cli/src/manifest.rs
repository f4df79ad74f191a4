use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::{io_err, CliError};

pub const MANIFEST_FILE: &str = "manifest.tsv";

/// Record of one command invocation, written as `key\tvalue` lines.
#[derive(Debug)]
pub struct RunManifest {
    pub command: String,
    pub config: Vec<(String, String)>,
    pub seed: Option<u64>,
    pub artifacts: Vec<PathBuf>,
    started: Instant,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.to_string(),
            config: Vec::new(),
            seed: None,
            artifacts: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.config.push((key.into(), value.to_string()));
    }

    pub fn artifact(&mut self, path: impl Into<PathBuf>) {
        self.artifacts.push(path.into());
    }

    pub fn render(&self) -> String {
        let mut s = String::from("key\tvalue\n");
        writeln!(s, "command\t{}", self.command).unwrap();
        for (k, v) in &self.config {
            writeln!(s, "config.{k}\t{v}").unwrap();
        }
        if let Some(seed) = self.seed {
            writeln!(s, "seed\t{seed}").unwrap();
        }
        for a in &self.artifacts {
            writeln!(s, "artifact\t{}", a.display()).unwrap();
        }
        writeln!(s, "duration_s\t{:.3}", self.started.elapsed().as_secs_f64()).unwrap();
        s
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.render()).map_err(io_err("manifest", path))
    }
}
