//! `run.log` and report writing. Nothing time- or host-dependent goes into
//! an output file, so reruns with the same seed are byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CmdResult, Kind, Tag};

pub fn sha256_file(path: &Path) -> CmdResult<String> {
    let bytes = fs::read(path).tag(Kind::Data, &format!("cannot read {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Collects what a command read and wrote.
pub struct RunLog {
    command: String,
    inputs: Vec<PathBuf>,
    outputs: Vec<String>,
}

impl RunLog {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        if !self.inputs.iter().any(|p| p == path) {
            self.inputs.push(path.to_path_buf());
        }
    }

    /// Records an output by its name inside the output directory.
    pub fn output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    pub fn write(&self, cfg: &RunConfig) -> CmdResult<()> {
        let mut out = String::new();
        let _ = writeln!(out, "command = {}", self.command);
        let _ = writeln!(out, "version = {}", env!("CARGO_PKG_VERSION"));
        out.push_str("[config]\n");
        out.push_str(&cfg.echo());
        out.push_str("[inputs]\n");
        for p in &self.inputs {
            let _ = writeln!(out, "{} sha256={}", p.display(), sha256_file(p)?);
        }
        out.push_str("[outputs]\n");
        for name in &self.outputs {
            let _ = writeln!(out, "{name} sha256={}", sha256_file(&cfg.out.join(name))?);
        }
        write_text(&cfg.out.join("run.log"), &out)
    }
}

pub fn ensure_dir(dir: &Path) -> CmdResult<()> {
    fs::create_dir_all(dir).tag(Kind::Data, &format!("cannot create {}", dir.display()))
}

pub fn write_text(path: &Path, text: &str) -> CmdResult<()> {
    fs::write(path, text).tag(Kind::Data, &format!("cannot write {}", path.display()))
}

/// Writes `report.txt` and echoes it to stdout.
pub fn write_report(cfg: &RunConfig, log: &mut RunLog, text: &str) -> CmdResult<()> {
    write_text(&cfg.out.join("report.txt"), text)?;
    log.output("report.txt");
    print!("{text}");
    Ok(())
}
