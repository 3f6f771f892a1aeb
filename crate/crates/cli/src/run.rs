//! Per-run output directory: resolved config snapshot, provenance record and
//! a structured log mirrored to stderr.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const CONFIG_SNAPSHOT: &str = "config.resolved.toml";
pub const RUN_FILE: &str = "run.json";
pub const LOG_FILE: &str = "log.ndjson";

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    threads: usize,
    config: &'static str,
    inputs: &'a [InputDigest],
}

/// SHA-256 of a file, or of a directory tree as the sorted list of
/// `(relative path, file digest)` pairs.
pub fn digest_path(path: &Path) -> CliResult<String> {
    if path.is_file() {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        return Ok(hex::encode(Sha256::digest(&bytes)));
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let d = digest_path(&path.join(&rel))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(d.as_bytes());
        h.update([b'\n']);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| CliError::io(dir, e))?;
        let p = entry.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).expect("walk stays under root").to_path_buf());
        }
    }
    Ok(())
}

fn absolute(p: &Path) -> CliResult<PathBuf> {
    let abs = std::path::absolute(p).map_err(|e| CliError::io(p, e))?;
    // Resolve symlinks where the path already exists.
    Ok(fs::canonicalize(&abs).unwrap_or(abs))
}

pub struct RunDir {
    pub out: PathBuf,
    command: String,
    start: Instant,
    log: Mutex<fs::File>,
    quiet: bool,
}

impl RunDir {
    /// Creates `out` and writes the config snapshot and provenance record.
    /// Refuses an output directory that is, or lies inside, one of the
    /// inputs.
    pub fn create(out: &Path, command: &str, config: &RunConfig, inputs: &[(&str, &Path)], quiet: bool) -> CliResult<RunDir> {
        let out_abs = absolute(out)?;
        let mut digests = Vec::new();
        for (role, path) in inputs {
            if !path.exists() {
                return Err(CliError::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "input does not exist")));
            }
            let in_abs = absolute(path)?;
            if out_abs.starts_with(&in_abs) {
                return Err(CliError::Usage(format!(
                    "--out {} lies inside input {}; outputs never go into inputs",
                    out.display(),
                    path.display()
                )));
            }
            digests.push(InputDigest {
                role: role.to_string(),
                path: path.to_path_buf(),
                sha256: digest_path(path)?,
            });
        }
        fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
        write(&out.join(CONFIG_SNAPSHOT), config.to_toml()?.as_bytes())?;
        let record = RunRecord {
            tool: "ssmecg",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed: config.seed.unwrap_or(0),
            threads: rayon::current_num_threads(),
            config: CONFIG_SNAPSHOT,
            inputs: &digests,
        };
        write(&out.join(RUN_FILE), (serde_json::to_string_pretty(&record)? + "\n").as_bytes())?;
        let log_path = out.join(LOG_FILE);
        let log = fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
        Ok(RunDir {
            out: out.to_path_buf(),
            command: command.into(),
            start: Instant::now(),
            log: Mutex::new(log),
            quiet,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// One log record; `fields` must be a JSON object.
    pub fn event(&self, event: &str, fields: Value) {
        let mut line = Map::new();
        line.insert("level".into(), "info".into());
        line.insert("elapsed_ms".into(), (self.start.elapsed().as_millis() as u64).into());
        line.insert("command".into(), self.command.clone().into());
        line.insert("event".into(), event.into());
        if let Value::Object(extra) = fields {
            line.extend(extra);
        }
        let text = Value::Object(line).to_string();
        if !self.quiet {
            eprintln!("{text}");
        }
        let mut f = self.log.lock().expect("log lock");
        // A failed log write must not abort a finished computation.
        let _ = writeln!(f, "{text}");
    }
}

pub fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}
