use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context as _, Result};
use seld_core::SeldError;

/// Shared settings of one invocation.
pub struct Context {
    pub workdir: PathBuf,
    pub threads: usize,
    pub seed: u64,
    pub pool: rayon::ThreadPool,
}

impl Context {
    pub fn new(workdir: &Path, threads: usize, seed: u64) -> Result<Self> {
        if threads == 0 {
            return Err(SeldError::invalid("--threads must be at least 1").into());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .context("building thread pool")?;
        Ok(Context {
            workdir: workdir.to_path_buf(),
            threads,
            seed,
            pool,
        })
    }

    /// Resolve against the working directory.
    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }
}

/// Exit code and kind for an error: numerical failures are 2, all else 1.
pub fn classify(e: &anyhow::Error) -> (u8, &'static str) {
    for cause in e.chain() {
        if let Some(SeldError::NonFinite(_)) = cause.downcast_ref::<SeldError>() {
            return (2, "numerical");
        }
    }
    (1, "input")
}

/// `run_manifest.txt` written next to a command's outputs.
pub struct RunManifest {
    command: &'static str,
    started: Instant,
    entries: Vec<(String, String)>,
}

impl RunManifest {
    pub fn start(command: &'static str, ctx: &Context) -> Self {
        let mut m = RunManifest {
            command,
            started: Instant::now(),
            entries: Vec::new(),
        };
        m.set("seed", ctx.seed);
        m.set("threads", ctx.threads);
        m.set("workdir", ctx.workdir.display());
        m
    }

    pub fn set(&mut self, key: &str, value: impl std::fmt::Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let mut s = String::new();
        let _ = writeln!(s, "command={}", self.command);
        let _ = writeln!(s, "tool_version={}", env!("CARGO_PKG_VERSION"));
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k}={v}");
        }
        let _ = writeln!(s, "wall_time_s={:.3}", self.started.elapsed().as_secs_f64());
        fs::create_dir_all(dir)?;
        let path = dir.join("run_manifest.txt");
        fs::write(&path, s).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Directory holding a file output (`.` for bare names).
pub fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}
