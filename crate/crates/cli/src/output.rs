//! Output ownership: one directory per experiment holding the resolved
//! config copy, data tables, and the verdict, plus a sidecar log. Wall
//! clock readings appear only in the log, so every data file is
//! byte-reproducible from the config and seed.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::config::ExperimentConfig;

pub struct OutputDir {
    root: PathBuf,
}

impl OutputDir {
    pub fn create(
        root: &Path,
        cfg: &ExperimentConfig,
        subcommand: &str,
    ) -> Result<Self, String> {
        std::fs::create_dir_all(root)
            .map_err(|e| format!("cannot create {}: {e}", root.display()))?;
        let text = toml::to_string_pretty(cfg)
            .map_err(|e| format!("cannot serialize config: {e}"))?;
        std::fs::write(root.join("config.toml"), text)
            .map_err(|e| format!("cannot write config copy: {e}"))?;
        let dir = Self {
            root: root.to_path_buf(),
        };
        dir.log(&format!("start subcommand={subcommand} seed={}", cfg.seed))?;
        Ok(dir)
    }

    /// Append a log line prefixed with epoch seconds.
    pub fn log(&self, msg: &str) -> Result<(), String> {
        let epoch = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let path = self.root.join("run.log");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| format!("cannot open {}: {e}", path.display()))?;
        writeln!(f, "unix_time={epoch} {msg}").map_err(|e| e.to_string())
    }

    /// Stream one data file through the writer callback.
    pub fn write_file(
        &self,
        name: &str,
        f: impl FnOnce(&mut BufWriter<File>) -> jsq_core::Result<()>,
    ) -> Result<(), String> {
        let path = self.root.join(name);
        let file =
            File::create(&path).map_err(|e| format!("cannot create {}: {e}", path.display()))?;
        let mut w = BufWriter::new(file);
        f(&mut w).map_err(|e| format!("writing {}: {e}", path.display()))?;
        w.flush().map_err(|e| format!("flushing {}: {e}", path.display()))
    }
}
