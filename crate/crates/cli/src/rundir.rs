//! Append-only run directory with a ledger of produced files.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const CONFIG_FILE: &str = "config.toml";
/// `stage,path` per produced file, in production order.
pub const ARTIFACTS_FILE: &str = "artifacts.csv";

pub struct RunDir {
    root: PathBuf,
    overwrite: bool,
}

impl RunDir {
    /// Creates the directory if needed. The first stage stores the config; later
    /// stages must use an identical one unless `overwrite` is set.
    pub fn open(root: &Path, cfg: &ExperimentConfig, overwrite: bool) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let run = RunDir {
            root: root.to_path_buf(),
            overwrite,
        };
        let text = cfg.to_toml()?;
        let cfg_path = run.path(CONFIG_FILE);
        if cfg_path.exists() {
            let stored = fs::read_to_string(&cfg_path).map_err(|e| CliError::io(&cfg_path, e))?;
            if stored != text {
                if !overwrite {
                    return Err(CliError::Config(format!(
                        "{} was created with a different config (pass --overwrite to replace it)",
                        root.display()
                    )));
                }
                fs::write(&cfg_path, &text).map_err(|e| CliError::io(&cfg_path, e))?;
            }
        } else {
            fs::write(&cfg_path, &text).map_err(|e| CliError::io(&cfg_path, e))?;
            run.record("config", CONFIG_FILE)?;
        }
        Ok(run)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    /// Path of an existing artifact, or a prerequisite error naming `what`.
    pub fn require(&self, rel: &str, what: &str) -> CliResult<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::Prerequisite(format!("{what} ({}) not found", p.display())))
        }
    }

    /// Reserves `rel` for writing: refuses existing files unless overwriting.
    pub fn claim(&self, rel: &str) -> CliResult<PathBuf> {
        let p = self.path(rel);
        if p.exists() && !self.overwrite {
            return Err(CliError::Exists(p));
        }
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        Ok(p)
    }

    pub fn record(&self, stage: &str, rel: &str) -> CliResult<()> {
        let p = self.path(ARTIFACTS_FILE);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&p)
            .map_err(|e| CliError::io(&p, e))?;
        writeln!(f, "{stage},{rel}").map_err(|e| CliError::io(&p, e))
    }

    pub fn write(&self, stage: &str, rel: &str, bytes: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let p = self.claim(rel)?;
        fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))?;
        self.record(stage, rel)?;
        Ok(p)
    }

    /// Runs `f` on the claimed path, then records it.
    pub fn produce(&self, stage: &str, rel: &str, f: impl FnOnce(&Path) -> CliResult<()>) -> CliResult<PathBuf> {
        let p = self.claim(rel)?;
        f(&p)?;
        self.record(stage, rel)?;
        Ok(p)
    }

    pub fn read_to_string(&self, rel: &str) -> CliResult<String> {
        let p = self.path(rel);
        fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))
    }
}
