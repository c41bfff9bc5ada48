//! Training configuration and its plain-text `key = value` file form.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::svm::SvmParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Total hard cases kept in memory (`n`).
    pub hard_budget: usize,
    /// Total exemplars kept in memory (`m`).
    pub exemplar_budget: usize,
    pub svm: SvmParams,
    pub seed: u64,
    pub num_tasks: usize,
    pub input: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hard_budget: 200,
            exemplar_budget: 1800,
            svm: SvmParams::default(),
            seed: 0,
            num_tasks: 3,
            input: None,
            test: None,
            out: None,
        }
    }
}

/// Keys accepted in a configuration file.
pub const CONFIG_KEYS: &[&str] = &[
    "hard_budget",
    "exemplar_budget",
    "svm_c",
    "svm_tol",
    "svm_max_iter",
    "seed",
    "num_tasks",
    "input",
    "test",
    "out",
];

impl TrainConfig {
    pub fn without_memory(mut self) -> Self {
        self.hard_budget = 0;
        self.exemplar_budget = 0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.svm
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.num_tasks == 0 {
            return Err(Error::Config("num_tasks must be at least 1".into()));
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped; unknown keys are errors.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", i + 1))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: invalid value {value:?}")))
        }
        match key {
            "hard_budget" => self.hard_budget = num(key, value)?,
            "exemplar_budget" => self.exemplar_budget = num(key, value)?,
            "svm_c" => self.svm.c = num(key, value)?,
            "svm_tol" => self.svm.tol = num(key, value)?,
            "svm_max_iter" => self.svm.max_iter = num(key, value)?,
            "seed" => {
                self.seed = num(key, value)?;
                self.svm.seed = self.seed;
            }
            "num_tasks" => self.num_tasks = num(key, value)?,
            "input" => self.input = Some(PathBuf::from(value)),
            "test" => self.test = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = TrainConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }
}
