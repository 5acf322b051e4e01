use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::read_file;
use crate::model::ModelConfig;
use crate::training::{StagePlan, TrainConfig};

/// File locations of one run. Relative paths resolve against the directory
/// of the config file (or the working directory without one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunPaths {
    pub general_corpus: Option<PathBuf>,
    pub term_pairs: Option<PathBuf>,
    pub parallel_corpus: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
    /// Tokenizer of the general model.
    pub tokenizer: Option<PathBuf>,
    /// Checkpoint of the general model.
    pub base_checkpoint: Option<PathBuf>,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for RunPaths {
    fn default() -> Self {
        RunPaths {
            general_corpus: None,
            term_pairs: None,
            parallel_corpus: None,
            test_corpus: None,
            tokenizer: None,
            base_checkpoint: None,
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub tokenizer_vocab_size: usize,
    pub pretrain_epochs: usize,
    pub paths: RunPaths,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub plan: StagePlan,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            tokenizer_vocab_size: 8000,
            pretrain_epochs: 10,
            paths: RunPaths::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            plan: StagePlan::default(),
        }
    }
}

/// A parsed config plus where its relative paths are anchored.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Vec<String>> {
        let Some(path) = path else {
            return Ok(LoadedConfig {
                config: RunConfig::default(),
                base_dir: PathBuf::new(),
            });
        };
        let text = read_file(path).map_err(|e| vec![e.to_string()])?;
        let config =
            serde_json::from_str(&text).map_err(|e| vec![format!("{}: {e}", path.display())])?;
        Ok(LoadedConfig {
            config,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn resolve_opt(&self, p: &Option<PathBuf>) -> Option<PathBuf> {
        p.as_deref().map(|p| self.resolve(p))
    }

    /// Applies `--seed` and keeps the training seed in step with the run
    /// seed.
    pub fn set_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.config.seed = s;
        }
        self.config.train.seed = self.config.seed;
    }

    /// SHA-256 of the effective config as canonical JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(&self.config).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Every validation problem of the model, training and plan sections.
    pub fn problems(&self) -> Vec<String> {
        let c = &self.config;
        let mut out = Vec::new();
        if let Err(e) = c.model.validate() {
            out.push(format!("model: {e}"));
        }
        if let Err(e) = c.train.validate() {
            out.push(format!("train: {e}"));
        }
        if let Err(e) = c.plan.validate() {
            out.push(format!("plan: {e}"));
        }
        out
    }
}

/// Collects configuration problems so they can be reported together.
#[derive(Debug, Default)]
pub struct Checks {
    problems: Vec<String>,
}

impl Checks {
    pub fn new(initial: Vec<String>) -> Self {
        Checks { problems: initial }
    }

    /// Resolves a required path, recording a problem if it is unset (and
    /// `must_exist` asks for an existing file that is absent).
    pub fn path(
        &mut self,
        what: &str,
        flag: Option<PathBuf>,
        fallback: Option<PathBuf>,
        must_exist: bool,
    ) -> PathBuf {
        match flag.or(fallback) {
            Some(p) => {
                if must_exist && !p.is_file() {
                    self.problems
                        .push(format!("{what} not found: {}", p.display()));
                }
                p
            }
            None => {
                self.problems.push(format!("{what} is not set"));
                PathBuf::new()
            }
        }
    }

    pub fn push(&mut self, problem: impl Into<String>) {
        self.problems.push(problem.into());
    }

    pub fn finish(self) -> Result<(), Vec<String>> {
        if self.problems.is_empty() {
            Ok(())
        } else {
            Err(self.problems)
        }
    }
}
