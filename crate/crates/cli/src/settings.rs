//! Config-file values overlaid by command-line flags.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mcn::config::KeyValues;
use mcn::data::{CorpusPaths, KeyAliases};
use mcn::model::{ModelConfig, TrainConfig};

use crate::CliError;

/// Merged `key = value` settings; flags are applied after the file.
pub struct Settings {
    kv: KeyValues,
}

impl Settings {
    pub fn load(config: Option<&Path>) -> Result<Self, CliError> {
        let kv = match config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
                KeyValues::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
            }
            None => KeyValues::new(),
        };
        Ok(Self { kv })
    }

    pub fn flag<T: Display>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.kv.set(key, v);
        }
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.kv.get(key)?)
    }

    pub fn get_or<T>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T>(&self, key: &str) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.get(key)?
            .ok_or_else(|| CliError::Usage(format!("`{key}` must be given as a flag or in the config file")))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.kv.get_str(key).map(PathBuf::from)
    }

    /// `data_dir` supplies the generator's layout; explicit paths win.
    pub fn corpus_paths(&self) -> Result<CorpusPaths, CliError> {
        let base = self.path("data_dir").map(|d| CorpusPaths::in_dir(&d));
        let pick = |key: &str, fallback: Option<&PathBuf>| -> Result<PathBuf, CliError> {
            self.path(key).or_else(|| fallback.cloned()).ok_or_else(|| {
                CliError::Usage(format!("no `{key}` path: give --data-dir or --{}", key.replace('_', "-")))
            })
        };
        Ok(CorpusPaths {
            annotations: pick("annotations", base.as_ref().map(|b| &b.annotations))?,
            index: pick("index", base.as_ref().map(|b| &b.index))?,
            splits: pick("splits", base.as_ref().map(|b| &b.splits))?,
            embeddings: pick("embeddings", base.as_ref().map(|b| &b.embeddings))?,
        })
    }

    pub fn aliases(&self) -> Result<KeyAliases, CliError> {
        match self.kv.get_str("aliases") {
            Some(spec) => KeyAliases::parse(spec).map_err(CliError::Usage),
            None => Ok(KeyAliases::default()),
        }
    }

    pub fn model_config(&self, base: ModelConfig) -> Result<ModelConfig, CliError> {
        let mut cfg = base;
        cfg.apply_kv(&self.kv)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `patience = 0` disables early stopping.
    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let d = TrainConfig::default();
        let patience = match self.get::<usize>("patience")? {
            Some(0) => None,
            Some(p) => Some(p),
            None => d.patience,
        };
        let cfg = TrainConfig {
            epochs: self.get_or("epochs", d.epochs)?,
            batch_size: self.get_or("batch_size", d.batch_size)?,
            learning_rate: self.get_or("learning_rate", d.learning_rate)?,
            seed: self.get_or("seed", d.seed)?,
            patience,
            inter_per_example: self.get_or("inter_per_example", d.inter_per_example)?,
            inter_attempts: self.get_or("inter_attempts", d.inter_attempts)?,
            execution: d.execution,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        fs::write(&p, "# run\nlearning_rate = 0.2\nepochs = 3\nlambda = 1.0\n").unwrap();
        let mut s = Settings::load(Some(&p)).unwrap();
        s.flag("epochs", Some(7));
        s.flag("batch_size", None::<usize>);
        let t = s.train_config().unwrap();
        assert_eq!((t.epochs, t.learning_rate, t.batch_size), (7, 0.2, 120));
        let m = s.model_config(ModelConfig::new(4, 4, 4)).unwrap();
        assert_eq!(m.lambda, 1.0);
    }

    #[test]
    fn bad_values_are_usage_errors() {
        let mut s = Settings::load(None).unwrap();
        s.flag("lambda", Some(2.0));
        assert!(matches!(s.model_config(ModelConfig::new(4, 4, 4)), Err(CliError::Usage(_))));
        s.flag("epochs", Some("many"));
        assert!(matches!(s.train_config(), Err(CliError::Usage(_))));
    }

    #[test]
    fn corpus_paths_from_data_dir() {
        let mut s = Settings::load(None).unwrap();
        assert!(s.corpus_paths().is_err());
        s.flag("data_dir", Some("/d"));
        s.flag("splits", Some("/elsewhere/s.tsv"));
        let p = s.corpus_paths().unwrap();
        assert_eq!(p.index, PathBuf::from("/d/index.tsv"));
        assert_eq!(p.splits, PathBuf::from("/elsewhere/s.tsv"));
    }
}
