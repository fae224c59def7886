//! `key = value` run configuration.
//!
//! Precedence, lowest first: built-in defaults, the `--config` file,
//! `--set key=value` pairs in command-line order, then the dedicated flags
//! (`--seed`, `--checkpoint`, `--input`, ...).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rnn_encdec::model::{CellKind, ModelConfig};
use rnn_encdec::optim::{OptimizerKind, Sampling, TrainConfig};

use crate::CliError;

/// Environment variable naming the directory that relative paths resolve
/// against.
pub const DATA_DIR_ENV: &str = "ENCDEC_DATA_DIR";

/// Every accepted key with its default. An empty default means unset.
pub const KEYS: &[(&str, &str)] = &[
    // model
    ("src_shortlist", "15000"),
    ("tgt_shortlist", "15000"),
    ("hidden", "1000"),
    ("embed", "100"),
    ("maxout", "500"),
    ("output_rank", "500"),
    ("cell", "gated"),
    ("bias", "true"),
    ("init_std", "0.01"),
    ("update_bias", "0"),
    // training
    ("batch_size", "64"),
    ("max_updates", "1000"),
    ("seed", "1234"),
    ("optimizer", "adadelta"),
    ("learning_rate", "0.01"),
    ("rho", "0.95"),
    ("eps", "1e-6"),
    ("clip_norm", "none"),
    ("sampling", "with-replacement"),
    ("log_every", "100"),
    ("checkpoint_every", "0"),
    ("dedup", "true"),
    // paths
    ("data_dir", ""),
    ("train_data", ""),
    ("checkpoint", ""),
    ("log", ""),
    ("input", ""),
    ("output", ""),
    // sampling and rescoring
    ("samples", "50"),
    ("top", "5"),
    ("max_len", "50"),
    ("header", "false"),
    ("unk_feature", "none"),
    ("side", "src"),
    // gradient check
    ("check_pairs", "3"),
    ("check_max_len", "5"),
    ("check_std", "0.3"),
    ("check_step", "1e-3"),
    ("check_stencil", "five-point"),
    ("check_tol", "1e-4"),
    // toy tasks
    ("task", "copy"),
    ("vocab_size", "20"),
    ("min_len", "1"),
    ("max_src_len", "8"),
    ("noise_len", "50"),
    ("pairs", "1000"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    /// Keys given by a file, `--set` or a flag rather than defaulted.
    explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut values: BTreeMap<String, String> =
            KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
            values.insert("data_dir".into(), dir);
        }
        Self {
            values,
            explicit: BTreeSet::new(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                self.explicit.insert(key.to_string());
                Ok(())
            }
            None => Err(CliError::Usage(format!("unknown config key {key:?}"))),
        }
    }

    /// Applies `key=value`.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected key=value, got {pair:?}")))?;
        self.set(k.trim(), v)
    }

    /// Merges a config file. Blank lines and `#` comments are ignored.
    pub fn merge_str(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("{origin}:{}: expected key = value", i + 1))
            })?;
            self.set(k.trim(), v)
                .map_err(|e| CliError::Usage(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        self.merge_str(&text, &path.display().to_string())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("config key {key} is not declared"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| CliError::Usage(format!("bad value {raw:?} for {key}: {e}")))
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn is_set(&self, key: &str) -> bool {
        !self.raw(key).is_empty()
    }

    /// A path-valued key, resolved against `data_dir` when relative.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        if !self.is_set(key) {
            return None;
        }
        let p = PathBuf::from(self.raw(key));
        if p.is_relative() && self.is_set("data_dir") {
            Some(Path::new(self.raw("data_dir")).join(p))
        } else {
            Some(p)
        }
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.path(key)
            .ok_or_else(|| CliError::Usage(format!("missing required setting {key}")))
    }

    /// Model shape for the given vocabulary sizes.
    pub fn model_config(&self, src_vocab: usize, tgt_vocab: usize) -> Result<ModelConfig, CliError> {
        let cell: CellKind = self.get("cell")?;
        let cfg = ModelConfig {
            src_vocab,
            tgt_vocab,
            hidden: self.get("hidden")?,
            embed: self.get("embed")?,
            maxout: self.get("maxout")?,
            output_rank: self.get("output_rank")?,
            cell,
            bias: self.get("bias")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let clip_norm = match self.raw("clip_norm") {
            "none" | "off" | "0" => None,
            _ => Some(self.get("clip_norm")?),
        };
        let optimizer: OptimizerKind = self.get("optimizer")?;
        let sampling: Sampling = self.get("sampling")?;
        let cfg = TrainConfig {
            batch_size: self.get("batch_size")?,
            max_updates: self.get("max_updates")?,
            seed: self.get("seed")?,
            optimizer,
            learning_rate: self.get("learning_rate")?,
            rho: self.get("rho")?,
            eps: self.get("eps")?,
            clip_norm,
            sampling,
            log_every: self.get("log_every")?,
            checkpoint_every: self.get("checkpoint_every")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// One `key = value` line per key, sorted by key.
    pub fn echo(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_cover_every_key_once() {
        let cfg = RunConfig::default();
        let echo = cfg.echo();
        assert_eq!(echo.lines().count(), KEYS.len());
        for (k, _) in KEYS {
            assert_eq!(echo.lines().filter(|l| l.split(" = ").next() == Some(k)).count(), 1);
        }
    }

    #[test]
    fn file_then_overrides() {
        let mut cfg = RunConfig::default();
        cfg.merge_str("# tiny\nhidden = 8\n\nseed=5\n", "t").unwrap();
        cfg.set_pair("seed=9").unwrap();
        assert_eq!(cfg.get::<usize>("hidden").unwrap(), 8);
        assert_eq!(cfg.get::<u64>("seed").unwrap(), 9);
        assert!(matches!(cfg.merge_str("bogus = 1", "t"), Err(CliError::Usage(m)) if m.contains("t:1")));
        assert!(cfg.merge_str("hidden 8", "t").is_err());
        assert!(cfg.set_pair("noequals").is_err());
        cfg.set("hidden", "x").unwrap();
        assert!(cfg.get::<usize>("hidden").is_err());
    }

    #[test]
    fn typed_views() {
        let mut cfg = RunConfig::default();
        let t = cfg.train_config().unwrap();
        assert_eq!(t, TrainConfig { max_updates: 1000, seed: 1234, ..TrainConfig::default() });
        cfg.set("clip_norm", "5").unwrap();
        assert_eq!(cfg.train_config().unwrap().clip_norm, Some(5.0));
        cfg.set("cell", "tanh").unwrap();
        cfg.set("hidden", "4").unwrap();
        let m = cfg.model_config(10, 12).unwrap();
        assert_eq!((m.cell, m.hidden, m.src_vocab, m.tgt_vocab), (CellKind::Tanh, 4, 10, 12));
        cfg.set("maxout", "0").unwrap();
        assert!(cfg.model_config(10, 12).is_err());
    }

    #[test]
    fn relative_paths_follow_data_dir() {
        let mut cfg = RunConfig::default();
        cfg.set("data_dir", "/data").unwrap();
        cfg.set("input", "a.txt").unwrap();
        cfg.set("output", "/abs/b.txt").unwrap();
        assert_eq!(cfg.path("input").unwrap(), PathBuf::from("/data/a.txt"));
        assert_eq!(cfg.path("output").unwrap(), PathBuf::from("/abs/b.txt"));
        assert!(cfg.path("log").is_none());
        assert!(cfg.require_path("log").is_err());
    }
}
