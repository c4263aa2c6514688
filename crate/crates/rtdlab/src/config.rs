//! Experiment-level configuration: a [`TrainConfig`] plus the settings that
//! only matter to the harness around it (fine-tune hypers, diagnostics
//! sampling, output directory), read from a flat key=value text file.
//!
//! File format: UTF-8, one `key=value` per line, `#`-prefixed lines and blank
//! lines skipped, keys and values trimmed. Later lines override earlier ones.
//! Unknown keys are an error that names the key; a typo can never fall back
//! to a default silently.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::finetune::FineTuneConfig;
use crate::pretrain::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub finetune: FineTuneConfig,
    /// Row fraction for cosine-similarity reports; 1.0 scores every row.
    pub cosine_fraction: f64,
    /// Classification examples drawn for the fine-tune task (before split).
    pub ft_examples: usize,
    /// Fine-tune repetitions per mode in a comparison run.
    pub ft_seeds: usize,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn desk_defaults() -> Self {
        ExperimentConfig {
            train: TrainConfig::desk_defaults(),
            finetune: FineTuneConfig::desk_defaults(),
            cosine_fraction: 0.1,
            ft_examples: 200,
            ft_seeds: 2,
            out_dir: PathBuf::from("runs"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.finetune.validate()?;
        if !(self.cosine_fraction > 0.0 && self.cosine_fraction <= 1.0) {
            return Err(Error::config("cosine_fraction", "must lie in (0, 1]"));
        }
        if self.ft_examples < 10 {
            return Err(Error::config("ft.examples", "need at least 10 examples to split"));
        }
        if self.ft_seeds == 0 {
            return Err(Error::config("ft.seeds", "must be positive"));
        }
        Ok(())
    }

    /// Sets one field from its key=value form. Harness keys are matched
    /// first; anything else is handed to [`TrainConfig::apply_kv`], which
    /// rejects unknown keys by name.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(key, format!("cannot parse {value:?}")))
        }
        match key {
            "out" => self.out_dir = PathBuf::from(value),
            "cosine_fraction" => self.cosine_fraction = num(key, value)?,
            "ft.lr" => self.finetune.lr = num(key, value)?,
            "ft.epochs" => self.finetune.epochs = num(key, value)?,
            "ft.batch_size" => self.finetune.batch_size = num(key, value)?,
            "ft.head_dropout" => self.finetune.head_dropout = num(key, value)?,
            "ft.seed" => self.finetune.seed = num(key, value)?,
            "ft.examples" => self.ft_examples = num(key, value)?,
            "ft.seeds" => self.ft_seeds = num(key, value)?,
            _ => self.train.apply_kv(key, value)?,
        }
        Ok(())
    }

    /// Applies a whole config-file body on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(
                    format!("line {}", idx + 1),
                    format!("expected key=value, got {raw:?}"),
                ));
            };
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Desk defaults layered under a config file, validated as a whole.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = ExperimentConfig::desk_defaults();
        cfg.apply_text(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every field as key=value pairs; feeding them back through
    /// [`ExperimentConfig::apply_kv`] rebuilds the config bit for bit.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = self.train.to_kv();
        let mut put = |k: &str, v: String| kv.push((k.to_string(), v));
        put("cosine_fraction", format!("{:?}", self.cosine_fraction));
        put("ft.lr", format!("{:?}", self.finetune.lr));
        put("ft.epochs", self.finetune.epochs.to_string());
        put("ft.batch_size", self.finetune.batch_size.to_string());
        put("ft.head_dropout", format!("{:?}", self.finetune.head_dropout));
        put("ft.seed", self.finetune.seed.to_string());
        put("ft.examples", self.ft_examples.to_string());
        put("ft.seeds", self.ft_seeds.to_string());
        put("out", self.out_dir.to_string_lossy().into_owned());
        kv
    }

    pub fn to_kv_text(&self) -> String {
        let mut text = String::new();
        for (k, v) in self.to_kv() {
            text.push_str(&k);
            text.push('=');
            text.push_str(&v);
            text.push('\n');
        }
        text
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = ExperimentConfig::desk_defaults();
        let mut rebuilt = ExperimentConfig::desk_defaults();
        rebuilt.train.lambda = -1.0; // scribble so the round trip has to restore it
        rebuilt.apply_text(&cfg.to_kv_text()).unwrap();
        assert_eq!(rebuilt, cfg);
    }

    #[test]
    fn comments_blanks_and_spacing_are_tolerated() {
        let mut cfg = ExperimentConfig::desk_defaults();
        cfg.apply_text("# a comment\n\n  lambda = 2.5  \nft.epochs=7\n").unwrap();
        assert_eq!(cfg.train.lambda, 2.5);
        assert_eq!(cfg.finetune.epochs, 7);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let mut cfg = ExperimentConfig::desk_defaults();
        let err = cfg.apply_text("plumbus=1\n").unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "plumbus"),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn a_line_without_equals_is_located() {
        let mut cfg = ExperimentConfig::desk_defaults();
        let err = cfg.apply_text("seed=4\n# fine\nnot a pair\n").unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "line 3"),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn later_lines_override_earlier_ones() {
        let mut cfg = ExperimentConfig::desk_defaults();
        cfg.apply_text("lambda=1\nlambda=9\n").unwrap();
        assert_eq!(cfg.train.lambda, 9.0);
    }

    #[test]
    fn harness_keys_reach_their_fields() {
        let mut cfg = ExperimentConfig::desk_defaults();
        cfg.apply_text(
            "cosine_fraction=1.0\nft.lr=0.01\nft.seed=12\nft.examples=40\nft.seeds=5\nout=elsewhere\n",
        )
        .unwrap();
        assert_eq!(cfg.cosine_fraction, 1.0);
        assert_eq!(cfg.finetune.lr, 0.01);
        assert_eq!(cfg.finetune.seed, 12);
        assert_eq!(cfg.ft_examples, 40);
        assert_eq!(cfg.ft_seeds, 5);
        assert_eq!(cfg.out_dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn fraction_bounds_are_enforced() {
        let mut cfg = ExperimentConfig::desk_defaults();
        cfg.cosine_fraction = 0.0;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("cosine_fraction"), "{err}");
        cfg.cosine_fraction = 1.0;
        cfg.validate().unwrap();
    }

    #[test]
    fn from_file_validates_the_whole_layering() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.cfg");

        std::fs::write(&path, "seed=7\nlambda=3.5\n").unwrap();
        let cfg = ExperimentConfig::from_file(&path).unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.lambda, 3.5);

        // warmup (default 100) now exceeds max_steps; layering must fail as a whole
        std::fs::write(&path, "max_steps=10\n").unwrap();
        let err = ExperimentConfig::from_file(&path).unwrap_err();
        assert!(err.to_string().contains("warmup_steps"), "{err}");
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = ExperimentConfig::from_file(Path::new("/nonexistent/exp.cfg")).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }
}
