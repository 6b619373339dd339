//! Experiment configuration: `key = value` lines under `[section]`
//! headers, every key overridable from the command line, unknown keys
//! rejected. The effective configuration is echoed into every output
//! directory so a run can be reproduced exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // [data]
    pub general_train: Option<PathBuf>,
    pub general_dev: Option<PathBuf>,
    pub domain_train: Option<PathBuf>,
    pub domain_dev: Option<PathBuf>,
    pub domain: String,
    pub toy_seed: u64,
    pub toy_general_train: usize,
    pub toy_general_dev: usize,
    pub toy_general_test: usize,
    pub toy_domain_train: usize,
    pub toy_domain_dev: usize,
    pub toy_domain_test: usize,
    pub toy_vocab: usize,
    pub toy_domain_extra_vocab: usize,
    // [tokenizer]
    pub vocab_size: usize,
    pub max_piece_len: usize,
    pub char_coverage: f64,
    pub em_iters: usize,
    pub keep_ratio: f64,
    // [training]
    pub batch_size: usize,
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub seed: u64,
    pub oversample_factor: usize,
    pub lstm_lr: f64,
    pub transformer_lr: f64,
    pub clip_norm: f64,
    pub finetune_lr_scale: f64,
    // [lstm]
    pub lstm_embed_dim: usize,
    pub lstm_hidden_dim: usize,
    pub lstm_dropout: f64,
    // [transformer]
    pub tf_layers: usize,
    pub tf_model_dim: usize,
    pub tf_heads: usize,
    pub tf_ff_dim: usize,
    pub tf_max_positions: usize,
    pub tf_dropout: f64,
    // [decoding]
    pub comma_split_threshold: usize,
    // [evaluation]
    pub smoothing: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            general_train: None,
            general_dev: None,
            domain_train: None,
            domain_dev: None,
            domain: "alpha".into(),
            toy_seed: 42,
            toy_general_train: 600,
            toy_general_dev: 48,
            toy_general_test: 48,
            toy_domain_train: 120,
            toy_domain_dev: 32,
            toy_domain_test: 32,
            toy_vocab: 20,
            toy_domain_extra_vocab: 10,
            vocab_size: 1000,
            max_piece_len: 8,
            char_coverage: 0.9995,
            em_iters: 2,
            keep_ratio: 0.75,
            batch_size: 16,
            epochs: 25,
            finetune_epochs: 10,
            seed: 42,
            oversample_factor: 10,
            lstm_lr: 1e-3,
            transformer_lr: 1e-3,
            clip_norm: 5.0,
            finetune_lr_scale: 0.3,
            lstm_embed_dim: 32,
            lstm_hidden_dim: 64,
            lstm_dropout: 0.1,
            tf_layers: 2,
            tf_model_dim: 32,
            tf_heads: 2,
            tf_ff_dim: 64,
            tf_max_positions: 512,
            tf_dropout: 0.1,
            comma_split_threshold: 20,
            smoothing: "none".into(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected key = value", lineno + 1))?;
            cfg.set(&format!("{section}.{}", key.trim()), value.trim())
                .with_context(|| format!("line {}", lineno + 1))?;
        }
        Ok(cfg)
    }

    /// Apply one `section.key=value` override.
    pub fn set(&mut self, dotted_key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            v.parse()
                .map_err(|e| anyhow::anyhow!("invalid value for {key}: {e}"))
        }
        let path = |v: &str| -> Option<PathBuf> {
            if v.is_empty() || v == "builtin" {
                None
            } else {
                Some(PathBuf::from(v))
            }
        };
        match dotted_key {
            "data.general_train" => self.general_train = path(value),
            "data.general_dev" => self.general_dev = path(value),
            "data.domain_train" => self.domain_train = path(value),
            "data.domain_dev" => self.domain_dev = path(value),
            "data.domain" => self.domain = value.to_string(),
            "data.toy_seed" => self.toy_seed = parse(dotted_key, value)?,
            "data.toy_general_train" => self.toy_general_train = parse(dotted_key, value)?,
            "data.toy_general_dev" => self.toy_general_dev = parse(dotted_key, value)?,
            "data.toy_general_test" => self.toy_general_test = parse(dotted_key, value)?,
            "data.toy_domain_train" => self.toy_domain_train = parse(dotted_key, value)?,
            "data.toy_domain_dev" => self.toy_domain_dev = parse(dotted_key, value)?,
            "data.toy_domain_test" => self.toy_domain_test = parse(dotted_key, value)?,
            "data.toy_vocab" => self.toy_vocab = parse(dotted_key, value)?,
            "data.toy_domain_extra_vocab" => {
                self.toy_domain_extra_vocab = parse(dotted_key, value)?
            }
            "tokenizer.vocab_size" => self.vocab_size = parse(dotted_key, value)?,
            "tokenizer.max_piece_len" => self.max_piece_len = parse(dotted_key, value)?,
            "tokenizer.char_coverage" => self.char_coverage = parse(dotted_key, value)?,
            "tokenizer.em_iters" => self.em_iters = parse(dotted_key, value)?,
            "tokenizer.keep_ratio" => self.keep_ratio = parse(dotted_key, value)?,
            "training.batch_size" => self.batch_size = parse(dotted_key, value)?,
            "training.epochs" => self.epochs = parse(dotted_key, value)?,
            "training.finetune_epochs" => self.finetune_epochs = parse(dotted_key, value)?,
            "training.seed" => self.seed = parse(dotted_key, value)?,
            "training.oversample_factor" => self.oversample_factor = parse(dotted_key, value)?,
            "training.lstm_lr" => self.lstm_lr = parse(dotted_key, value)?,
            "training.transformer_lr" => self.transformer_lr = parse(dotted_key, value)?,
            "training.clip_norm" => self.clip_norm = parse(dotted_key, value)?,
            "training.finetune_lr_scale" => self.finetune_lr_scale = parse(dotted_key, value)?,
            "lstm.embed_dim" => self.lstm_embed_dim = parse(dotted_key, value)?,
            "lstm.hidden_dim" => self.lstm_hidden_dim = parse(dotted_key, value)?,
            "lstm.dropout" => self.lstm_dropout = parse(dotted_key, value)?,
            "transformer.layers" => self.tf_layers = parse(dotted_key, value)?,
            "transformer.model_dim" => self.tf_model_dim = parse(dotted_key, value)?,
            "transformer.heads" => self.tf_heads = parse(dotted_key, value)?,
            "transformer.ff_dim" => self.tf_ff_dim = parse(dotted_key, value)?,
            "transformer.max_positions" => self.tf_max_positions = parse(dotted_key, value)?,
            "transformer.dropout" => self.tf_dropout = parse(dotted_key, value)?,
            "decoding.comma_split_threshold" => {
                self.comma_split_threshold = parse(dotted_key, value)?
            }
            "evaluation.smoothing" => {
                if value != "none" && value != "add-one" {
                    bail!("evaluation.smoothing must be 'none' or 'add-one'");
                }
                self.smoothing = value.to_string();
            }
            other => bail!("unknown configuration key '{other}'"),
        }
        Ok(())
    }

    /// Full `key = value` dump (every key, defaults included), stable order.
    pub fn render(&self) -> String {
        let path_str = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "builtin".into())
        };
        let sections: Vec<(&str, Vec<(String, String)>)> = vec![
            (
                "data",
                vec![
                    ("general_train".into(), path_str(&self.general_train)),
                    ("general_dev".into(), path_str(&self.general_dev)),
                    ("domain_train".into(), path_str(&self.domain_train)),
                    ("domain_dev".into(), path_str(&self.domain_dev)),
                    ("domain".into(), self.domain.clone()),
                    ("toy_seed".into(), self.toy_seed.to_string()),
                    ("toy_general_train".into(), self.toy_general_train.to_string()),
                    ("toy_general_dev".into(), self.toy_general_dev.to_string()),
                    ("toy_general_test".into(), self.toy_general_test.to_string()),
                    ("toy_domain_train".into(), self.toy_domain_train.to_string()),
                    ("toy_domain_dev".into(), self.toy_domain_dev.to_string()),
                    ("toy_domain_test".into(), self.toy_domain_test.to_string()),
                    ("toy_vocab".into(), self.toy_vocab.to_string()),
                    (
                        "toy_domain_extra_vocab".into(),
                        self.toy_domain_extra_vocab.to_string(),
                    ),
                ],
            ),
            (
                "tokenizer",
                vec![
                    ("vocab_size".into(), self.vocab_size.to_string()),
                    ("max_piece_len".into(), self.max_piece_len.to_string()),
                    ("char_coverage".into(), self.char_coverage.to_string()),
                    ("em_iters".into(), self.em_iters.to_string()),
                    ("keep_ratio".into(), self.keep_ratio.to_string()),
                ],
            ),
            (
                "training",
                vec![
                    ("batch_size".into(), self.batch_size.to_string()),
                    ("epochs".into(), self.epochs.to_string()),
                    ("finetune_epochs".into(), self.finetune_epochs.to_string()),
                    ("seed".into(), self.seed.to_string()),
                    ("oversample_factor".into(), self.oversample_factor.to_string()),
                    ("lstm_lr".into(), self.lstm_lr.to_string()),
                    ("transformer_lr".into(), self.transformer_lr.to_string()),
                    ("clip_norm".into(), self.clip_norm.to_string()),
                    ("finetune_lr_scale".into(), self.finetune_lr_scale.to_string()),
                ],
            ),
            (
                "lstm",
                vec![
                    ("embed_dim".into(), self.lstm_embed_dim.to_string()),
                    ("hidden_dim".into(), self.lstm_hidden_dim.to_string()),
                    ("dropout".into(), self.lstm_dropout.to_string()),
                ],
            ),
            (
                "transformer",
                vec![
                    ("layers".into(), self.tf_layers.to_string()),
                    ("model_dim".into(), self.tf_model_dim.to_string()),
                    ("heads".into(), self.tf_heads.to_string()),
                    ("ff_dim".into(), self.tf_ff_dim.to_string()),
                    ("max_positions".into(), self.tf_max_positions.to_string()),
                    ("dropout".into(), self.tf_dropout.to_string()),
                ],
            ),
            (
                "decoding",
                vec![(
                    "comma_split_threshold".into(),
                    self.comma_split_threshold.to_string(),
                )],
            ),
            (
                "evaluation",
                vec![("smoothing".into(), self.smoothing.clone())],
            ),
        ];
        let mut out = String::new();
        for (name, pairs) in sections {
            let _ = writeln!(out, "[{name}]");
            let sorted: BTreeMap<String, String> = pairs.into_iter().collect();
            for (k, v) in sorted {
                let _ = writeln!(out, "{k} = {v}");
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.render();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, &text).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "[training]\nnot_a_key = 3\n").unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert!(format!("{err:#}").contains("unknown configuration key"));
    }

    #[test]
    fn set_overrides_values() {
        let mut cfg = RunConfig::default();
        cfg.set("training.epochs", "3").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert!(cfg.set("nope.nope", "1").is_err());
    }
}
