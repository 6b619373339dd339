//! Batched teacher-forced training with the three domain-adaptation
//! regimes (general-only, mixed with oversampling, fine-tuning),
//! validation-loss model selection, and checkpointing.

mod batching;
mod checkpoint;

pub use batching::{encode_corpus, make_batches, EncodedPair};
pub use checkpoint::{Checkpoint, CheckpointError, CheckpointMeta, NamedArray, FORMAT_VERSION, MAGIC};

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{mix_corpora, Corpus, CorpusError, Split};
use crate::models::{AnyModel, ModelConfig, ModelError, ModelKind, RunMode};
use crate::optim::{clip_global_norm, AdamConfig, AdamState, OptimError};
use crate::scalar::Scalar;
use crate::subword::TokenizerPair;
use crate::tensor::ParamSet;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training loss became non-finite at epoch {epoch}, batch {batch_index}")]
    NonFiniteLoss { epoch: usize, batch_index: usize },
    #[error("strategy '{strategy}' requires {what}")]
    MissingData {
        strategy: &'static str,
        what: &'static str,
    },
    #[error("base checkpoint is incompatible: {0}")]
    IncompatibleBase(String),
    #[error("no trainable pairs left after encoding (all dropped)")]
    NoTrainingData,
}

/// Which training regime to run.
#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    /// Train on the general corpus only; validate on general dev.
    GeneralOnly,
    /// Single training run over general data plus the in-domain corpus
    /// repeated `factor` times; validate on in-domain dev.
    Mixed { factor: usize },
    /// Continue training a general checkpoint on the in-domain corpus
    /// alone; validate on in-domain dev. Adam state is reset and the
    /// learning rate scaled down.
    FineTune { base: PathBuf, epochs: usize },
}

impl Strategy {
    pub fn label(&self) -> &'static str {
        match self {
            Strategy::GeneralOnly => "general",
            Strategy::Mixed { .. } => "mixed",
            Strategy::FineTune { .. } => "finetune",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub strategy: Strategy,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Global-norm gradient clip.
    pub clip_norm: f64,
    /// Fine-tuning runs at `learning_rate * finetune_lr_scale`.
    pub finetune_lr_scale: f64,
}

impl TrainConfig {
    /// Defaults: batch 16 at desk scale, 10 epochs, clip 5.0; learning
    /// rate 1e-3 for the LSTM and 1e-4 for the Transformer.
    pub fn new(model: ModelConfig, strategy: Strategy) -> Self {
        let learning_rate = match model.kind() {
            ModelKind::Lstm => 1e-3,
            ModelKind::Transformer => 1e-4,
        };
        TrainConfig {
            model,
            strategy,
            batch_size: 16,
            max_epochs: 10,
            learning_rate,
            seed: 42,
            clip_norm: 5.0,
            finetune_lr_scale: 0.3,
        }
    }
}

/// Corpora available to a training run. Strategies state which parts
/// they need; missing parts are an error at dispatch.
pub struct TrainData<'a> {
    pub general_train: &'a Corpus,
    pub general_dev: &'a Corpus,
    pub domain_train: Option<&'a Corpus>,
    pub domain_dev: Option<&'a Corpus>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// 1-based; the argmin of validation loss, earliest on ties.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub dropped_pairs: usize,
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>12} {:>12}", "epoch", "train loss", "val loss");
        for (i, e) in self.epochs.iter().enumerate() {
            let marker = if i + 1 == self.best_epoch { " *" } else { "" };
            let _ = writeln!(
                s,
                "{:<8} {:>12.6} {:>12.6}{}",
                i + 1,
                e.train_loss,
                e.val_loss,
                marker
            );
        }
        let _ = writeln!(s, "best epoch: {} (val loss {:.6})", self.best_epoch, self.best_val_loss);
        s
    }

    /// Deterministic key-value form; wall time is excluded on purpose so
    /// reruns produce byte-identical primary outputs.
    pub fn key_values(&self) -> Vec<(String, String)> {
        let mut kv = Vec::new();
        for (i, e) in self.epochs.iter().enumerate() {
            kv.push((format!("epoch.{}.train_loss", i + 1), format!("{:.6}", e.train_loss)));
            kv.push((format!("epoch.{}.val_loss", i + 1), format!("{:.6}", e.val_loss)));
        }
        kv.push(("best_epoch".into(), self.best_epoch.to_string()));
        kv.push(("best_val_loss".into(), format!("{:.6}", self.best_val_loss)));
        kv.push(("dropped_pairs".into(), self.dropped_pairs.to_string()));
        kv
    }
}

fn derive_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(salt)
        .rotate_left(17)
}

/// One teacher-forced pass over the batches with Adam updates.
/// Returns the pad-weighted mean training loss.
pub fn train_epoch<T: Scalar>(
    model: &mut AnyModel<T>,
    batches: &[crate::models::Batch],
    adam: &mut AdamState<T>,
    clip_norm: f64,
    dropout: f64,
    epoch: usize,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    let mut total_loss = 0.0f64;
    let mut total_tokens = 0usize;
    for (batch_index, batch) in batches.iter().enumerate() {
        let mut mode = RunMode::Train {
            dropout,
            rng: dropout_rng,
        };
        let graph = model.forward_loss(batch, &mut mode)?;
        let loss = graph.loss_value();
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, batch_index });
        }
        let mut tape = graph.tape;
        tape.backward(graph.loss).map_err(ModelError::from)?;
        let mut grads: Vec<Vec<T>> = graph
            .param_nodes
            .iter()
            .map(|&id| tape.grad_or_zeros(id))
            .collect();
        clip_global_norm(&mut grads, clip_norm);
        adam.step(model.params_mut(), &grads)?;
        let tokens = batch.tgt_mask.iter().filter(|&&m| m).count();
        total_loss += loss * tokens as f64;
        total_tokens += tokens;
    }
    Ok(total_loss / total_tokens.max(1) as f64)
}

/// Pad-weighted mean loss without updates, dropout off.
pub fn validation_loss<T: Scalar>(
    model: &AnyModel<T>,
    batches: &[crate::models::Batch],
) -> Result<f64, TrainError> {
    let mut total_loss = 0.0f64;
    let mut total_tokens = 0usize;
    for batch in batches {
        let graph = model.forward_loss(batch, &mut RunMode::Eval)?;
        let tokens = batch.tgt_mask.iter().filter(|&&m| m).count();
        total_loss += graph.loss_value() * tokens as f64;
        total_tokens += tokens;
    }
    Ok(total_loss / total_tokens.max(1) as f64)
}

/// Run the configured strategy end to end and return the checkpoint of
/// the best epoch (minimum validation loss, earliest on ties) plus the
/// per-epoch report.
pub fn run_strategy<T: Scalar>(
    cfg: &TrainConfig,
    data: &TrainData<'_>,
    tokenizers: &TokenizerPair,
) -> Result<(Checkpoint, TrainReport), TrainError> {
    let start = Instant::now();
    let empty_train = Corpus::new(Split::Train);
    let (src_fp, tgt_fp) = tokenizers.fingerprints();

    // Every non-finetune strategy builds its corpus through the same
    // mixing path, so Mixed with an empty domain corpus is exactly
    // GeneralOnly, loss trace included.
    let (train_corpus, val_corpus, epochs, lr, mut model, base_meta) = match &cfg.strategy {
        Strategy::GeneralOnly => {
            let mixed = mix_corpora(data.general_train, &empty_train, 1, cfg.seed)?;
            let model = AnyModel::<T>::new(&cfg.model, cfg.seed)?;
            (mixed, data.general_dev, cfg.max_epochs, cfg.learning_rate, model, None)
        }
        Strategy::Mixed { factor } => {
            let domain = data.domain_train.ok_or(TrainError::MissingData {
                strategy: "mixed",
                what: "an in-domain training corpus",
            })?;
            let dev = data.domain_dev.ok_or(TrainError::MissingData {
                strategy: "mixed",
                what: "an in-domain dev corpus",
            })?;
            let mixed = mix_corpora(data.general_train, domain, *factor, cfg.seed)?;
            let model = AnyModel::<T>::new(&cfg.model, cfg.seed)?;
            (mixed, dev, cfg.max_epochs, cfg.learning_rate, model, None)
        }
        Strategy::FineTune { base, epochs } => {
            let domain = data.domain_train.ok_or(TrainError::MissingData {
                strategy: "finetune",
                what: "an in-domain training corpus",
            })?;
            let dev = data.domain_dev.ok_or(TrainError::MissingData {
                strategy: "finetune",
                what: "an in-domain dev corpus",
            })?;
            let ckpt = Checkpoint::load(base)?;
            if ckpt.meta.model != cfg.model {
                return Err(TrainError::IncompatibleBase(format!(
                    "checkpoint was trained with a different model configuration ({:?})",
                    ckpt.meta.model.kind()
                )));
            }
            if ckpt.meta.src_tokenizer_fingerprint != src_fp
                || ckpt.meta.tgt_tokenizer_fingerprint != tgt_fp
            {
                return Err(TrainError::IncompatibleBase(
                    "tokenizer fingerprints do not match the base checkpoint".into(),
                ));
            }
            if *epochs == 0 {
                // Nothing to do: hand back the base checkpoint unchanged.
                let report = TrainReport {
                    epochs: Vec::new(),
                    best_epoch: ckpt.meta.epoch,
                    best_val_loss: ckpt.meta.val_loss,
                    dropped_pairs: 0,
                    wall_time_secs: start.elapsed().as_secs_f64(),
                };
                return Ok((ckpt, report));
            }
            let model = ckpt.build_model::<T>()?;
            (
                domain.clone(),
                dev,
                *epochs,
                cfg.learning_rate * cfg.finetune_lr_scale,
                model,
                Some(ckpt.meta),
            )
        }
    };

    let max_positions = match &cfg.model {
        ModelConfig::Transformer(c) => Some(c.max_positions),
        ModelConfig::Lstm(_) => None,
    };
    let (train_pairs, dropped_train) =
        encode_corpus(&train_corpus, &tokenizers.source, &tokenizers.target, max_positions);
    let (val_pairs, dropped_val) =
        encode_corpus(val_corpus, &tokenizers.source, &tokenizers.target, max_positions);
    if train_pairs.is_empty() {
        return Err(TrainError::NoTrainingData);
    }
    let mut val_batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xDE5));
    let val_batches = make_batches(&val_pairs, cfg.batch_size, &mut val_batch_rng);

    let dropout = match &cfg.model {
        ModelConfig::Lstm(c) => c.dropout,
        ModelConfig::Transformer(c) => c.dropout,
    };
    let mut adam = AdamState::new(AdamConfig::with_lr(lr), model.params());

    let mut stats = Vec::with_capacity(epochs);
    let mut best: Option<(usize, f64, ParamSet<T>)> = None;
    for epoch in 1..=epochs {
        let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        let batches = make_batches(&train_pairs, cfg.batch_size, &mut batch_rng);
        let mut dropout_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x10_000 + epoch as u64));
        let train_loss = train_epoch(
            &mut model,
            &batches,
            &mut adam,
            cfg.clip_norm,
            dropout,
            epoch,
            &mut dropout_rng,
        )?;
        let val_loss = if val_batches.is_empty() {
            train_loss
        } else {
            validation_loss(&model, &val_batches)?
        };
        stats.push(EpochStats {
            train_loss,
            val_loss,
        });
        let improved = match &best {
            None => true,
            Some((_, best_val, _)) => val_loss < *best_val,
        };
        if improved {
            best = Some((epoch, val_loss, model.params().clone()));
        }
    }

    let (best_epoch, best_val, best_params) = best.expect("at least one epoch ran");
    let meta = CheckpointMeta {
        model: cfg.model.clone(),
        epoch: best_epoch,
        val_loss: best_val,
        seed: cfg.seed,
        strategy: match base_meta {
            Some(base) => format!("{}+{}", base.strategy, cfg.strategy.label()),
            None => cfg.strategy.label().to_string(),
        },
        src_tokenizer_fingerprint: src_fp,
        tgt_tokenizer_fingerprint: tgt_fp,
    };
    let ckpt = Checkpoint::from_params(meta, &best_params);
    let report = TrainReport {
        epochs: stats,
        best_epoch,
        best_val_loss: best_val,
        dropped_pairs: dropped_train + dropped_val,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok((ckpt, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LstmConfig;
    use crate::subword::{train_unigram, UnigramTrainOptions};

    fn toy_corpus(n: usize, split: Split) -> Corpus {
        let words = ["aba", "bab", "abab", "ba", "ab"];
        Corpus::from_pairs(
            (0..n).map(|i| {
                let w1 = words[i % words.len()];
                let w2 = words[(i + 2) % words.len()];
                (format!("{w1} {w2}"), format!("{w2} {w1}"))
            }),
            "general",
            split,
        )
    }

    fn toy_tokenizers(corpus: &Corpus) -> TokenizerPair {
        let src_lines: Vec<&str> = corpus.source_lines().collect();
        let tgt_lines: Vec<&str> = corpus.target_lines().collect();
        TokenizerPair {
            source: train_unigram(&src_lines, &UnigramTrainOptions::with_vocab_size(24)).unwrap(),
            target: train_unigram(&tgt_lines, &UnigramTrainOptions::with_vocab_size(24)).unwrap(),
        }
    }

    fn toy_config(toks: &TokenizerPair, strategy: Strategy) -> TrainConfig {
        let cfg = LstmConfig {
            src_vocab: toks.source.vocab_size(),
            tgt_vocab: toks.target.vocab_size(),
            embed_dim: 8,
            hidden_dim: 12,
            encoder_layers: 1,
            decoder_layers: 1,
            dropout: 0.0,
        };
        let mut tc = TrainConfig::new(ModelConfig::Lstm(cfg), strategy);
        tc.batch_size = 4;
        tc.max_epochs = 3;
        tc.seed = 11;
        tc
    }

    #[test]
    fn uniform_random_model_loss_is_near_log_vocab() {
        let train = toy_corpus(12, Split::Train);
        let toks = toy_tokenizers(&train);
        let cfg = toy_config(&toks, Strategy::GeneralOnly);
        let model = AnyModel::<f32>::new(&cfg.model, 1).unwrap();
        let (pairs, _) = encode_corpus(&train, &toks.source, &toks.target, None);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = make_batches(&pairs, 4, &mut rng);
        let loss = validation_loss(&model, &batches).unwrap();
        let ln_v = (toks.target.vocab_size() as f64).ln();
        assert!(
            (loss - ln_v).abs() < 0.35 * ln_v,
            "fresh-model loss {loss} too far from ln(vocab) = {ln_v}"
        );
    }

    #[test]
    fn loss_decreases_and_trace_is_deterministic() {
        let train = toy_corpus(16, Split::Train);
        let dev = toy_corpus(6, Split::Dev);
        let toks = toy_tokenizers(&train);
        let mut cfg = toy_config(&toks, Strategy::GeneralOnly);
        cfg.max_epochs = 5;
        let data = TrainData {
            general_train: &train,
            general_dev: &dev,
            domain_train: None,
            domain_dev: None,
        };
        let (ckpt1, rep1) = run_strategy::<f32>(&cfg, &data, &toks).unwrap();
        let (ckpt2, rep2) = run_strategy::<f32>(&cfg, &data, &toks).unwrap();
        assert_eq!(rep1.epochs, rep2.epochs, "loss trace must be deterministic");
        assert_eq!(ckpt1.to_bytes(), ckpt2.to_bytes(), "checkpoints must be bitwise equal");
        let first = rep1.epochs.first().unwrap().train_loss;
        let last = rep1.epochs.last().unwrap().train_loss;
        assert!(last < first, "training loss should decrease: {first} -> {last}");
    }

    #[test]
    fn best_epoch_is_argmin_of_validation_loss() {
        let train = toy_corpus(16, Split::Train);
        let dev = toy_corpus(6, Split::Dev);
        let toks = toy_tokenizers(&train);
        let mut cfg = toy_config(&toks, Strategy::GeneralOnly);
        cfg.max_epochs = 4;
        let data = TrainData {
            general_train: &train,
            general_dev: &dev,
            domain_train: None,
            domain_dev: None,
        };
        let (ckpt, report) = run_strategy::<f32>(&cfg, &data, &toks).unwrap();
        let min = report
            .epochs
            .iter()
            .map(|e| e.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(report.best_val_loss, min);
        assert_eq!(
            report.epochs[report.best_epoch - 1].val_loss,
            report.best_val_loss
        );
        assert_eq!(ckpt.meta.epoch, report.best_epoch);
    }

    #[test]
    fn mixed_with_factor_one_and_empty_domain_equals_general_only() {
        let train = toy_corpus(12, Split::Train);
        let dev = toy_corpus(5, Split::Dev);
        let toks = toy_tokenizers(&train);
        let empty = Corpus::new(Split::Train);
        let cfg_gen = toy_config(&toks, Strategy::GeneralOnly);
        let cfg_mixed = toy_config(&toks, Strategy::Mixed { factor: 1 });
        let data_gen = TrainData {
            general_train: &train,
            general_dev: &dev,
            domain_train: None,
            domain_dev: None,
        };
        let data_mixed = TrainData {
            general_train: &train,
            general_dev: &dev,
            domain_train: Some(&empty),
            domain_dev: Some(&dev),
        };
        let (ck_gen, rep_gen) = run_strategy::<f32>(&cfg_gen, &data_gen, &toks).unwrap();
        let (ck_mixed, rep_mixed) = run_strategy::<f32>(&cfg_mixed, &data_mixed, &toks).unwrap();
        assert_eq!(rep_gen.epochs, rep_mixed.epochs);
        assert_eq!(ck_gen.params, ck_mixed.params);
    }

    #[test]
    fn finetune_zero_epochs_returns_base_unchanged() {
        let train = toy_corpus(10, Split::Train);
        let dev = toy_corpus(4, Split::Dev);
        let toks = toy_tokenizers(&train);
        let cfg = toy_config(&toks, Strategy::GeneralOnly);
        let data = TrainData {
            general_train: &train,
            general_dev: &dev,
            domain_train: None,
            domain_dev: None,
        };
        let (base, _) = run_strategy::<f32>(&cfg, &data, &toks).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.nmtc");
        base.save(&path).unwrap();

        let cfg_ft = toy_config(
            &toks,
            Strategy::FineTune {
                base: path,
                epochs: 0,
            },
        );
        let data_ft = TrainData {
            general_train: &train,
            general_dev: &dev,
            domain_train: Some(&train),
            domain_dev: Some(&dev),
        };
        let (ft, report) = run_strategy::<f32>(&cfg_ft, &data_ft, &toks).unwrap();
        assert_eq!(ft.to_bytes(), base.to_bytes());
        assert!(report.epochs.is_empty());
    }

    #[test]
    fn finetune_requires_domain_corpora() {
        let train = toy_corpus(10, Split::Train);
        let dev = toy_corpus(4, Split::Dev);
        let toks = toy_tokenizers(&train);
        let cfg = toy_config(
            &toks,
            Strategy::FineTune {
                base: PathBuf::from("missing.nmtc"),
                epochs: 1,
            },
        );
        let data = TrainData {
            general_train: &train,
            general_dev: &dev,
            domain_train: None,
            domain_dev: None,
        };
        assert!(matches!(
            run_strategy::<f32>(&cfg, &data, &toks),
            Err(TrainError::MissingData { .. })
        ));
    }

    #[test]
    fn finetune_with_missing_base_file_fails_with_load_error() {
        let train = toy_corpus(10, Split::Train);
        let dev = toy_corpus(4, Split::Dev);
        let toks = toy_tokenizers(&train);
        let cfg = toy_config(
            &toks,
            Strategy::FineTune {
                base: PathBuf::from("does-not-exist.nmtc"),
                epochs: 1,
            },
        );
        let data = TrainData {
            general_train: &train,
            general_dev: &dev,
            domain_train: Some(&train),
            domain_dev: Some(&dev),
        };
        assert!(matches!(
            run_strategy::<f32>(&cfg, &data, &toks),
            Err(TrainError::Checkpoint(_))
        ));
    }
}
