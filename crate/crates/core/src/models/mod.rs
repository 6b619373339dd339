//! The two seq2seq model families: a 1-layer bidirectional-encoder LSTM
//! with additive attention, and a pre-norm Transformer with multi-head
//! attention and sinusoidal positional encoding.

mod attention;
mod lstm;
mod transformer;

pub use attention::{
    additive_attention, causal_mask, multi_head_attention, positional_encoding, MhaParams,
};
pub use lstm::Lstm;
pub use transformer::Transformer;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{NodeId, ParamSet, Tape, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("batch row {row} has an empty (all-pad) source sequence")]
    EmptySequence { row: usize },
    #[error("sequence length {len} exceeds the positional table ({max} positions)")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("checkpoint parameter '{name}' has shape {got:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint is missing parameter '{name}'")]
    ParamMissing { name: String },
}

/// Which architecture a checkpoint or training run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lstm,
    Transformer,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Lstm => "lstm",
            ModelKind::Transformer => "transformer",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lstm" => Ok(ModelKind::Lstm),
            "transformer" => Ok(ModelKind::Transformer),
            other => Err(format!("unknown model family '{other}'")),
        }
    }
}

/// LSTM seq2seq configuration. The encoder is a single bidirectional
/// layer, the decoder a single unidirectional layer attending over
/// encoder states of width 2 x hidden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
}

impl LstmConfig {
    /// Desk-scale defaults: embed 32, hidden 64.
    pub fn desk(src_vocab: usize, tgt_vocab: usize) -> Self {
        LstmConfig {
            src_vocab,
            tgt_vocab,
            embed_dim: 32,
            hidden_dim: 64,
            encoder_layers: 1,
            decoder_layers: 1,
            dropout: 0.1,
        }
    }

    /// Full-scale defaults: embed 256, hidden 512.
    pub fn full_scale(src_vocab: usize, tgt_vocab: usize) -> Self {
        LstmConfig {
            embed_dim: 256,
            hidden_dim: 512,
            ..Self::desk(src_vocab, tgt_vocab)
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.src_vocab == 0 || self.tgt_vocab == 0 || self.embed_dim == 0 || self.hidden_dim == 0
        {
            return Err(ModelError::Config("all dimensions must be positive".into()));
        }
        if self.encoder_layers != 1 || self.decoder_layers != 1 {
            return Err(ModelError::Config(
                "this LSTM uses exactly one encoder layer (bidirectional) and one decoder layer"
                    .into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Transformer configuration: `layers` encoder and decoder layers,
/// pre-norm residual blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    pub dropout: f64,
}

impl TransformerConfig {
    /// Desk-scale defaults: 2 layers, model dim 32, 2 heads.
    pub fn desk(src_vocab: usize, tgt_vocab: usize) -> Self {
        TransformerConfig {
            src_vocab,
            tgt_vocab,
            layers: 2,
            model_dim: 32,
            heads: 2,
            ff_dim: 64,
            max_positions: 512,
            dropout: 0.1,
        }
    }

    /// Full-scale defaults: 6 layers, model dim 512, 8 heads, ff 2048.
    pub fn full_scale(src_vocab: usize, tgt_vocab: usize) -> Self {
        TransformerConfig {
            layers: 6,
            model_dim: 512,
            heads: 8,
            ff_dim: 2048,
            ..Self::desk(src_vocab, tgt_vocab)
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.src_vocab == 0
            || self.tgt_vocab == 0
            || self.layers == 0
            || self.model_dim == 0
            || self.heads == 0
            || self.ff_dim == 0
            || self.max_positions == 0
        {
            return Err(ModelError::Config("all dimensions must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "model_dim {} must be divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if !self.model_dim.is_multiple_of(2) {
            return Err(ModelError::Config(
                "model_dim must be even for sinusoidal positions".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Architecture-tagged configuration, as stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ModelConfig {
    Lstm(LstmConfig),
    Transformer(TransformerConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Lstm(_) => ModelKind::Lstm,
            ModelConfig::Transformer(_) => ModelKind::Transformer,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            ModelConfig::Lstm(c) => c.validate(),
            ModelConfig::Transformer(c) => c.validate(),
        }
    }

    pub fn vocab_sizes(&self) -> (usize, usize) {
        match self {
            ModelConfig::Lstm(c) => (c.src_vocab, c.tgt_vocab),
            ModelConfig::Transformer(c) => (c.src_vocab, c.tgt_vocab),
        }
    }
}

/// One padded training batch, row-major by batch row.
///
/// `tgt_in` rows start with BOS; `tgt_out` rows end the real tokens with
/// EOS. Masks are true at real positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<u32>,
    pub src_mask: Vec<bool>,
    pub tgt_in: Vec<u32>,
    pub tgt_out: Vec<u32>,
    pub tgt_mask: Vec<bool>,
}

impl Batch {
    pub fn validate(&self) -> Result<(), ModelError> {
        for b in 0..self.batch {
            let src_real = (0..self.src_len).any(|t| self.src_mask[b * self.src_len + t]);
            if !src_real {
                return Err(ModelError::EmptySequence { row: b });
            }
        }
        Ok(())
    }
}

/// Dropout switch for a forward pass. Gradient checks and decoding run
/// in `Eval`; training threads a seeded generator through.
pub enum RunMode<'a> {
    Train {
        dropout: f64,
        rng: &'a mut ChaCha8Rng,
    },
    Eval,
}

impl RunMode<'_> {
    pub(crate) fn apply<T: Scalar>(
        &mut self,
        tape: &mut Tape<T>,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        match self {
            RunMode::Train { dropout, rng } if *dropout > 0.0 => tape.dropout(x, *dropout, rng),
            _ => Ok(x),
        }
    }
}

/// A teacher-forced forward pass, ready for `backward`.
pub struct LossGraph<T> {
    pub tape: Tape<T>,
    pub loss: NodeId,
    /// Tape nodes of the model parameters, in parameter-set order.
    pub param_nodes: Vec<NodeId>,
}

impl<T: Scalar> LossGraph<T> {
    pub fn loss_value(&self) -> f64 {
        self.tape.value(self.loss).item().as_f64()
    }
}

/// Either model family behind one interface.
#[derive(Debug)]
pub enum AnyModel<T: Scalar> {
    Lstm(Lstm<T>),
    Transformer(Transformer<T>),
}

impl<T: Scalar> AnyModel<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        Ok(match config {
            ModelConfig::Lstm(c) => AnyModel::Lstm(Lstm::new(c.clone(), seed)?),
            ModelConfig::Transformer(c) => AnyModel::Transformer(Transformer::new(c.clone(), seed)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Lstm(_) => ModelKind::Lstm,
            AnyModel::Transformer(_) => ModelKind::Transformer,
        }
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            AnyModel::Lstm(m) => ModelConfig::Lstm(m.config().clone()),
            AnyModel::Transformer(m) => ModelConfig::Transformer(m.config().clone()),
        }
    }

    pub fn params(&self) -> &ParamSet<T> {
        match self {
            AnyModel::Lstm(m) => m.params(),
            AnyModel::Transformer(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        match self {
            AnyModel::Lstm(m) => m.params_mut(),
            AnyModel::Transformer(m) => m.params_mut(),
        }
    }

    pub fn forward_loss(&self, batch: &Batch, mode: &mut RunMode<'_>) -> Result<LossGraph<T>, ModelError> {
        match self {
            AnyModel::Lstm(m) => m.forward_loss(batch, mode),
            AnyModel::Transformer(m) => m.forward_loss(batch, mode),
        }
    }

    /// Teacher-forced logits for one batch, `[batch * tgt_len, tgt_vocab]`
    /// row-major by batch, without the loss head.
    pub fn forward_logits(&self, batch: &Batch) -> Result<Vec<f64>, ModelError> {
        match self {
            AnyModel::Lstm(m) => m.forward_logits(batch),
            AnyModel::Transformer(m) => m.forward_logits(batch),
        }
    }

    pub fn greedy_decode(&self, src_ids: &[u32], max_len: usize) -> Result<Vec<u32>, ModelError> {
        match self {
            AnyModel::Lstm(m) => m.greedy_decode(src_ids, max_len),
            AnyModel::Transformer(m) => m.greedy_decode(src_ids, max_len),
        }
    }

    /// Overwrite every parameter from named f32 arrays (checkpoint
    /// entries). Every model parameter must be present with its exact
    /// shape; unknown entries are rejected.
    pub fn load_params(
        &mut self,
        entries: &[(String, Vec<usize>, Vec<f32>)],
    ) -> Result<(), ModelError> {
        for (name, _, _) in entries {
            if self.params().by_name(name).is_none() {
                return Err(ModelError::Config(format!(
                    "checkpoint contains unknown parameter '{name}'"
                )));
            }
        }
        let expected: Vec<(String, Vec<usize>)> = self
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect();
        for (name, shape) in expected {
            let entry = entries
                .iter()
                .find(|(n, _, _)| *n == name)
                .ok_or_else(|| ModelError::ParamMissing { name: name.clone() })?;
            if entry.1 != shape {
                return Err(ModelError::ParamShape {
                    name,
                    got: entry.1.clone(),
                    expected: shape,
                });
            }
            let data: Vec<T> = entry.2.iter().map(|&v| T::from_f32(v)).collect();
            self.params_mut().by_name_mut(&entry.0).unwrap().value =
                crate::tensor::Tensor::from_vec(entry.1.clone(), data)
                    .expect("shape already validated");
        }
        Ok(())
    }
}

/// Argmax with ties resolved toward the lowest token id.
pub(crate) fn argmax_lowest_id<T: Scalar>(row: &[T]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_take_lowest_id() {
        assert_eq!(argmax_lowest_id(&[1.0f32, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_lowest_id(&[5.0f32]), 0);
    }

    #[test]
    fn transformer_config_rejects_indivisible_heads_and_odd_dim() {
        let mut cfg = TransformerConfig::desk(10, 10);
        cfg.model_dim = 30;
        cfg.heads = 4;
        assert!(cfg.validate().is_err());
        cfg.model_dim = 34;
        cfg.heads = 2;
        assert!(cfg.validate().is_ok());
        cfg.model_dim = 33;
        cfg.heads = 3;
        assert!(cfg.validate().is_err(), "odd model_dim must be rejected");
    }

    #[test]
    fn lstm_config_pins_single_layers() {
        let mut cfg = LstmConfig::desk(10, 10);
        assert!(cfg.validate().is_ok());
        cfg.encoder_layers = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn full_scale_presets_construct_and_run_forward() {
        // Full-sized dimensions with a tiny vocab: one forward pass each,
        // just to prove the large presets are wired correctly.
        let batch = Batch {
            batch: 1,
            src_len: 3,
            tgt_len: 3,
            src: vec![4, 5, 6],
            src_mask: vec![true; 3],
            tgt_in: vec![2, 4, 5],
            tgt_out: vec![4, 5, 3],
            tgt_mask: vec![true; 3],
        };
        let lstm_cfg = LstmConfig::full_scale(16, 16);
        assert_eq!((lstm_cfg.embed_dim, lstm_cfg.hidden_dim), (256, 512));
        let lstm = AnyModel::<f32>::new(&ModelConfig::Lstm(lstm_cfg), 1).unwrap();
        assert!(lstm
            .forward_loss(&batch, &mut RunMode::Eval)
            .unwrap()
            .loss_value()
            .is_finite());

        let tf_cfg = TransformerConfig::full_scale(16, 16);
        assert_eq!(
            (tf_cfg.layers, tf_cfg.model_dim, tf_cfg.heads, tf_cfg.ff_dim),
            (6, 512, 8, 2048)
        );
        let tf = AnyModel::<f32>::new(&ModelConfig::Transformer(tf_cfg), 1).unwrap();
        assert!(tf
            .forward_loss(&batch, &mut RunMode::Eval)
            .unwrap()
            .loss_value()
            .is_finite());
    }

    #[test]
    fn load_params_validates_names_and_shapes() {
        let cfg = ModelConfig::Lstm(LstmConfig {
            src_vocab: 8,
            tgt_vocab: 8,
            embed_dim: 4,
            hidden_dim: 4,
            encoder_layers: 1,
            decoder_layers: 1,
            dropout: 0.0,
        });
        let mut model = AnyModel::<f32>::new(&cfg, 3).unwrap();
        let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec(), p.value.data().to_vec()))
            .collect();
        assert!(model.load_params(&entries).is_ok());

        let mut wrong_shape = entries.clone();
        wrong_shape[0].1 = vec![1, 1];
        wrong_shape[0].2 = vec![0.0];
        let err = model.load_params(&wrong_shape).unwrap_err();
        assert!(err.to_string().contains(&entries[0].0));

        entries.push(("not_a_param".into(), vec![1], vec![0.0]));
        assert!(model.load_params(&entries).is_err());
    }
}
