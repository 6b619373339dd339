//! Greedy autoregressive decoding, the comma-split heuristic for long
//! inputs, and detokenization back to surface text.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::corpus::normalize_text;
use crate::models::{AnyModel, ModelError};
use crate::scalar::Scalar;
use crate::subword::{SubwordError, SubwordModel, TokenizerPair};
use crate::training::{Checkpoint, CheckpointError};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Subword(#[from] SubwordError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{side} tokenizer fingerprint {got} does not match the checkpoint ({expected})")]
    FingerprintMismatch {
        side: &'static str,
        got: String,
        expected: String,
    },
    #[error("invalid decode configuration: {0}")]
    Config(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Decoding knobs. With `max_len` unset, the cap is
/// `2 * source subword length + 8`.
#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub max_len: Option<usize>,
    /// Inputs longer than this many words (and containing a comma) are
    /// split at commas and translated segment by segment.
    pub comma_split_threshold: usize,
    /// Joiner between segment translations.
    pub joiner: String,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            max_len: None,
            comma_split_threshold: 20,
            joiner: ", ".to_string(),
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.comma_split_threshold < 1 {
            return Err(DecodeError::Config(
                "comma_split_threshold must be at least 1".into(),
            ));
        }
        if let Some(m) = self.max_len {
            if m < 1 {
                return Err(DecodeError::Config("max_len must be at least 1".into()));
            }
        }
        Ok(())
    }

    fn cap_for(&self, src_subwords: usize) -> usize {
        self.max_len.unwrap_or(2 * src_subwords + 8)
    }
}

/// Result of translating one input, with instrumentation for the
/// comma-split path.
#[derive(Debug, Clone, PartialEq)]
pub struct Translation {
    pub text: String,
    /// Segments actually translated (1 on the non-split path).
    pub segments: usize,
    /// Greedy decoder invocations (equals `segments`).
    pub decode_calls: usize,
}

/// A frozen model plus the tokenizer pair it was trained with.
/// Construction from a checkpoint verifies tokenizer fingerprints.
pub struct TranslationSession<T: Scalar> {
    model: AnyModel<T>,
    tokenizers: TokenizerPair,
}

impl<T: Scalar> TranslationSession<T> {
    pub fn from_checkpoint(
        checkpoint: &Checkpoint,
        tokenizers: TokenizerPair,
    ) -> Result<Self, DecodeError> {
        let (src_fp, tgt_fp) = tokenizers.fingerprints();
        if src_fp != checkpoint.meta.src_tokenizer_fingerprint {
            return Err(DecodeError::FingerprintMismatch {
                side: "source",
                got: src_fp,
                expected: checkpoint.meta.src_tokenizer_fingerprint.clone(),
            });
        }
        if tgt_fp != checkpoint.meta.tgt_tokenizer_fingerprint {
            return Err(DecodeError::FingerprintMismatch {
                side: "target",
                got: tgt_fp,
                expected: checkpoint.meta.tgt_tokenizer_fingerprint.clone(),
            });
        }
        let model = checkpoint.build_model::<T>()?;
        Ok(TranslationSession { model, tokenizers })
    }

    /// Assemble a session without fingerprint checks (freshly trained
    /// model still in memory).
    pub fn from_parts(model: AnyModel<T>, tokenizers: TokenizerPair) -> Self {
        TranslationSession { model, tokenizers }
    }

    pub fn model(&self) -> &AnyModel<T> {
        &self.model
    }

    pub fn tokenizers(&self) -> &TokenizerPair {
        &self.tokenizers
    }

    /// Greedy-decode target ids for already-encoded source ids.
    pub fn greedy_decode(
        &self,
        src_ids: &[u32],
        config: &DecodeConfig,
    ) -> Result<Vec<u32>, DecodeError> {
        Ok(self
            .model
            .greedy_decode(src_ids, config.cap_for(src_ids.len()))?)
    }

    fn translate_segment(
        &self,
        normalized: &str,
        config: &DecodeConfig,
        calls: &mut usize,
    ) -> Result<String, DecodeError> {
        let ids = self.tokenizers.source.encode(normalized);
        if ids.is_empty() {
            return Ok(String::new());
        }
        *calls += 1;
        let out = self.greedy_decode(&ids, config)?;
        Ok(self.tokenizers.target.decode(&out)?)
    }

    /// Translate one raw sentence. Inputs at most `comma_split_threshold`
    /// words long (or without any comma) go through a single decode;
    /// longer ones are split at commas, translated independently, and
    /// joined with the configured joiner in source order.
    pub fn translate(&self, raw: &str, config: &DecodeConfig) -> Result<Translation, DecodeError> {
        config.validate()?;
        let normalized = normalize_text(raw);
        if normalized.is_empty() {
            return Ok(Translation {
                text: String::new(),
                segments: 0,
                decode_calls: 0,
            });
        }
        let words = normalized.split_whitespace().count();
        let mut calls = 0usize;
        if words <= config.comma_split_threshold || !normalized.contains(',') {
            let text = self.translate_segment(&normalized, config, &mut calls)?;
            return Ok(Translation {
                text,
                segments: 1,
                decode_calls: calls,
            });
        }
        let mut outputs = Vec::new();
        for segment in normalized.split(',') {
            let segment = segment.trim();
            if segment.is_empty() {
                continue;
            }
            outputs.push(self.translate_segment(segment, config, &mut calls)?);
        }
        Ok(Translation {
            text: outputs.join(&config.joiner),
            segments: outputs.len(),
            decode_calls: calls,
        })
    }

    /// Translate a file of one source sentence per line; the output has
    /// the same line count, LF endings.
    pub fn translate_file(
        &self,
        input: &Path,
        output: &Path,
        config: &DecodeConfig,
    ) -> Result<usize, DecodeError> {
        let text = fs::read_to_string(input).map_err(|source| DecodeError::Io {
            path: input.to_path_buf(),
            source,
        })?;
        let mut lines = Vec::new();
        for line in text.lines() {
            lines.push(self.translate(line, config)?.text);
        }
        let mut body = lines.join("\n");
        if !body.is_empty() {
            body.push('\n');
        }
        fs::write(output, body).map_err(|source| DecodeError::Io {
            path: output.to_path_buf(),
            source,
        })?;
        Ok(lines.len())
    }
}

/// Surface text from target-side subword ids; boundary markers become
/// spaces and the ends are trimmed.
pub fn detokenize(tokenizer: &SubwordModel, ids: &[u32]) -> Result<String, SubwordError> {
    tokenizer.decode(ids)
}
