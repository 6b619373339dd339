//! Unigram-language-model subword tokenizer.
//!
//! A [`SubwordModel`] is a ranked piece inventory with log-probabilities.
//! Segmentation is maximum-likelihood Viterbi over a lattice; training is
//! EM with likelihood-based pruning ([`train_unigram`]). Word boundaries are
//! encoded with U+2581 so detokenization is lossless.

mod lattice;
mod trainer;

pub use lattice::TIE_EPS;
pub use trainer::{
    em_step, prune_vocab, seed_vocab, train_unigram, word_counts, EmStep, UnigramTrainOptions,
};

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use lattice::Lattice;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
/// Number of reserved ids before piece ids start.
pub const NUM_SPECIALS: u32 = 4;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";

/// Word-boundary marker; every word is prefixed with it before
/// segmentation and it maps back to a space on decode.
pub const BOUNDARY: char = '\u{2581}';

#[derive(Debug, Error)]
pub enum SubwordError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("vocab size {vocab_size} is smaller than the character inventory ({chars} covered characters)")]
    VocabTooSmall { vocab_size: usize, chars: usize },
    #[error("EM likelihood decreased from {prev} to {next}; lattice accounting is inconsistent")]
    LikelihoodDecreased { prev: f64, next: f64 },
    #[error("invalid token id {0}")]
    InvalidId(u32),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed model file at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Source- and target-side tokenizers trained for one experiment.
/// Each language side is trained separately on its own half of the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerPair {
    pub source: SubwordModel,
    pub target: SubwordModel,
}

impl TokenizerPair {
    pub fn fingerprints(&self) -> (String, String) {
        (self.source.fingerprint(), self.target.fingerprint())
    }
}

/// Ranked piece inventory with log-probabilities plus the reserved
/// special ids. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct SubwordModel {
    pieces: Vec<(String, f64)>,
    index: HashMap<String, u32>,
    max_piece_chars: usize,
}

impl SubwordModel {
    pub fn from_pieces(pieces: Vec<(String, f64)>) -> Self {
        let mut index = HashMap::with_capacity(pieces.len());
        let mut max_piece_chars = 1;
        for (i, (piece, _)) in pieces.iter().enumerate() {
            index.insert(piece.clone(), i as u32);
            max_piece_chars = max_piece_chars.max(piece.chars().count());
        }
        SubwordModel {
            pieces,
            index,
            max_piece_chars,
        }
    }

    pub fn piece_count(&self) -> usize {
        self.pieces.len()
    }

    /// Total id space: specials plus pieces.
    pub fn vocab_size(&self) -> usize {
        self.pieces.len() + NUM_SPECIALS as usize
    }

    pub fn pieces(&self) -> &[(String, f64)] {
        &self.pieces
    }

    pub fn piece_index(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn piece_log_prob(&self, idx: u32) -> f64 {
        self.pieces[idx as usize].1
    }

    pub(crate) fn max_piece_chars(&self) -> usize {
        self.max_piece_chars
    }

    /// Sum of piece probabilities; 1.0 for a trained model.
    pub fn probability_mass(&self) -> f64 {
        self.pieces.iter().map(|(_, lp)| lp.exp()).sum()
    }

    fn id_for_piece_idx(idx: u32) -> u32 {
        idx + NUM_SPECIALS
    }

    /// Maximum-likelihood segmentation of a literal string (no boundary
    /// handling). Characters not covered by any piece come back as
    /// [`UNK_ID`], one per character, so segmentation is total.
    pub fn viterbi_segment(&self, text: &str) -> Vec<u32> {
        if text.is_empty() {
            return Vec::new();
        }
        let lattice = Lattice::build(self, text);
        lattice
            .viterbi()
            .into_iter()
            .map(|edge| match edge.piece {
                Some(idx) => Self::id_for_piece_idx(idx),
                None => UNK_ID,
            })
            .collect()
    }

    /// Encode normalized text: each whitespace word is prefixed with the
    /// boundary marker and segmented independently. No BOS/EOS framing.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            let marked = format!("{BOUNDARY}{word}");
            ids.extend(self.viterbi_segment(&marked));
        }
        ids
    }

    /// Inverse of [`encode`](Self::encode) on covered text: pieces are
    /// concatenated, boundary markers become spaces, ends trimmed.
    pub fn decode(&self, ids: &[u32]) -> Result<String, SubwordError> {
        let mut surface = String::new();
        for &id in ids {
            match id {
                PAD_ID | BOS_ID | EOS_ID => {}
                UNK_ID => surface.push_str(UNK_TOKEN),
                _ => {
                    let idx = (id - NUM_SPECIALS) as usize;
                    match self.pieces.get(idx) {
                        Some((piece, _)) => surface.push_str(piece),
                        None => return Err(SubwordError::InvalidId(id)),
                    }
                }
            }
        }
        let replaced: String = surface
            .chars()
            .map(|c| if c == BOUNDARY { ' ' } else { c })
            .collect();
        Ok(replaced.trim().to_string())
    }

    // ── Serialization ────────────────────────────────────────────────

    /// Text form: a 4-line header naming the special tokens in id order,
    /// then one `piece<TAB>log_prob` line per piece in id order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for special in [PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN] {
            out.push_str(special);
            out.push('\n');
        }
        for (piece, lp) in &self.pieces {
            out.push_str(piece);
            out.push('\t');
            out.push_str(&format!("{lp}"));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, SubwordError> {
        let mut lines = text.lines().enumerate();
        for expected in [PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN] {
            match lines.next() {
                Some((_, line)) if line == expected => {}
                Some((i, line)) => {
                    return Err(SubwordError::Parse {
                        line: i + 1,
                        msg: format!("expected special token {expected}, found {line:?}"),
                    })
                }
                None => {
                    return Err(SubwordError::Parse {
                        line: 0,
                        msg: "missing special-token header".into(),
                    })
                }
            }
        }
        let mut pieces = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let (piece, lp) = line.split_once('\t').ok_or_else(|| SubwordError::Parse {
                line: i + 1,
                msg: "expected piece<TAB>log_prob".into(),
            })?;
            let lp: f64 = lp.parse().map_err(|e| SubwordError::Parse {
                line: i + 1,
                msg: format!("bad log-probability: {e}"),
            })?;
            pieces.push((piece.to_string(), lp));
        }
        Ok(SubwordModel::from_pieces(pieces))
    }

    pub fn save(&self, path: &Path) -> Result<(), SubwordError> {
        fs::write(path, self.to_text()).map_err(|source| SubwordError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, SubwordError> {
        let text = fs::read_to_string(path).map_err(|source| SubwordError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_text(&text)
    }

    /// SHA-256 of the serialized model; checkpoints pin tokenizers by it.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_text().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
