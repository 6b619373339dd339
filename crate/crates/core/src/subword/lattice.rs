//! Segmentation lattice over a single marker-prefixed word.
//!
//! Positions are character boundaries; every edge spells the exact
//! substring it spans, so any start-to-end path spells the input.

#![allow(clippy::needless_range_loop)]

use super::SubwordModel;

/// Log-probability assigned to an unknown-character edge. Far below any
/// trained piece so unknown fallback is only used when forced.
pub(crate) const UNK_EDGE_LOG: f64 = -1.1e4;

/// Segmentation scores closer than this are treated as tied. Paths over
/// the same piece multiset differ only by summation rounding (well under
/// this), while distinct multisets of real-valued log-probabilities land
/// far above it.
pub const TIE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Edge {
    pub len: usize,
    /// Piece index into the model, or `None` for the per-character
    /// unknown fallback.
    pub piece: Option<u32>,
    pub log_prob: f64,
}

pub(crate) struct Lattice {
    pub chars: Vec<char>,
    /// Outgoing edges per start position.
    pub starts: Vec<Vec<Edge>>,
}

impl Lattice {
    pub fn build(model: &SubwordModel, text: &str) -> Lattice {
        let chars: Vec<char> = text.chars().collect();
        let n = chars.len();
        let mut starts: Vec<Vec<Edge>> = vec![Vec::new(); n];
        let max_len = model.max_piece_chars().max(1);
        let mut buf = String::new();
        for i in 0..n {
            let mut has_len1 = false;
            buf.clear();
            for l in 1..=max_len.min(n - i) {
                buf.push(chars[i + l - 1]);
                if let Some(idx) = model.piece_index(&buf) {
                    starts[i].push(Edge {
                        len: l,
                        piece: Some(idx),
                        log_prob: model.piece_log_prob(idx),
                    });
                    if l == 1 {
                        has_len1 = true;
                    }
                }
            }
            if !has_len1 {
                starts[i].push(Edge {
                    len: 1,
                    piece: None,
                    log_prob: UNK_EDGE_LOG,
                });
            }
        }
        Lattice { chars, starts }
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    /// Maximum-score segmentation. Scores within [`TIE_EPS`] count as
    /// tied (segmentations using the same piece multiset sum to the same
    /// value up to rounding); ties break toward fewer pieces, then the
    /// lexicographically smallest first piece, which among edges at one
    /// position is the shorter edge.
    pub fn viterbi(&self) -> Vec<Edge> {
        let n = self.len();
        if n == 0 {
            return Vec::new();
        }
        // best[i]: (score, piece count, chosen edge) for the suffix at i.
        let mut best: Vec<(f64, usize, Option<Edge>)> = vec![(0.0, 0, None); n + 1];
        for i in (0..n).rev() {
            let mut chosen: Option<(f64, usize, Edge)> = None;
            for &edge in &self.starts[i] {
                let j = i + edge.len;
                let score = edge.log_prob + best[j].0;
                let count = best[j].1 + 1;
                let better = match &chosen {
                    None => true,
                    Some((s, c, e)) => {
                        if score > *s + TIE_EPS {
                            true
                        } else if score < *s - TIE_EPS {
                            false
                        } else {
                            count < *c || (count == *c && edge.len < e.len)
                        }
                    }
                };
                if better {
                    chosen = Some((score, count, edge));
                }
            }
            let (score, count, edge) = chosen.expect("every position has an outgoing edge");
            best[i] = (score, count, Some(edge));
        }
        let mut path = Vec::new();
        let mut pos = 0;
        while pos < n {
            let edge = best[pos].2.expect("path edge");
            path.push(edge);
            pos += edge.len;
        }
        path
    }

    /// Total log-probability of all segmentations (forward pass).
    pub fn log_z(&self) -> f64 {
        let n = self.len();
        let mut alpha = vec![f64::NEG_INFINITY; n + 1];
        alpha[0] = 0.0;
        for i in 0..n {
            if alpha[i] == f64::NEG_INFINITY {
                continue;
            }
            for edge in &self.starts[i] {
                let j = i + edge.len;
                alpha[j] = log_add(alpha[j], alpha[i] + edge.log_prob);
            }
        }
        alpha[n]
    }

    /// Like [`log_z`](Self::log_z) but with every edge of `skip` removed;
    /// used to price the removal of a piece from the vocabulary.
    pub fn log_z_without(&self, skip: u32) -> f64 {
        let n = self.len();
        let mut alpha = vec![f64::NEG_INFINITY; n + 1];
        alpha[0] = 0.0;
        for i in 0..n {
            if alpha[i] == f64::NEG_INFINITY {
                continue;
            }
            for edge in &self.starts[i] {
                if edge.piece == Some(skip) {
                    continue;
                }
                let j = i + edge.len;
                alpha[j] = log_add(alpha[j], alpha[i] + edge.log_prob);
            }
        }
        alpha[n]
    }

    /// Forward-backward pass: adds `weight` times the posterior occupancy
    /// of every piece edge into `expected`, and returns the word log-Z.
    pub fn accumulate_expected(&self, weight: f64, expected: &mut [f64]) -> f64 {
        let n = self.len();
        let mut alpha = vec![f64::NEG_INFINITY; n + 1];
        alpha[0] = 0.0;
        for i in 0..n {
            if alpha[i] == f64::NEG_INFINITY {
                continue;
            }
            for edge in &self.starts[i] {
                let j = i + edge.len;
                alpha[j] = log_add(alpha[j], alpha[i] + edge.log_prob);
            }
        }
        let mut beta = vec![f64::NEG_INFINITY; n + 1];
        beta[n] = 0.0;
        for i in (0..n).rev() {
            for edge in &self.starts[i] {
                let j = i + edge.len;
                if beta[j] == f64::NEG_INFINITY {
                    continue;
                }
                beta[i] = log_add(beta[i], edge.log_prob + beta[j]);
            }
        }
        let log_z = alpha[n];
        for i in 0..n {
            if alpha[i] == f64::NEG_INFINITY {
                continue;
            }
            for edge in &self.starts[i] {
                if let Some(idx) = edge.piece {
                    let j = i + edge.len;
                    if beta[j] == f64::NEG_INFINITY {
                        continue;
                    }
                    let post = (alpha[i] + edge.log_prob + beta[j] - log_z).exp();
                    expected[idx as usize] += weight * post;
                }
            }
        }
        log_z
    }
}

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}
