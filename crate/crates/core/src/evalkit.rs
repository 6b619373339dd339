//! Corpus-level BLEU (4-gram, single reference, brevity penalty) and
//! experiment reporting.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::corpus::Corpus;
use crate::decoding::{DecodeConfig, DecodeError, TranslationSession};
use crate::scalar::Scalar;

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("hypothesis/reference length mismatch: {hyps} vs {refs} lines")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("cannot score an empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// Smoothing for the modified precisions. `None` is the canonical
/// definition (any zero precision zeroes the score). `AddOne` adds one
/// to numerator and denominator for orders above 1; it is not canonical
/// BLEU and exists for tiny desk corpora where 4-gram matches are rare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Smoothing {
    #[default]
    None,
    AddOne,
}

/// Corpus BLEU with its parts: modified precisions p1..p4, brevity
/// penalty, and length statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    /// In [0, 100].
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn tokens(line: &str) -> Vec<&str> {
    line.split_whitespace().collect()
}

fn ngram_counts<'a>(toks: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut counts = HashMap::new();
    if toks.len() >= n {
        for window in toks.windows(n) {
            *counts.entry(window.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-summed clipped n-gram matches and total hypothesis n-grams.
/// Hypothesis counts are clipped per sentence by the reference counts.
pub fn modified_precision(hyps: &[String], refs: &[String], n: usize) -> (usize, usize) {
    let mut matches = 0usize;
    let mut total = 0usize;
    for (hyp, reference) in hyps.iter().zip(refs) {
        let hyp_toks = tokens(hyp);
        let ref_toks = tokens(reference);
        let hyp_counts = ngram_counts(&hyp_toks, n);
        let ref_counts = ngram_counts(&ref_toks, n);
        for (gram, count) in hyp_counts {
            total += count;
            if let Some(&rc) = ref_counts.get(&gram) {
                matches += count.min(rc);
            }
        }
    }
    (matches, total)
}

/// 1 when the hypothesis is at least as long as the reference, else
/// exp(1 - ref_len/hyp_len). An empty hypothesis gets 0 by convention.
pub fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        return 0.0;
    }
    if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

/// Corpus-level BLEU over detokenized surface text, uniform 1/4 weights
/// over orders 1..=4, single reference.
///
/// Orders with no hypothesis n-grams at all (every sentence shorter than
/// n) are excluded from the geometric mean, so a corpus compared against
/// itself always scores 100 even when it carries no 4-grams.
pub fn corpus_bleu(
    hyps: &[String],
    refs: &[String],
    smoothing: Smoothing,
) -> Result<BleuReport, EvalError> {
    if hyps.len() != refs.len() {
        return Err(EvalError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let hyp_len: usize = hyps.iter().map(|h| tokens(h).len()).sum();
    let ref_len: usize = refs.iter().map(|r| tokens(r).len()).sum();
    let mut precisions = [0.0f64; MAX_ORDER];
    let mut included = [false; MAX_ORDER];
    for n in 1..=MAX_ORDER {
        let (matches, total) = modified_precision(hyps, refs, n);
        if total == 0 {
            continue;
        }
        included[n - 1] = true;
        precisions[n - 1] = match smoothing {
            Smoothing::None => matches as f64 / total as f64,
            Smoothing::AddOne => {
                if n == 1 {
                    matches as f64 / total as f64
                } else {
                    (matches + 1) as f64 / (total + 1) as f64
                }
            }
        };
    }
    let bp = brevity_penalty(hyp_len, ref_len);
    let orders = included.iter().filter(|&&i| i).count();
    let zeroed = (0..MAX_ORDER).any(|i| included[i] && precisions[i] == 0.0);
    let bleu = if orders == 0 || zeroed || bp == 0.0 {
        0.0
    } else {
        let log_mean = (0..MAX_ORDER)
            .filter(|&i| included[i])
            .map(|i| precisions[i].ln())
            .sum::<f64>()
            / orders as f64;
        100.0 * bp * log_mean.exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty: bp,
        hyp_len,
        ref_len,
    })
}

/// One translated dev sentence alongside its reference.
#[derive(Debug, Clone)]
pub struct SentenceRecord {
    pub source: String,
    pub hypothesis: String,
    pub reference: String,
}

/// Translate every source line of `dev` and score against the targets.
/// BLEU is always computed on detokenized surface text.
pub fn evaluate_run<T: Scalar>(
    session: &TranslationSession<T>,
    dev: &Corpus,
    decode_config: &DecodeConfig,
    smoothing: Smoothing,
) -> Result<(BleuReport, Vec<SentenceRecord>), EvalError> {
    let mut hyps = Vec::with_capacity(dev.len());
    let mut refs = Vec::with_capacity(dev.len());
    let mut records = Vec::with_capacity(dev.len());
    for pair in &dev.pairs {
        let translation = session.translate(&pair.source, decode_config)?;
        records.push(SentenceRecord {
            source: pair.source.clone(),
            hypothesis: translation.text.clone(),
            reference: pair.target.clone(),
        });
        hyps.push(translation.text);
        refs.push(pair.target.clone());
    }
    let report = corpus_bleu(&hyps, &refs, smoothing)?;
    Ok((report, records))
}

/// One row of the experiment matrix.
#[derive(Debug, Clone)]
pub struct ExperimentRow {
    pub model: String,
    pub strategy: String,
    pub domain: String,
    pub split: String,
    pub report: BleuReport,
}

impl ExperimentRow {
    pub fn csv_header() -> &'static str {
        "model,strategy,domain,split,bleu,p1,p2,p3,p4,bp,hyp_len,ref_len"
    }

    pub fn csv_line(&self) -> String {
        let p = &self.report.precisions;
        format!(
            "{},{},{},{},{:.2},{:.4},{:.4},{:.4},{:.4},{:.4},{},{}",
            self.model,
            self.strategy,
            self.domain,
            self.split,
            self.report.bleu,
            p[0],
            p[1],
            p[2],
            p[3],
            self.report.brevity_penalty,
            self.report.hyp_len,
            self.report.ref_len
        )
    }
}

/// Plain-text table over a set of experiment rows.
pub fn experiment_table(rows: &[ExperimentRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<14} {:<10} {:<10} {:<6} {:>8}",
        "model", "strategy", "domain", "split", "bleu"
    );
    for row in rows {
        let _ = writeln!(
            s,
            "{:<14} {:<10} {:<10} {:<6} {:>8.2}",
            row.model, row.strategy, row.domain, row.split, row.report.bleu
        );
    }
    s
}

impl BleuReport {
    pub fn table(&self) -> String {
        let p = &self.precisions;
        format!(
            "BLEU = {:.2}  (p1={:.1} p2={:.1} p3={:.1} p4={:.1}, BP={:.3}, hyp_len={}, ref_len={})\n",
            self.bleu,
            100.0 * p[0],
            100.0 * p[1],
            100.0 * p[2],
            100.0 * p[3],
            self.brevity_penalty,
            self.hyp_len,
            self.ref_len
        )
    }

    pub fn key_values(&self) -> Vec<(String, String)> {
        let p = &self.precisions;
        vec![
            ("bleu".into(), format!("{:.2}", self.bleu)),
            ("p1".into(), format!("{:.4}", p[0])),
            ("p2".into(), format!("{:.4}", p[1])),
            ("p3".into(), format!("{:.4}", p[2])),
            ("p4".into(), format!("{:.4}", p[3])),
            ("bp".into(), format!("{:.4}", self.brevity_penalty)),
            ("hyp_len".into(), self.hyp_len.to_string()),
            ("ref_len".into(), self.ref_len.to_string()),
        ]
    }
}
