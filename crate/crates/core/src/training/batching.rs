//! Subword encoding of corpora and padded batch construction.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Corpus;
use crate::models::Batch;
use crate::subword::{SubwordModel, BOS_ID, EOS_ID, PAD_ID};

/// One sentence pair as subword ids, before framing and padding.
#[derive(Debug, Clone)]
pub struct EncodedPair {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

/// Encode a corpus with the tokenizer pair. Pairs that would not fit the
/// model's positional budget (or encode to nothing) are dropped and
/// counted.
pub fn encode_corpus(
    corpus: &Corpus,
    src_tok: &SubwordModel,
    tgt_tok: &SubwordModel,
    max_positions: Option<usize>,
) -> (Vec<EncodedPair>, usize) {
    let mut out = Vec::with_capacity(corpus.len());
    let mut dropped = 0usize;
    for pair in &corpus.pairs {
        let src = src_tok.encode(&pair.source);
        let tgt = tgt_tok.encode(&pair.target);
        if src.is_empty() || tgt.is_empty() {
            dropped += 1;
            continue;
        }
        // Target rows carry one framing token (BOS on input, EOS on output).
        if let Some(max) = max_positions {
            if src.len() > max || tgt.len() + 1 > max {
                dropped += 1;
                continue;
            }
        }
        out.push(EncodedPair { src, tgt });
    }
    (out, dropped)
}

/// Split encoded pairs into padded batches. Order is a seeded shuffle of
/// the pair indices; the final short batch is kept. Every target row
/// begins with BOS and contains exactly one EOS.
pub fn make_batches(pairs: &[EncodedPair], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(|chunk| build_batch(pairs, chunk))
        .collect()
}

fn build_batch(pairs: &[EncodedPair], idx: &[usize]) -> Batch {
    let b = idx.len();
    let src_len = idx.iter().map(|&i| pairs[i].src.len()).max().unwrap_or(0);
    let tgt_len = idx.iter().map(|&i| pairs[i].tgt.len() + 1).max().unwrap_or(0);
    let mut src = vec![PAD_ID; b * src_len];
    let mut src_mask = vec![false; b * src_len];
    let mut tgt_in = vec![PAD_ID; b * tgt_len];
    let mut tgt_out = vec![PAD_ID; b * tgt_len];
    let mut tgt_mask = vec![false; b * tgt_len];
    for (row, &i) in idx.iter().enumerate() {
        let pair = &pairs[i];
        for (t, &id) in pair.src.iter().enumerate() {
            src[row * src_len + t] = id;
            src_mask[row * src_len + t] = true;
        }
        tgt_in[row * tgt_len] = BOS_ID;
        for (t, &id) in pair.tgt.iter().enumerate() {
            tgt_in[row * tgt_len + t + 1] = id;
            tgt_out[row * tgt_len + t] = id;
        }
        tgt_out[row * tgt_len + pair.tgt.len()] = EOS_ID;
        for t in 0..=pair.tgt.len() {
            tgt_mask[row * tgt_len + t] = true;
        }
    }
    Batch {
        batch: b,
        src_len,
        tgt_len,
        src,
        src_mask,
        tgt_in,
        tgt_out,
        tgt_mask,
    }
}
