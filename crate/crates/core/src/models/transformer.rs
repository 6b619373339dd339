//! Pre-norm Transformer encoder-decoder with sinusoidal positions,
//! multi-head self- and cross-attention, and masked decoder self-attention.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention::{multi_head_attention, positional_encoding, MhaParams};
use super::{argmax_lowest_id, Batch, LossGraph, ModelError, RunMode, TransformerConfig};
use crate::scalar::Scalar;
use crate::subword::{BOS_ID, EOS_ID};
use crate::tensor::{normal_embedding, xavier_uniform, NodeId, ParamSet, Tape, Tensor};

#[derive(Debug, Clone, Copy)]
struct MhaIdx {
    w_q: usize,
    b_q: usize,
    w_k: usize,
    b_k: usize,
    w_v: usize,
    b_v: usize,
    w_o: usize,
    b_o: usize,
}

#[derive(Debug, Clone, Copy)]
struct EncLayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    attn: MhaIdx,
    ln2_g: usize,
    ln2_b: usize,
    ff_w1: usize,
    ff_b1: usize,
    ff_w2: usize,
    ff_b2: usize,
}

#[derive(Debug, Clone, Copy)]
struct DecLayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    self_attn: MhaIdx,
    ln2_g: usize,
    ln2_b: usize,
    cross_attn: MhaIdx,
    ln3_g: usize,
    ln3_b: usize,
    ff_w1: usize,
    ff_b1: usize,
    ff_w2: usize,
    ff_b2: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    emb_src: usize,
    emb_tgt: usize,
    enc: Vec<EncLayerIdx>,
    enc_ln_g: usize,
    enc_ln_b: usize,
    dec: Vec<DecLayerIdx>,
    dec_ln_g: usize,
    dec_ln_b: usize,
    out_w: usize,
    out_b: usize,
}

#[derive(Debug)]
pub struct Transformer<T: Scalar> {
    cfg: TransformerConfig,
    params: ParamSet<T>,
    layout: Layout,
    positions: Tensor<T>,
}

fn push_mha<T: Scalar>(
    p: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    dim: usize,
) -> MhaIdx {
    MhaIdx {
        w_q: p.push(format!("{prefix}.w_q"), xavier_uniform(rng, dim, dim)),
        b_q: p.push(format!("{prefix}.b_q"), Tensor::zeros(vec![dim])),
        w_k: p.push(format!("{prefix}.w_k"), xavier_uniform(rng, dim, dim)),
        b_k: p.push(format!("{prefix}.b_k"), Tensor::zeros(vec![dim])),
        w_v: p.push(format!("{prefix}.w_v"), xavier_uniform(rng, dim, dim)),
        b_v: p.push(format!("{prefix}.b_v"), Tensor::zeros(vec![dim])),
        w_o: p.push(format!("{prefix}.w_o"), xavier_uniform(rng, dim, dim)),
        b_o: p.push(format!("{prefix}.b_o"), Tensor::zeros(vec![dim])),
    }
}

fn push_norm<T: Scalar>(p: &mut ParamSet<T>, prefix: &str, dim: usize) -> (usize, usize) {
    (
        p.push(format!("{prefix}.g"), Tensor::full(vec![dim], T::one())),
        p.push(format!("{prefix}.b"), Tensor::zeros(vec![dim])),
    )
}

impl<T: Scalar> Transformer<T> {
    pub fn new(cfg: TransformerConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.model_dim;
        let f = cfg.ff_dim;
        let mut p = ParamSet::new();
        let emb_src = p.push("emb_src", normal_embedding(&mut rng, cfg.src_vocab, d));
        let emb_tgt = p.push("emb_tgt", normal_embedding(&mut rng, cfg.tgt_vocab, d));
        let mut enc = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let (ln1_g, ln1_b) = push_norm(&mut p, &format!("enc.{l}.ln1"), d);
            let attn = push_mha(&mut p, &mut rng, &format!("enc.{l}.attn"), d);
            let (ln2_g, ln2_b) = push_norm(&mut p, &format!("enc.{l}.ln2"), d);
            let ff_w1 = p.push(format!("enc.{l}.ff.w1"), xavier_uniform(&mut rng, d, f));
            let ff_b1 = p.push(format!("enc.{l}.ff.b1"), Tensor::zeros(vec![f]));
            let ff_w2 = p.push(format!("enc.{l}.ff.w2"), xavier_uniform(&mut rng, f, d));
            let ff_b2 = p.push(format!("enc.{l}.ff.b2"), Tensor::zeros(vec![d]));
            enc.push(EncLayerIdx {
                ln1_g,
                ln1_b,
                attn,
                ln2_g,
                ln2_b,
                ff_w1,
                ff_b1,
                ff_w2,
                ff_b2,
            });
        }
        let (enc_ln_g, enc_ln_b) = push_norm(&mut p, "enc_ln", d);
        let mut dec = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let (ln1_g, ln1_b) = push_norm(&mut p, &format!("dec.{l}.ln1"), d);
            let self_attn = push_mha(&mut p, &mut rng, &format!("dec.{l}.self"), d);
            let (ln2_g, ln2_b) = push_norm(&mut p, &format!("dec.{l}.ln2"), d);
            let cross_attn = push_mha(&mut p, &mut rng, &format!("dec.{l}.cross"), d);
            let (ln3_g, ln3_b) = push_norm(&mut p, &format!("dec.{l}.ln3"), d);
            let ff_w1 = p.push(format!("dec.{l}.ff.w1"), xavier_uniform(&mut rng, d, f));
            let ff_b1 = p.push(format!("dec.{l}.ff.b1"), Tensor::zeros(vec![f]));
            let ff_w2 = p.push(format!("dec.{l}.ff.w2"), xavier_uniform(&mut rng, f, d));
            let ff_b2 = p.push(format!("dec.{l}.ff.b2"), Tensor::zeros(vec![d]));
            dec.push(DecLayerIdx {
                ln1_g,
                ln1_b,
                self_attn,
                ln2_g,
                ln2_b,
                cross_attn,
                ln3_g,
                ln3_b,
                ff_w1,
                ff_b1,
                ff_w2,
                ff_b2,
            });
        }
        let (dec_ln_g, dec_ln_b) = push_norm(&mut p, "dec_ln", d);
        let out_w = p.push("out.w", xavier_uniform(&mut rng, d, cfg.tgt_vocab));
        let out_b = p.push("out.b", Tensor::zeros(vec![cfg.tgt_vocab]));
        let layout = Layout {
            emb_src,
            emb_tgt,
            enc,
            enc_ln_g,
            enc_ln_b,
            dec,
            dec_ln_g,
            dec_ln_b,
            out_w,
            out_b,
        };
        let positions = positional_encoding(cfg.max_positions, d)?;
        Ok(Transformer {
            cfg,
            params: p,
            layout,
            positions,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn mha_nodes(nodes: &[NodeId], idx: &MhaIdx) -> MhaParams {
        MhaParams {
            w_q: nodes[idx.w_q],
            b_q: nodes[idx.b_q],
            w_k: nodes[idx.w_k],
            b_k: nodes[idx.b_k],
            w_v: nodes[idx.w_v],
            b_v: nodes[idx.b_v],
            w_o: nodes[idx.w_o],
            b_o: nodes[idx.b_o],
        }
    }

    /// Token embedding scaled by sqrt(dim), plus the positional table.
    fn embed(
        &self,
        tape: &mut Tape<T>,
        table: NodeId,
        ids: &[u32],
        batch: usize,
        time: usize,
        mode: &mut RunMode<'_>,
    ) -> Result<NodeId, ModelError> {
        if time > self.cfg.max_positions {
            return Err(ModelError::SequenceTooLong {
                len: time,
                max: self.cfg.max_positions,
            });
        }
        let d = self.cfg.model_dim;
        let emb = tape.embedding(table, ids)?;
        let scaled = tape.scale(emb, T::from_f64((d as f64).sqrt()))?;
        let mut pe = vec![T::zero(); batch * time * d];
        for b in 0..batch {
            for t in 0..time {
                let dst = (b * time + t) * d;
                pe[dst..dst + d].copy_from_slice(&self.positions.data()[t * d..(t + 1) * d]);
            }
        }
        let pe = tape.constant(Tensor::from_vec(vec![batch * time, d], pe)?)?;
        let x = tape.add(scaled, pe)?;
        Ok(mode.apply(tape, x)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn feed_forward(
        &self,
        tape: &mut Tape<T>,
        x: NodeId,
        w1: NodeId,
        b1: NodeId,
        w2: NodeId,
        b2: NodeId,
        mode: &mut RunMode<'_>,
    ) -> Result<NodeId, ModelError> {
        let lin = tape.matmul(x, w1)?;
        let lin = tape.add_bias(lin, b1)?;
        let act = tape.relu(lin)?;
        let act = mode.apply(tape, act)?;
        let out = tape.matmul(act, w2)?;
        let out = tape.add_bias(out, b2)?;
        Ok(mode.apply(tape, out)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn encode_on_tape(
        &self,
        tape: &mut Tape<T>,
        nodes: &[NodeId],
        src: &[u32],
        src_mask: &[bool],
        batch: usize,
        src_len: usize,
        mode: &mut RunMode<'_>,
    ) -> Result<NodeId, ModelError> {
        let l = &self.layout;
        let mut x = self.embed(tape, nodes[l.emb_src], src, batch, src_len, mode)?;
        for layer in &l.enc {
            let a = tape.layer_norm(x, nodes[layer.ln1_g], nodes[layer.ln1_b])?;
            let attn = multi_head_attention(
                tape,
                a,
                a,
                a,
                &Self::mha_nodes(nodes, &layer.attn),
                self.cfg.heads,
                src_mask,
                false,
                batch,
                src_len,
                src_len,
                mode,
            )?;
            let attn = mode.apply(tape, attn)?;
            x = tape.add(x, attn)?;
            let f = tape.layer_norm(x, nodes[layer.ln2_g], nodes[layer.ln2_b])?;
            let ff = self.feed_forward(
                tape,
                f,
                nodes[layer.ff_w1],
                nodes[layer.ff_b1],
                nodes[layer.ff_w2],
                nodes[layer.ff_b2],
                mode,
            )?;
            x = tape.add(x, ff)?;
        }
        Ok(tape.layer_norm(x, nodes[l.enc_ln_g], nodes[l.enc_ln_b])?)
    }

    #[allow(clippy::too_many_arguments)]
    fn decode_on_tape(
        &self,
        tape: &mut Tape<T>,
        nodes: &[NodeId],
        enc_out: NodeId,
        src_mask: &[bool],
        src_len: usize,
        tgt_in: &[u32],
        tgt_mask: &[bool],
        batch: usize,
        tgt_len: usize,
        mode: &mut RunMode<'_>,
    ) -> Result<NodeId, ModelError> {
        let l = &self.layout;
        let mut x = self.embed(tape, nodes[l.emb_tgt], tgt_in, batch, tgt_len, mode)?;
        for layer in &l.dec {
            let a = tape.layer_norm(x, nodes[layer.ln1_g], nodes[layer.ln1_b])?;
            let self_attn = multi_head_attention(
                tape,
                a,
                a,
                a,
                &Self::mha_nodes(nodes, &layer.self_attn),
                self.cfg.heads,
                tgt_mask,
                true,
                batch,
                tgt_len,
                tgt_len,
                mode,
            )?;
            let self_attn = mode.apply(tape, self_attn)?;
            x = tape.add(x, self_attn)?;

            let c = tape.layer_norm(x, nodes[layer.ln2_g], nodes[layer.ln2_b])?;
            let cross = multi_head_attention(
                tape,
                c,
                enc_out,
                enc_out,
                &Self::mha_nodes(nodes, &layer.cross_attn),
                self.cfg.heads,
                src_mask,
                false,
                batch,
                tgt_len,
                src_len,
                mode,
            )?;
            let cross = mode.apply(tape, cross)?;
            x = tape.add(x, cross)?;

            let f = tape.layer_norm(x, nodes[layer.ln3_g], nodes[layer.ln3_b])?;
            let ff = self.feed_forward(
                tape,
                f,
                nodes[layer.ff_w1],
                nodes[layer.ff_b1],
                nodes[layer.ff_w2],
                nodes[layer.ff_b2],
                mode,
            )?;
            x = tape.add(x, ff)?;
        }
        let normed = tape.layer_norm(x, nodes[l.dec_ln_g], nodes[l.dec_ln_b])?;
        let lin = tape.matmul(normed, nodes[l.out_w])?;
        Ok(tape.add_bias(lin, nodes[l.out_b])?)
    }

    /// Teacher-forced cross-entropy over one batch.
    pub fn forward_loss(
        &self,
        batch: &Batch,
        mode: &mut RunMode<'_>,
    ) -> Result<LossGraph<T>, ModelError> {
        batch.validate()?;
        let mut tape = Tape::new();
        let nodes = self.params.register(&mut tape)?;
        let enc_out = self.encode_on_tape(
            &mut tape,
            &nodes,
            &batch.src,
            &batch.src_mask,
            batch.batch,
            batch.src_len,
            mode,
        )?;
        let logits = self.decode_on_tape(
            &mut tape,
            &nodes,
            enc_out,
            &batch.src_mask,
            batch.src_len,
            &batch.tgt_in,
            &batch.tgt_mask,
            batch.batch,
            batch.tgt_len,
            mode,
        )?;
        let loss = tape.cross_entropy(logits, &batch.tgt_out, &batch.tgt_mask)?;
        Ok(LossGraph {
            tape,
            loss,
            param_nodes: nodes,
        })
    }

    /// Teacher-forced logits as plain numbers, batch-major
    /// `[batch*tgt_len, tgt_vocab]`, dropout off.
    pub fn forward_logits(&self, batch: &Batch) -> Result<Vec<f64>, ModelError> {
        batch.validate()?;
        let mut tape = Tape::new();
        let nodes = self.params.register(&mut tape)?;
        let mut mode = RunMode::Eval;
        let enc_out = self.encode_on_tape(
            &mut tape,
            &nodes,
            &batch.src,
            &batch.src_mask,
            batch.batch,
            batch.src_len,
            &mut mode,
        )?;
        let logits = self.decode_on_tape(
            &mut tape,
            &nodes,
            enc_out,
            &batch.src_mask,
            batch.src_len,
            &batch.tgt_in,
            &batch.tgt_mask,
            batch.batch,
            batch.tgt_len,
            &mut mode,
        )?;
        Ok(tape.value(logits).data().iter().map(|v| v.as_f64()).collect())
    }

    /// Greedy autoregressive decode; the decoder is re-run over the
    /// growing prefix each step (no state cache at desk scale).
    pub fn greedy_decode(&self, src: &[u32], max_len: usize) -> Result<Vec<u32>, ModelError> {
        if src.is_empty() {
            return Err(ModelError::EmptySequence { row: 0 });
        }
        let mut tape = Tape::new();
        let nodes = self.params.register(&mut tape)?;
        let src_mask = vec![true; src.len()];
        let mut mode = RunMode::Eval;
        let enc_out = self.encode_on_tape(
            &mut tape,
            &nodes,
            src,
            &src_mask,
            1,
            src.len(),
            &mut mode,
        )?;
        let mut prefix = vec![BOS_ID];
        let mut out = Vec::new();
        while out.len() < max_len {
            let tgt_mask = vec![true; prefix.len()];
            let logits = self.decode_on_tape(
                &mut tape,
                &nodes,
                enc_out,
                &src_mask,
                src.len(),
                &prefix,
                &tgt_mask,
                1,
                prefix.len(),
                &mut mode,
            )?;
            let v = self.cfg.tgt_vocab;
            let last = tape.value(logits).data();
            let row = &last[(prefix.len() - 1) * v..prefix.len() * v];
            let next = argmax_lowest_id(row);
            if next == EOS_ID {
                break;
            }
            out.push(next);
            prefix.push(next);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> TransformerConfig {
        TransformerConfig {
            src_vocab: 12,
            tgt_vocab: 12,
            layers: 2,
            model_dim: 8,
            heads: 2,
            ff_dim: 16,
            max_positions: 16,
            dropout: 0.0,
        }
    }

    fn tiny_batch() -> Batch {
        Batch {
            batch: 2,
            src_len: 3,
            tgt_len: 4,
            src: vec![4, 5, 6, 7, 8, 0],
            src_mask: vec![true, true, true, true, true, false],
            tgt_in: vec![2, 4, 5, 0, 2, 6, 0, 0],
            tgt_out: vec![4, 5, 3, 0, 6, 3, 0, 0],
            tgt_mask: vec![true, true, true, false, true, true, false, false],
        }
    }

    #[test]
    fn logits_shape_contract() {
        let model: Transformer<f32> = Transformer::new(tiny_cfg(), 5).unwrap();
        let batch = tiny_batch();
        let logits = model.forward_logits(&batch).unwrap();
        assert_eq!(logits.len(), 2 * 4 * 12);
    }

    #[test]
    fn sequence_longer_than_positional_table_is_rejected() {
        let model: Transformer<f32> = Transformer::new(tiny_cfg(), 5).unwrap();
        let src: Vec<u32> = (0..20).map(|i| 4 + (i % 8) as u32).collect();
        let err = model.greedy_decode(&src, 4);
        assert!(matches!(err, Err(ModelError::SequenceTooLong { .. })));
    }

    #[test]
    fn future_target_tokens_do_not_affect_past_logits() {
        let model: Transformer<f64> = Transformer::new(tiny_cfg(), 11).unwrap();
        let batch = tiny_batch();
        let base = model.forward_logits(&batch).unwrap();
        let mut perturbed = batch.clone();
        perturbed.tgt_in[2] = 9; // batch row 0, position 2
        let changed = model.forward_logits(&perturbed).unwrap();
        let v = 12;
        // Positions 0 and 1 of row 0 must be bitwise unchanged.
        for t in 0..2 {
            for j in 0..v {
                assert_eq!(base[t * v + j], changed[t * v + j], "t={t} j={j}");
            }
        }
        // Row 1 untouched entirely.
        for i in 4 * v..8 * v {
            assert_eq!(base[i], changed[i]);
        }
    }

    #[test]
    fn greedy_decode_is_deterministic_and_capped() {
        let model: Transformer<f32> = Transformer::new(tiny_cfg(), 3).unwrap();
        let a = model.greedy_decode(&[4, 5, 6], 5).unwrap();
        let b = model.greedy_decode(&[4, 5, 6], 5).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 5);
    }
}
