//! Attention-based LSTM encoder-decoder: single bidirectional encoder
//! layer, single unidirectional decoder layer, additive attention over
//! the concatenated encoder states.

#![allow(clippy::needless_range_loop)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention::additive_attention;
use super::{argmax_lowest_id, Batch, LossGraph, LstmConfig, ModelError, RunMode};
use crate::scalar::Scalar;
use crate::subword::{BOS_ID, EOS_ID};
use crate::tensor::{normal_embedding, xavier_uniform, NodeId, ParamSet, Tape, Tensor};

#[derive(Debug, Clone, Copy)]
struct Layout {
    emb_src: usize,
    emb_tgt: usize,
    enc_fwd_w_ih: usize,
    enc_fwd_w_hh: usize,
    enc_fwd_b: usize,
    enc_bwd_w_ih: usize,
    enc_bwd_w_hh: usize,
    enc_bwd_b: usize,
    dec_w_ih: usize,
    dec_w_hh: usize,
    dec_b: usize,
    attn_w_q: usize,
    attn_w_k: usize,
    attn_v: usize,
    init_w: usize,
    init_b: usize,
    out_w: usize,
    out_b: usize,
}

#[derive(Debug)]
pub struct Lstm<T: Scalar> {
    cfg: LstmConfig,
    params: ParamSet<T>,
    layout: Layout,
}

impl<T: Scalar> Lstm<T> {
    pub fn new(cfg: LstmConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (e, h) = (cfg.embed_dim, cfg.hidden_dim);
        let attn = h;
        let mut p = ParamSet::new();
        let layout = Layout {
            emb_src: p.push("emb_src", normal_embedding(&mut rng, cfg.src_vocab, e)),
            emb_tgt: p.push("emb_tgt", normal_embedding(&mut rng, cfg.tgt_vocab, e)),
            enc_fwd_w_ih: p.push("enc_fwd.w_ih", xavier_uniform(&mut rng, e, 4 * h)),
            enc_fwd_w_hh: p.push("enc_fwd.w_hh", xavier_uniform(&mut rng, h, 4 * h)),
            enc_fwd_b: p.push("enc_fwd.b", Tensor::zeros(vec![4 * h])),
            enc_bwd_w_ih: p.push("enc_bwd.w_ih", xavier_uniform(&mut rng, e, 4 * h)),
            enc_bwd_w_hh: p.push("enc_bwd.w_hh", xavier_uniform(&mut rng, h, 4 * h)),
            enc_bwd_b: p.push("enc_bwd.b", Tensor::zeros(vec![4 * h])),
            dec_w_ih: p.push("dec.w_ih", xavier_uniform(&mut rng, e + 2 * h, 4 * h)),
            dec_w_hh: p.push("dec.w_hh", xavier_uniform(&mut rng, h, 4 * h)),
            dec_b: p.push("dec.b", Tensor::zeros(vec![4 * h])),
            attn_w_q: p.push("attn.w_q", xavier_uniform(&mut rng, h, attn)),
            attn_w_k: p.push("attn.w_k", xavier_uniform(&mut rng, 2 * h, attn)),
            attn_v: p.push("attn.v", xavier_uniform(&mut rng, attn, 1)),
            init_w: p.push("init.w", xavier_uniform(&mut rng, 2 * h, h)),
            init_b: p.push("init.b", Tensor::zeros(vec![h])),
            out_w: p.push("out.w", xavier_uniform(&mut rng, 3 * h, cfg.tgt_vocab)),
            out_b: p.push("out.b", Tensor::zeros(vec![cfg.tgt_vocab])),
        };
        Ok(Lstm {
            cfg,
            params: p,
            layout,
        })
    }

    pub fn config(&self) -> &LstmConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }
}

struct EncoderNodes {
    /// Per-position context vectors, `[batch*src_len, 2*hidden]`, batch-major.
    keys: NodeId,
    /// `keys @ attn.w_k`, computed once per sequence.
    keys_proj: NodeId,
    /// Decoder initial hidden state, `[batch, hidden]`.
    h0: NodeId,
}

impl<T: Scalar> Lstm<T> {
    /// gates = x @ w_ih + h @ w_hh + b; standard LSTM cell.
    #[allow(clippy::too_many_arguments)]
    fn cell(
        tape: &mut Tape<T>,
        x: NodeId,
        h: NodeId,
        c: NodeId,
        w_ih: NodeId,
        w_hh: NodeId,
        b: NodeId,
        hidden: usize,
    ) -> Result<(NodeId, NodeId), ModelError> {
        let xi = tape.matmul(x, w_ih)?;
        let hh = tape.matmul(h, w_hh)?;
        let pre = tape.add(xi, hh)?;
        let gates = tape.add_bias(pre, b)?;
        let i_gate = tape.slice_cols(gates, 0, hidden)?;
        let i_gate = tape.sigmoid(i_gate)?;
        let f_gate = tape.slice_cols(gates, hidden, 2 * hidden)?;
        let f_gate = tape.sigmoid(f_gate)?;
        let g_gate = tape.slice_cols(gates, 2 * hidden, 3 * hidden)?;
        let g_gate = tape.tanh(g_gate)?;
        let o_gate = tape.slice_cols(gates, 3 * hidden, 4 * hidden)?;
        let o_gate = tape.sigmoid(o_gate)?;
        let fc = tape.mul(f_gate, c)?;
        let ig = tape.mul(i_gate, g_gate)?;
        let c_new = tape.add(fc, ig)?;
        let c_act = tape.tanh(c_new)?;
        let h_new = tape.mul(o_gate, c_act)?;
        Ok((h_new, c_new))
    }

    /// Keep the previous state at padded positions so trailing pads never
    /// touch the states of real positions (in either direction).
    fn masked_update(
        tape: &mut Tape<T>,
        new: NodeId,
        old: NodeId,
        keep_new: NodeId,
        keep_old: NodeId,
    ) -> Result<NodeId, ModelError> {
        let a = tape.mul(new, keep_new)?;
        let b = tape.mul(old, keep_old)?;
        Ok(tape.add(a, b)?)
    }

    fn step_masks(
        tape: &mut Tape<T>,
        src_mask: &[bool],
        batch: usize,
        src_len: usize,
        t: usize,
        hidden: usize,
    ) -> Result<(NodeId, NodeId), ModelError> {
        let mut keep = vec![T::zero(); batch * hidden];
        let mut inv = vec![T::zero(); batch * hidden];
        for b in 0..batch {
            let real = src_mask[b * src_len + t];
            let (kv, iv) = if real {
                (T::one(), T::zero())
            } else {
                (T::zero(), T::one())
            };
            for j in 0..hidden {
                keep[b * hidden + j] = kv;
                inv[b * hidden + j] = iv;
            }
        }
        let keep = tape.constant(Tensor::from_vec(vec![batch, hidden], keep)?)?;
        let inv = tape.constant(Tensor::from_vec(vec![batch, hidden], inv)?)?;
        Ok((keep, inv))
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
    ) -> Result<EncoderNodes, ModelError> {
        let l = &self.layout;
        let h = self.cfg.hidden_dim;
        let emb = tape.embedding(nodes[l.emb_src], src)?;
        let emb = mode.apply(tape, emb)?;

        let zeros = tape.constant(Tensor::zeros(vec![batch, h]))?;
        let gather_t = |t: usize| -> Vec<usize> {
            (0..batch).map(|b| b * src_len + t).collect()
        };

        let mut fwd_states = vec![zeros; src_len];
        let mut state_h = zeros;
        let mut state_c = zeros;
        for t in 0..src_len {
            let x_t = tape.gather_rows(emb, &gather_t(t))?;
            let (h_new, c_new) = Self::cell(
                tape,
                x_t,
                state_h,
                state_c,
                nodes[l.enc_fwd_w_ih],
                nodes[l.enc_fwd_w_hh],
                nodes[l.enc_fwd_b],
                h,
            )?;
            let (keep, inv) = Self::step_masks(tape, src_mask, batch, src_len, t, h)?;
            state_h = Self::masked_update(tape, h_new, state_h, keep, inv)?;
            state_c = Self::masked_update(tape, c_new, state_c, keep, inv)?;
            fwd_states[t] = state_h;
        }
        let fwd_final = state_h;

        let mut bwd_states = vec![zeros; src_len];
        let mut state_h = zeros;
        let mut state_c = zeros;
        for t in (0..src_len).rev() {
            let x_t = tape.gather_rows(emb, &gather_t(t))?;
            let (h_new, c_new) = Self::cell(
                tape,
                x_t,
                state_h,
                state_c,
                nodes[l.enc_bwd_w_ih],
                nodes[l.enc_bwd_w_hh],
                nodes[l.enc_bwd_b],
                h,
            )?;
            let (keep, inv) = Self::step_masks(tape, src_mask, batch, src_len, t, h)?;
            state_h = Self::masked_update(tape, h_new, state_h, keep, inv)?;
            state_c = Self::masked_update(tape, c_new, state_c, keep, inv)?;
            bwd_states[t] = state_h;
        }
        let bwd_final = state_h;

        let mut per_t = Vec::with_capacity(src_len);
        for t in 0..src_len {
            per_t.push(tape.concat_cols(fwd_states[t], bwd_states[t])?);
        }
        let stacked = tape.stack_rows(&per_t)?; // [src_len*batch, 2h], time-major
        let perm: Vec<usize> = (0..batch)
            .flat_map(|b| (0..src_len).map(move |t| t * batch + b))
            .collect();
        let keys = tape.gather_rows(stacked, &perm)?; // batch-major

        let finals = tape.concat_cols(fwd_final, bwd_final)?;
        let init_lin = tape.matmul(finals, nodes[l.init_w])?;
        let init_aff = tape.add_bias(init_lin, nodes[l.init_b])?;
        let h0 = tape.tanh(init_aff)?;

        let keys_proj = tape.matmul(keys, nodes[l.attn_w_k])?;
        Ok(EncoderNodes { keys, keys_proj, h0 })
    }

    #[allow(clippy::too_many_arguments)]
    fn decode_step_on_tape(
        &self,
        tape: &mut Tape<T>,
        nodes: &[NodeId],
        enc: &EncoderNodes,
        src_mask: &[bool],
        batch: usize,
        src_len: usize,
        emb_t: NodeId,
        state_h: NodeId,
        state_c: NodeId,
        mode: &mut RunMode<'_>,
    ) -> Result<(NodeId, NodeId, NodeId, NodeId), ModelError> {
        let l = &self.layout;
        let h = self.cfg.hidden_dim;
        let (ctx, weights) = additive_attention(
            tape,
            state_h,
            enc.keys,
            enc.keys_proj,
            nodes[l.attn_w_q],
            nodes[l.attn_v],
            src_mask,
            batch,
            src_len,
        )?;
        let x = tape.concat_cols(emb_t, ctx)?;
        let (h_new, c_new) = Self::cell(
            tape,
            x,
            state_h,
            state_c,
            nodes[l.dec_w_ih],
            nodes[l.dec_w_hh],
            nodes[l.dec_b],
            h,
        )?;
        let feat = tape.concat_cols(h_new, ctx)?;
        let feat = mode.apply(tape, feat)?;
        let lin = tape.matmul(feat, nodes[l.out_w])?;
        let logits = tape.add_bias(lin, nodes[l.out_b])?;
        Ok((logits, h_new, c_new, weights))
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
        let (logits, _) = self.teacher_forced_logits(&mut tape, &nodes, batch, mode)?;
        // Logits rows are time-major; rearrange targets and mask to match.
        let (b, t) = (batch.batch, batch.tgt_len);
        let mut targets = Vec::with_capacity(b * t);
        let mut mask = Vec::with_capacity(b * t);
        for ti in 0..t {
            for bi in 0..b {
                targets.push(batch.tgt_out[bi * t + ti]);
                mask.push(batch.tgt_mask[bi * t + ti]);
            }
        }
        let loss = tape.cross_entropy(logits, &targets, &mask)?;
        Ok(LossGraph {
            tape,
            loss,
            param_nodes: nodes,
        })
    }

    /// Stacked decoder logits, time-major `[tgt_len*batch, tgt_vocab]`.
    fn teacher_forced_logits(
        &self,
        tape: &mut Tape<T>,
        nodes: &[NodeId],
        batch: &Batch,
        mode: &mut RunMode<'_>,
    ) -> Result<(NodeId, Vec<NodeId>), ModelError> {
        let l = &self.layout;
        let (b, s, t) = (batch.batch, batch.src_len, batch.tgt_len);
        let enc = self.encode_on_tape(tape, nodes, &batch.src, &batch.src_mask, b, s, mode)?;
        let tgt_emb = tape.embedding(nodes[l.emb_tgt], &batch.tgt_in)?;
        let tgt_emb = mode.apply(tape, tgt_emb)?;
        let zeros = tape.constant(Tensor::zeros(vec![b, self.cfg.hidden_dim]))?;
        let mut state_h = enc.h0;
        let mut state_c = zeros;
        let mut per_step = Vec::with_capacity(t);
        for ti in 0..t {
            let idx: Vec<usize> = (0..b).map(|bi| bi * t + ti).collect();
            let emb_t = tape.gather_rows(tgt_emb, &idx)?;
            let (logits, h_new, c_new, _) = self.decode_step_on_tape(
                tape,
                nodes,
                &enc,
                &batch.src_mask,
                b,
                s,
                emb_t,
                state_h,
                state_c,
                mode,
            )?;
            state_h = h_new;
            state_c = c_new;
            per_step.push(logits);
        }
        let stacked = tape.stack_rows(&per_step)?;
        Ok((stacked, per_step))
    }

    /// Teacher-forced logits as plain numbers, batch-major
    /// `[batch*tgt_len, tgt_vocab]`, dropout off.
    pub fn forward_logits(&self, batch: &Batch) -> Result<Vec<f64>, ModelError> {
        batch.validate()?;
        let mut tape = Tape::new();
        let nodes = self.params.register(&mut tape)?;
        let (stacked, _) =
            self.teacher_forced_logits(&mut tape, &nodes, batch, &mut RunMode::Eval)?;
        let data = tape.value(stacked).data();
        let (b, t, v) = (batch.batch, batch.tgt_len, self.cfg.tgt_vocab);
        let mut out = vec![0.0f64; b * t * v];
        for ti in 0..t {
            for bi in 0..b {
                let src_row = (ti * b + bi) * v;
                let dst_row = (bi * t + ti) * v;
                for j in 0..v {
                    out[dst_row + j] = data[src_row + j].as_f64();
                }
            }
        }
        Ok(out)
    }

    /// Per-position encoder context vectors `[src_len, 2*hidden]` for a
    /// single unpadded sequence.
    pub fn encoder_states(&self, src: &[u32]) -> Result<Vec<f64>, ModelError> {
        if src.is_empty() {
            return Err(ModelError::EmptySequence { row: 0 });
        }
        let mut tape = Tape::new();
        let nodes = self.params.register(&mut tape)?;
        let mask = vec![true; src.len()];
        let enc = self.encode_on_tape(
            &mut tape,
            &nodes,
            src,
            &mask,
            1,
            src.len(),
            &mut RunMode::Eval,
        )?;
        Ok(tape.value(enc.keys).data().iter().map(|v| v.as_f64()).collect())
    }

    /// Greedy autoregressive decode of a single sequence. Starts from BOS,
    /// emits the argmax token each step (ties toward the lowest id), stops
    /// at EOS or `max_len`. EOS is not included in the output.
    pub fn greedy_decode(&self, src: &[u32], max_len: usize) -> Result<Vec<u32>, ModelError> {
        if src.is_empty() {
            return Err(ModelError::EmptySequence { row: 0 });
        }
        let mut tape = Tape::new();
        let nodes = self.params.register(&mut tape)?;
        let mask = vec![true; src.len()];
        let mut mode = RunMode::Eval;
        let enc =
            self.encode_on_tape(&mut tape, &nodes, src, &mask, 1, src.len(), &mut mode)?;
        let zeros = tape.constant(Tensor::zeros(vec![1, self.cfg.hidden_dim]))?;
        let mut state_h = enc.h0;
        let mut state_c = zeros;
        let mut prev = BOS_ID;
        let mut out = Vec::new();
        let l = &self.layout;
        while out.len() < max_len {
            let emb_t = tape.embedding(nodes[l.emb_tgt], &[prev])?;
            let (logits, h_new, c_new, _) = self.decode_step_on_tape(
                &mut tape,
                &nodes,
                &enc,
                &mask,
                1,
                src.len(),
                emb_t,
                state_h,
                state_c,
                &mut mode,
            )?;
            state_h = h_new;
            state_c = c_new;
            let next = argmax_lowest_id(tape.value(logits).data());
            if next == EOS_ID {
                break;
            }
            out.push(next);
            prev = next;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> LstmConfig {
        LstmConfig {
            src_vocab: 12,
            tgt_vocab: 12,
            embed_dim: 4,
            hidden_dim: 5,
            encoder_layers: 1,
            decoder_layers: 1,
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
    fn encoder_state_width_is_twice_hidden() {
        let model: Lstm<f32> = Lstm::new(tiny_cfg(), 1).unwrap();
        let states = model.encoder_states(&[4, 5, 6]).unwrap();
        assert_eq!(states.len(), 3 * 2 * 5);
    }

    #[test]
    fn reversing_input_flips_direction_roles() {
        // With the two direction weights tied, the forward states on x
        // equal the backward states on reverse(x), read in reverse.
        let mut model: Lstm<f64> = Lstm::new(tiny_cfg(), 3).unwrap();
        for name in ["w_ih", "w_hh", "b"] {
            let fwd = model
                .params()
                .by_name(&format!("enc_fwd.{name}"))
                .unwrap()
                .value
                .clone();
            model
                .params_mut()
                .by_name_mut(&format!("enc_bwd.{name}"))
                .unwrap()
                .value = fwd;
        }
        let fwd = model.encoder_states(&[4, 5, 6]).unwrap();
        let rev = model.encoder_states(&[6, 5, 4]).unwrap();
        let h = 5;
        for t in 0..3 {
            for j in 0..h {
                let fwd_part = fwd[t * 2 * h + j];
                let rev_bwd_part = rev[(2 - t) * 2 * h + h + j];
                assert!(
                    (fwd_part - rev_bwd_part).abs() < 1e-12,
                    "t={t} j={j}: {fwd_part} vs {rev_bwd_part}"
                );
            }
        }
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let model: Lstm<f32> = Lstm::new(tiny_cfg(), 1).unwrap();
        assert!(matches!(
            model.encoder_states(&[]),
            Err(ModelError::EmptySequence { .. })
        ));
        let mut batch = tiny_batch();
        for t in 0..batch.src_len {
            batch.src_mask[batch.src_len + t] = false;
        }
        assert!(matches!(
            model.forward_loss(&batch, &mut RunMode::Eval),
            Err(ModelError::EmptySequence { row: 1 })
        ));
    }

    #[test]
    fn loss_is_deterministic_in_eval_mode() {
        let model: Lstm<f32> = Lstm::new(tiny_cfg(), 7).unwrap();
        let batch = tiny_batch();
        let g1 = model.forward_loss(&batch, &mut RunMode::Eval).unwrap();
        let g2 = model.forward_loss(&batch, &mut RunMode::Eval).unwrap();
        assert_eq!(g1.loss_value(), g2.loss_value());
    }

    #[test]
    fn logits_have_target_vocab_width() {
        let model: Lstm<f32> = Lstm::new(tiny_cfg(), 7).unwrap();
        let batch = tiny_batch();
        let logits = model.forward_logits(&batch).unwrap();
        assert_eq!(logits.len(), 2 * 4 * 12);
    }

    #[test]
    fn greedy_decode_respects_length_cap() {
        let model: Lstm<f32> = Lstm::new(tiny_cfg(), 9).unwrap();
        let out = model.greedy_decode(&[4, 5], 1).unwrap();
        assert!(out.len() <= 1);
        let again = model.greedy_decode(&[4, 5], 1).unwrap();
        assert_eq!(out, again);
    }
}
