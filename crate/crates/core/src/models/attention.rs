//! Attention primitives shared by the two model families: additive
//! attention, multi-head scaled dot-product attention, sinusoidal
//! positional encoding and the causal mask.

use super::{ModelError, RunMode};
use crate::scalar::Scalar;
use crate::tensor::{NodeId, Tape, Tensor};

/// Sinusoidal positional table: `PE(pos, 2i) = sin(pos / 10000^(2i/dim))`
/// and `PE(pos, 2i+1) = cos(...)`. `dim` must be even.
pub fn positional_encoding<T: Scalar>(max_len: usize, dim: usize) -> Result<Tensor<T>, ModelError> {
    if !dim.is_multiple_of(2) {
        return Err(ModelError::Config(format!(
            "positional encoding needs an even dimension, got {dim}"
        )));
    }
    let mut data = vec![T::zero(); max_len * dim];
    for pos in 0..max_len {
        for i in 0..dim / 2 {
            let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + 2 * i] = T::from_f64(rate.sin());
            data[pos * dim + 2 * i + 1] = T::from_f64(rate.cos());
        }
    }
    Ok(Tensor::from_vec(vec![max_len, dim], data).expect("positional table shape"))
}

/// Row-major `len x len` mask where position i may attend to j <= i.
pub fn causal_mask(len: usize) -> Vec<bool> {
    let mut mask = vec![false; len * len];
    for i in 0..len {
        for j in 0..=i {
            mask[i * len + j] = true;
        }
    }
    mask
}

/// Additive attention: `score(q, k_i) = v^T tanh(W_q q + W_k k_i)`,
/// masked softmax over source positions, context as the weighted key sum.
///
/// - `query`: `[batch, q_dim]`
/// - `keys`: `[batch * time, k_dim]` (batch-major)
/// - `keys_proj`: `keys @ w_k`, precomputed once per sequence
/// - `key_mask`: `[batch * time]`, true at real positions
///
/// Returns `(context [batch, k_dim], weights [batch, time])`.
#[allow(clippy::too_many_arguments)]
pub fn additive_attention<T: Scalar>(
    tape: &mut Tape<T>,
    query: NodeId,
    keys: NodeId,
    keys_proj: NodeId,
    w_q: NodeId,
    v: NodeId,
    key_mask: &[bool],
    batch: usize,
    time: usize,
) -> Result<(NodeId, NodeId), ModelError> {
    let q_proj = tape.matmul(query, w_q)?;
    let q_rep = tape.repeat_rows(q_proj, time)?;
    let pre = tape.add(keys_proj, q_rep)?;
    let act = tape.tanh(pre)?;
    let scores_flat = tape.matmul(act, v)?; // [batch*time, 1]
    let scores = tape.reshape(scores_flat, vec![batch, time])?;
    let weights = tape.masked_softmax(scores, key_mask)?;
    let w3 = tape.reshape(weights, vec![batch, 1, time])?;
    let k_dim = tape.value(keys).shape()[1];
    let k3 = tape.reshape(keys, vec![batch, time, k_dim])?;
    let ctx3 = tape.bmm(w3, k3)?;
    let context = tape.reshape(ctx3, vec![batch, k_dim])?;
    Ok((context, weights))
}

/// Projection parameters for one multi-head attention block.
#[derive(Debug, Clone, Copy)]
pub struct MhaParams {
    pub w_q: NodeId,
    pub b_q: NodeId,
    pub w_k: NodeId,
    pub b_k: NodeId,
    pub w_v: NodeId,
    pub b_v: NodeId,
    pub w_o: NodeId,
    pub b_o: NodeId,
}

/// Multi-head scaled dot-product attention with per-head scale
/// `1/sqrt(dim/heads)`; masked positions receive no probability mass.
///
/// Inputs are batch-major: `q_in [batch*tq, dim]`, `k_in`/`v_in`
/// `[batch*tk, dim]`. `key_mask` is `[batch*tk]`; with `causal` set,
/// query position i additionally attends only to key positions j <= i.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q_in: NodeId,
    k_in: NodeId,
    v_in: NodeId,
    params: &MhaParams,
    heads: usize,
    key_mask: &[bool],
    causal: bool,
    batch: usize,
    tq: usize,
    tk: usize,
    mode: &mut RunMode<'_>,
) -> Result<NodeId, ModelError> {
    let dim = tape.value(q_in).shape()[1];
    if !dim.is_multiple_of(heads) {
        return Err(ModelError::Config(format!(
            "attention dim {dim} not divisible by {heads} heads"
        )));
    }
    let head_dim = dim / heads;

    let q = tape.matmul(q_in, params.w_q)?;
    let q = tape.add_bias(q, params.b_q)?;
    let k = tape.matmul(k_in, params.w_k)?;
    let k = tape.add_bias(k, params.b_k)?;
    let v = tape.matmul(v_in, params.w_v)?;
    let v = tape.add_bias(v, params.b_v)?;

    let qh = tape.split_heads(q, batch, tq, heads)?;
    let kh = tape.split_heads(k, batch, tk, heads)?;
    let vh = tape.split_heads(v, batch, tk, heads)?;

    let raw = tape.bmm_transpose_b(qh, kh)?; // [batch*heads, tq, tk]
    let scores = tape.scale(raw, T::from_f64(1.0 / (head_dim as f64).sqrt()))?;

    let mut mask = vec![false; batch * heads * tq * tk];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..tq {
                for j in 0..tk {
                    let allowed = key_mask[b * tk + j] && (!causal || j <= i);
                    mask[((b * heads + h) * tq + i) * tk + j] = allowed;
                }
            }
        }
    }
    let attn = tape.masked_softmax(scores, &mask)?;
    let attn = mode.apply(tape, attn)?;
    let ctx = tape.bmm(attn, vh)?;
    let merged = tape.merge_heads(ctx, batch, tq, heads)?;
    let out = tape.matmul(merged, params.w_o)?;
    let out = tape.add_bias(out, params.b_o)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn positional_row_zero_alternates_zero_one() {
        let table: Tensor<f64> = positional_encoding(4, 6).unwrap();
        let row0 = &table.data()[0..6];
        assert_eq!(row0, &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn positional_entries_bounded_and_formula_spot_check() {
        let table: Tensor<f64> = positional_encoding(16, 8).unwrap();
        assert!(table.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        // exponent 0 column at position 1 is sin(1)
        let pe_1_0 = table.data()[8];
        assert!((pe_1_0 - 1f64.sin()).abs() < 1e-12);
        assert!((pe_1_0 - 0.8415).abs() < 1e-4);
    }

    #[test]
    fn positional_rejects_odd_dim() {
        assert!(positional_encoding::<f64>(4, 5).is_err());
    }

    #[test]
    fn causal_mask_is_lower_triangular() {
        assert_eq!(causal_mask(1), vec![true]);
        let m = causal_mask(3);
        let expected = [
            true, false, false, //
            true, true, false, //
            true, true, true,
        ];
        assert_eq!(m, expected);
    }

    #[allow(clippy::too_many_arguments)]
    fn setup_additive(
        tape: &mut Tape<f64>,
        query: Vec<f64>,
        keys: Vec<f64>,
        batch: usize,
        time: usize,
        k_dim: usize,
        q_dim: usize,
        attn_dim: usize,
    ) -> (NodeId, NodeId, NodeId, NodeId, NodeId) {
        let q = tape
            .constant(Tensor::from_vec(vec![batch, q_dim], query).unwrap())
            .unwrap();
        let k = tape
            .constant(Tensor::from_vec(vec![batch * time, k_dim], keys).unwrap())
            .unwrap();
        let w_q = tape
            .constant(Tensor::from_vec(vec![q_dim, attn_dim], vec![0.5; q_dim * attn_dim]).unwrap())
            .unwrap();
        let w_k = tape
            .constant(Tensor::from_vec(vec![k_dim, attn_dim], vec![0.25; k_dim * attn_dim]).unwrap())
            .unwrap();
        let v = tape
            .constant(Tensor::from_vec(vec![attn_dim, 1], vec![1.0; attn_dim]).unwrap())
            .unwrap();
        let kp = tape.matmul(k, w_k).unwrap();
        (q, k, kp, w_q, v)
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut tape = Tape::new();
        let (q, k, kp, w_q, v) = setup_additive(
            &mut tape,
            vec![0.3, -0.2],
            vec![0.7, 0.1, 0.7, 0.1, 0.7, 0.1],
            1,
            3,
            2,
            2,
            2,
        );
        let (_, weights) =
            additive_attention(&mut tape, q, k, kp, w_q, v, &[true, true, true], 1, 3).unwrap();
        let w = tape.value(weights).data();
        for &x in w {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_unmasked_position_takes_all_weight() {
        let mut tape = Tape::new();
        let (q, k, kp, w_q, v) = setup_additive(
            &mut tape,
            vec![0.3, -0.2],
            vec![0.7, 0.1, -0.4, 0.9, 0.2, 0.2],
            1,
            3,
            2,
            2,
            2,
        );
        let (ctx, weights) =
            additive_attention(&mut tape, q, k, kp, w_q, v, &[false, true, false], 1, 3).unwrap();
        let w = tape.value(weights).data();
        assert_eq!(w[0], 0.0);
        assert!((w[1] - 1.0).abs() < 1e-12);
        assert_eq!(w[2], 0.0);
        let c = tape.value(ctx).data();
        assert!((c[0] - (-0.4)).abs() < 1e-12);
        assert!((c[1] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn weights_sum_to_one_and_zero_on_masked() {
        let mut tape = Tape::new();
        let (q, k, kp, w_q, v) = setup_additive(
            &mut tape,
            vec![0.3, -0.2, 1.0, 0.4],
            vec![
                0.7, 0.1, -0.4, 0.9, 0.2, 0.2, //
                0.5, -0.5, 0.3, 0.3, -0.1, 0.8,
            ],
            2,
            3,
            2,
            2,
            2,
        );
        let mask = [true, true, false, true, true, true];
        let (_, weights) = additive_attention(&mut tape, q, k, kp, w_q, v, &mask, 2, 3).unwrap();
        let w = tape.value(weights).data();
        for b in 0..2 {
            let row = &w[b * 3..(b + 1) * 3];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        assert_eq!(w[2], 0.0);
    }

    fn mha_params(tape: &mut Tape<f64>, dim: usize, identity: bool) -> MhaParams {
        let eye: Vec<f64> = (0..dim * dim)
            .map(|i| {
                if identity && i / dim == i % dim {
                    1.0
                } else if identity {
                    0.0
                } else {
                    0.1 * ((i % 7) as f64 - 3.0)
                }
            })
            .collect();
        let mat = |tape: &mut Tape<f64>, data: Vec<f64>| {
            tape.constant(Tensor::from_vec(vec![dim, dim], data).unwrap())
                .unwrap()
        };
        let zeros = |tape: &mut Tape<f64>| {
            tape.constant(Tensor::from_vec(vec![dim], vec![0.0; dim]).unwrap())
                .unwrap()
        };
        MhaParams {
            w_q: mat(tape, eye.clone()),
            b_q: zeros(tape),
            w_k: mat(tape, eye.clone()),
            b_k: zeros(tape),
            w_v: mat(tape, eye.clone()),
            b_v: zeros(tape),
            w_o: mat(tape, eye),
            b_o: zeros(tape),
        }
    }

    #[test]
    fn single_key_single_head_returns_projected_value() {
        let mut tape = Tape::new();
        let dim = 2;
        let q = tape
            .constant(Tensor::from_vec(vec![1, dim], vec![0.4, -0.6]).unwrap())
            .unwrap();
        let kv = tape
            .constant(Tensor::from_vec(vec![1, dim], vec![1.5, 2.5]).unwrap())
            .unwrap();
        let params = mha_params(&mut tape, dim, true);
        let out = multi_head_attention(
            &mut tape,
            q,
            kv,
            kv,
            &params,
            1,
            &[true],
            false,
            1,
            1,
            1,
            &mut RunMode::Eval,
        )
        .unwrap();
        // One key: attention weight is 1, so output = W_o (W_v kv) = kv.
        let got = tape.value(out).data();
        assert!((got[0] - 1.5).abs() < 1e-12);
        assert!((got[1] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn two_position_one_head_matches_hand_arithmetic() {
        // Identity projections, dim 2, two positions; q/k/v all equal x.
        // x0 = [1, 0], x1 = [0, 1].
        // scores/sqrt(2): s00 = 1/sqrt(2), s01 = 0, s10 = 0, s11 = 1/sqrt(2).
        // row 0 weights: softmax(0.7071, 0) = (0.66967, 0.33033)
        // out0 = w00*x0 + w01*x1 = (0.66967, 0.33033); out1 symmetric.
        let mut tape = Tape::new();
        let dim = 2;
        let x = tape
            .constant(Tensor::from_vec(vec![2, dim], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let params = mha_params(&mut tape, dim, true);
        let out = multi_head_attention(
            &mut tape,
            x,
            x,
            x,
            &params,
            1,
            &[true, true],
            false,
            1,
            2,
            2,
            &mut RunMode::Eval,
        )
        .unwrap();
        let s = 1.0 / 2.0f64.sqrt();
        let e = s.exp();
        let w_big = e / (e + 1.0);
        let w_small = 1.0 / (e + 1.0);
        let got = tape.value(out).data();
        let expected = [w_big, w_small, w_small, w_big];
        for (g, e) in got.iter().zip(expected.iter()) {
            assert!((g - e).abs() < 1e-12, "got {got:?}, expected {expected:?}");
        }
    }

    #[test]
    fn per_head_attention_rows_sum_to_one() {
        // Verified indirectly: with all-equal values the context must be
        // that value regardless of scores, so weights sum to one.
        let mut tape = Tape::new();
        let dim = 4;
        let q = tape
            .constant(Tensor::from_vec(vec![2, dim], vec![0.3; 8]).unwrap())
            .unwrap();
        let kv = tape
            .constant(
                Tensor::from_vec(vec![2, dim], vec![0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9])
                    .unwrap(),
            )
            .unwrap();
        let params = mha_params(&mut tape, dim, true);
        let out = multi_head_attention(
            &mut tape,
            q,
            kv,
            kv,
            &params,
            2,
            &[true, true],
            false,
            1,
            2,
            2,
            &mut RunMode::Eval,
        )
        .unwrap();
        for &v in tape.value(out).data() {
            assert!((v - 0.9).abs() < 1e-9);
        }
    }

    #[test]
    fn indivisible_heads_is_a_config_error() {
        let mut tape = Tape::new();
        let q = tape
            .constant(Tensor::from_vec(vec![1, 3], vec![0.0; 3]).unwrap())
            .unwrap();
        let params = mha_params(&mut tape, 3, true);
        let err = multi_head_attention(
            &mut tape,
            q,
            q,
            q,
            &params,
            2,
            &[true],
            false,
            1,
            1,
            1,
            &mut RunMode::Eval,
        );
        assert!(matches!(err, Err(ModelError::Config(_))));
    }
}
