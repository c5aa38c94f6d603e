//! Output heads: the k-way regression head with first pooling used for
//! finetuning, and the two loss functions (sigmoid cross entropy for
//! regression, token-level cross entropy for seq2seq denoising).

use crate::elem::Elem;
use crate::tensor::{Tape, TensorError, Var};
use crate::transformer::EncoderOutput;

/// Tape-bound regression head parameters.
///
/// The pooling projection is a residual GeLU block, psi(x) = x + GeLU(x W1) W2,
/// applied position-wise before selecting position 0. With W2 = 0 it is
/// exactly the identity, which is also its test initialization.
#[derive(Debug, Clone)]
pub struct RegressionHead {
    pub mlp_w1: Var,
    pub mlp_w2: Var,
    /// d_model x k_r.
    pub wr: Var,
}

/// Per-attribute regression labels in [0, 1]; absent labels are excluded from
/// the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeLabels {
    pub values: Vec<f64>,
    pub present: Vec<bool>,
}

impl AttributeLabels {
    pub fn all_present(values: Vec<f64>) -> Self {
        let present = vec![true; values.len()];
        AttributeLabels { values, present }
    }
}

/// Project the encoder output with the pooling MLP and take position 0 (the
/// latent block containing the dummy task-prefix token).
pub fn first_pool<F: Elem>(
    tape: &mut Tape<F>,
    enc: &EncoderOutput,
    head: &RegressionHead,
) -> Result<Var, TensorError> {
    let h = tape.matmul(enc.hidden, head.mlp_w1)?;
    let h = tape.gelu(h);
    let proj = tape.matmul(h, head.mlp_w2)?;
    let projected = tape.add(enc.hidden, proj)?;
    tape.row_select(projected, 0)
}

/// Pre-sigmoid attribute logits y_R = pooled . W_r (1 x k_r).
pub fn regression_logits<F: Elem>(
    tape: &mut Tape<F>,
    pooled: Var,
    head: &RegressionHead,
) -> Result<Var, TensorError> {
    tape.matmul(pooled, head.wr)
}

/// Attribute scores in (0, 1).
pub fn regression_scores<F: Elem>(
    tape: &mut Tape<F>,
    pooled: Var,
    head: &RegressionHead,
) -> Result<Var, TensorError> {
    let logits = regression_logits(tape, pooled, head)?;
    Ok(tape.sigmoid(logits))
}

/// Mean sigmoid cross entropy over present attributes, stable logit form.
pub fn sigmoid_bce_loss<F: Elem>(
    tape: &mut Tape<F>,
    logits: Var,
    labels: &AttributeLabels,
) -> Result<Var, TensorError> {
    let values: Vec<F> = labels.values.iter().map(|&v| F::from_f64(v)).collect();
    tape.bce_with_logits(logits, &values, &labels.present)
}

/// Mean token-level cross entropy over unpadded target positions.
pub fn seq2seq_ce_loss<F: Elem>(
    tape: &mut Tape<F>,
    logits: Var,
    target_ids: &[u16],
    target_mask: &[bool],
) -> Result<Var, TensorError> {
    tape.softmax_cross_entropy(logits, target_ids, target_mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Head whose pooling MLP is the exact identity (W2 = 0).
    fn identity_head(tape: &mut Tape<f64>, d: usize, k: usize, rng: &mut ChaCha8Rng) -> RegressionHead {
        RegressionHead {
            mlp_w1: tape.leaf(rand_vec(rng, d * d), d, d, false).unwrap(),
            mlp_w2: tape.leaf(vec![0.0; d * d], d, d, false).unwrap(),
            wr: tape.leaf(rand_vec(rng, d * k), d, k, false).unwrap(),
        }
    }

    fn enc_output(tape: &mut Tape<f64>, data: Vec<f64>, l: usize, d: usize) -> EncoderOutput {
        let hidden = tape.leaf(data, l, d, false).unwrap();
        EncoderOutput { hidden, mask: vec![true; l] }
    }

    #[test]
    fn identity_mlp_pools_row_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = 6;
        let data = rand_vec(&mut rng, 4 * d);
        let mut tape: Tape<f64> = Tape::new();
        let enc = enc_output(&mut tape, data.clone(), 4, d);
        let head = identity_head(&mut tape, d, 2, &mut rng);
        let pooled = first_pool(&mut tape, &enc, &head).unwrap();
        assert_eq!(tape.value(pooled), &data[..d]);
    }

    #[test]
    fn pooling_ignores_later_rows_given_identity_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 5;
        let mut data = rand_vec(&mut rng, 3 * d);
        let mut tape: Tape<f64> = Tape::new();
        let enc = enc_output(&mut tape, data.clone(), 3, d);
        let head = identity_head(&mut tape, d, 1, &mut rng);
        let pooled = first_pool(&mut tape, &enc, &head).unwrap();
        let first = tape.value(pooled).to_vec();

        for v in data[d..].iter_mut() {
            *v += 3.21;
        }
        let mut tape2 = Tape::new();
        let enc2 = enc_output(&mut tape2, data, 3, d);
        let head2 = identity_head(&mut tape2, d, 1, &mut ChaCha8Rng::seed_from_u64(2));
        let pooled2 = first_pool(&mut tape2, &enc2, &head2).unwrap();
        assert_eq!(first, tape2.value(pooled2));
    }

    #[test]
    fn gradient_flows_from_pool_to_all_inputs_through_attention() {
        // Through a 1-layer encoder every unmasked input row feeds position 0
        // via attention, so the pooled output must have nonzero gradient
        // against each of them.
        use crate::transformer::{
            encode, AttentionParams, EncoderLayerParams, EncoderParams, ModelConfig, Runtime,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = ModelConfig {
            d_model: 6,
            d_ff: 12,
            d_kv: 3,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 0,
            dropout_rate: 0.0,
            rel_bias_buckets: 8,
            rel_bias_max_distance: 32,
        };
        let l = 4;
        let d = cfg.d_model;
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(rand_vec(&mut rng, l * d), l, d, true).unwrap();
        let layer = EncoderLayerParams {
            attn_norm: tape.leaf(vec![1.0; d], 1, d, false).unwrap(),
            attn: AttentionParams {
                wq: (0..2).map(|_| tape.leaf(rand_vec(&mut rng, d * 3), d, 3, false).unwrap()).collect(),
                wk: (0..2).map(|_| tape.leaf(rand_vec(&mut rng, d * 3), d, 3, false).unwrap()).collect(),
                wv: (0..2).map(|_| tape.leaf(rand_vec(&mut rng, d * 3), d, 3, false).unwrap()).collect(),
                wo: (0..2).map(|_| tape.leaf(rand_vec(&mut rng, 3 * d), 3, d, false).unwrap()).collect(),
            },
            ff_norm: tape.leaf(vec![1.0; d], 1, d, false).unwrap(),
            ff_w1: tape.leaf(rand_vec(&mut rng, d * cfg.d_ff), d, cfg.d_ff, false).unwrap(),
            ff_w2: tape.leaf(rand_vec(&mut rng, cfg.d_ff * d), cfg.d_ff, d, false).unwrap(),
        };
        let params = EncoderParams {
            layers: vec![layer],
            rel_bias: tape.leaf(rand_vec(&mut rng, 2 * 8), 2, 8, false).unwrap(),
            final_norm: tape.leaf(vec![1.0; d], 1, d, false).unwrap(),
        };
        let enc = encode(&mut tape, x, &[true; 4], &cfg, &params, &mut Runtime::inference()).unwrap();
        let head = identity_head(&mut tape, d, 1, &mut rng);
        let pooled = first_pool(&mut tape, &enc, &head).unwrap();
        let loss = tape.sum(pooled);
        let grads = tape.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();
        for row in 0..l {
            assert!(
                gx[row * d..(row + 1) * d].iter().any(|&g| g != 0.0),
                "row {row} received no gradient"
            );
        }
    }

    #[test]
    fn zero_wr_scores_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 4;
        let mut tape: Tape<f64> = Tape::new();
        let pooled = tape.leaf(rand_vec(&mut rng, d), 1, d, false).unwrap();
        let head = RegressionHead {
            mlp_w1: tape.leaf(rand_vec(&mut rng, d * d), d, d, false).unwrap(),
            mlp_w2: tape.leaf(vec![0.0; d * d], d, d, false).unwrap(),
            wr: tape.leaf(vec![0.0; d * 3], d, 3, false).unwrap(),
        };
        let scores = regression_scores(&mut tape, pooled, &head).unwrap();
        assert_eq!(tape.value(scores), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn logit_ln3_scores_three_quarters() {
        let mut tape: Tape<f64> = Tape::new();
        let z = tape.leaf(vec![3f64.ln()], 1, 1, false).unwrap();
        let s = tape.sigmoid(z);
        assert!((tape.value(s)[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn two_way_logits_by_hand() {
        let pooled_data = vec![0.5, -1.0, 2.0];
        let wr_data = vec![
            1.0, 0.0, //
            0.5, -1.0, //
            0.25, 2.0,
        ];
        let expect0 = 0.5 * 1.0 + (-1.0) * 0.5 + 2.0 * 0.25;
        let expect1 = 0.5 * 0.0 + (-1.0) * (-1.0) + 2.0 * 2.0;
        let mut tape: Tape<f64> = Tape::new();
        let pooled = tape.leaf(pooled_data, 1, 3, false).unwrap();
        let head = RegressionHead {
            mlp_w1: tape.leaf(vec![0.0; 9], 3, 3, false).unwrap(),
            mlp_w2: tape.leaf(vec![0.0; 9], 3, 3, false).unwrap(),
            wr: tape.leaf(wr_data, 3, 2, false).unwrap(),
        };
        let logits = regression_logits(&mut tape, pooled, &head).unwrap();
        let v = tape.value(logits);
        assert!((v[0] - expect0).abs() < 1e-12);
        assert!((v[1] - expect1).abs() < 1e-12);
    }

    #[test]
    fn bce_zero_logit_positive_label_is_ln2() {
        let mut tape: Tape<f64> = Tape::new();
        let z = tape.leaf(vec![0.0], 1, 1, false).unwrap();
        let loss =
            sigmoid_bce_loss(&mut tape, z, &AttributeLabels::all_present(vec![1.0])).unwrap();
        assert!((tape.scalar(loss) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_gradient_vanishes_at_matching_label() {
        let z_val = 0.8;
        let y = 1.0 / (1.0 + (-z_val as f64).exp());
        let mut tape: Tape<f64> = Tape::new();
        let z = tape.leaf(vec![z_val], 1, 1, true).unwrap();
        let loss = sigmoid_bce_loss(&mut tape, z, &AttributeLabels::all_present(vec![y])).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(z).unwrap()[0].abs() < 1e-12);
    }

    #[test]
    fn bce_extreme_logit_is_stable() {
        let mut tape: Tape<f64> = Tape::new();
        let z = tape.leaf(vec![30.0], 1, 1, false).unwrap();
        let loss =
            sigmoid_bce_loss(&mut tape, z, &AttributeLabels::all_present(vec![1.0])).unwrap();
        let v = tape.scalar(loss);
        assert!(v.is_finite());
        assert!(v < 1e-12, "loss {v}");
    }

    #[test]
    fn bce_descent_step_reduces_loss_from_any_start() {
        // Convexity in each logit: one gradient-descent step on a fixed
        // example lowers the loss.
        for &start in &[-5.0, -0.3, 0.0, 0.7, 4.0] {
            let labels = AttributeLabels::all_present(vec![0.8, 0.2]);
            let eval = |z: &[f64]| {
                let mut tape: Tape<f64> = Tape::new();
                let zv = tape.leaf(z.to_vec(), 1, 2, true).unwrap();
                let loss = sigmoid_bce_loss(&mut tape, zv, &labels).unwrap();
                let g = tape.backward(loss).unwrap().get(zv).unwrap().to_vec();
                (tape.scalar(loss), g)
            };
            let z0 = [start, -start];
            let (l0, g) = eval(&z0);
            let z1 = [z0[0] - 0.5 * g[0], z0[1] - 0.5 * g[1]];
            let (l1, _) = eval(&z1);
            if g.iter().any(|&gi| gi.abs() > 1e-9) {
                assert!(l1 < l0, "start {start}: {l1} !< {l0}");
            }
        }
    }

    #[test]
    fn bce_missing_labels_are_masked_out() {
        let mut tape: Tape<f64> = Tape::new();
        let z = tape.leaf(vec![0.0, 50.0], 1, 2, false).unwrap();
        let labels = AttributeLabels { values: vec![1.0, 0.0], present: vec![true, false] };
        let loss = sigmoid_bce_loss(&mut tape, z, &labels).unwrap();
        // Only the first attribute counts: ln 2.
        assert!((tape.scalar(loss) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_uniform_logits_is_ln_vocab() {
        let vocab = 259;
        let mut tape: Tape<f64> = Tape::new();
        let logits = tape.leaf(vec![0.7; 2 * vocab], 2, vocab, false).unwrap();
        let loss = seq2seq_ce_loss(&mut tape, logits, &[5, 250], &[true, true]).unwrap();
        assert!((tape.scalar(loss) - (vocab as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn ce_saturated_correct_logits_vanish() {
        let vocab = 7;
        let mut logits = vec![0.0; vocab];
        logits[3] = 30.0;
        let mut tape: Tape<f64> = Tape::new();
        let lv = tape.leaf(logits, 1, vocab, false).unwrap();
        let loss = seq2seq_ce_loss(&mut tape, lv, &[3], &[true]).unwrap();
        assert!(tape.scalar(loss) < 1e-6);
    }

    #[test]
    fn ce_three_position_hand_oracle() {
        // Direct softmax arithmetic, computed independently below.
        let vocab = 3;
        let logits: Vec<f64> = vec![
            1.0, 0.0, -1.0, //
            0.5, 0.5, 0.5, //
            -2.0, 3.0, 0.0,
        ];
        let targets = [0u16, 2, 1];
        let mut expect = 0.0;
        for (row, &tgt) in targets.iter().enumerate() {
            let r = &logits[row * vocab..(row + 1) * vocab];
            let denom: f64 = r.iter().map(|v| v.exp()).sum();
            expect += -(r[tgt as usize].exp() / denom).ln();
        }
        expect /= 3.0;
        let mut tape: Tape<f64> = Tape::new();
        let lv = tape.leaf(logits, 3, vocab, false).unwrap();
        let loss = seq2seq_ce_loss(&mut tape, lv, &targets, &[true; 3]).unwrap();
        assert!((tape.scalar(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn ce_ignores_padded_positions() {
        let vocab = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = rand_vec(&mut rng, 2 * vocab);
        let mut padded = base.clone();
        padded.extend(rand_vec(&mut rng, vocab)); // junk at the padded slot
        let mut t1: Tape<f64> = Tape::new();
        let l1 = t1.leaf(base, 2, vocab, false).unwrap();
        let loss1 = seq2seq_ce_loss(&mut t1, l1, &[1, 2], &[true, true]).unwrap();
        let mut t2: Tape<f64> = Tape::new();
        let l2 = t2.leaf(padded, 3, vocab, false).unwrap();
        let loss2 = seq2seq_ce_loss(&mut t2, l2, &[1, 2, 0], &[true, true, false]).unwrap();
        assert_eq!(t1.scalar(loss1), t2.scalar(loss2));
    }

    #[test]
    fn ce_shift_invariance_per_position() {
        let vocab = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let base = rand_vec(&mut rng, 2 * vocab);
        let mut shifted = base.clone();
        for v in shifted[vocab..].iter_mut() {
            *v += 42.0;
        }
        let mut t1: Tape<f64> = Tape::new();
        let l1 = t1.leaf(base, 2, vocab, false).unwrap();
        let a = seq2seq_ce_loss(&mut t1, l1, &[0, 3], &[true, true]).unwrap();
        let mut t2: Tape<f64> = Tape::new();
        let l2 = t2.leaf(shifted, 2, vocab, false).unwrap();
        let b = seq2seq_ce_loss(&mut t2, l2, &[0, 3], &[true, true]).unwrap();
        assert!((t1.scalar(a) - t2.scalar(b)).abs() < 1e-12);
    }
}
