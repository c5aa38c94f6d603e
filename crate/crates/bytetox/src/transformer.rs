//! Reconfigurable transformer stack over latent subwords.
//!
//! Pre-norm residual blocks with RMS normalization, multi-head attention with
//! log-bucketed relative position biases instead of absolute positions, and
//! GeLU feed-forward layers. The decoder (causal self-attention plus
//! cross-attention into the encoder output) detaches entirely for
//! classification finetuning.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::elem::Elem;
use crate::tensor::{Tape, TensorError, Var};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub d_kv: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    /// 0 denotes encoder-only mode.
    pub n_dec_layers: usize,
    pub dropout_rate: f64,
    pub rel_bias_buckets: usize,
    pub rel_bias_max_distance: usize,
}

impl ModelConfig {
    /// Desk-scale defaults; the full-size configuration remains constructible
    /// by setting the fields directly.
    pub fn desk_scale() -> Self {
        ModelConfig {
            d_model: 64,
            d_ff: 256,
            d_kv: 16,
            n_heads: 4,
            n_enc_layers: 4,
            n_dec_layers: 2,
            dropout_rate: 0.1,
            rel_bias_buckets: 32,
            rel_bias_max_distance: 128,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.d_model == 0 || self.d_ff == 0 || self.d_kv == 0 || self.n_heads == 0 {
            return Err(TensorError::InvalidArgument {
                op: "model_config",
                details: "dimensions and head count must be positive".into(),
            });
        }
        if self.rel_bias_buckets < 2 {
            return Err(TensorError::InvalidArgument {
                op: "model_config",
                details: format!("need at least 2 relative bias buckets, got {}", self.rel_bias_buckets),
            });
        }
        Ok(())
    }
}

/// Log-bucketed relative position bucket, shared by encoder (bidirectional)
/// and decoder (unidirectional) attention. `offset` is key position minus
/// query position. Small offsets get exact buckets, larger ones logarithmic
/// buckets up to `max_distance`, and everything beyond is clamped.
pub fn relative_position_bucket(
    offset: i64,
    bidirectional: bool,
    num_buckets: usize,
    max_distance: usize,
) -> usize {
    let mut bucket = 0usize;
    let mut n = num_buckets;
    let pos = if bidirectional {
        n /= 2;
        if offset > 0 {
            bucket += n;
        }
        offset.unsigned_abs() as usize
    } else {
        (-offset.min(0)) as usize
    };
    let max_exact = n / 2;
    let idx = if pos < max_exact {
        pos
    } else {
        let log_ratio = (pos as f64 / max_exact as f64).ln()
            / (max_distance as f64 / max_exact as f64).ln();
        let large = max_exact + (log_ratio * (n - max_exact) as f64) as usize;
        large.min(n - 1)
    };
    bucket + idx
}

/// Flat (lq*lk) bucket indices for a bias matrix.
pub fn bias_bucket_indices(
    lq: usize,
    lk: usize,
    bidirectional: bool,
    num_buckets: usize,
    max_distance: usize,
) -> Vec<u32> {
    let mut idx = Vec::with_capacity(lq * lk);
    for i in 0..lq {
        for j in 0..lk {
            let offset = j as i64 - i as i64;
            idx.push(relative_position_bucket(offset, bidirectional, num_buckets, max_distance) as u32);
        }
    }
    idx
}

/// Tape-bound weights for one multi-head attention block (per-head
/// projections; the output projections sum across heads).
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: Vec<Var>,
    pub wk: Vec<Var>,
    pub wv: Vec<Var>,
    pub wo: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct EncoderLayerParams {
    pub attn_norm: Var,
    pub attn: AttentionParams,
    pub ff_norm: Var,
    pub ff_w1: Var,
    pub ff_w2: Var,
}

#[derive(Debug, Clone)]
pub struct DecoderLayerParams {
    pub self_norm: Var,
    pub self_attn: AttentionParams,
    pub cross_norm: Var,
    pub cross_attn: AttentionParams,
    pub ff_norm: Var,
    pub ff_w1: Var,
    pub ff_w2: Var,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub layers: Vec<EncoderLayerParams>,
    /// heads x buckets; shared across layers.
    pub rel_bias: Var,
    pub final_norm: Var,
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub layers: Vec<DecoderLayerParams>,
    pub rel_bias: Var,
    pub final_norm: Var,
    /// d_model x vocab output projection.
    pub lm_head: Var,
}

/// Per-forward knobs: dropout is active only while training.
pub struct Runtime<'r, R: Rng> {
    pub dropout: f64,
    pub rng: Option<&'r mut R>,
}

impl<'r> Runtime<'r, rand_chacha::ChaCha8Rng> {
    pub fn inference() -> Self {
        Runtime { dropout: 0.0, rng: None }
    }
}

impl<'r, R: Rng> Runtime<'r, R> {
    pub fn training(dropout: f64, rng: &'r mut R) -> Self {
        Runtime { dropout, rng: Some(rng) }
    }

    fn apply<F: Elem>(&mut self, tape: &mut Tape<F>, x: Var) -> Result<Var, TensorError> {
        match (&mut self.rng, self.dropout > 0.0) {
            (Some(rng), true) => tape.dropout(x, self.dropout, rng),
            _ => Ok(x),
        }
    }
}

/// Encoder output together with its latent mask.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub hidden: Var,
    pub mask: Vec<bool>,
}

const NEG_INF: f64 = -1e9;

/// Additive attention mask: NEG_INF where the key is padding (or, in causal
/// mode, ahead of the query).
fn attention_mask<F: Elem>(
    tape: &mut Tape<F>,
    lq: usize,
    kv_mask: &[bool],
    causal: bool,
) -> Result<Option<Var>, TensorError> {
    let lk = kv_mask.len();
    let all_visible = kv_mask.iter().all(|&m| m) && !causal;
    if all_visible {
        return Ok(None);
    }
    let neg = F::from_f64(NEG_INF);
    let mut data = vec![F::zero(); lq * lk];
    for i in 0..lq {
        for j in 0..lk {
            if !kv_mask[j] || (causal && j > i) {
                data[i * lk + j] = neg;
            }
        }
    }
    Ok(Some(tape.constant(data, lq, lk)?))
}

/// Multi-head scaled dot-product attention. `bias` holds one lq x lk matrix
/// per head (relative position bias); cross-attention passes none.
#[allow(clippy::too_many_arguments)]
fn multi_head_attention<F: Elem, R: Rng>(
    tape: &mut Tape<F>,
    queries: Var,
    keys_values: Var,
    kv_mask: &[bool],
    causal: bool,
    params: &AttentionParams,
    bias: Option<&[Var]>,
    d_kv: usize,
    rt: &mut Runtime<R>,
) -> Result<Var, TensorError> {
    let (lq, _) = tape.shape(queries);
    let scale = F::from_f64(1.0 / (d_kv as f64).sqrt());
    let mask = attention_mask(tape, lq, kv_mask, causal)?;
    let mut out: Option<Var> = None;
    for h in 0..params.wq.len() {
        let q = tape.matmul(queries, params.wq[h])?;
        let k = tape.matmul(keys_values, params.wk[h])?;
        let v = tape.matmul(keys_values, params.wv[h])?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let mut scores = tape.scale(scores, scale);
        if let Some(bias) = bias {
            scores = tape.add(scores, bias[h])?;
        }
        if let Some(m) = mask {
            scores = tape.add(scores, m)?;
        }
        let weights = tape.softmax(scores);
        let ctx = tape.matmul(weights, v)?;
        let proj = tape.matmul(ctx, params.wo[h])?;
        out = Some(match out {
            Some(acc) => tape.add(acc, proj)?,
            None => proj,
        });
    }
    let out = out.ok_or(TensorError::InvalidArgument {
        op: "attention",
        details: "zero heads".into(),
    })?;
    rt.apply(tape, out)
}

fn feed_forward<F: Elem, R: Rng>(
    tape: &mut Tape<F>,
    x: Var,
    w1: Var,
    w2: Var,
    rt: &mut Runtime<R>,
) -> Result<Var, TensorError> {
    let h = tape.matmul(x, w1)?;
    let h = tape.gelu(h);
    let out = tape.matmul(h, w2)?;
    rt.apply(tape, out)
}

/// Per-head relative bias matrices gathered from the shared heads x buckets
/// table.
fn bias_per_head<F: Elem>(
    tape: &mut Tape<F>,
    table: Var,
    cfg: &ModelConfig,
    lq: usize,
    lk: usize,
    bidirectional: bool,
) -> Result<Vec<Var>, TensorError> {
    let idx = bias_bucket_indices(lq, lk, bidirectional, cfg.rel_bias_buckets, cfg.rel_bias_max_distance);
    (0..cfg.n_heads)
        .map(|h| tape.rel_bias(table, h, &idx, lq, lk))
        .collect()
}

/// Run the encoder stack over a latent sequence. A zero-layer configuration is
/// the identity.
pub fn encode<F: Elem, R: Rng>(
    tape: &mut Tape<F>,
    latent: Var,
    mask: &[bool],
    cfg: &ModelConfig,
    params: &EncoderParams,
    rt: &mut Runtime<R>,
) -> Result<EncoderOutput, TensorError> {
    cfg.validate()?;
    let (l, _) = tape.shape(latent);
    if params.layers.is_empty() {
        return Ok(EncoderOutput { hidden: latent, mask: mask.to_vec() });
    }
    let bias = bias_per_head(tape, params.rel_bias, cfg, l, l, true)?;
    let mut x = latent;
    for layer in &params.layers {
        let h = tape.rms_norm(x, layer.attn_norm)?;
        let attn = multi_head_attention(
            tape, h, h, mask, false, &layer.attn, Some(&bias), cfg.d_kv, rt,
        )?;
        x = tape.add(x, attn)?;
        let h = tape.rms_norm(x, layer.ff_norm)?;
        let ff = feed_forward(tape, h, layer.ff_w1, layer.ff_w2, rt)?;
        x = tape.add(x, ff)?;
    }
    let hidden = tape.rms_norm(x, params.final_norm)?;
    Ok(EncoderOutput { hidden, mask: mask.to_vec() })
}

/// Teacher-forced decoder: causal self-attention over the shifted target
/// embeddings plus cross-attention into the encoder output. Returns logits
/// over the byte vocabulary, one row per target position.
#[allow(clippy::too_many_arguments)]
pub fn decode<F: Elem, R: Rng>(
    tape: &mut Tape<F>,
    enc: &EncoderOutput,
    target_embedded: Var,
    target_mask: &[bool],
    cfg: &ModelConfig,
    params: &DecoderParams,
    rt: &mut Runtime<R>,
) -> Result<Var, TensorError> {
    cfg.validate()?;
    let (lt, _) = tape.shape(target_embedded);
    let bias = bias_per_head(tape, params.rel_bias, cfg, lt, lt, false)?;
    let mut x = target_embedded;
    for layer in &params.layers {
        let h = tape.rms_norm(x, layer.self_norm)?;
        let attn = multi_head_attention(
            tape, h, h, target_mask, true, &layer.self_attn, Some(&bias), cfg.d_kv, rt,
        )?;
        x = tape.add(x, attn)?;
        let h = tape.rms_norm(x, layer.cross_norm)?;
        let cross = multi_head_attention(
            tape, h, enc.hidden, &enc.mask, false, &layer.cross_attn, None, cfg.d_kv, rt,
        )?;
        x = tape.add(x, cross)?;
        let h = tape.rms_norm(x, layer.ff_norm)?;
        let ff = feed_forward(tape, h, layer.ff_w1, layer.ff_w2, rt)?;
        x = tape.add(x, ff)?;
    }
    let x = tape.rms_norm(x, params.final_norm)?;
    tape.matmul(x, params.lm_head)
}
