//! Gradient-based subword tokenization.
//!
//! At every byte position the module scores candidate blocks of sizes 1..=M,
//! softmaxes the scores across block sizes, sums the block embeddings under
//! those weights, and mean-pools the result down by the configured rate. The
//! whole pipeline is differentiable, so the "tokenizer" trains with the rest
//! of the network.

use serde::{Deserialize, Serialize};

use crate::elem::Elem;
use crate::tensor::{Tape, TensorError, Var};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GbstConfig {
    /// Maximum block size M; candidates are sized 1..=M.
    pub max_block: usize,
    /// Width of the widest pre-enumeration convolution (odd). Block size b
    /// uses width min(next_odd(b+1), conv_width).
    pub conv_width: usize,
    /// Sequence-length downsampling rate applied after composition.
    pub downsample: usize,
    pub d_model: usize,
}

impl GbstConfig {
    pub fn new(max_block: usize, conv_width: usize, downsample: usize, d_model: usize) -> Self {
        GbstConfig { max_block, conv_width, downsample, d_model }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.max_block < 1 || self.downsample < 1 || self.d_model < 1 {
            return Err(TensorError::InvalidArgument {
                op: "gbst_config",
                details: format!(
                    "max_block, downsample and d_model must be >= 1 (got {}, {}, {})",
                    self.max_block, self.downsample, self.d_model
                ),
            });
        }
        if self.conv_width % 2 == 0 {
            return Err(TensorError::InvalidArgument {
                op: "gbst_config",
                details: format!("conv_width must be odd, got {}", self.conv_width),
            });
        }
        Ok(())
    }

    /// Convolution width used ahead of the stride-b enumeration: b+1 rounded
    /// up to the nearest odd width, capped at `conv_width`.
    pub fn conv_width_for_block(&self, b: usize) -> usize {
        let w = if (b + 1) % 2 == 0 { b + 2 } else { b + 1 };
        w.min(self.conv_width)
    }
}

impl Default for GbstConfig {
    fn default() -> Self {
        GbstConfig { max_block: 4, conv_width: 5, downsample: 2, d_model: 64 }
    }
}

/// Tape-bound parameters: one `(width*d) x d` kernel per block size plus the
/// shared `d x 1` block-scoring map.
#[derive(Debug, Clone)]
pub struct GbstParams {
    pub conv_kernels: Vec<Var>,
    pub score_w: Var,
}

/// Per-block-size candidate embeddings upsampled back to byte length, plus the
/// raw score matrix (L x M).
#[derive(Debug, Clone)]
pub struct BlockCandidateSet {
    pub upsampled: Vec<Var>,
    pub scores: Var,
    pub len: usize,
}

/// GBST output after composition and downsampling.
#[derive(Debug, Clone)]
pub struct LatentSubwordSequence {
    pub latent: Var,
    pub mask: Vec<bool>,
}

/// Step 1-2: enumerate candidate blocks of sizes 1..=M with their scores.
///
/// For each block size b: convolve (same padding), re-zero padded rows, pool
/// non-overlapping stride-b windows, score each pooled block with the shared
/// linear map, then upsample blocks and scores back to length L by repeating
/// each block b times (truncated at L).
pub fn enumerate_blocks<F: Elem>(
    tape: &mut Tape<F>,
    x: Var,
    mask: &[bool],
    cfg: &GbstConfig,
    params: &GbstParams,
) -> Result<BlockCandidateSet, TensorError> {
    cfg.validate()?;
    let (len, d) = tape.shape(x);
    if d != cfg.d_model {
        return Err(TensorError::ShapeMismatch {
            op: "enumerate_blocks",
            details: format!("input is {len}x{d} but d_model is {}", cfg.d_model),
        });
    }
    if params.conv_kernels.len() != cfg.max_block {
        return Err(TensorError::InvalidArgument {
            op: "enumerate_blocks",
            details: format!(
                "expected {} conv kernels, got {}",
                cfg.max_block,
                params.conv_kernels.len()
            ),
        });
    }

    // Padding rows are zero on input but the convolution smears values into
    // them; re-zero before pooling so padded positions contribute zeros.
    let mask_col: Vec<F> =
        mask.iter().map(|&m| if m { F::one() } else { F::zero() }).collect();
    let needs_mask = mask.iter().any(|&m| !m);
    let mask_var =
        if needs_mask { Some(tape.constant(mask_col, len, 1)?) } else { None };

    let mut upsampled = Vec::with_capacity(cfg.max_block);
    let mut score_cols = Vec::with_capacity(cfg.max_block);
    for b in 1..=cfg.max_block {
        let width = cfg.conv_width_for_block(b);
        let conv = tape.conv1d_same(x, width, params.conv_kernels[b - 1])?;
        let conv = match mask_var {
            Some(mv) => tape.row_scale(conv, mv)?,
            None => conv,
        };
        let pooled = tape.strided_mean_pool(conv, b)?;
        let scores = tape.matmul(pooled, params.score_w)?;
        upsampled.push(tape.repeat_rows(pooled, b, len)?);
        score_cols.push(tape.repeat_rows(scores, b, len)?);
    }
    let scores = tape.concat_cols(&score_cols)?;
    Ok(BlockCandidateSet { upsampled, scores, len })
}

/// Step 3-4: softmax the scores across block sizes at each position and sum
/// the candidate embeddings under those weights.
pub fn compose<F: Elem>(
    tape: &mut Tape<F>,
    cands: &BlockCandidateSet,
) -> Result<Var, TensorError> {
    let weights = tape.softmax(cands.scores);
    let mut out: Option<Var> = None;
    for (b, &xb) in cands.upsampled.iter().enumerate() {
        let wb = tape.col_select(weights, b)?;
        let term = tape.row_scale(xb, wb)?;
        out = Some(match out {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    out.ok_or(TensorError::InvalidArgument {
        op: "compose",
        details: "no block candidates".into(),
    })
}

/// Step 5: mean-pool the composed sequence down by `rate`. A downsampled
/// position is unmasked when any contributing byte position was.
pub fn downsample<F: Elem>(
    tape: &mut Tape<F>,
    composed: Var,
    rate: usize,
    mask: &[bool],
) -> Result<LatentSubwordSequence, TensorError> {
    let latent = tape.strided_mean_pool(composed, rate)?;
    let (rows, _) = tape.shape(latent);
    let mut down_mask = Vec::with_capacity(rows);
    for j in 0..rows {
        let lo = j * rate;
        let hi = ((j + 1) * rate).min(mask.len());
        down_mask.push(mask[lo..hi].iter().any(|&m| m));
    }
    Ok(LatentSubwordSequence { latent, mask: down_mask })
}

/// The full module: enumerate, compose, downsample.
pub fn gbst_forward<F: Elem>(
    tape: &mut Tape<F>,
    x: Var,
    mask: &[bool],
    cfg: &GbstConfig,
    params: &GbstParams,
) -> Result<LatentSubwordSequence, TensorError> {
    let cands = enumerate_blocks(tape, x, mask, cfg, params)?;
    let composed = compose(tape, &cands)?;
    downsample(tape, composed, cfg.downsample, mask)
}
