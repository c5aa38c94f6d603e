//! Reverse-mode automatic differentiation over dense 2-D arrays.
//!
//! Operations are recorded on an append-only tape ([`Tape`]); [`Tape::backward`]
//! replays the records in reverse to accumulate gradients. The primitive set is
//! exactly what the model graph needs: matmul, elementwise arithmetic,
//! embedding gather, softmax, GeLU, RMS normalization, same-padded 1-D
//! convolution, strided mean pooling, repetition upsampling, sigmoid, dropout,
//! and two fused losses.
//!
//! Every tensor is rank 2 (scalars are 1x1, vectors are Lx1). Tensors are
//! immutable once created; a tape is confined to one worker, and independent
//! tapes may run concurrently.

use std::sync::Arc;

use thiserror::Error;

use crate::elem::Elem;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("{op}: data length {len} does not match shape {rows}x{cols}")]
    LengthMismatch {
        op: &'static str,
        len: usize,
        rows: usize,
        cols: usize,
    },
    #[error("{op}: invalid argument: {details}")]
    InvalidArgument { op: &'static str, details: String },
    #[error("backward requires a scalar loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("embedding id {id} out of range for table with {rows} rows")]
    IdOutOfRange { id: usize, rows: usize },
}

fn shape_err(op: &'static str, details: String) -> TensorError {
    TensorError::ShapeMismatch { op, details }
}

/// Recorded primitive application. Input handles always precede the output on
/// the tape, which gives the topological order backward relies on.
#[derive(Debug, Clone)]
enum Op<F: Elem> {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    RowScale(Var, Var),
    ConcatCols(Vec<Var>),
    ColSelect(Var, usize),
    RowSelect(Var, usize),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    Gelu(Var),
    Sigmoid(Var),
    RmsNorm { x: Var, gain: Var },
    Im2col { x: Var, width: usize },
    MeanPool { x: Var, window: usize },
    RepeatRows { x: Var, factor: usize },
    Embed { table: Var, ids: Vec<u16>, mask: Vec<bool> },
    RelBias { table: Var, head: usize, idx: Vec<u32> },
    Dropout { x: Var, keep: Vec<bool>, scale: F },
    SoftmaxCrossEntropy { logits: Var, targets: Vec<u16>, mask: Vec<bool> },
    BceWithLogits { logits: Var, labels: Vec<F>, present: Vec<bool> },
}

#[derive(Debug)]
struct Node<F: Elem> {
    rows: usize,
    cols: usize,
    data: Arc<Vec<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients for every tape position that required them.
#[derive(Debug)]
pub struct Gradients<F: Elem> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Elem> Gradients<F> {
    /// Gradient of the loss with respect to `v`, if any was accumulated.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

const RMS_EPS: f64 = 1e-6;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// The computation record: an append-only arena of tensors plus the primitive
/// applications that produced them.
pub struct Tape<F: Elem> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
}

impl<F: Elem> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Elem> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: true }
    }

    /// A tape that never tracks gradients, for scoring and serving.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].data
    }

    /// (rows, cols) of the tensor behind `v`.
    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<F>, op: Op<F>, requires_grad: bool) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            data: Arc::new(data),
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Insert a leaf tensor. `requires_grad` marks it as a differentiable input.
    pub fn leaf(
        &mut self,
        data: Vec<F>,
        rows: usize,
        cols: usize,
        requires_grad: bool,
    ) -> Result<Var, TensorError> {
        if data.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(TensorError::LengthMismatch { op: "leaf", len: data.len(), rows, cols });
        }
        Ok(self.push(rows, cols, data, Op::Leaf, requires_grad))
    }

    /// Insert an already shared buffer as a leaf without copying.
    pub fn leaf_shared(
        &mut self,
        data: Arc<Vec<F>>,
        rows: usize,
        cols: usize,
        requires_grad: bool,
    ) -> Result<Var, TensorError> {
        if data.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(TensorError::LengthMismatch { op: "leaf", len: data.len(), rows, cols });
        }
        self.nodes.push(Node {
            rows,
            cols,
            data,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Non-differentiable constant.
    pub fn constant(&mut self, data: Vec<F>, rows: usize, cols: usize) -> Result<Var, TensorError> {
        self.leaf(data, rows, cols, false)
    }

    pub fn scalar_constant(&mut self, x: F) -> Var {
        self.push(1, 1, vec![x], Op::Leaf, false)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("inner dimensions differ: lhs is {m}x{k}, rhs is {k2}x{n}"),
            ));
        }
        let mut out = vec![F::zero(); m * n];
        matmul_into(self.value(a), self.value(b), m, k, n, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(m, n, out, Op::Matmul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, n) = self.shape(a);
        let x = self.value(a);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(n, m, out, Op::Transpose(a), rg))
    }

    fn elementwise2(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(usize, usize), TensorError> {
        let (m, n) = self.shape(a);
        let (m2, n2) = self.shape(b);
        if (m, n) != (m2, n2) {
            return Err(shape_err(op_name, format!("operands are {m}x{n} and {m2}x{n2}")));
        }
        Ok((m, n))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, n) = self.elementwise2("add", a, b)?;
        let out: Vec<F> =
            self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(m, n, out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, n) = self.elementwise2("sub", a, b)?;
        let out: Vec<F> =
            self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(m, n, out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, n) = self.elementwise2("mul", a, b)?;
        let out: Vec<F> =
            self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(m, n, out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let (m, n) = self.shape(a);
        let out: Vec<F> = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.rg(&[a]);
        self.push(m, n, out, Op::Scale(a, c), rg)
    }

    /// Multiply row `i` of `x` by `s[i]`. `s` must be a column vector.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let (m, n) = self.shape(x);
        let (ms, cs) = self.shape(s);
        if ms != m || cs != 1 {
            return Err(shape_err(
                "row_scale",
                format!("x is {m}x{n} but scale vector is {ms}x{cs} (need {m}x1)"),
            ));
        }
        let xs = self.value(x);
        let ss = self.value(s);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let si = ss[i];
            for j in 0..n {
                out[i * n + j] = xs[i * n + j] * si;
            }
        }
        let rg = self.rg(&[x, s]);
        Ok(self.push(m, n, out, Op::RowScale(x, s), rg))
    }

    /// Stack column blocks side by side. All parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "concat_cols",
                details: "need at least one part".into(),
            });
        }
        let (m, _) = self.shape(parts[0]);
        let mut total = 0usize;
        for &p in parts {
            let (mp, np) = self.shape(p);
            if mp != m {
                return Err(shape_err(
                    "concat_cols",
                    format!("row counts differ: {m} vs {mp}"),
                ));
            }
            total += np;
        }
        let mut out = vec![F::zero(); m * total];
        let mut col = 0usize;
        for &p in parts {
            let (_, np) = self.shape(p);
            let data = self.value(p);
            for i in 0..m {
                out[i * total + col..i * total + col + np]
                    .copy_from_slice(&data[i * np..(i + 1) * np]);
            }
            col += np;
        }
        let rg = self.rg(parts);
        Ok(self.push(m, total, out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Column `col` of `x` as an mx1 vector.
    pub fn col_select(&mut self, x: Var, col: usize) -> Result<Var, TensorError> {
        let (m, n) = self.shape(x);
        if col >= n {
            return Err(TensorError::InvalidArgument {
                op: "col_select",
                details: format!("column {col} out of range for {m}x{n}"),
            });
        }
        let data = self.value(x);
        let out: Vec<F> = (0..m).map(|i| data[i * n + col]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(m, 1, out, Op::ColSelect(x, col), rg))
    }

    /// Row `row` of `x` as a 1xn vector.
    pub fn row_select(&mut self, x: Var, row: usize) -> Result<Var, TensorError> {
        let (m, n) = self.shape(x);
        if row >= m {
            return Err(TensorError::InvalidArgument {
                op: "row_select",
                details: format!("row {row} out of range for {m}x{n}"),
            });
        }
        let out = self.value(x)[row * n..(row + 1) * n].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(1, n, out, Op::RowSelect(x, row), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = F::zero();
        for &v in self.value(x) {
            acc += v;
        }
        let rg = self.rg(&[x]);
        self.push(1, 1, vec![acc], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let len = self.value(x).len();
        let mut acc = F::zero();
        for &v in self.value(x) {
            acc += v;
        }
        let out = acc / F::from_f64(len as f64);
        let rg = self.rg(&[x]);
        self.push(1, 1, vec![out], Op::Mean(x), rg)
    }

    /// Row-wise softmax (numerically stabilized by max subtraction).
    pub fn softmax(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let xs = self.value(x);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            softmax_row(&xs[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[x]);
        self.push(m, n, out, Op::Softmax(x), rg)
    }

    /// GeLU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let out: Vec<F> = self.value(x).iter().map(|&v| gelu(v)).collect();
        let rg = self.rg(&[x]);
        self.push(m, n, out, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let out: Vec<F> = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let rg = self.rg(&[x]);
        self.push(m, n, out, Op::Sigmoid(x), rg)
    }

    /// Row-wise RMS normalization with a learned per-column gain (1xn).
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var, TensorError> {
        let (m, n) = self.shape(x);
        let (gr, gc) = self.shape(gain);
        if gr != 1 || gc != n {
            return Err(shape_err(
                "rms_norm",
                format!("x is {m}x{n} but gain is {gr}x{gc} (need 1x{n})"),
            ));
        }
        let xs = self.value(x);
        let gs = self.value(gain);
        let mut out = vec![F::zero(); m * n];
        let eps = F::from_f64(RMS_EPS);
        let inv_n = F::from_f64(1.0 / n as f64);
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mut ms = F::zero();
            for &v in row {
                ms += v * v;
            }
            let s = (ms * inv_n + eps).sqrt().recip();
            for j in 0..n {
                out[i * n + j] = row[j] * s * gs[j];
            }
        }
        let rg = self.rg(&[x, gain]);
        Ok(self.push(m, n, out, Op::RmsNorm { x, gain }, rg))
    }

    /// Unfold `width`-wide windows around each row (zero padded) so that a
    /// same-padded 1-D convolution becomes a matmul against a
    /// `(width*d_in) x d_out` kernel.
    pub fn im2col(&mut self, x: Var, width: usize) -> Result<Var, TensorError> {
        if width == 0 || width % 2 == 0 {
            return Err(TensorError::InvalidArgument {
                op: "im2col",
                details: format!("width must be odd and positive, got {width}"),
            });
        }
        let (l, d) = self.shape(x);
        let xs = self.value(x);
        let half = width / 2;
        let mut out = vec![F::zero(); l * width * d];
        let oc = width * d;
        for i in 0..l {
            for t in 0..width {
                let src = i as isize + t as isize - half as isize;
                if src >= 0 && (src as usize) < l {
                    let src = src as usize;
                    out[i * oc + t * d..i * oc + (t + 1) * d]
                        .copy_from_slice(&xs[src * d..(src + 1) * d]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(l, oc, out, Op::Im2col { x, width }, rg))
    }

    /// Same-padded 1-D convolution over an Lxd sequence. `kernel` must be
    /// `(width*d_in) x d_out`; the output keeps length L. Positions beyond the
    /// sequence contribute zeros.
    pub fn conv1d_same(&mut self, x: Var, width: usize, kernel: Var) -> Result<Var, TensorError> {
        let (_, d) = self.shape(x);
        let (kr, _) = self.shape(kernel);
        if kr != width * d {
            return Err(shape_err(
                "conv1d_same",
                format!("kernel has {kr} rows, expected width*d_in = {width}*{d} = {}", width * d),
            ));
        }
        let cols = self.im2col(x, width)?;
        self.matmul(cols, kernel)
    }

    /// Mean over consecutive windows of `window` rows; the tail window may be
    /// shorter and is averaged over the rows it actually covers. Output length
    /// is ceil(L/window).
    pub fn strided_mean_pool(&mut self, x: Var, window: usize) -> Result<Var, TensorError> {
        if window == 0 {
            return Err(TensorError::InvalidArgument {
                op: "strided_mean_pool",
                details: "window must be >= 1".into(),
            });
        }
        let (l, d) = self.shape(x);
        let out_rows = l.div_ceil(window);
        let xs = self.value(x);
        let mut out = vec![F::zero(); out_rows * d];
        for j in 0..out_rows {
            let lo = j * window;
            let hi = ((j + 1) * window).min(l);
            let inv = F::from_f64(1.0 / (hi - lo) as f64);
            for i in lo..hi {
                for c in 0..d {
                    out[j * d + c] += xs[i * d + c] * inv;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out_rows, d, out, Op::MeanPool { x, window }, rg))
    }

    /// Repeat each row `factor` times, truncated to `out_rows` total rows.
    pub fn repeat_rows(&mut self, x: Var, factor: usize, out_rows: usize) -> Result<Var, TensorError> {
        let (n, d) = self.shape(x);
        if factor == 0 || out_rows == 0 || out_rows > n * factor || out_rows.div_ceil(factor) != n {
            return Err(TensorError::InvalidArgument {
                op: "repeat_rows",
                details: format!("cannot repeat {n} rows by {factor} into {out_rows} rows"),
            });
        }
        let xs = self.value(x);
        let mut out = vec![F::zero(); out_rows * d];
        for i in 0..out_rows {
            let src = i / factor;
            out[i * d..(i + 1) * d].copy_from_slice(&xs[src * d..(src + 1) * d]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out_rows, d, out, Op::RepeatRows { x, factor }, rg))
    }

    /// Embedding lookup: row i of the output is `table[ids[i]]` where
    /// `mask[i]`, and zeros elsewhere.
    pub fn embed(&mut self, table: Var, ids: &[u16], mask: &[bool]) -> Result<Var, TensorError> {
        if ids.is_empty() || ids.len() != mask.len() {
            return Err(TensorError::InvalidArgument {
                op: "embed",
                details: format!("ids ({}) and mask ({}) must be nonempty and equal", ids.len(), mask.len()),
            });
        }
        let (rows, d) = self.shape(table);
        for &id in ids {
            if id as usize >= rows {
                return Err(TensorError::IdOutOfRange { id: id as usize, rows });
            }
        }
        let ts = self.value(table);
        let l = ids.len();
        let mut out = vec![F::zero(); l * d];
        for (i, (&id, &m)) in ids.iter().zip(mask).enumerate() {
            if m {
                let id = id as usize;
                out[i * d..(i + 1) * d].copy_from_slice(&ts[id * d..(id + 1) * d]);
            }
        }
        let rg = self.rg(&[table]);
        Ok(self.push(l, d, out, Op::Embed { table, ids: ids.to_vec(), mask: mask.to_vec() }, rg))
    }

    /// Relative-position bias matrix for one attention head: entry (i, j) is
    /// `table[head, idx[i*lk + j]]` where `table` is heads x buckets.
    pub fn rel_bias(
        &mut self,
        table: Var,
        head: usize,
        idx: &[u32],
        lq: usize,
        lk: usize,
    ) -> Result<Var, TensorError> {
        let (h, buckets) = self.shape(table);
        if head >= h {
            return Err(TensorError::InvalidArgument {
                op: "rel_bias",
                details: format!("head {head} out of range for {h} heads"),
            });
        }
        if idx.len() != lq * lk {
            return Err(shape_err(
                "rel_bias",
                format!("index count {} does not match {lq}x{lk}", idx.len()),
            ));
        }
        let ts = self.value(table);
        let mut out = vec![F::zero(); lq * lk];
        for (o, &b) in out.iter_mut().zip(idx) {
            debug_assert!((b as usize) < buckets);
            *o = ts[head * buckets + b as usize];
        }
        let rg = self.rg(&[table]);
        Ok(self.push(lq, lk, out, Op::RelBias { table, head, idx: idx.to_vec() }, rg))
    }

    /// Inverted dropout: kept entries are scaled by 1/(1-rate) so expectations
    /// match evaluation mode. `rate` = 0 is the identity.
    pub fn dropout<R: rand::Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                details: format!("rate must be in [0, 1), got {rate}"),
            });
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let (m, n) = self.shape(x);
        let keep: Vec<bool> = (0..m * n).map(|_| rng.random::<f64>() >= rate).collect();
        let scale = F::from_f64(1.0 / (1.0 - rate));
        let out: Vec<F> = self
            .value(x)
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v * scale } else { F::zero() })
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(m, n, out, Op::Dropout { x, keep, scale }, rg))
    }

    /// Mean token-level cross entropy over the positions where `mask` is true.
    /// `logits` is T x V; `targets` holds one class id per row.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u16],
        mask: &[bool],
    ) -> Result<Var, TensorError> {
        let (t, v) = self.shape(logits);
        if targets.len() != t || mask.len() != t {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("logits have {t} rows but {} targets / {} mask entries", targets.len(), mask.len()),
            ));
        }
        let included = mask.iter().filter(|&&m| m).count();
        if included == 0 {
            return Err(TensorError::InvalidArgument {
                op: "softmax_cross_entropy",
                details: "no unmasked target positions".into(),
            });
        }
        for (&id, &m) in targets.iter().zip(mask) {
            if m && id as usize >= v {
                return Err(TensorError::IdOutOfRange { id: id as usize, rows: v });
            }
        }
        let xs = self.value(logits);
        let mut acc = F::zero();
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            let row = &xs[i * v..(i + 1) * v];
            acc += log_sum_exp(row) - row[targets[i] as usize];
        }
        let loss = acc / F::from_f64(included as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec() },
            rg,
        ))
    }

    /// Mean sigmoid cross entropy over the `present` entries, computed in the
    /// numerically stable logit form max(z,0) - z*y + ln(1 + exp(-|z|)).
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        labels: &[F],
        present: &[bool],
    ) -> Result<Var, TensorError> {
        let (m, n) = self.shape(logits);
        if labels.len() != m * n || present.len() != m * n {
            return Err(shape_err(
                "bce_with_logits",
                format!("logits are {m}x{n} but {} labels / {} mask entries", labels.len(), present.len()),
            ));
        }
        for (&y, &p) in labels.iter().zip(present) {
            if p && !(F::zero()..=F::one()).contains(&y) {
                return Err(TensorError::InvalidArgument {
                    op: "bce_with_logits",
                    details: format!("label {y} outside [0, 1]"),
                });
            }
        }
        let included = present.iter().filter(|&&p| p).count();
        if included == 0 {
            return Err(TensorError::InvalidArgument {
                op: "bce_with_logits",
                details: "no labels present".into(),
            });
        }
        let xs = self.value(logits);
        let mut acc = F::zero();
        for i in 0..m * n {
            if !present[i] {
                continue;
            }
            let z = xs[i];
            let y = labels[i];
            acc += z.max(F::zero()) - z * y + (F::one() + (-z.abs()).exp()).ln();
        }
        let loss = acc / F::from_f64(included as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::BceWithLogits { logits, labels: labels.to_vec(), present: present.to_vec() },
            rg,
        ))
    }

    /// Reverse pass from a scalar loss. Gradients are accumulated for every
    /// node on a path to a `requires_grad` leaf; two runs over the same record
    /// produce bit-identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, TensorError> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(TensorError::NonScalarLoss { rows: r, cols: c });
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![F::one()]);
        for id in (0..n).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let (before, rest) = grads.split_at_mut(id);
            let g = rest[0].as_ref().expect("checked above");
            self.apply_vjp(id, g, before);
        }
        Ok(Gradients { grads })
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Vec<F>>], v: Var) -> Option<&'a mut Vec<F>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.rows * node.cols;
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); len]))
    }

    fn apply_vjp(&self, id: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = self.shape(*a);
                let (_, n) = self.shape(*b);
                if let Some(da) = self.grad_slot(grads, *a) {
                    matmul_nt_acc(g, self.value(*b), m, n, k, da);
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    matmul_tn_acc(self.value(*a), g, m, k, n, db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.shape(*a);
                if let Some(da) = self.grad_slot(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.grad_slot(grads, *a) {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.grad_slot(grads, *a) {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = self.grad_slot(grads, *a) {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(self.value(*b)) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(self.value(*a)) {
                        *d += gv * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = self.grad_slot(grads, *a) {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv * *c;
                    }
                }
            }
            Op::RowScale(x, s) => {
                let (m, n) = self.shape(*x);
                if let Some(dx) = self.grad_slot(grads, *x) {
                    let ss = self.value(*s);
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] += g[i * n + j] * ss[i];
                        }
                    }
                }
                if let Some(ds) = self.grad_slot(grads, *s) {
                    let xs = self.value(*x);
                    for i in 0..m {
                        let mut acc = F::zero();
                        for j in 0..n {
                            acc += g[i * n + j] * xs[i * n + j];
                        }
                        ds[i] += acc;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (node.rows, node.cols);
                let mut col = 0usize;
                for &p in parts {
                    let (_, np) = self.shape(p);
                    if let Some(dp) = self.grad_slot(grads, p) {
                        for i in 0..m {
                            for j in 0..np {
                                dp[i * np + j] += g[i * total + col + j];
                            }
                        }
                    }
                    col += np;
                }
            }
            Op::ColSelect(x, col) => {
                let (m, n) = self.shape(*x);
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for i in 0..m {
                        dx[i * n + col] += g[i];
                    }
                }
            }
            Op::RowSelect(x, row) => {
                let (_, n) = self.shape(*x);
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for j in 0..n {
                        dx[row * n + j] += g[j];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                let len = self.value(*x).len();
                let gv = g[0] / F::from_f64(len as f64);
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for d in dx.iter_mut() {
                        *d += gv;
                    }
                }
            }
            Op::Softmax(x) => {
                let (m, n) = (node.rows, node.cols);
                let y = &node.data;
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let mut dot = F::zero();
                        for (yv, gv) in yr.iter().zip(gr) {
                            dot += *yv * *gv;
                        }
                        for j in 0..n {
                            dx[i * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(self.value(*x)) {
                        *d += gv * gelu_prime(xv);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.data;
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y.iter()) {
                        *d += gv * yv * (F::one() - yv);
                    }
                }
            }
            Op::RmsNorm { x, gain } => {
                let (m, n) = (node.rows, node.cols);
                let xs = self.value(*x);
                let gs = self.value(*gain);
                let eps = F::from_f64(RMS_EPS);
                let inv_n = F::from_f64(1.0 / n as f64);
                for i in 0..m {
                    let row = &xs[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let mut ms = F::zero();
                    for &v in row {
                        ms += v * v;
                    }
                    let s = (ms * inv_n + eps).sqrt().recip();
                    if self.nodes[x.0].requires_grad {
                        let mut dot = F::zero();
                        for j in 0..n {
                            dot += gr[j] * gs[j] * row[j];
                        }
                        let s3 = s * s * s * inv_n;
                        let dx = self.grad_slot(grads, *x).expect("requires_grad checked");
                        for j in 0..n {
                            dx[i * n + j] += s * gs[j] * gr[j] - s3 * row[j] * dot;
                        }
                    }
                    if self.nodes[gain.0].requires_grad {
                        let dg = self.grad_slot(grads, *gain).expect("requires_grad checked");
                        for j in 0..n {
                            dg[j] += gr[j] * row[j] * s;
                        }
                    }
                }
            }
            Op::Im2col { x, width } => {
                let (l, oc) = (node.rows, node.cols);
                let d = oc / width;
                let half = width / 2;
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for i in 0..l {
                        for t in 0..*width {
                            let src = i as isize + t as isize - half as isize;
                            if src >= 0 && (src as usize) < l {
                                let src = src as usize;
                                for c in 0..d {
                                    dx[src * d + c] += g[i * oc + t * d + c];
                                }
                            }
                        }
                    }
                }
            }
            Op::MeanPool { x, window } => {
                let (l, d) = self.shape(*x);
                let out_rows = node.rows;
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for j in 0..out_rows {
                        let lo = j * window;
                        let hi = ((j + 1) * window).min(l);
                        let inv = F::from_f64(1.0 / (hi - lo) as f64);
                        for i in lo..hi {
                            for c in 0..d {
                                dx[i * d + c] += g[j * d + c] * inv;
                            }
                        }
                    }
                }
            }
            Op::RepeatRows { x, factor } => {
                let (out_rows, d) = (node.rows, node.cols);
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for i in 0..out_rows {
                        let src = i / factor;
                        for c in 0..d {
                            dx[src * d + c] += g[i * d + c];
                        }
                    }
                }
            }
            Op::Embed { table, ids, mask } => {
                let d = node.cols;
                if let Some(dt) = self.grad_slot(grads, *table) {
                    for (i, (&id, &m)) in ids.iter().zip(mask).enumerate() {
                        if m {
                            let id = id as usize;
                            for c in 0..d {
                                dt[id * d + c] += g[i * d + c];
                            }
                        }
                    }
                }
            }
            Op::RelBias { table, head, idx } => {
                let (_, buckets) = self.shape(*table);
                if let Some(dt) = self.grad_slot(grads, *table) {
                    for (&b, &gv) in idx.iter().zip(g) {
                        dt[head * buckets + b as usize] += gv;
                    }
                }
            }
            Op::Dropout { x, keep, scale } => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for ((d, &gv), &k) in dx.iter_mut().zip(g).zip(keep) {
                        if k {
                            *d += gv * *scale;
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets, mask } => {
                let (t, v) = self.shape(*logits);
                let included = mask.iter().filter(|&&m| m).count();
                let gv = g[0] / F::from_f64(included as f64);
                if let Some(dl) = self.grad_slot(grads, *logits) {
                    let xs = self.value(*logits);
                    let mut probs = vec![F::zero(); v];
                    for i in 0..t {
                        if !mask[i] {
                            continue;
                        }
                        softmax_row(&xs[i * v..(i + 1) * v], &mut probs);
                        for j in 0..v {
                            dl[i * v + j] += gv * probs[j];
                        }
                        dl[i * v + targets[i] as usize] -= gv;
                    }
                }
            }
            Op::BceWithLogits { logits, labels, present } => {
                let included = present.iter().filter(|&&p| p).count();
                let gv = g[0] / F::from_f64(included as f64);
                if let Some(dl) = self.grad_slot(grads, *logits) {
                    let xs = self.value(*logits);
                    for i in 0..xs.len() {
                        if present[i] {
                            dl[i] += gv * (sigmoid(xs[i]) - labels[i]);
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn sigmoid<F: Elem>(z: F) -> F {
    if z >= F::zero() {
        (F::one() + (-z).exp()).recip()
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

#[inline]
fn gelu<F: Elem>(x: F) -> F {
    let k = F::from_f64(GELU_K);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let u = k * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

#[inline]
fn gelu_prime<F: Elem>(x: F) -> F {
    let k = F::from_f64(GELU_K);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = k * (x + a * x * x * x);
    let t = u.tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * k * (F::one() + three * a * x * x)
}

fn softmax_row<F: Elem>(row: &[F], out: &mut [F]) {
    let mut mx = row[0];
    for &v in row {
        if v > mx {
            mx = v;
        }
    }
    let mut denom = F::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - mx).exp();
        *o = e;
        denom += e;
    }
    let inv = denom.recip();
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

fn log_sum_exp<F: Elem>(row: &[F]) -> F {
    let mut mx = row[0];
    for &v in row {
        if v > mx {
            mx = v;
        }
    }
    let mut acc = F::zero();
    for &v in row {
        acc += (v - mx).exp();
    }
    mx + acc.ln()
}

fn matmul_into<F: Elem>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,k] += g[m,n] * b[k,n]^T
fn matmul_nt_acc<F: Elem>(g: &[F], b: &[F], m: usize, n: usize, k: usize, out: &mut [F]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = F::zero();
            for (gv, bv) in grow.iter().zip(brow) {
                acc += *gv * *bv;
            }
            *o += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T * g[m,n]
fn matmul_tn_acc<F: Elem>(a: &[F], g: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}
