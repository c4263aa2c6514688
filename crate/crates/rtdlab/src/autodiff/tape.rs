use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;

use super::kernels;
use super::tensor::Tensor;

pub type NodeId = usize;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// One recorded operation: the node ids its adjoint routes to (None for
/// constant inputs) plus whatever the backward rule has to remember.
enum Rule<F: Real> {
    Leaf {
        tensor: Tensor<F>,
    },
    Add {
        a: Option<NodeId>,
        b: Option<NodeId>,
    },
    /// `b`'s shape is a strict suffix of `a`'s; `lead` copies of length `tail`.
    AddBroadcast {
        a: Option<NodeId>,
        b: Option<NodeId>,
        lead: usize,
        tail: usize,
    },
    Mul {
        a: Option<NodeId>,
        b: Option<NodeId>,
        a_vals: Tensor<F>,
        b_vals: Tensor<F>,
    },
    Scale {
        x: Option<NodeId>,
        c: F,
    },
    Matmul {
        a: Option<NodeId>,
        b: Option<NodeId>,
        a_vals: Tensor<F>,
        b_vals: Tensor<F>,
        bat: usize,
        m: usize,
        k: usize,
        n: usize,
        b_broadcast: bool,
    },
    Transpose {
        x: Option<NodeId>,
        ax0: usize,
        ax1: usize,
        out_shape: Vec<usize>,
    },
    Reshape {
        x: Option<NodeId>,
    },
    Concat {
        parts: Vec<Option<NodeId>>,
        sizes: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Slice {
        x: Option<NodeId>,
        outer: usize,
        inner: usize,
        in_axis: usize,
        start: usize,
        len: usize,
    },
    GatherRows {
        x: Option<NodeId>,
        indices: Rc<Vec<usize>>,
        in_rows: usize,
        cols: usize,
    },
    TakePerRow {
        x: Option<NodeId>,
        index: Rc<Vec<usize>>,
        in_cols: usize,
        out_cols: usize,
    },
    Softmax {
        x: Option<NodeId>,
        out: Tensor<F>,
        cols: usize,
    },
    LogSoftmax {
        x: Option<NodeId>,
        out: Tensor<F>,
        cols: usize,
    },
    LayerNorm {
        x: Option<NodeId>,
        gamma: Option<NodeId>,
        beta: Option<NodeId>,
        xhat: Vec<F>,
        rstd: Vec<F>,
        gamma_vals: Tensor<F>,
        cols: usize,
    },
    Gelu {
        x: Option<NodeId>,
        x_vals: Tensor<F>,
    },
    Sigmoid {
        x: Option<NodeId>,
        out: Tensor<F>,
    },
    Dropout {
        x: Option<NodeId>,
        mask: Vec<F>,
    },
    CrossEntropy {
        logits: Option<NodeId>,
        probs: Vec<F>,
        targets: Rc<Vec<usize>>,
        rows: usize,
        cols: usize,
    },
    BceWithLogits {
        logits: Option<NodeId>,
        sig: Vec<F>,
        targets: Vec<F>,
    },
    Sum {
        x: Option<NodeId>,
        n: usize,
    },
    Mean {
        x: Option<NodeId>,
        n: usize,
    },
}

pub(crate) enum SgMode<F> {
    Off,
    Record(Vec<Vec<F>>),
    Replay(Vec<Vec<F>>, usize),
}

/// Wengert list for one optimization step (or one verification evaluation).
pub struct Tape<F: Real> {
    id: u64,
    nodes: RefCell<Vec<Rule<F>>>,
    training: Cell<bool>,
    sg: RefCell<SgMode<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            training: Cell::new(false),
            sg: RefCell::new(SgMode::Off),
        }
    }

    /// Dropout draws masks only while the tape is in training mode.
    pub fn set_training(&self, on: bool) {
        self.training.set(on);
    }

    pub fn is_training(&self) -> bool {
        self.training.get()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub(crate) fn set_sg_mode(&self, mode: SgMode<F>) {
        *self.sg.borrow_mut() = mode;
    }

    pub(crate) fn take_sg_log(&self) -> Vec<Vec<F>> {
        match std::mem::replace(&mut *self.sg.borrow_mut(), SgMode::Off) {
            SgMode::Record(log) => log,
            _ => Vec::new(),
        }
    }

    fn push(&self, rule: Rule<F>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(rule);
        nodes.len() - 1
    }

    /// Node id of `t` on this tape. Grad-requiring leaves register lazily;
    /// constants (and tensors bound to other tapes) return None.
    fn track(&self, t: &Tensor<F>) -> Option<NodeId> {
        if let Some((tape_id, node)) = t.binding() {
            if tape_id == self.id {
                return Some(node);
            }
        }
        if t.requires_grad() {
            let id = self.push(Rule::Leaf { tensor: t.clone() });
            t.set_binding(self.id, id);
            return Some(id);
        }
        None
    }

    fn bind(&self, out: &Tensor<F>, rule: Rule<F>) {
        let id = self.push(rule);
        out.set_binding(self.id, id);
    }

    // ---- ops -------------------------------------------------------------

    /// Elementwise sum; alternatively `b`'s shape may be a strict suffix of
    /// `a`'s, in which case `b` is broadcast over the leading axes.
    pub fn add(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        if a.shape() == b.shape() {
            let av = a.values();
            let bv = b.values();
            let out_vals: Vec<F> = av.iter().zip(bv.iter()).map(|(&x, &y)| x + y).collect();
            drop(av);
            drop(bv);
            let out = Tensor::from_vec(out_vals, a.shape())?;
            let (ia, ib) = (self.track(a), self.track(b));
            if ia.is_some() || ib.is_some() {
                self.bind(&out, Rule::Add { a: ia, b: ib });
            }
            return Ok(out);
        }
        let (ra, rb) = (a.shape().len(), b.shape().len());
        if rb < ra && a.shape()[ra - rb..] == *b.shape() {
            let tail = b.numel();
            let lead = a.numel() / tail.max(1);
            let av = a.values();
            let bv = b.values();
            let mut out_vals = Vec::with_capacity(a.numel());
            for chunk in av.chunks_exact(tail) {
                for (x, &y) in chunk.iter().zip(bv.iter()) {
                    out_vals.push(*x + y);
                }
            }
            drop(av);
            drop(bv);
            let out = Tensor::from_vec(out_vals, a.shape())?;
            let (ia, ib) = (self.track(a), self.track(b));
            if ia.is_some() || ib.is_some() {
                self.bind(&out, Rule::AddBroadcast { a: ia, b: ib, lead, tail });
            }
            return Ok(out);
        }
        Err(Error::ShapeMismatch {
            op: "add",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        })
    }

    pub fn mul(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "multiply",
                detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
            });
        }
        let out_vals: Vec<F> = a
            .values()
            .iter()
            .zip(b.values().iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(out_vals, a.shape())?;
        let (ia, ib) = (self.track(a), self.track(b));
        if ia.is_some() || ib.is_some() {
            self.bind(
                &out,
                Rule::Mul {
                    a: ia,
                    b: ib,
                    a_vals: a.clone(),
                    b_vals: b.clone(),
                },
            );
        }
        Ok(out)
    }

    pub fn scale(&self, x: &Tensor<F>, c: F) -> Result<Tensor<F>> {
        let out_vals: Vec<F> = x.values().iter().map(|&v| v * c).collect();
        let out = Tensor::from_vec(out_vals, x.shape())?;
        if let Some(ix) = self.track(x) {
            self.bind(&out, Rule::Scale { x: Some(ix), c });
        }
        Ok(out)
    }

    /// Batched matrix product. `a` is `(..., m, k)`; `b` is either `(k, n)`
    /// (broadcast across `a`'s leading axes) or `(..., k, n)` with identical
    /// leading axes.
    pub fn matmul(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        let ra = a.shape().len();
        let rb = b.shape().len();
        if ra < 2 || rb < 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("need rank >= 2, got {:?} and {:?}", a.shape(), b.shape()),
            });
        }
        let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
        let (kb, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
        let lead_ok = rb == 2 || a.shape()[..ra - 2] == b.shape()[..rb - 2];
        if k != kb || !lead_ok {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} @ {:?}", a.shape(), b.shape()),
            });
        }
        let b_broadcast = rb == 2;
        let bat: usize = a.shape()[..ra - 2].iter().product();
        let mut out_vals = vec![F::zero(); bat * m * n];
        {
            let av = a.values();
            let bv = b.values();
            for s in 0..bat {
                let a_s = &av[s * m * k..(s + 1) * m * k];
                let b_s = if b_broadcast { &bv[..] } else { &bv[s * k * n..(s + 1) * k * n] };
                kernels::matmul_nn_acc(a_s, b_s, &mut out_vals[s * m * n..(s + 1) * m * n], m, k, n);
            }
        }
        let mut out_shape = a.shape()[..ra - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let out = Tensor::from_vec(out_vals, &out_shape)?;
        let (ia, ib) = (self.track(a), self.track(b));
        if ia.is_some() || ib.is_some() {
            self.bind(
                &out,
                Rule::Matmul {
                    a: ia,
                    b: ib,
                    a_vals: a.clone(),
                    b_vals: b.clone(),
                    bat,
                    m,
                    k,
                    n,
                    b_broadcast,
                },
            );
        }
        Ok(out)
    }

    pub fn transpose(&self, x: &Tensor<F>, ax0: usize, ax1: usize) -> Result<Tensor<F>> {
        let rank = x.shape().len();
        if ax0 >= rank || ax1 >= rank || ax0 == ax1 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                detail: format!("axes ({ax0},{ax1}) on shape {:?}", x.shape()),
            });
        }
        let (lo, hi) = (ax0.min(ax1), ax0.max(ax1));
        let out_vals = kernels::transpose_axes(&x.values(), x.shape(), lo, hi);
        let mut out_shape = x.shape().to_vec();
        out_shape.swap(lo, hi);
        let out = Tensor::from_vec(out_vals, &out_shape)?;
        if let Some(ix) = self.track(x) {
            self.bind(
                &out,
                Rule::Transpose {
                    x: Some(ix),
                    ax0: lo,
                    ax1: hi,
                    out_shape,
                },
            );
        }
        Ok(out)
    }

    pub fn reshape(&self, x: &Tensor<F>, new_shape: &[usize]) -> Result<Tensor<F>> {
        let n: usize = new_shape.iter().product();
        if n != x.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", x.shape(), new_shape),
            });
        }
        let out = Tensor::from_vec(x.to_vec(), new_shape)?;
        if let Some(ix) = self.track(x) {
            self.bind(&out, Rule::Reshape { x: Some(ix) });
        }
        Ok(out)
    }

    pub fn concat(&self, parts: &[&Tensor<F>], axis: usize) -> Result<Tensor<F>> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                detail: "no inputs".into(),
            });
        }
        let rank = parts[0].shape().len();
        if axis >= rank {
            return Err(Error::ShapeMismatch {
                op: "concat",
                detail: format!("axis {axis} on rank {rank}"),
            });
        }
        for p in parts {
            if p.shape().len() != rank
                || p.shape()[..axis] != parts[0].shape()[..axis]
                || p.shape()[axis + 1..] != parts[0].shape()[axis + 1..]
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    detail: format!("{:?} vs {:?} along {axis}", parts[0].shape(), p.shape()),
                });
            }
        }
        let outer: usize = parts[0].shape()[..axis].iter().product();
        let inner: usize = parts[0].shape()[axis + 1..].iter().product();
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut out_vals = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &sz) in parts.iter().zip(&sizes) {
                let v = p.values();
                let start = o * sz * inner;
                out_vals.extend_from_slice(&v[start..start + sz * inner]);
            }
        }
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = total;
        let out = Tensor::from_vec(out_vals, &out_shape)?;
        let ids: Vec<Option<NodeId>> = parts.iter().map(|p| self.track(p)).collect();
        if ids.iter().any(|i| i.is_some()) {
            self.bind(
                &out,
                Rule::Concat {
                    parts: ids,
                    sizes,
                    outer,
                    inner,
                },
            );
        }
        Ok(out)
    }

    pub fn slice(&self, x: &Tensor<F>, axis: usize, start: usize, len: usize) -> Result<Tensor<F>> {
        let rank = x.shape().len();
        if axis >= rank || len == 0 || start + len > x.shape()[axis] {
            return Err(Error::ShapeMismatch {
                op: "slice",
                detail: format!("[{start}..{}] along axis {axis} of {:?}", start + len, x.shape()),
            });
        }
        let outer: usize = x.shape()[..axis].iter().product();
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let in_axis = x.shape()[axis];
        let v = x.values();
        let mut out_vals = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * in_axis + start) * inner;
            out_vals.extend_from_slice(&v[base..base + len * inner]);
        }
        drop(v);
        let mut out_shape = x.shape().to_vec();
        out_shape[axis] = len;
        let out = Tensor::from_vec(out_vals, &out_shape)?;
        if let Some(ix) = self.track(x) {
            self.bind(
                &out,
                Rule::Slice {
                    x: Some(ix),
                    outer,
                    inner,
                    in_axis,
                    start,
                    len,
                },
            );
        }
        Ok(out)
    }

    /// Row lookup on a 2-D table; ids may repeat (their gradients sum).
    /// Serves both embedding lookup and position selection.
    pub fn gather_rows(&self, x: &Tensor<F>, indices: &[usize]) -> Result<Tensor<F>> {
        if x.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                detail: format!("need 2-D table, got {:?}", x.shape()),
            });
        }
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        let v = x.values();
        let mut out_vals = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            out_vals.extend_from_slice(&v[i * cols..(i + 1) * cols]);
        }
        drop(v);
        let out = Tensor::from_vec(out_vals, &[indices.len(), cols])?;
        if let Some(ix) = self.track(x) {
            self.bind(
                &out,
                Rule::GatherRows {
                    x: Some(ix),
                    indices: Rc::new(indices.to_vec()),
                    in_rows: rows,
                    cols,
                },
            );
        }
        Ok(out)
    }

    /// Per-row element gather: `x` is `(N, R)`, `index` is `(N, out_cols)`
    /// flattened, `out[r, j] = x[r, index[r, j]]`. Indices may repeat within
    /// a row; their gradients accumulate.
    /// Per-row gather along the last axis; leading axes are treated as rows.
    pub fn take_per_row(&self, x: &Tensor<F>, index: &[usize], out_cols: usize) -> Result<Tensor<F>> {
        if x.shape().is_empty() {
            return Err(Error::ShapeMismatch {
                op: "take_per_row",
                detail: "need at least 1-D input, got a scalar".into(),
            });
        }
        let in_cols = *x.shape().last().expect("non-empty shape");
        let rows = x.numel() / in_cols.max(1);
        if index.len() != rows * out_cols {
            return Err(Error::ShapeMismatch {
                op: "take_per_row",
                detail: format!("index len {} != {rows}x{out_cols}", index.len()),
            });
        }
        let v = x.values();
        let mut out_vals = Vec::with_capacity(rows * out_cols);
        for r in 0..rows {
            let xrow = &v[r * in_cols..(r + 1) * in_cols];
            for &ix in &index[r * out_cols..(r + 1) * out_cols] {
                if ix >= in_cols {
                    return Err(Error::IndexOutOfRange {
                        op: "take_per_row",
                        index: ix,
                        bound: in_cols,
                    });
                }
                out_vals.push(xrow[ix]);
            }
        }
        drop(v);
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().expect("non-empty shape") = out_cols;
        let out = Tensor::from_vec(out_vals, &out_shape)?;
        if let Some(ixn) = self.track(x) {
            self.bind(
                &out,
                Rule::TakePerRow {
                    x: Some(ixn),
                    index: Rc::new(index.to_vec()),
                    in_cols,
                    out_cols,
                },
            );
        }
        Ok(out)
    }

    pub fn softmax(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let cols = *x.shape().last().ok_or(Error::ShapeMismatch {
            op: "softmax",
            detail: "rank 0 input".into(),
        })?;
        let mut out_vals = x.to_vec();
        kernels::softmax_rows(&mut out_vals, cols);
        let out = Tensor::from_vec(out_vals, x.shape())?;
        if let Some(ix) = self.track(x) {
            self.bind(
                &out,
                Rule::Softmax {
                    x: Some(ix),
                    out: out.clone(),
                    cols,
                },
            );
        }
        Ok(out)
    }

    pub fn log_softmax(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let cols = *x.shape().last().ok_or(Error::ShapeMismatch {
            op: "log_softmax",
            detail: "rank 0 input".into(),
        })?;
        let mut out_vals = x.to_vec();
        kernels::log_softmax_rows(&mut out_vals, cols);
        let out = Tensor::from_vec(out_vals, x.shape())?;
        if let Some(ix) = self.track(x) {
            self.bind(
                &out,
                Rule::LogSoftmax {
                    x: Some(ix),
                    out: out.clone(),
                    cols,
                },
            );
        }
        Ok(out)
    }

    /// Normalization over the last axis with learned scale and shift.
    pub fn layer_norm(
        &self,
        x: &Tensor<F>,
        gamma: &Tensor<F>,
        beta: &Tensor<F>,
        eps: f64,
    ) -> Result<Tensor<F>> {
        let cols = *x.shape().last().ok_or(Error::ShapeMismatch {
            op: "layer_norm",
            detail: "rank 0 input".into(),
        })?;
        if gamma.shape() != [cols] || beta.shape() != [cols] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "gamma {:?} / beta {:?} vs feature dim {cols}",
                    gamma.shape(),
                    beta.shape()
                ),
            });
        }
        let rows = x.numel() / cols;
        let eps = F::from_f64(eps);
        let xv = x.values();
        let gv = gamma.values();
        let bv = beta.values();
        let mut out_vals = Vec::with_capacity(x.numel());
        let mut xhat = Vec::with_capacity(x.numel());
        let mut rstd = Vec::with_capacity(rows);
        let inv_c = F::one() / F::from_f64(cols as f64);
        for row in xv.chunks_exact(cols) {
            let mut mean = F::zero();
            for &v in row {
                mean += v;
            }
            mean = mean * inv_c;
            let mut var = F::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var = var * inv_c;
            let rs = F::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * rs;
                xhat.push(xh);
                out_vals.push(xh * gv[j] + bv[j]);
            }
        }
        drop(xv);
        drop(gv);
        drop(bv);
        let out = Tensor::from_vec(out_vals, x.shape())?;
        let (ix, ig, ib) = (self.track(x), self.track(gamma), self.track(beta));
        if ix.is_some() || ig.is_some() || ib.is_some() {
            self.bind(
                &out,
                Rule::LayerNorm {
                    x: ix,
                    gamma: ig,
                    beta: ib,
                    xhat,
                    rstd,
                    gamma_vals: gamma.clone(),
                    cols,
                },
            );
        }
        Ok(out)
    }

    pub fn gelu(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let out_vals: Vec<F> = x.values().iter().map(|&v| kernels::gelu(v)).collect();
        let out = Tensor::from_vec(out_vals, x.shape())?;
        if let Some(ix) = self.track(x) {
            self.bind(
                &out,
                Rule::Gelu {
                    x: Some(ix),
                    x_vals: x.clone(),
                },
            );
        }
        Ok(out)
    }

    pub fn sigmoid(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let out_vals: Vec<F> = x.values().iter().map(|&v| kernels::sigmoid(v)).collect();
        let out = Tensor::from_vec(out_vals, x.shape())?;
        if let Some(ix) = self.track(x) {
            self.bind(
                &out,
                Rule::Sigmoid {
                    x: Some(ix),
                    out: out.clone(),
                },
            );
        }
        Ok(out)
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)` so the
    /// expectation matches the input. Identity when the tape is not in
    /// training mode or `p == 0`; the returned handle is then the input.
    pub fn dropout<R: Rng>(&self, x: &Tensor<F>, p: f64, rng: &mut R) -> Result<Tensor<F>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config {
                field: "dropout".into(),
                message: format!("rate {p} outside [0,1)"),
            });
        }
        if !self.training.get() || p == 0.0 {
            return Ok(x.clone());
        }
        let keep_scale = F::from_f64(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..x.numel())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    F::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let out_vals: Vec<F> = x.values().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::from_vec(out_vals, x.shape())?;
        if let Some(ix) = self.track(x) {
            self.bind(&out, Rule::Dropout { x: Some(ix), mask });
        }
        Ok(out)
    }

    /// Mean over rows of `-log softmax(logits)[target]`. Fused so the
    /// backward rule is the numerically exact `(p - onehot)/rows`.
    pub fn cross_entropy(&self, logits: &Tensor<F>, targets: &[usize]) -> Result<Tensor<F>> {
        if logits.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("need (rows, classes), got {:?}", logits.shape()),
            });
        }
        let (rows, cols) = (logits.shape()[0], logits.shape()[1]);
        if targets.len() != rows || rows == 0 {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{rows} rows vs {} targets", targets.len()),
            });
        }
        let mut logsm = logits.to_vec();
        kernels::log_softmax_rows(&mut logsm, cols);
        let mut loss = F::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(Error::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    bound: cols,
                });
            }
            loss -= logsm[r * cols + t];
        }
        loss = loss / F::from_f64(rows as f64);
        let probs: Vec<F> = logsm.iter().map(|&v| v.exp()).collect();
        let out = Tensor::from_vec(vec![loss], &[])?;
        if let Some(ix) = self.track(logits) {
            self.bind(
                &out,
                Rule::CrossEntropy {
                    logits: Some(ix),
                    probs,
                    targets: Rc::new(targets.to_vec()),
                    rows,
                    cols,
                },
            );
        }
        Ok(out)
    }

    /// Elementwise binary cross-entropy on logits, computed in the stable
    /// form `max(x,0) - x*z + ln(1 + exp(-|x|))`. Reduction is left to the
    /// caller so position filtering can happen on the tape.
    pub fn bce_with_logits(&self, logits: &Tensor<F>, targets: &[F]) -> Result<Tensor<F>> {
        if targets.len() != logits.numel() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                detail: format!("{} logits vs {} targets", logits.numel(), targets.len()),
            });
        }
        let xv = logits.values();
        let mut out_vals = Vec::with_capacity(xv.len());
        let mut sig = Vec::with_capacity(xv.len());
        for (&x, &z) in xv.iter().zip(targets) {
            let pos = if x > F::zero() { x } else { F::zero() };
            out_vals.push(pos - x * z + (-x.abs()).exp().ln_1p());
            sig.push(kernels::sigmoid(x));
        }
        drop(xv);
        let out = Tensor::from_vec(out_vals, logits.shape())?;
        if let Some(ix) = self.track(logits) {
            self.bind(
                &out,
                Rule::BceWithLogits {
                    logits: Some(ix),
                    sig,
                    targets: targets.to_vec(),
                },
            );
        }
        Ok(out)
    }

    pub fn sum(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut acc = F::zero();
        for &v in x.values().iter() {
            acc += v;
        }
        let out = Tensor::from_vec(vec![acc], &[])?;
        if let Some(ix) = self.track(x) {
            self.bind(&out, Rule::Sum { x: Some(ix), n: x.numel() });
        }
        Ok(out)
    }

    pub fn mean(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        if x.numel() == 0 {
            return Err(Error::ShapeMismatch {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let mut acc = F::zero();
        for &v in x.values().iter() {
            acc += v;
        }
        let out = Tensor::from_vec(vec![acc / F::from_f64(x.numel() as f64)], &[])?;
        if let Some(ix) = self.track(x) {
            self.bind(&out, Rule::Mean { x: Some(ix), n: x.numel() });
        }
        Ok(out)
    }

    /// Forward identity, backward cut: the result is a plain constant, so no
    /// op downstream can route an adjoint into `x`. The gradient-checker
    /// records/replays these values to differentiate the declared semantics.
    pub fn stop_gradient(&self, x: &Tensor<F>) -> Tensor<F> {
        let mut sg = self.sg.borrow_mut();
        let vals = match &mut *sg {
            SgMode::Off => x.to_vec(),
            SgMode::Record(log) => {
                let v = x.to_vec();
                log.push(v.clone());
                v
            }
            SgMode::Replay(log, pos) => {
                let v = log
                    .get(*pos)
                    .unwrap_or_else(|| panic!("stop_gradient replay exhausted at call {}", *pos))
                    .clone();
                *pos += 1;
                assert_eq!(v.len(), x.numel(), "stop_gradient replay shape drift");
                v
            }
        };
        Tensor::from_vec(vals, x.shape()).expect("same shape")
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss recorded on this tape. Leaf
    /// gradients accumulate; call `zero_grad` on parameters to reset.
    pub fn backward(&self, loss: &Tensor<F>) -> Result<()> {
        let (tape_id, seed_node) = loss.binding().ok_or(Error::DetachedLoss)?;
        if tape_id != self.id {
            return Err(Error::DetachedLoss);
        }
        if loss.numel() != 1 {
            return Err(Error::LossNotScalar(loss.shape().to_vec()));
        }
        let nodes = self.nodes.borrow();
        let mut adj: Vec<Option<Vec<F>>> = Vec::with_capacity(nodes.len());
        adj.resize_with(nodes.len(), || None);
        adj[seed_node] = Some(vec![F::one()]);

        fn add_into<F: Real>(slot: &mut Option<Vec<F>>, g: Vec<F>) {
            match slot {
                Some(acc) => {
                    for (a, gi) in acc.iter_mut().zip(&g) {
                        *a += *gi;
                    }
                }
                None => *slot = Some(g),
            }
        }

        for i in (0..=seed_node).rev() {
            let Some(g) = adj[i].take() else { continue };
            match &nodes[i] {
                Rule::Leaf { tensor } => tensor.accumulate_grad(&g),
                Rule::Add { a, b } => {
                    if let Some(ia) = a {
                        add_into(&mut adj[*ia], g.clone());
                    }
                    if let Some(ib) = b {
                        add_into(&mut adj[*ib], g);
                    }
                }
                Rule::AddBroadcast { a, b, lead, tail } => {
                    if let Some(ib) = b {
                        let mut gb = vec![F::zero(); *tail];
                        for l in 0..*lead {
                            for (acc, &gv) in gb.iter_mut().zip(&g[l * tail..(l + 1) * tail]) {
                                *acc += gv;
                            }
                        }
                        add_into(&mut adj[*ib], gb);
                    }
                    if let Some(ia) = a {
                        add_into(&mut adj[*ia], g);
                    }
                }
                Rule::Mul { a, b, a_vals, b_vals } => {
                    if let Some(ia) = a {
                        let bv = b_vals.values();
                        let ga: Vec<F> = g.iter().zip(bv.iter()).map(|(&gv, &bvv)| gv * bvv).collect();
                        add_into(&mut adj[*ia], ga);
                    }
                    if let Some(ib) = b {
                        let av = a_vals.values();
                        let gb: Vec<F> = g.iter().zip(av.iter()).map(|(&gv, &avv)| gv * avv).collect();
                        add_into(&mut adj[*ib], gb);
                    }
                }
                Rule::Scale { x, c } => {
                    if let Some(ix) = x {
                        let gx: Vec<F> = g.iter().map(|&gv| gv * *c).collect();
                        add_into(&mut adj[*ix], gx);
                    }
                }
                Rule::Matmul {
                    a,
                    b,
                    a_vals,
                    b_vals,
                    bat,
                    m,
                    k,
                    n,
                    b_broadcast,
                } => {
                    let (bat, m, k, n) = (*bat, *m, *k, *n);
                    if let Some(ia) = a {
                        let bv = b_vals.values();
                        let mut ga = vec![F::zero(); bat * m * k];
                        for s in 0..bat {
                            let g_s = &g[s * m * n..(s + 1) * m * n];
                            let b_s = if *b_broadcast { &bv[..] } else { &bv[s * k * n..(s + 1) * k * n] };
                            // dA = g @ B^T
                            kernels::matmul_nt_acc(g_s, b_s, &mut ga[s * m * k..(s + 1) * m * k], m, n, k);
                        }
                        add_into(&mut adj[*ia], ga);
                    }
                    if let Some(ib) = b {
                        let av = a_vals.values();
                        let gb_len = if *b_broadcast { k * n } else { bat * k * n };
                        let mut gb = vec![F::zero(); gb_len];
                        for s in 0..bat {
                            let a_s = &av[s * m * k..(s + 1) * m * k];
                            let g_s = &g[s * m * n..(s + 1) * m * n];
                            let dst = if *b_broadcast { &mut gb[..] } else { &mut gb[s * k * n..(s + 1) * k * n] };
                            // dB = A^T @ g
                            kernels::matmul_tn_acc(a_s, g_s, dst, k, m, n);
                        }
                        add_into(&mut adj[*ib], gb);
                    }
                }
                Rule::Transpose { x, ax0, ax1, out_shape } => {
                    if let Some(ix) = x {
                        let gx = kernels::transpose_axes(&g, out_shape, *ax0, *ax1);
                        add_into(&mut adj[*ix], gx);
                    }
                }
                Rule::Reshape { x } => {
                    if let Some(ix) = x {
                        add_into(&mut adj[*ix], g);
                    }
                }
                Rule::Concat { parts, sizes, outer, inner } => {
                    let total: usize = sizes.iter().sum();
                    let mut offset = 0usize;
                    for (part, &sz) in parts.iter().zip(sizes) {
                        if let Some(ip) = part {
                            let mut gp = Vec::with_capacity(outer * sz * inner);
                            for o in 0..*outer {
                                let base = (o * total + offset) * inner;
                                gp.extend_from_slice(&g[base..base + sz * inner]);
                            }
                            add_into(&mut adj[*ip], gp);
                        }
                        offset += sz;
                    }
                }
                Rule::Slice {
                    x,
                    outer,
                    inner,
                    in_axis,
                    start,
                    len,
                } => {
                    if let Some(ix) = x {
                        let mut gx = vec![F::zero(); outer * in_axis * inner];
                        for o in 0..*outer {
                            let dst = (o * in_axis + start) * inner;
                            let src = o * len * inner;
                            gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                        }
                        add_into(&mut adj[*ix], gx);
                    }
                }
                Rule::GatherRows { x, indices, in_rows, cols } => {
                    if let Some(ix) = x {
                        let mut gx = vec![F::zero(); in_rows * cols];
                        for (r, &src_row) in indices.iter().enumerate() {
                            let dst = &mut gx[src_row * cols..(src_row + 1) * cols];
                            for (d, &gv) in dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                                *d += gv;
                            }
                        }
                        add_into(&mut adj[*ix], gx);
                    }
                }
                Rule::TakePerRow { x, index, in_cols, out_cols } => {
                    if let Some(ix) = x {
                        let rows = index.len() / out_cols;
                        let mut gx = vec![F::zero(); rows * in_cols];
                        for r in 0..rows {
                            let grow = &g[r * out_cols..(r + 1) * out_cols];
                            let xrow = &mut gx[r * in_cols..(r + 1) * in_cols];
                            for (j, &src) in index[r * out_cols..(r + 1) * out_cols].iter().enumerate() {
                                xrow[src] += grow[j];
                            }
                        }
                        add_into(&mut adj[*ix], gx);
                    }
                }
                Rule::Softmax { x, out, cols } => {
                    if let Some(ix) = x {
                        let y = out.values();
                        let mut gx = vec![F::zero(); y.len()];
                        for ((grow, yrow), xrow) in g
                            .chunks_exact(*cols)
                            .zip(y.chunks_exact(*cols))
                            .zip(gx.chunks_exact_mut(*cols))
                        {
                            let mut dot = F::zero();
                            for (&gv, &yv) in grow.iter().zip(yrow) {
                                dot += gv * yv;
                            }
                            for ((xv, &gv), &yv) in xrow.iter_mut().zip(grow).zip(yrow) {
                                *xv = yv * (gv - dot);
                            }
                        }
                        add_into(&mut adj[*ix], gx);
                    }
                }
                Rule::LogSoftmax { x, out, cols } => {
                    if let Some(ix) = x {
                        let y = out.values();
                        let mut gx = vec![F::zero(); y.len()];
                        for ((grow, yrow), xrow) in g
                            .chunks_exact(*cols)
                            .zip(y.chunks_exact(*cols))
                            .zip(gx.chunks_exact_mut(*cols))
                        {
                            let mut gsum = F::zero();
                            for &gv in grow {
                                gsum += gv;
                            }
                            for ((xv, &gv), &yv) in xrow.iter_mut().zip(grow).zip(yrow) {
                                *xv = gv - yv.exp() * gsum;
                            }
                        }
                        add_into(&mut adj[*ix], gx);
                    }
                }
                Rule::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                    gamma_vals,
                    cols,
                } => {
                    let cols = *cols;
                    let rows = xhat.len() / cols;
                    if let Some(ig) = gamma {
                        let mut gg = vec![F::zero(); cols];
                        for r in 0..rows {
                            let grow = &g[r * cols..(r + 1) * cols];
                            let xh = &xhat[r * cols..(r + 1) * cols];
                            for ((acc, &gv), &xv) in gg.iter_mut().zip(grow).zip(xh) {
                                *acc += gv * xv;
                            }
                        }
                        add_into(&mut adj[*ig], gg);
                    }
                    if let Some(ib) = beta {
                        let mut gb = vec![F::zero(); cols];
                        for r in 0..rows {
                            for (acc, &gv) in gb.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                                *acc += gv;
                            }
                        }
                        add_into(&mut adj[*ib], gb);
                    }
                    if let Some(ix) = x {
                        let gv = gamma_vals.values();
                        let inv_c = F::one() / F::from_f64(cols as f64);
                        let mut gx = vec![F::zero(); xhat.len()];
                        for r in 0..rows {
                            let grow = &g[r * cols..(r + 1) * cols];
                            let xh = &xhat[r * cols..(r + 1) * cols];
                            let mut mean_d = F::zero();
                            let mut mean_dx = F::zero();
                            // d = g * gamma, reduced twice for the mean and
                            // the projection onto xhat.
                            for ((&gvv, &gam), &xv) in grow.iter().zip(gv.iter()).zip(xh) {
                                let d = gvv * gam;
                                mean_d += d;
                                mean_dx += d * xv;
                            }
                            mean_d = mean_d * inv_c;
                            mean_dx = mean_dx * inv_c;
                            let rs = rstd[r];
                            let xrow = &mut gx[r * cols..(r + 1) * cols];
                            for ((xo, (&gvv, &gam)), &xv) in
                                xrow.iter_mut().zip(grow.iter().zip(gv.iter())).zip(xh)
                            {
                                let d = gvv * gam;
                                *xo = rs * (d - mean_d - xv * mean_dx);
                            }
                        }
                        add_into(&mut adj[*ix], gx);
                    }
                }
                Rule::Gelu { x, x_vals } => {
                    if let Some(ix) = x {
                        let xv = x_vals.values();
                        let gx: Vec<F> = g
                            .iter()
                            .zip(xv.iter())
                            .map(|(&gv, &v)| gv * kernels::gelu_grad(v))
                            .collect();
                        add_into(&mut adj[*ix], gx);
                    }
                }
                Rule::Sigmoid { x, out } => {
                    if let Some(ix) = x {
                        let y = out.values();
                        let gx: Vec<F> = g
                            .iter()
                            .zip(y.iter())
                            .map(|(&gv, &yv)| gv * yv * (F::one() - yv))
                            .collect();
                        add_into(&mut adj[*ix], gx);
                    }
                }
                Rule::Dropout { x, mask } => {
                    if let Some(ix) = x {
                        let gx: Vec<F> = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                        add_into(&mut adj[*ix], gx);
                    }
                }
                Rule::CrossEntropy {
                    logits,
                    probs,
                    targets,
                    rows,
                    cols,
                } => {
                    if let Some(il) = logits {
                        let scale = g[0] / F::from_f64(*rows as f64);
                        let mut gl = Vec::with_capacity(probs.len());
                        for (r, prow) in probs.chunks_exact(*cols).enumerate() {
                            let t = targets[r];
                            for (v, &p) in prow.iter().enumerate() {
                                let onehot = if v == t { F::one() } else { F::zero() };
                                gl.push(scale * (p - onehot));
                            }
                        }
                        add_into(&mut adj[*il], gl);
                    }
                }
                Rule::BceWithLogits { logits, sig, targets } => {
                    if let Some(il) = logits {
                        let gl: Vec<F> = g
                            .iter()
                            .zip(sig.iter().zip(targets))
                            .map(|(&gv, (&s, &z))| gv * (s - z))
                            .collect();
                        add_into(&mut adj[*il], gl);
                    }
                }
                Rule::Sum { x, n } => {
                    if let Some(ix) = x {
                        add_into(&mut adj[*ix], vec![g[0]; *n]);
                    }
                }
                Rule::Mean { x, n } => {
                    if let Some(ix) = x {
                        let gv = g[0] / F::from_f64(*n as f64);
                        add_into(&mut adj[*ix], vec![gv; *n]);
                    }
                }
            }
        }
        Ok(())
    }
}
