//! Tensor-level reverse-mode tape.
//!
//! A [`Graph`] is rebuilt for every forward pass. Operations append nodes in
//! creation order, so node ids are a topological order and backward simply
//! walks the ids in reverse. All values are 2-D (`rows × cols`); scalars are
//! `1 × 1`.
//!
//! Shape mismatches are programming errors and panic. Data-dependent failures
//! (non-finite logits, bad targets, misuse of backward) are returned as
//! [`Error`](crate::Error).

use std::borrow::Cow;
use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;

use super::kernels::gemm;
use super::{Parameter, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn rows(self) -> usize {
        self.rows
    }

    pub fn cols(self) -> usize {
        self.cols
    }

    pub fn shape(self) -> [usize; 2] {
        [self.rows, self.cols]
    }
}

/// Classification targets for [`Graph::cross_entropy`].
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// One class index per row.
    Index(Vec<usize>),
    /// Row-major `B × C` indicator (or soft label) matrix.
    Dense(Vec<f64>),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    Gather { src: usize, ids: Vec<usize> },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softmax(usize),
    LogSoftmax(usize),
    CrossEntropy { logits: usize, targets: Vec<f64>, probs: Vec<f64> },
    Im2Col { x: usize, kernel: usize, padding: usize },
    MaxPool { x: usize, argmax: Vec<usize> },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    MeanRows(usize),
}

struct Node<'a> {
    value: Cow<'a, [f64]>,
    rows: usize,
    cols: usize,
    requires_grad: bool,
    op: Op,
    param: Option<&'a str>,
}

/// The autodiff tape. Parameter values are borrowed for the graph's lifetime.
pub struct Graph<'a> {
    nodes: RefCell<Vec<Node<'a>>>,
    backward_done: Cell<bool>,
    matmul_flops: Cell<u64>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
            matmul_flops: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Forward matmul FLOPs recorded so far, `2·m·k·n` per product.
    pub fn matmul_flops(&self) -> u64 {
        self.matmul_flops.get()
    }

    fn push(
        &self,
        value: Cow<'a, [f64]>,
        rows: usize,
        cols: usize,
        requires_grad: bool,
        op: Op,
        param: Option<&'a str>,
    ) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            rows,
            cols,
            requires_grad,
            op,
            param,
        });
        Var { id, rows, cols }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.id].requires_grad
    }

    fn val(&self, v: Var) -> Ref<'_, [f64]> {
        Ref::map(self.nodes.borrow(), |n| &*n[v.id].value)
    }

    /// Current value of a node (copied out).
    pub fn value(&self, v: Var) -> Vec<f64> {
        self.val(v).to_vec()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        assert_eq!((v.rows, v.cols), (1, 1), "not a scalar");
        self.val(v)[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(vec![v.rows, v.cols], self.value(v))
    }

    // ----- leaves ---------------------------------------------------------

    /// Registers a parameter. Frozen parameters do not require a gradient but
    /// still pass gradients through to their consumers' other inputs.
    pub fn param(&self, p: &'a Parameter) -> Var {
        let t = &p.tensor;
        self.push(
            Cow::Borrowed(t.data()),
            t.rows(),
            t.cols(),
            !p.is_frozen(),
            Op::Leaf,
            Some(p.name.as_str()),
        )
    }

    /// Same as [`Graph::param`] but never requires a gradient, regardless of
    /// the frozen flag. Used for evaluation passes.
    pub fn param_const(&self, p: &'a Parameter) -> Var {
        let t = &p.tensor;
        self.push(Cow::Borrowed(t.data()), t.rows(), t.cols(), false, Op::Leaf, None)
    }

    pub fn leaf(&self, t: &'a Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(t.data()), t.rows(), t.cols(), requires_grad, Op::Leaf, None)
    }

    pub fn input(&self, data: Vec<f64>, rows: usize, cols: usize, requires_grad: bool) -> Var {
        assert_eq!(data.len(), rows * cols, "input data does not match {rows}x{cols}");
        self.push(Cow::Owned(data), rows, cols, requires_grad, Op::Leaf, None)
    }

    pub fn constant(&self, data: Vec<f64>, rows: usize, cols: usize) -> Var {
        self.input(data, rows, cols, false)
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.matmul_ex(a, b, false, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        self.matmul_ex(a, b, false, true)
    }

    pub fn matmul_ex(&self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (m, ka) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
        let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
        assert_eq!(ka, kb, "matmul inner dims {:?} x {:?} (ta={ta}, tb={tb})", a.shape(), b.shape());
        let mut out = vec![0.0; m * n];
        gemm(ta, tb, m, ka, n, &self.val(a), &self.val(b), &mut out, 0.0);
        self.matmul_flops.set(self.matmul_flops.get() + 2 * (m * ka * n) as u64);
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Cow::Owned(out),
            m,
            n,
            rg,
            Op::MatMul { a: a.id, b: b.id, ta, tb },
            None,
        )
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
        let out: Vec<f64> = {
            let (va, vb) = (self.val(a), self.val(b));
            va.iter().zip(vb.iter()).map(|(x, y)| f(*x, *y)).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(out), a.rows, a.cols, rg, op, None)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a.id, b.id))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a.id, b.id))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a.id, b.id))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        let out: Vec<f64> = self.val(a).iter().map(|x| x * factor).collect();
        let rg = self.rg(a);
        self.push(Cow::Owned(out), a.rows, a.cols, rg, Op::Scale(a.id, factor), None)
    }

    /// Broadcasts a `1 × cols` row over every row of `a`.
    pub fn add_row(&self, a: Var, bias: Var) -> Var {
        assert_eq!(bias.rows * bias.cols, a.cols, "bias width mismatch");
        let out: Vec<f64> = {
            let (va, vb) = (self.val(a), self.val(bias));
            va.chunks(a.cols.max(1))
                .flat_map(|row| row.iter().zip(vb.iter()).map(|(x, b)| x + b))
                .collect()
        };
        let rg = self.rg(a) || self.rg(bias);
        self.push(Cow::Owned(out), a.rows, a.cols, rg, Op::AddRow(a.id, bias.id), None)
    }

    /// `x · w + b`
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    /// Row gather (embedding lookup). Duplicate ids accumulate in backward.
    pub fn gather(&self, src: Var, ids: &[usize]) -> Var {
        let c = src.cols;
        let out: Vec<f64> = {
            let v = self.val(src);
            let mut out = Vec::with_capacity(ids.len() * c);
            for &i in ids {
                assert!(i < src.rows, "gather index {i} out of range for {} rows", src.rows);
                out.extend_from_slice(&v[i * c..(i + 1) * c]);
            }
            out
        };
        let rg = self.rg(src);
        self.push(
            Cow::Owned(out),
            ids.len(),
            c,
            rg,
            Op::Gather { src: src.id, ids: ids.to_vec() },
            None,
        )
    }

    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Var {
        let c = x.cols;
        assert_eq!(gamma.rows * gamma.cols, c);
        assert_eq!(beta.rows * beta.cols, c);
        let (out, xhat, rstd) = {
            let (vx, vg, vb) = (self.val(x), self.val(gamma), self.val(beta));
            let mut out = vec![0.0; x.rows * c];
            let mut xhat = vec![0.0; x.rows * c];
            let mut rstd = vec![0.0; x.rows];
            for r in 0..x.rows {
                let row = &vx[r * c..(r + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                let rs = 1.0 / (var + LN_EPS).sqrt();
                rstd[r] = rs;
                for j in 0..c {
                    let h = (row[j] - mean) * rs;
                    xhat[r * c + j] = h;
                    out[r * c + j] = h * vg[j] + vb[j];
                }
            }
            (out, xhat, rstd)
        };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Cow::Owned(out),
            x.rows,
            c,
            rg,
            Op::LayerNorm { x: x.id, gamma: gamma.id, beta: beta.id, xhat, rstd },
            None,
        )
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.val(a).iter().map(|x| f(*x)).collect();
        let rg = self.rg(a);
        self.push(Cow::Owned(out), a.rows, a.cols, rg, op, None)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a.id))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.id))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.id))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a.id))
    }

    // ----- softmax family ---------------------------------------------------

    fn check_finite(&self, a: Var) -> Result<()> {
        if self.val(a).iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFiniteLogits)
        }
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        self.check_finite(a)?;
        Ok(self.softmax_unchecked(a))
    }

    pub(crate) fn softmax_unchecked(&self, a: Var) -> Var {
        let out = {
            let v = self.val(a);
            let mut out = v.to_vec();
            for row in out.chunks_mut(a.cols.max(1)) {
                softmax_in_place(row);
            }
            out
        };
        let rg = self.rg(a);
        self.push(Cow::Owned(out), a.rows, a.cols, rg, Op::Softmax(a.id), None)
    }

    pub fn log_softmax(&self, a: Var) -> Result<Var> {
        self.check_finite(a)?;
        let out = {
            let v = self.val(a);
            let mut out = v.to_vec();
            for row in out.chunks_mut(a.cols.max(1)) {
                let lse = log_sum_exp(row);
                row.iter_mut().for_each(|x| *x -= lse);
            }
            out
        };
        let rg = self.rg(a);
        Ok(self.push(Cow::Owned(out), a.rows, a.cols, rg, Op::LogSoftmax(a.id), None))
    }

    /// Mean over rows of `−Σ_c y_c log softmax(logits)_c`.
    pub fn cross_entropy(&self, logits: Var, targets: &Targets) -> Result<Var> {
        self.check_finite(logits)?;
        let (b, c) = (logits.rows, logits.cols);
        let dense = match targets {
            Targets::Index(idx) => {
                assert_eq!(idx.len(), b, "one target per row");
                let mut y = vec![0.0; b * c];
                for (r, &t) in idx.iter().enumerate() {
                    if t >= c {
                        return Err(Error::TargetOutOfRange { target: t, classes: c });
                    }
                    y[r * c + t] = 1.0;
                }
                y
            }
            Targets::Dense(y) => {
                assert_eq!(y.len(), b * c, "dense targets must be B x C");
                y.clone()
            }
        };
        let (loss, probs) = {
            let v = self.val(logits);
            let mut probs = v.to_vec();
            let mut total = 0.0;
            for r in 0..b {
                let row = &v[r * c..(r + 1) * c];
                let lse = log_sum_exp(row);
                for j in 0..c {
                    let y = dense[r * c + j];
                    if y != 0.0 {
                        total -= y * (row[j] - lse);
                    }
                    probs[r * c + j] = (row[j] - lse).exp();
                }
            }
            (total / b as f64, probs)
        };
        let rg = self.rg(logits);
        Ok(self.push(
            Cow::Owned(vec![loss]),
            1,
            1,
            rg,
            Op::CrossEntropy { logits: logits.id, targets: dense, probs },
            None,
        ))
    }

    // ----- convolution and pooling -------------------------------------------

    /// Unfolds `x` (`T × C`) into `T' × (kernel·C)` patches with symmetric zero
    /// padding, `T' = T + 2·padding − kernel + 1`.
    pub fn im2col(&self, x: Var, kernel: usize, padding: usize) -> Var {
        let (t, c) = (x.rows, x.cols);
        assert!(kernel >= 1 && t + 2 * padding >= kernel, "kernel {kernel} too wide for length {t}");
        let t_out = t + 2 * padding - kernel + 1;
        let out = {
            let v = self.val(x);
            let mut out = vec![0.0; t_out * kernel * c];
            for o in 0..t_out {
                for k in 0..kernel {
                    let src = o + k;
                    if src < padding || src - padding >= t {
                        continue;
                    }
                    let s = src - padding;
                    out[o * kernel * c + k * c..o * kernel * c + (k + 1) * c]
                        .copy_from_slice(&v[s * c..(s + 1) * c]);
                }
            }
            out
        };
        let rg = self.rg(x);
        self.push(
            Cow::Owned(out),
            t_out,
            kernel * c,
            rg,
            Op::Im2Col { x: x.id, kernel, padding },
            None,
        )
    }

    /// 1-D convolution over rows: `x` is `T × C_in`, `w` is `(kernel·C_in) × C_out`.
    pub fn conv1d(&self, x: Var, w: Var, b: Var, kernel: usize, padding: usize) -> Var {
        let cols = self.im2col(x, kernel, padding);
        self.linear(cols, w, b)
    }

    /// Column-wise max over each `[start, end)` row window.
    pub fn max_pool_windows(&self, x: Var, windows: &[(usize, usize)]) -> Var {
        let c = x.cols;
        let (out, argmax) = {
            let v = self.val(x);
            let mut out = vec![0.0; windows.len() * c];
            let mut argmax = vec![0usize; windows.len() * c];
            for (o, &(s, e)) in windows.iter().enumerate() {
                assert!(s < e && e <= x.rows, "bad pooling window {s}..{e} for {} rows", x.rows);
                for j in 0..c {
                    let mut best = s * c + j;
                    for r in s + 1..e {
                        if v[r * c + j] > v[best] {
                            best = r * c + j;
                        }
                    }
                    out[o * c + j] = v[best];
                    argmax[o * c + j] = best;
                }
            }
            (out, argmax)
        };
        let rg = self.rg(x);
        self.push(Cow::Owned(out), windows.len(), c, rg, Op::MaxPool { x: x.id, argmax }, None)
    }

    /// Max pooling along rows. Windows past the end are clipped; an input
    /// shorter than `window` pools to a single row.
    pub fn max_pool1d(&self, x: Var, window: usize, stride: usize) -> Var {
        self.max_pool_windows(x, &pool_windows(x.rows, window, stride))
    }

    /// Adaptive max pooling of `T` rows onto exactly `out_len` rows.
    pub fn adaptive_max_pool(&self, x: Var, out_len: usize) -> Var {
        self.max_pool_windows(x, &adaptive_windows(x.rows, out_len))
    }

    // ----- structural ---------------------------------------------------------

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = parts[0].cols;
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            assert_eq!(p.cols, c, "concat_rows width mismatch");
            out.extend_from_slice(&self.val(*p));
            rows += p.rows;
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(
            Cow::Owned(out),
            rows,
            c,
            rg,
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
            None,
        )
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = parts[0].rows;
        let total: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for p in parts {
            assert_eq!(p.rows, r, "concat_cols height mismatch");
            let v = self.val(*p);
            for i in 0..r {
                out[i * total + off..i * total + off + p.cols]
                    .copy_from_slice(&v[i * p.cols..(i + 1) * p.cols]);
            }
            off += p.cols;
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(
            Cow::Owned(out),
            r,
            total,
            rg,
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            None,
        )
    }

    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= x.rows, "slice_rows out of range");
        let out = self.val(x)[start * x.cols..(start + len) * x.cols].to_vec();
        let rg = self.rg(x);
        self.push(Cow::Owned(out), len, x.cols, rg, Op::SliceRows { x: x.id, start }, None)
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= x.cols, "slice_cols out of range");
        let out: Vec<f64> = {
            let v = self.val(x);
            (0..x.rows)
                .flat_map(|i| v[i * x.cols + start..i * x.cols + start + len].to_vec())
                .collect()
        };
        let rg = self.rg(x);
        self.push(Cow::Owned(out), x.rows, len, rg, Op::SliceCols { x: x.id, start }, None)
    }

    pub fn transpose(&self, x: Var) -> Var {
        let out = {
            let v = self.val(x);
            let mut out = vec![0.0; v.len()];
            for i in 0..x.rows {
                for j in 0..x.cols {
                    out[j * x.rows + i] = v[i * x.cols + j];
                }
            }
            out
        };
        let rg = self.rg(x);
        self.push(Cow::Owned(out), x.cols, x.rows, rg, Op::Transpose(x.id), None)
    }

    pub fn reshape(&self, x: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(rows * cols, x.rows * x.cols, "reshape size mismatch");
        let out = self.value(x);
        let rg = self.rg(x);
        self.push(Cow::Owned(out), rows, cols, rg, Op::Reshape(x.id), None)
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.val(x).iter().sum();
        let rg = self.rg(x);
        self.push(Cow::Owned(vec![s]), 1, 1, rg, Op::Sum(x.id), None)
    }

    /// Mean over rows, giving `1 × cols`.
    pub fn mean_rows(&self, x: Var) -> Var {
        let out = {
            let v = self.val(x);
            let mut out = vec![0.0; x.cols];
            for row in v.chunks(x.cols.max(1)) {
                for (o, r) in out.iter_mut().zip(row) {
                    *o += r;
                }
            }
            out.iter_mut().for_each(|o| *o /= x.rows as f64);
            out
        };
        let rg = self.rg(x);
        self.push(Cow::Owned(out), 1, x.cols, rg, Op::MeanRows(x.id), None)
    }

    /// One LSTM step. `wx` is `C_in × 4H`, `wh` is `H × 4H`, `b` is `1 × 4H`;
    /// gate order is input, forget, cell, output. Returns `(h, c)`.
    pub fn lstm_cell(&self, x: Var, h: Var, c: Var, wx: Var, wh: Var, b: Var) -> (Var, Var) {
        let hidden = h.cols;
        assert_eq!(wx.cols, 4 * hidden);
        let gates = self.add(self.matmul(x, wx), self.matmul(h, wh));
        let gates = self.add_row(gates, b);
        let i = self.sigmoid(self.slice_cols(gates, 0, hidden));
        let f = self.sigmoid(self.slice_cols(gates, hidden, hidden));
        let g = self.tanh(self.slice_cols(gates, 2 * hidden, hidden));
        let o = self.sigmoid(self.slice_cols(gates, 3 * hidden, hidden));
        let c_next = self.add(self.mul(f, c), self.mul(i, g));
        let h_next = self.mul(o, self.tanh(c_next));
        (h_next, c_next)
    }

    // ----- backward -------------------------------------------------------------

    /// Reverse sweep from a scalar loss. The tape may be swept once.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if (loss.rows, loss.cols) != (1, 1) {
            return Err(Error::NonScalarLoss(vec![loss.rows, loss.cols]));
        }
        if self.backward_done.replace(true) {
            return Err(Error::DoubleBackward);
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(&nodes, node, &dy, &mut grads);
            }
            grads[id] = Some(dy);
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|name| (name.to_string(), i)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node<'_>], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn propagate(nodes: &[Node<'_>], node: &Node<'_>, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let value = &node.value;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, ta, tb } => {
            let (na, nb) = (&nodes[a], &nodes[b]);
            let (m, k) = if ta { (na.cols, na.rows) } else { (na.rows, na.cols) };
            let n = node.cols;
            if let Some(ga) = acc(grads, nodes, a) {
                if ta {
                    gemm(tb, true, k, n, m, &nb.value, dy, ga, 1.0);
                } else {
                    gemm(false, !tb, m, n, k, dy, &nb.value, ga, 1.0);
                }
            }
            if let Some(gb) = acc(grads, nodes, b) {
                if tb {
                    gemm(true, ta, n, m, k, dy, &na.value, gb, 1.0);
                } else {
                    gemm(!ta, false, k, m, n, &na.value, dy, gb, 1.0);
                }
            }
        }
        &Op::Add(a, b) => {
            for (id, sign) in [(a, 1.0), (b, 1.0)] {
                if let Some(g) = acc(grads, nodes, id) {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += sign * d);
                }
            }
        }
        &Op::Sub(a, b) => {
            for (id, sign) in [(a, 1.0), (b, -1.0)] {
                if let Some(g) = acc(grads, nodes, id) {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += sign * d);
                }
            }
        }
        &Op::Mul(a, b) => {
            if let Some(g) = acc(grads, nodes, a) {
                let vb = &nodes[b].value;
                for ((g, d), y) in g.iter_mut().zip(dy).zip(vb.iter()) {
                    *g += d * y;
                }
            }
            if let Some(g) = acc(grads, nodes, b) {
                let va = &nodes[a].value;
                for ((g, d), x) in g.iter_mut().zip(dy).zip(va.iter()) {
                    *g += d * x;
                }
            }
        }
        &Op::Scale(a, f) => {
            if let Some(g) = acc(grads, nodes, a) {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += f * d);
            }
        }
        &Op::AddRow(a, bias) => {
            if let Some(g) = acc(grads, nodes, a) {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
            }
            if let Some(g) = acc(grads, nodes, bias) {
                for row in dy.chunks(node.cols.max(1)) {
                    g.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                }
            }
        }
        Op::Gather { src, ids } => {
            let c = node.cols;
            if let Some(g) = acc(grads, nodes, *src) {
                for (o, &i) in ids.iter().enumerate() {
                    for j in 0..c {
                        g[i * c + j] += dy[o * c + j];
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let c = node.cols;
            let rows = node.rows;
            let vg = nodes[*gamma].value.to_vec();
            if let Some(g) = acc(grads, nodes, *gamma) {
                for r in 0..rows {
                    for j in 0..c {
                        g[j] += dy[r * c + j] * xhat[r * c + j];
                    }
                }
            }
            if let Some(g) = acc(grads, nodes, *beta) {
                for r in 0..rows {
                    for j in 0..c {
                        g[j] += dy[r * c + j];
                    }
                }
            }
            if let Some(g) = acc(grads, nodes, *x) {
                for r in 0..rows {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        let d = dy[r * c + j] * vg[j];
                        mean_d += d;
                        mean_dx += d * xhat[r * c + j];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        let d = dy[r * c + j] * vg[j];
                        g[r * c + j] += rstd[r] * (d - mean_d - xhat[r * c + j] * mean_dx);
                    }
                }
            }
        }
        &Op::Gelu(a) => {
            let va = nodes[a].value.to_vec();
            if let Some(g) = acc(grads, nodes, a) {
                for ((g, d), x) in g.iter_mut().zip(dy).zip(&va) {
                    *g += d * gelu_grad(*x);
                }
            }
        }
        &Op::Relu(a) => {
            let va = nodes[a].value.to_vec();
            if let Some(g) = acc(grads, nodes, a) {
                for ((g, d), x) in g.iter_mut().zip(dy).zip(&va) {
                    if *x > 0.0 {
                        *g += d;
                    }
                }
            }
        }
        &Op::Tanh(a) => {
            if let Some(g) = acc(grads, nodes, a) {
                for ((g, d), y) in g.iter_mut().zip(dy).zip(value.iter()) {
                    *g += d * (1.0 - y * y);
                }
            }
        }
        &Op::Sigmoid(a) => {
            if let Some(g) = acc(grads, nodes, a) {
                for ((g, d), y) in g.iter_mut().zip(dy).zip(value.iter()) {
                    *g += d * y * (1.0 - y);
                }
            }
        }
        &Op::Softmax(a) => {
            let c = node.cols.max(1);
            if let Some(g) = acc(grads, nodes, a) {
                for ((grow, drow), yrow) in g.chunks_mut(c).zip(dy.chunks(c)).zip(value.chunks(c)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                    for ((g, d), y) in grow.iter_mut().zip(drow).zip(yrow) {
                        *g += y * (d - dot);
                    }
                }
            }
        }
        &Op::LogSoftmax(a) => {
            let c = node.cols.max(1);
            if let Some(g) = acc(grads, nodes, a) {
                for ((grow, drow), yrow) in g.chunks_mut(c).zip(dy.chunks(c)).zip(value.chunks(c)) {
                    let total: f64 = drow.iter().sum();
                    for ((g, d), y) in grow.iter_mut().zip(drow).zip(yrow) {
                        *g += d - y.exp() * total;
                    }
                }
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let nl = &nodes[*logits];
            let (b, c) = (nl.rows, nl.cols);
            let scale = dy[0] / b as f64;
            if let Some(g) = acc(grads, nodes, *logits) {
                for r in 0..b {
                    let mass: f64 = targets[r * c..(r + 1) * c].iter().sum();
                    for j in 0..c {
                        g[r * c + j] += scale * (probs[r * c + j] * mass - targets[r * c + j]);
                    }
                }
            }
        }
        &Op::Im2Col { x, kernel, padding } => {
            let (t, c) = (nodes[x].rows, nodes[x].cols);
            if let Some(g) = acc(grads, nodes, x) {
                for o in 0..node.rows {
                    for k in 0..kernel {
                        let src = o + k;
                        if src < padding || src - padding >= t {
                            continue;
                        }
                        let s = src - padding;
                        for j in 0..c {
                            g[s * c + j] += dy[o * kernel * c + k * c + j];
                        }
                    }
                }
            }
        }
        Op::MaxPool { x, argmax } => {
            if let Some(g) = acc(grads, nodes, *x) {
                for (d, &src) in dy.iter().zip(argmax) {
                    g[src] += d;
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                if let Some(g) = acc(grads, nodes, p) {
                    g.iter_mut().zip(&dy[off..off + len]).for_each(|(g, d)| *g += d);
                }
                off += len;
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.cols;
            let mut off = 0;
            for &p in parts {
                let pc = nodes[p].cols;
                if let Some(g) = acc(grads, nodes, p) {
                    for i in 0..node.rows {
                        for j in 0..pc {
                            g[i * pc + j] += dy[i * total + off + j];
                        }
                    }
                }
                off += pc;
            }
        }
        &Op::SliceRows { x, start } => {
            let c = node.cols;
            if let Some(g) = acc(grads, nodes, x) {
                g[start * c..start * c + dy.len()]
                    .iter_mut()
                    .zip(dy)
                    .for_each(|(g, d)| *g += d);
            }
        }
        &Op::SliceCols { x, start } => {
            let xc = nodes[x].cols;
            let len = node.cols;
            if let Some(g) = acc(grads, nodes, x) {
                for i in 0..node.rows {
                    for j in 0..len {
                        g[i * xc + start + j] += dy[i * len + j];
                    }
                }
            }
        }
        &Op::Transpose(x) => {
            let (r, c) = (nodes[x].rows, nodes[x].cols);
            if let Some(g) = acc(grads, nodes, x) {
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] += dy[j * r + i];
                    }
                }
            }
        }
        &Op::Reshape(x) => {
            if let Some(g) = acc(grads, nodes, x) {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
            }
        }
        &Op::Sum(x) => {
            if let Some(g) = acc(grads, nodes, x) {
                g.iter_mut().for_each(|g| *g += dy[0]);
            }
        }
        &Op::MeanRows(x) => {
            let rows = nodes[x].rows;
            let c = node.cols.max(1);
            if let Some(g) = acc(grads, nodes, x) {
                for row in g.chunks_mut(c) {
                    for (g, d) in row.iter_mut().zip(dy) {
                        *g += d / rows as f64;
                    }
                }
            }
        }
    }
}

/// Gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` required one.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Per-parameter gradients, summed over every leaf that registered the
    /// same parameter.
    pub fn by_param(&self) -> HashMap<String, Vec<f64>> {
        let mut out: HashMap<String, Vec<f64>> = HashMap::new();
        for (name, id) in &self.params {
            if let Some(g) = self.grads[*id].as_deref() {
                match out.get_mut(name) {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => {
                        out.insert(name.clone(), g.to_vec());
                    }
                }
            }
        }
        out
    }

    /// Adds parameter gradients into the matching parameters' grad buffers.
    pub fn accumulate_into<'p>(&self, params: impl IntoIterator<Item = &'p mut Parameter>) {
        let by = self.by_param();
        for p in params {
            if let Some(g) = by.get(&p.name) {
                p.tensor.accumulate_grad(g);
            }
        }
    }
}

// ----- scalar helpers --------------------------------------------------------

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    row.iter_mut().for_each(|x| *x /= s);
}

pub(crate) fn pool_windows(len: usize, window: usize, stride: usize) -> Vec<(usize, usize)> {
    assert!(window >= 1 && stride >= 1);
    if len <= window {
        return vec![(0, len)];
    }
    let n_out = (len - window).div_ceil(stride) + 1;
    (0..n_out)
        .map(|i| (i * stride, (i * stride + window).min(len)))
        .collect()
}

pub(crate) fn adaptive_windows(len: usize, out_len: usize) -> Vec<(usize, usize)> {
    assert!(len >= 1 && out_len >= 1);
    (0..out_len)
        .map(|j| {
            let s = j * len / out_len;
            let e = ((j + 1) * len).div_ceil(out_len).max(s + 1);
            (s, e)
        })
        .collect()
}
