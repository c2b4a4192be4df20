//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value; `backward` walks
//! the tape in reverse. Only the operation set needed by the networks and
//! losses in this crate is supported.

use std::collections::HashMap;
use std::rc::Rc;

use crate::numcore::linalg::{det3, svd3};
use crate::numcore::param::{ParamId, ParamStore};
use crate::numcore::{NumError, Tensor};
use crate::scalar::Real;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-row factors of the SVD⁺ projection kept for the backward pass.
#[derive(Clone, Debug)]
struct PolarFrame<T> {
    u: [[T; 3]; 3],
    v: [[T; 3]; 3],
    s: [T; 3],
}

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulCol(Var, Var),
    ScaleRows(Var, Rc<[T]>),
    Silu(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Recip(Var),
    LayerNorm(Var, Vec<T>),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Rc<[usize]>,
        weights: Rc<[T]>,
        probs: Vec<T>,
    },
    WeightedSumSq(Var, Rc<[T]>),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Gather(Var, Rc<[usize]>),
    SegmentSum(Var, Rc<[usize]>),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Rc<[(usize, usize)]>,
        probs: Vec<T>,
    },
    SvdProject(Var, Vec<PolarFrame<T>>),
    RotateRows(Var, Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MulCol(..) => "mul_col",
            Op::ScaleRows(..) => "scale_rows",
            Op::Silu(..) => "silu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Sqrt(..) => "sqrt",
            Op::Recip(..) => "recip",
            Op::LayerNorm(..) => "layer_norm",
            Op::Softmax(..) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::WeightedSumSq(..) => "weighted_sum_sq",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RowSum(..) => "row_sum",
            Op::Gather(..) => "gather_rows",
            Op::SegmentSum(..) => "segment_sum",
            Op::Concat(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::Reshape(..) => "reshape",
            Op::Attention { .. } => "attention",
            Op::SvdProject(..) => "svd_project",
            Op::RotateRows(..) => "rotate_rows",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// The tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    nonfinite: Option<(usize, &'static str)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            nonfinite: None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let idx = self.nodes.len();
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some((idx, op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(idx)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// First operation whose output contained a non-finite value, if any.
    pub fn check_finite(&self) -> Result<(), NumError> {
        match self.nonfinite {
            Some((index, op)) => Err(NumError::NonFinite { op, index }),
            None => Ok(()),
        }
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter leaf; repeated calls with the same id share one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        assert_eq!(k, bv.rows(), "matmul: {:?} x {:?}", av.shape(), bv.shape());
        let n = bv.cols();
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, av.data(), false, bv.data(), false, T::zero(), &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMul(a, b), ng)
    }

    /// `a + b` with `b` a row vector broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.cols();
        assert_eq!(bv.len(), n, "add_row width");
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::AddRow(a, b), ng)
    }

    /// Affine map `x·W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).zip_map(self.value(b), f);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v + s);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    /// Multiply row `i` of `a` by the scalar `s[i]` (`s` has shape `[m, 1]`).
    pub fn mul_col(&mut self, a: Var, s: Var) -> Var {
        let (av, sv) = (self.value(a), self.value(s));
        let (m, n) = (av.rows(), av.cols());
        assert_eq!(sv.len(), m, "mul_col length");
        let mut out = av.clone();
        for (row, &f) in out.data_mut().chunks_mut(n).zip(sv.data()) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let ng = self.ng(a) || self.ng(s);
        self.push(out, Op::MulCol(a, s), ng)
    }

    /// Multiply row `i` by the constant `f[i]`.
    pub fn scale_rows(&mut self, a: Var, f: Rc<[T]>) -> Var {
        let av = self.value(a);
        let n = av.cols();
        assert_eq!(f.len(), av.rows(), "scale_rows length");
        let mut out = av.clone();
        for (row, &s) in out.data_mut().chunks_mut(n).zip(f.iter()) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let ng = self.ng(a);
        self.push(out, Op::ScaleRows(a, f), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(out, Op::Silu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    /// Elementwise square root; the derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.sqrt());
        let ng = self.ng(a);
        self.push(out, Op::Sqrt(a), ng)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.recip());
        let ng = self.ng(a);
        self.push(out, Op::Recip(a), ng)
    }

    /// Row-wise normalisation to zero mean, unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Var {
        let av = self.value(a);
        let n = av.cols();
        let nf = T::c(n as f64);
        let mut out = av.clone();
        let mut inv = Vec::with_capacity(av.rows());
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv.push(is);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm(a, inv), ng)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.cols();
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[targets_i])`, a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: Rc<[usize]>, weights: Rc<[T]>) -> Var {
        let lv = self.value(logits);
        let (m, k) = (lv.rows(), lv.cols());
        assert_eq!(targets.len(), m);
        assert_eq!(weights.len(), m);
        let mut probs = lv.data().to_vec();
        let mut loss = T::zero();
        for (i, row) in probs.chunks_mut(k).enumerate() {
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            loss += weights[i] * (lse - row[targets[i]]);
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            },
            ng,
        )
    }

    /// `Σ_i w_i ‖a_i‖²` over rows, a scalar.
    pub fn weighted_sum_sq(&mut self, a: Var, w: Rc<[T]>) -> Var {
        let av = self.value(a);
        let n = av.cols();
        assert_eq!(w.len(), av.rows());
        let s = av
            .data()
            .chunks(n)
            .zip(w.iter())
            .map(|(row, &wi)| wi * row.iter().map(|&v| v * v).sum::<T>())
            .sum::<T>();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::WeightedSumSq(a, w), ng)
    }

    /// Weighted squared error `Σ_i w_i ‖a_i − b_i‖²`.
    pub fn squared_error(&mut self, a: Var, b: Var, w: Rc<[T]>) -> Var {
        let d = self.sub(a, b);
        self.weighted_sum_sq(d, w)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.sum() / T::c(av.len() as f64);
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Sum across columns: `[m, n] → [m, 1]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.cols();
        let out: Vec<T> = av.data().chunks(n).map(|r| r.iter().copied().sum()).collect();
        let m = out.len();
        let ng = self.ng(a);
        self.push(Tensor::from_vec(&[m, 1], out), Op::RowSum(a), ng)
    }

    /// Select rows: `out[r] = a[idx[r]]`.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Var {
        let av = self.value(a);
        let n = av.cols();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            out.extend_from_slice(av.row(i));
        }
        let ng = self.ng(a);
        self.push(Tensor::from_vec(&[idx.len(), n], out), Op::Gather(a, idx), ng)
    }

    /// Scatter-add rows into `segments` buckets: `out[seg[r]] += a[r]`.
    pub fn segment_sum(&mut self, a: Var, seg: Rc<[usize]>, segments: usize) -> Var {
        let av = self.value(a);
        let n = av.cols();
        assert_eq!(seg.len(), av.rows(), "segment_sum index length");
        let mut out = vec![T::zero(); segments * n];
        for (r, &s) in seg.iter().enumerate() {
            let src = av.row(r);
            for (o, &v) in out[s * n..(s + 1) * n].iter_mut().zip(src) {
                *o += v;
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::from_vec(&[segments, n], out), Op::SegmentSum(a, seg), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            assert_eq!(pv.rows(), m, "concat_cols row mismatch");
            for r in 0..m {
                out[r * total + off..r * total + off + w].copy_from_slice(pv.row(r));
            }
            off += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(&[m, total], out), Op::Concat(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        assert!(start <= end && end <= n);
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&av.row(r)[start..end]);
        }
        let ng = self.ng(a);
        self.push(Tensor::from_vec(&[m, w], out), Op::SliceCols(a, start), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshaped(shape);
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    /// Multi-head scaled dot-product attention restricted to row segments.
    ///
    /// `q`, `k`, `v` are `[tokens, width]`; each `(offset, len)` segment is an
    /// independent sequence, so tokens never attend across segments.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Rc<[(usize, usize)]>,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (tokens, width) = (qv.rows(), qv.cols());
        assert_eq!(width % heads, 0, "width not divisible by heads");
        let dh = width / heads;
        let scale = T::one() / T::c(dh as f64).sqrt();
        let mut out = vec![T::zero(); tokens * width];
        let mut probs = Vec::with_capacity(segments.iter().map(|s| s.1 * s.1).sum::<usize>() * heads);
        for &(off, len) in segments.iter() {
            for h in 0..heads {
                let c0 = h * dh;
                let base = probs.len();
                for i in 0..len {
                    let qi = &qv.row(off + i)[c0..c0 + dh];
                    let start = probs.len();
                    for j in 0..len {
                        let kj = &kv.row(off + j)[c0..c0 + dh];
                        let s: T = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum();
                        probs.push(s * scale);
                    }
                    softmax_in_place(&mut probs[start..]);
                }
                for i in 0..len {
                    let orow = &mut out[(off + i) * width + c0..(off + i) * width + c0 + dh];
                    for j in 0..len {
                        let p = probs[base + i * len + j];
                        let vj = &vv.row(off + j)[c0..c0 + dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            Tensor::from_vec(&[tokens, width], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            },
            ng,
        )
    }

    /// Row-wise SVD⁺ projection of `[B, 9]` (row-major 3×3) matrices onto SO(3).
    pub fn svd_project(&mut self, m: Var) -> Var {
        let mv = self.value(m);
        assert_eq!(mv.cols(), 9, "svd_project expects [B, 9]");
        let mut out = Vec::with_capacity(mv.len());
        let mut frames = Vec::with_capacity(mv.rows());
        for r in 0..mv.rows() {
            let frame = polar_frame(mv.row(r));
            for i in 0..3 {
                for j in 0..3 {
                    out.push((0..3).map(|c| frame.u[i][c] * frame.v[j][c]).sum());
                }
            }
            frames.push(frame);
        }
        let rows = mv.rows();
        let ng = self.ng(m);
        self.push(Tensor::from_vec(&[rows, 9], out), Op::SvdProject(m, frames), ng)
    }

    /// `out_i = R_i · x_i` with `r` of shape `[n, 9]` and `x` of shape `[n, 3]`.
    pub fn rotate_rows(&mut self, r: Var, x: Var) -> Var {
        let (rv, xv) = (self.value(r), self.value(x));
        assert_eq!(rv.cols(), 9);
        assert_eq!(xv.cols(), 3);
        assert_eq!(rv.rows(), xv.rows());
        let n = xv.rows();
        let mut out = Vec::with_capacity(n * 3);
        for i in 0..n {
            let (ri, xi) = (rv.row(i), xv.row(i));
            for a in 0..3 {
                out.push(ri[3 * a] * xi[0] + ri[3 * a + 1] * xi[1] + ri[3 * a + 2] * xi[2]);
            }
        }
        let ng = self.ng(r) || self.ng(x);
        self.push(Tensor::from_vec(&[n, 3], out), Op::RotateRows(r, x), ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumError> {
        self.check_finite()?;
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.backprop(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.ng(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g.data(), false, bv.data(), true, T::zero(), &mut ga);
                    self.acc(grads, *a, Tensor::from_vec(av.shape(), ga));
                }
                if self.ng(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, av.data(), true, g.data(), false, T::zero(), &mut gb);
                    self.acc(grads, *b, Tensor::from_vec(bv.shape(), gb));
                }
            }
            Op::AddRow(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*b) {
                    let n = g.cols();
                    let mut gb = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.acc(grads, *b, Tensor::from_vec(&shape, gb));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*b) {
                    self.acc(grads, *b, g.scale(-T::one()));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.scale(*s)),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::MulCol(a, s) => {
                let (av, sv) = (self.value(*a), self.value(*s));
                let n = av.cols();
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for (row, &f) in ga.data_mut().chunks_mut(n).zip(sv.data()) {
                        row.iter_mut().for_each(|v| *v *= f);
                    }
                    self.acc(grads, *a, ga);
                }
                if self.ng(*s) {
                    let gs: Vec<T> = g
                        .data()
                        .chunks(n)
                        .zip(av.data().chunks(n))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(&x, &y)| x * y).sum())
                        .collect();
                    self.acc(grads, *s, Tensor::from_vec(sv.shape(), gs));
                }
            }
            Op::ScaleRows(a, f) => {
                let n = g.cols();
                let mut ga = g.clone();
                for (row, &s) in ga.data_mut().chunks_mut(n).zip(f.iter()) {
                    row.iter_mut().for_each(|v| *v *= s);
                }
                self.acc(grads, *a, ga);
            }
            Op::Silu(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| {
                    let s = sigmoid(x);
                    gv * s * (T::one() + x * (T::one() - s))
                });
                self.acc(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                self.acc(grads, *a, g.zip_map(y, |gv, s| gv * s * (T::one() - s)));
            }
            Op::Sqrt(a) => {
                let half = T::c(0.5);
                let ga = g.zip_map(y, |gv, r| if r > T::zero() { gv * half / r } else { T::zero() });
                self.acc(grads, *a, ga);
            }
            Op::Recip(a) => self.acc(grads, *a, g.zip_map(y, |gv, r| -gv * r * r)),
            Op::LayerNorm(a, inv) => {
                let n = y.cols();
                let nf = T::c(n as f64);
                let mut ga = g.clone();
                for ((row, yr), &is) in ga.data_mut().chunks_mut(n).zip(y.data().chunks(n)).zip(inv) {
                    let sg: T = row.iter().copied().sum();
                    let sgy: T = row.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (v, &yy) in row.iter_mut().zip(yr) {
                        *v = is / nf * (nf * *v - sg - yy * sgy);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let n = y.cols();
                let mut ga = g.clone();
                for (row, yr) in ga.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: T = row.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (v, &yy) in row.iter_mut().zip(yr) {
                        *v = yy * (*v - dot);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let lv = self.value(*logits);
                let k = lv.cols();
                let gs = g.item();
                let mut gl = probs.clone();
                for (i, row) in gl.chunks_mut(k).enumerate() {
                    row[targets[i]] -= T::one();
                    let f = gs * weights[i];
                    row.iter_mut().for_each(|v| *v *= f);
                }
                self.acc(grads, *logits, Tensor::from_vec(lv.shape(), gl));
            }
            Op::WeightedSumSq(a, w) => {
                let av = self.value(*a);
                let n = av.cols();
                let two = T::c(2.0) * g.item();
                let mut ga = av.clone();
                for (row, &wi) in ga.data_mut().chunks_mut(n).zip(w.iter()) {
                    row.iter_mut().for_each(|v| *v *= two * wi);
                }
                self.acc(grads, *a, ga);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.acc(grads, *a, Tensor::full(&shape, g.item()));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let v = g.item() / T::c(av.len() as f64);
                self.acc(grads, *a, Tensor::full(av.shape(), v));
            }
            Op::RowSum(a) => {
                let av = self.value(*a);
                let n = av.cols();
                let mut ga = Vec::with_capacity(av.len());
                for &gv in g.data() {
                    ga.extend(std::iter::repeat_n(gv, n));
                }
                self.acc(grads, *a, Tensor::from_vec(av.shape(), ga));
            }
            Op::Gather(a, idxs) => {
                let av = self.value(*a);
                let n = av.cols();
                let mut ga = Tensor::zeros(av.shape());
                for (r, &i) in idxs.iter().enumerate() {
                    let src = g.row(r);
                    for (o, &v) in ga.row_mut(i).iter_mut().zip(src) {
                        *o += v;
                    }
                }
                debug_assert_eq!(ga.cols(), n);
                self.acc(grads, *a, ga);
            }
            Op::SegmentSum(a, seg) => {
                let av = self.value(*a);
                let n = av.cols();
                let mut ga = Vec::with_capacity(av.len());
                for &s in seg.iter() {
                    ga.extend_from_slice(&g.data()[s * n..(s + 1) * n]);
                }
                self.acc(grads, *a, Tensor::from_vec(av.shape(), ga));
            }
            Op::Concat(parts) => {
                let total = g.cols();
                let m = g.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        let mut gp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            gp.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        self.acc(grads, p, Tensor::from_vec(&[m, w], gp));
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let n = av.cols();
                let w = g.cols();
                let mut ga = Tensor::zeros(av.shape());
                for r in 0..g.rows() {
                    ga.data_mut()[r * n + start..r * n + start + w].copy_from_slice(g.row(r));
                }
                self.acc(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.acc(grads, *a, g.clone().reshaped(&shape));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *heads, segments, probs, grads),
            Op::SvdProject(m, frames) => {
                if self.ng(*m) {
                    let mut gm = Vec::with_capacity(frames.len() * 9);
                    for (r, fr) in frames.iter().enumerate() {
                        gm.extend(polar_backward(fr, g.row(r)));
                    }
                    let shape = self.value(*m).shape().to_vec();
                    self.acc(grads, *m, Tensor::from_vec(&shape, gm));
                }
            }
            Op::RotateRows(r, x) => {
                let (rv, xv) = (self.value(*r), self.value(*x));
                let n = xv.rows();
                if self.ng(*r) {
                    let mut gr = Vec::with_capacity(n * 9);
                    for i in 0..n {
                        let (gi, xi) = (g.row(i), xv.row(i));
                        for a in 0..3 {
                            for b in 0..3 {
                                gr.push(gi[a] * xi[b]);
                            }
                        }
                    }
                    self.acc(grads, *r, Tensor::from_vec(&[n, 9], gr));
                }
                if self.ng(*x) {
                    let mut gx = Vec::with_capacity(n * 3);
                    for i in 0..n {
                        let (gi, ri) = (g.row(i), rv.row(i));
                        for b in 0..3 {
                            gx.push(ri[b] * gi[0] + ri[3 + b] * gi[1] + ri[6 + b] * gi[2]);
                        }
                    }
                    self.acc(grads, *x, Tensor::from_vec(&[n, 3], gx));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor<T>,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[(usize, usize)],
        probs: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.cols();
        let dh = width / heads;
        let scale = T::one() / T::c(dh as f64).sqrt();
        let mut gq = Tensor::zeros(qv.shape());
        let mut gk = Tensor::zeros(kv.shape());
        let mut gv = Tensor::zeros(vv.shape());
        let mut base = 0;
        let mut gs = Vec::new();
        for &(off, len) in segments {
            for h in 0..heads {
                let c0 = h * dh;
                let p = &probs[base..base + len * len];
                // gV = Pᵀ·gO ; gP = gO·Vᵀ
                gs.clear();
                gs.resize(len * len, T::zero());
                for i in 0..len {
                    let go = &g.row(off + i)[c0..c0 + dh];
                    for j in 0..len {
                        let pij = p[i * len + j];
                        let vrow = &vv.row(off + j)[c0..c0 + dh];
                        let mut dp = T::zero();
                        for d in 0..dh {
                            dp += go[d] * vrow[d];
                        }
                        gs[i * len + j] = dp;
                        let gvr = &mut gv.row_mut(off + j)[c0..c0 + dh];
                        for d in 0..dh {
                            gvr[d] += pij * go[d];
                        }
                    }
                    // softmax backward on row i
                    let row = &mut gs[i * len..(i + 1) * len];
                    let prow = &p[i * len..(i + 1) * len];
                    let dot: T = row.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                    for (x, &pp) in row.iter_mut().zip(prow) {
                        *x = pp * (*x - dot) * scale;
                    }
                }
                for i in 0..len {
                    for j in 0..len {
                        let s = gs[i * len + j];
                        if s == T::zero() {
                            continue;
                        }
                        for d in 0..dh {
                            let kj = kv.at(off + j, c0 + d);
                            let qi = qv.at(off + i, c0 + d);
                            gq.data_mut()[(off + i) * width + c0 + d] += s * kj;
                            gk.data_mut()[(off + j) * width + c0 + d] += s * qi;
                        }
                    }
                }
                base += len * len;
            }
        }
        self.acc(grads, q, gq);
        self.acc(grads, k, gk);
        self.acc(grads, v, gv);
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

fn polar_frame<T: Real>(m: &[T]) -> PolarFrame<T> {
    let mat = [[m[0], m[1], m[2]], [m[3], m[4], m[5]], [m[6], m[7], m[8]]];
    let d = svd3(&mat);
    let sign = if det3(&d.u) * det3(&d.v) < T::zero() {
        -T::one()
    } else {
        T::one()
    };
    let mut u = d.u;
    for row in u.iter_mut() {
        row[2] *= sign;
    }
    PolarFrame {
        u,
        v: d.v,
        s: [d.s[0], d.s[1], sign * d.s[2]],
    }
}

/// Gradient of `R = U'·Vᵀ` w.r.t. `M = U'·diag(s')·Vᵀ` (signed singular values).
///
/// `dR = U'·Ω·Vᵀ` with `Ω_ij = (F_ij − F_ji)/(s'_i + s'_j)`, `F = U'ᵀ·dM·V`.
fn polar_backward<T: Real>(fr: &PolarFrame<T>, g: &[T]) -> Vec<T> {
    let floor = T::c(1e-8);
    // X = U'ᵀ G V
    let mut x = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut s = T::zero();
            for a in 0..3 {
                for b in 0..3 {
                    s += fr.u[a][i] * g[3 * a + b] * fr.v[b][j];
                }
            }
            x[i][j] = s;
        }
    }
    let mut kmat = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            if i == j {
                continue;
            }
            let mut den = fr.s[i] + fr.s[j];
            if den.abs() < floor {
                den = if den < T::zero() { -floor } else { floor };
            }
            kmat[i][j] = (x[i][j] - x[j][i]) / den;
        }
    }
    // gM = U' K Vᵀ
    let mut out = vec![T::zero(); 9];
    for a in 0..3 {
        for b in 0..3 {
            let mut s = T::zero();
            for i in 0..3 {
                for j in 0..3 {
                    s += fr.u[a][i] * kmat[i][j] * fr.v[b][j];
                }
            }
            out[3 * a + b] = s;
        }
    }
    out
}

/// Result of a reverse sweep.
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Add the parameter gradients into the store's gradient buffers.
    pub fn accumulate(&self, store: &mut ParamStore<T>) {
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}

/// Build a graph with `f`, evaluate its scalar output and accumulate the
/// parameter gradients into `store`. Returns the loss value.
pub fn forward_backward<T: Real, F>(store: &mut ParamStore<T>, f: F) -> Result<T, NumError>
where
    F: FnOnce(&mut Graph<T>, &ParamStore<T>) -> Var,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store);
    let grads = g.backward(loss)?;
    grads.accumulate(store);
    Ok(g.value(loss).item())
}
