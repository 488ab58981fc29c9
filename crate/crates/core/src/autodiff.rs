//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation eagerly: values are computed when the
//! node is pushed, and [`Graph::backward`] walks the tape in reverse. Nodes
//! whose inputs carry no gradient are flagged at construction and skipped on
//! the way back, so frozen sub-networks (the expert) cost forward time only.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Im2Col {
        x: Var,
        height: usize,
        width: usize,
        kernel: usize,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-6;
const NORM_EPS: f64 = 1e-12;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable input (a parameter).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Same value as `v`, cut from the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "matmul_nt inner dimension");
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = Tensor::zeros(m, n);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            av.data(),
            k as isize,
            1,
            bv.data(),
            1,
            k as isize,
            T::zero(),
            out.data_mut(),
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulNt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shapes");
        let mut out = av.clone();
        out.add_assign(bv);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "sub shapes");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "add_row expects a row vector");
        assert_eq!(av.cols(), rv.cols(), "add_row widths");
        let mut out = av.clone();
        let r = rv.data();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shapes");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Tanh-approximated GELU; smooth everywhere, which the finite-difference
    /// checks rely on.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::lit(GELU_C);
        let k = T::lit(GELU_A);
        let half = T::lit(0.5);
        let out = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Row-wise layer normalisation with per-column gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        assert_eq!(gv.shape(), (1, cols), "layer_norm gamma shape");
        assert_eq!(bv.shape(), (1, cols), "layer_norm beta shape");
        let n = T::from_usize_lossy(cols);
        let eps = T::lit(LN_EPS);
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat.set(r, c, h);
                out.set(r, c, h * gv.data()[c] + bv.data()[c]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let out = log_softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = xv
                .row(r)
                .iter()
                .map(|&v| v * v)
                .sum::<T>()
                .sqrt()
                .max(T::lit(NORM_EPS));
            norms.push(n);
            for v in out.row_mut(r) {
                *v /= n;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::L2Normalize { x, norms }, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols(), "slice_cols out of range");
        let out = Tensor::from_fn(xv.rows(), len, |r, c| xv.get(r, start + c));
        let rg = self.rg(x);
        self.push(out, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row counts");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows widths");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let out = Tensor::from_vec(rows, cols, data).expect("consistent widths");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Output row `i` is input row `idx[i]`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        assert!(idx.iter().all(|&i| i < xv.rows()), "gather index out of range");
        let out = xv.gather_rows(idx);
        let rg = self.rg(x);
        self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &idx)
    }

    /// Unfolds a `height·width × channels` feature map (row-major grid) into
    /// `height·width × kernel²·channels` patches with zero "same" padding,
    /// so a convolution becomes one matrix product.
    pub fn im2col(&mut self, x: Var, height: usize, width: usize, kernel: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), height * width, "im2col grid size");
        assert!(kernel % 2 == 1, "im2col expects an odd kernel");
        let ch = xv.cols();
        let pad = kernel / 2;
        let mut out = Tensor::zeros(height * width, kernel * kernel * ch);
        for i in 0..height {
            for j in 0..width {
                let orow = out.row_mut(i * width + j);
                for di in 0..kernel {
                    for dj in 0..kernel {
                        let (si, sj) = (i + di, j + dj);
                        if si < pad || sj < pad || si - pad >= height || sj - pad >= width {
                            continue;
                        }
                        let src = xv.row((si - pad) * width + (sj - pad));
                        let o = (di * kernel + dj) * ch;
                        orow[o..o + ch].copy_from_slice(src);
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            out,
            Op::Im2Col {
                x,
                height,
                width,
                kernel,
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor::scalar(av.sum() / T::from_usize_lossy(av.len()));
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, t: Tensor<T>, this: &Self| {
            if !this.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    // dA = G · Bᵀ
                    let mut da = Tensor::zeros(m, k);
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        n as isize,
                        1,
                        bv.data(),
                        1,
                        n as isize,
                        T::zero(),
                        da.data_mut(),
                    );
                    acc(*a, da, self);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · G
                    let mut db = Tensor::zeros(k, n);
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        av.data(),
                        1,
                        k as isize,
                        g.data(),
                        n as isize,
                        1,
                        T::zero(),
                        db.data_mut(),
                    );
                    acc(*b, db, self);
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if self.rg(*a) {
                    // dA = G · B
                    let mut da = Tensor::zeros(m, k);
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        n as isize,
                        1,
                        bv.data(),
                        k as isize,
                        1,
                        T::zero(),
                        da.data_mut(),
                    );
                    acc(*a, da, self);
                }
                if self.rg(*b) {
                    // dB = Gᵀ · A
                    let mut db = Tensor::zeros(n, k);
                    T::gemm(
                        n,
                        m,
                        k,
                        T::one(),
                        g.data(),
                        1,
                        n as isize,
                        av.data(),
                        k as isize,
                        1,
                        T::zero(),
                        db.data_mut(),
                    );
                    acc(*b, db, self);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), self);
                acc(*b, g.clone(), self);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), self);
                acc(*b, g.map(|v| -v), self);
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone(), self);
                if self.rg(*row) {
                    let mut dr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, &v) in dr.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(*row, dr, self);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, hadamard(g, self.value(*b)), self);
                }
                if self.rg(*b) {
                    acc(*b, hadamard(g, self.value(*a)), self);
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|v| v * *s), self),
            Op::Gelu(a) => {
                let c = T::lit(GELU_C);
                let k = T::lit(GELU_A);
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let xv = self.value(*a);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let d = half * (T::one() + t)
                            + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x);
                        gv * d
                    })
                    .collect();
                acc(
                    *a,
                    Tensor::from_vec(xv.rows(), xv.cols(), data).expect("shape"),
                    self,
                );
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&s, &gv)| gv * s * (T::one() - s))
                    .collect();
                acc(
                    *a,
                    Tensor::from_vec(y.rows(), y.cols(), data).expect("shape"),
                    self,
                );
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = xhat.shape();
                let gv = self.value(*gamma);
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = Tensor::zeros(1, cols);
                    let mut db = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let gr = g.get(r, c);
                            dg.data_mut()[c] += gr * xhat.get(r, c);
                            db.data_mut()[c] += gr;
                        }
                    }
                    acc(*gamma, dg, self);
                    acc(*beta, db, self);
                }
                if self.rg(*x) {
                    let n = T::from_usize_lossy(cols);
                    let mut dx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for c in 0..cols {
                            let d = g.get(r, c) * gv.data()[c];
                            mean_d += d;
                            mean_dx += d * xhat.get(r, c);
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        for c in 0..cols {
                            let d = g.get(r, c) * gv.data()[c];
                            dx.set(r, c, rstd[r] * (d - mean_d - xhat.get(r, c) * mean_dx));
                        }
                    }
                    acc(*x, dx, self);
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: T = y.row(r).iter().zip(g.row(r)).map(|(&p, &q)| p * q).sum();
                    for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = y.get(r, c) * (g.get(r, c) - dot);
                    }
                }
                acc(*a, dx, self);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gs: T = g.row(r).iter().copied().sum();
                    for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = g.get(r, c) - y.get(r, c).exp() * gs;
                    }
                }
                acc(*a, dx, self);
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: T = y.row(r).iter().zip(g.row(r)).map(|(&p, &q)| p * q).sum();
                    for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = (g.get(r, c) - y.get(r, c) * dot) / norms[r];
                    }
                }
                acc(*x, dx, self);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*x, dx, self);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let dp = Tensor::from_fn(g.rows(), w, |r, c| g.get(r, offset + c));
                        acc(p, dp, self);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.rg(p) {
                        let start = offset * g.cols();
                        let dp = Tensor::from_vec(
                            h,
                            g.cols(),
                            g.data()[start..start + h * g.cols()].to_vec(),
                        )
                        .expect("shape");
                        acc(p, dp, self);
                    }
                    offset += h;
                }
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for (i, &src) in idx.iter().enumerate() {
                    for (d, &v) in dx.row_mut(src).iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                acc(*x, dx, self);
            }
            Op::Im2Col {
                x,
                height,
                width,
                kernel,
            } => {
                let xv = self.value(*x);
                let ch = xv.cols();
                let pad = kernel / 2;
                let mut dx = Tensor::zeros(xv.rows(), ch);
                for i in 0..*height {
                    for j in 0..*width {
                        let grow = g.row(i * width + j);
                        for di in 0..*kernel {
                            for dj in 0..*kernel {
                                let (si, sj) = (i + di, j + dj);
                                if si < pad || sj < pad || si - pad >= *height || sj - pad >= *width
                                {
                                    continue;
                                }
                                let o = (di * kernel + dj) * ch;
                                let dst = dx.row_mut((si - pad) * width + (sj - pad));
                                for (d, &v) in dst.iter_mut().zip(&grow[o..o + ch]) {
                                    *d += v;
                                }
                            }
                        }
                    }
                }
                acc(*x, dx, self);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Tensor::full(r, c, g.item()), self);
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                let v = g.item() / T::from_usize_lossy(r * c);
                acc(*a, Tensor::full(r, c, v), self);
            }
        }
    }
}

fn hadamard<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

pub fn log_softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of d(loss)/d(input) for a single-input graph
    /// builder, against the tape.
    fn check(build: impl Fn(&mut Graph<f64>, Var) -> Var, input: Tensor<f64>) {
        let mut g = Graph::new();
        let x = g.param(input.clone());
        let y = build(&mut g, x);
        let grads = g.backward(y);
        let analytic = grads.get(x).cloned().unwrap_or(Tensor::zeros(input.rows(), input.cols()));
        let eps = 1e-5;
        for i in 0..input.len() {
            let eval = |delta: f64| {
                let mut t = input.clone();
                t.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.param(t);
                let y = build(&mut g, x);
                g.value(y).item()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.data()[i];
            assert!(
                (a - numeric).abs() <= 1e-7 * (1.0 + a.abs().max(numeric.abs())),
                "element {i}: analytic {a} numeric {numeric}"
            );
        }
    }

    #[test]
    fn elementwise_and_reduction_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(3, 4, &mut rng);
        check(
            |g, x| {
                let c = g.constant(w.clone());
                let y = g.mul(x, c);
                let y = g.gelu(y);
                let y = g.sigmoid(y);
                g.mean(y)
            },
            random(3, 4, &mut rng),
        );
    }

    #[test]
    fn matmul_grads_both_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = random(4, 5, &mut rng);
        let a = random(3, 4, &mut rng);
        check(
            |g, x| {
                let c = g.constant(b.clone());
                let y = g.matmul(x, c);
                let y = g.gelu(y);
                g.sum(y)
            },
            a.clone(),
        );
        check(
            |g, x| {
                let c = g.constant(a.clone());
                let y = g.matmul(c, x);
                let y = g.mul(y, y);
                g.sum(y)
            },
            b.clone(),
        );
        let bt = random(5, 4, &mut rng);
        check(
            |g, x| {
                let c = g.constant(bt.clone());
                let y = g.matmul_nt(x, c);
                let y = g.softmax_rows(y);
                let y = g.mul(y, y);
                g.sum(y)
            },
            a.clone(),
        );
        check(
            |g, x| {
                let c = g.constant(a.clone());
                let y = g.matmul_nt(c, x);
                let y = g.log_softmax_rows(y);
                let y = g.gelu(y);
                g.sum(y)
            },
            bt,
        );
    }

    #[test]
    fn layer_norm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gamma = random(1, 6, &mut rng);
        let beta = random(1, 6, &mut rng);
        let probe = random(4, 6, &mut rng);
        check(
            |g, x| {
                let ga = g.constant(gamma.clone());
                let be = g.constant(beta.clone());
                let p = g.constant(probe.clone());
                let y = g.layer_norm(x, ga, be);
                let y = g.mul(y, p);
                let y = g.gelu(y);
                g.sum(y)
            },
            random(4, 6, &mut rng),
        );
        let x0 = random(4, 6, &mut rng);
        check(
            |g, ga| {
                let x = g.constant(x0.clone());
                let be = g.constant(beta.clone());
                let p = g.constant(probe.clone());
                let y = g.layer_norm(x, ga, be);
                let y = g.mul(y, p);
                g.sum(y)
            },
            gamma.clone(),
        );
    }

    #[test]
    fn shape_op_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let probe = random(5, 3, &mut rng);
        let row = random(1, 2, &mut rng);
        check(
            |g, x| {
                let a = g.slice_cols(x, 1, 2);
                let r = g.constant(row.clone());
                let a = g.add_row(a, r);
                let b = g.slice_cols(x, 0, 1);
                let c = g.concat_cols(&[b, a]);
                let d = g.gather_rows(c, &[3, 0, 0, 2, 1]);
                let p = g.constant(probe.clone());
                let e = g.mul(d, p);
                let e = g.l2_normalize_rows(e);
                let f = g.concat_rows(&[e, x]);
                let f = g.gelu(f);
                g.sum(f)
            },
            random(4, 3, &mut rng),
        );
    }

    #[test]
    fn im2col_grads_and_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random(18, 3, &mut rng);
        check(
            |g, x| {
                let cols = g.im2col(x, 3, 4, 3);
                let c = g.constant(w.clone());
                let y = g.matmul(cols, c);
                let y = g.gelu(y);
                g.sum(y)
            },
            random(12, 2, &mut rng),
        );

        // Centre tap of a 3×3 unfold reproduces the input.
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(6, 1, |r, _| r as f64));
        let u = g.im2col(x, 2, 3, 3);
        let u = g.value(u);
        for r in 0..6 {
            assert_eq!(u.get(r, 4), r as f64);
        }
        // Top-left tap of the top-left cell is padding.
        assert_eq!(u.get(0, 0), 0.0);
        // Right neighbour of cell (0,0) is cell (0,1).
        assert_eq!(u.get(0, 5), 1.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(2, 2, 1.0));
        let c = g.constant(Tensor::full(2, 2, 3.0));
        let y = g.mul(x, c);
        let d = g.detach(y);
        let z = g.add(y, d);
        let s = g.sum(z);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert!(grads.get(d).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0; 4]);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let t = Tensor::row_vector(vec![1000.0f32, 0.0, -1000.0]);
        let s = softmax_rows(&t);
        assert!(s.is_finite());
        assert!((s.sum() - 1.0).abs() < 1e-6);
        let l = log_softmax_rows(&t);
        assert!(l.is_finite());
    }
}
