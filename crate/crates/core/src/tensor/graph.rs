//! Arena tape for reverse-mode differentiation.
//!
//! Every forward operation appends a node holding its output value and the
//! handles of its inputs. Inputs always precede the node that consumes them,
//! so one reverse sweep over the arena visits each operation exactly once.

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::{ParamId, ParamStore, Real, Tensor};
use crate::wavelet::{self, WaveletFilter};
use std::collections::HashMap;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    ScaleBy(Var, Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    AddRowBias(Var, Var),
    Reshape(Var),
    Softmax(Var),
    Silu(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Dwt(Var, [T; 4]),
    Idwt(Var, [T; 4]),
    Concat(Vec<Var>),
    ChannelMul(Var, Var),
    ChannelAdd(Var, Var),
    Sum(Var),
    Mean(Var),
    MeanInner(Var),
    MeanOuter(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-threaded recording tape. Parameters are read from an optional
/// [`ParamStore`] and loaded once per graph.
pub struct Graph<'s, T> {
    nodes: Vec<Node<T>>,
    store: Option<&'s ParamStore<T>>,
    loaded: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), store: None, loaded: HashMap::new() }
    }

    pub fn with_params(store: &'s ParamStore<T>) -> Self {
        Graph { nodes: Vec::new(), store: Some(store), loaded: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input indices of the operation that produced `v`.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        op_inputs(&self.nodes[v.0].op)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Differentiable leaf whose gradient can be read back from [`Gradients::get`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Loads a parameter from the attached store (once per graph).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.loaded.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store attached");
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.trainable);
        self.loaded.insert(id, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a), "add_scalar")
    }

    /// Multiplication by a learnable one-element tensor.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Dimension(format!("scale_by expects a scalar, got {:?}", self.shape(s))));
        }
        let c = self.value(s).data()[0];
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::ScaleBy(a, s), "scale_by")
    }

    fn matmul_impl(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Dimension(format!("matmul needs matrices, got {sa:?} x {sb:?}")));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner extents differ: {sa:?}{} x {sb:?}{}",
                if ta { "ᵀ" } else { "" },
                if tb { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, &mut out, T::zero());
        let v = Tensor::new([m, n], out)?;
        self.push(v, Op::MatMul { a, b, ta, tb, m, k, n }, "matmul")
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true)
    }

    /// `aᵀ · b` for `a: k×m`, `b: k×n`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true, false)
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().unwrap();
        if s.len() != 2 || self.value(b).len() != n {
            return Err(Error::Dimension(format!("row bias {:?} on {s:?}", self.shape(b))));
        }
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(n) {
            for (r, &bb) in row.iter_mut().zip(&bias) {
                *r += bb;
            }
        }
        self.push(v, Op::AddRowBias(x, b), "add_row_bias")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(v, Op::Reshape(x), "reshape")
    }

    /// Max-stabilised softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push(v, Op::Softmax(x), "softmax")
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|z| z * sigmoid(z));
        self.push(v, Op::Silu(x), "silu")
    }

    /// Zero-padded cross-correlation of `x: C_in×H×W` with `w: C_out×C_in×k×k`.
    /// Padding is `k/2`, so stride 1 preserves the spatial extent.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (c_in, h, wd) = self.value(x).dims3()?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::Dimension(format!("conv kernel must be C_out×C_in×k×k, got {ws:?}")));
        }
        if ws[1] != c_in {
            return Err(Error::Dimension(format!(
                "conv channel mismatch: input {:?}, kernel {ws:?}",
                self.shape(x)
            )));
        }
        let k = ws[2];
        if k % 2 == 0 {
            return Err(Error::Contract(format!("conv kernel extent {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::Contract("conv stride must be positive".into()));
        }
        if let Some(b) = b {
            if self.value(b).len() != ws[0] {
                return Err(Error::Dimension(format!("conv bias {:?} for {} outputs", self.shape(b), ws[0])));
            }
        }
        let geom = ConvGeom { c_in, h, w: wd, c_out: ws[0], k, stride, pad: k / 2 };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let v = Tensor::new([geom.c_out, geom.h_out(), geom.w_out()], out)?;
        self.push(v, Op::Conv2d { x, w, b, geom }, "conv2d")
    }

    /// One-level separable wavelet analysis `C×H×W -> 4C×H/2×W/2`.
    pub fn dwt2(&mut self, x: Var, filter: &WaveletFilter) -> Result<Var> {
        let coeffs = filter.coeffs::<T>();
        let v = wavelet::analysis(self.value(x), &coeffs)?;
        self.push(v, Op::Dwt(x, coeffs), "dwt2")
    }

    /// Inverse of [`Graph::dwt2`] for orthonormal filters.
    pub fn idwt2(&mut self, x: Var, filter: &WaveletFilter) -> Result<Var> {
        let coeffs = filter.coeffs::<T>();
        let v = wavelet::synthesis(self.value(x), &coeffs)?;
        self.push(v, Op::Idwt(x, coeffs), "idwt2")
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&tensors)?;
        self.push(v, Op::Concat(parts.to_vec()), "concat")
    }

    fn channel_check(&self, x: Var, v: Var, op: &str) -> Result<usize> {
        let c = self.shape(x)[0];
        if self.value(v).len() != c {
            return Err(Error::Dimension(format!(
                "{op}: per-channel vector {:?} for tensor {:?}",
                self.shape(v),
                self.shape(x)
            )));
        }
        Ok(self.value(x).len() / c)
    }

    /// `x[c, ...] * v[c]`.
    pub fn channel_mul(&mut self, x: Var, v: Var) -> Result<Var> {
        let inner = self.channel_check(x, v, "channel_mul")?;
        let scale = self.value(v).data().to_vec();
        let mut out = self.value(x).clone();
        for (chunk, &s) in out.data_mut().chunks_mut(inner).zip(&scale) {
            chunk.iter_mut().for_each(|z| *z *= s);
        }
        self.push(out, Op::ChannelMul(x, v), "channel_mul")
    }

    /// `x[c, ...] + v[c]`.
    pub fn channel_add(&mut self, x: Var, v: Var) -> Result<Var> {
        let inner = self.channel_check(x, v, "channel_add")?;
        let shift = self.value(v).data().to_vec();
        let mut out = self.value(x).clone();
        for (chunk, &s) in out.data_mut().chunks_mut(inner).zip(&shift) {
            chunk.iter_mut().for_each(|z| *z += s);
        }
        self.push(out, Op::ChannelAdd(x, v), "channel_add")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::lit(self.value(x).len() as f64);
        let v = Tensor::scalar(self.value(x).sum() / n);
        self.push(v, Op::Mean(x), "mean")
    }

    /// Mean over every axis but the first: `C×... -> C`.
    pub fn mean_inner(&mut self, x: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        let inner = self.value(x).len() / c;
        let n = T::lit(inner as f64);
        let data = self.value(x).data().chunks(inner).map(|ch| ch.iter().copied().sum::<T>() / n).collect();
        let v = Tensor::new([c], data)?;
        self.push(v, Op::MeanInner(x), "mean_inner")
    }

    /// Mean over rows of an `m×d` matrix: `m×d -> d`.
    pub fn mean_outer(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("mean_outer needs a matrix, got {s:?}")));
        }
        let (m, d) = (s[0], s[1]);
        let mut acc = vec![T::zero(); d];
        for row in self.value(x).data().chunks(d) {
            for (a, &r) in acc.iter_mut().zip(row) {
                *a += r;
            }
        }
        let inv = T::one() / T::lit(m as f64);
        acc.iter_mut().for_each(|a| *a *= inv);
        let v = Tensor::new([d], acc)?;
        self.push(v, Op::MeanOuter(x), "mean_outer")
    }

    /// Mean cross-entropy of `logits: B×K` (or a single `K` row) against class ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let k = *s.last().unwrap();
        let rows = self.value(logits).len() / k;
        if rows != targets.len() || targets.is_empty() {
            return Err(Error::Dimension(format!("{} targets for logits {s:?}", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Contract(format!("class id {bad} out of range for {k} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, &t) in probs.chunks_mut(k).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[t];
            row.iter_mut().for_each(|z| *z = (*z - lse).exp());
        }
        let v = Tensor::scalar(loss / T::lit(rows as f64));
        self.push(v, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, "cross_entropy")
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self.loaded.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(), visited })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if needs(v) {
                let len = self.nodes[v.0].value.len();
                let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| d.iter_mut().zip(g).zip(vb).for_each(|((d, &g), &y)| *d += g * y));
                acc(*b, &mut |d| d.iter_mut().zip(g).zip(va).for_each(|((d, &g), &x)| *d += g * x));
            }
            Op::Scale(a, c) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *c)),
            Op::AddScalar(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::ScaleBy(a, s) => {
                let c = val(*s)[0];
                let va = val(*a);
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * c));
                acc(*s, &mut |d| d[0] += g.iter().zip(va).map(|(&g, &x)| g * x).sum::<T>());
            }
            Op::MatMul { a, b, ta, tb, m, k, n } => {
                let (m, k, n, ta, tb) = (*m, *k, *n, *ta, *tb);
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    if ta {
                        T::gemm(k, n, m, vb, tb, g, true, d, T::one());
                    } else {
                        T::gemm(m, n, k, g, false, vb, !tb, d, T::one());
                    }
                });
                acc(*b, &mut |d| {
                    if tb {
                        T::gemm(n, m, k, g, true, va, ta, d, T::one());
                    } else {
                        T::gemm(k, m, n, va, !ta, g, false, d, T::one());
                    }
                });
            }
            Op::AddRowBias(x, b) => {
                acc(*x, &mut |d| add_into(d, g));
                let n = self.nodes[b.0].value.len();
                acc(*b, &mut |d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                acc(*a, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                        for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (g - dot);
                        }
                    }
                });
            }
            Op::Silu(a) => {
                let x = val(*a);
                acc(*a, &mut |d| {
                    for ((d, &g), &z) in d.iter_mut().zip(g).zip(x) {
                        let s = sigmoid(z);
                        *d += g * s * (T::one() + z * (T::one() - s));
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let (vx, vw) = (val(*x), val(*w));
                let mut dx = needs(*x).then(|| vec![T::zero(); vx.len()]);
                let mut dw = needs(*w).then(|| vec![T::zero(); vw.len()]);
                let mut db = b.filter(|&b| needs(b)).map(|b| vec![T::zero(); self.nodes[b.0].value.len()]);
                kernels::conv2d_backward(vx, vw, g, geom, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                if let Some(dx) = dx {
                    acc(*x, &mut |d| add_into(d, &dx));
                }
                if let Some(dw) = dw {
                    acc(*w, &mut |d| add_into(d, &dw));
                }
                if let (Some(b), Some(db)) = (b, db) {
                    acc(*b, &mut |d| add_into(d, &db));
                }
            }
            Op::Dwt(a, coeffs) => {
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("grad shape");
                let back = wavelet::synthesis(&gt, coeffs).expect("adjoint shape");
                acc(*a, &mut |d| add_into(d, back.data()));
            }
            Op::Idwt(a, coeffs) => {
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("grad shape");
                let back = wavelet::analysis(&gt, coeffs).expect("adjoint shape");
                acc(*a, &mut |d| add_into(d, back.data()));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    acc(p, &mut |d| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ChannelMul(x, v) => {
                let (vx, vv) = (val(*x), val(*v));
                let inner = vx.len() / vv.len();
                acc(*x, &mut |d| {
                    for ((dc, gc), &s) in d.chunks_mut(inner).zip(g.chunks(inner)).zip(vv) {
                        dc.iter_mut().zip(gc).for_each(|(d, &g)| *d += g * s);
                    }
                });
                acc(*v, &mut |d| {
                    for ((dv, gc), xc) in d.iter_mut().zip(g.chunks(inner)).zip(vx.chunks(inner)) {
                        *dv += gc.iter().zip(xc).map(|(&g, &x)| g * x).sum::<T>();
                    }
                });
            }
            Op::ChannelAdd(x, v) => {
                let inner = val(*x).len() / val(*v).len();
                acc(*x, &mut |d| add_into(d, g));
                acc(*v, &mut |d| {
                    for (dv, gc) in d.iter_mut().zip(g.chunks(inner)) {
                        *dv += gc.iter().copied().sum::<T>();
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = T::lit(val(*a).len() as f64);
                acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::MeanInner(a) => {
                let c = g.len();
                let inner = val(*a).len() / c;
                let n = T::lit(inner as f64);
                acc(*a, &mut |d| {
                    for (dc, &gc) in d.chunks_mut(inner).zip(g) {
                        dc.iter_mut().for_each(|d| *d += gc / n);
                    }
                });
            }
            Op::MeanOuter(a) => {
                let d_len = g.len();
                let m = T::lit((val(*a).len() / d_len) as f64);
                acc(*a, &mut |d| {
                    for row in d.chunks_mut(d_len) {
                        row.iter_mut().zip(g).for_each(|(r, &g)| *r += g / m);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let k = *self.nodes[logits.0].value.shape().last().unwrap();
                let scale = g[0] / T::lit(targets.len() as f64);
                acc(*logits, &mut |d| {
                    for ((drow, prow), &t) in d.chunks_mut(k).zip(probs.chunks(k)).zip(targets) {
                        for (j, (d, &p)) in drow.iter_mut().zip(prow).enumerate() {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            *d += scale * (p - onehot);
                        }
                    }
                });
            }
        }
    }
}

fn op_inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ScaleBy(a, b) => vec![*a, *b],
        Op::AddRowBias(a, b) | Op::ChannelMul(a, b) | Op::ChannelAdd(a, b) => vec![*a, *b],
        Op::MatMul { a, b, .. } => vec![*a, *b],
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Reshape(a)
        | Op::Softmax(a)
        | Op::Silu(a)
        | Op::Dwt(a, _)
        | Op::Idwt(a, _)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::MeanInner(a)
        | Op::MeanOuter(a) => vec![*a],
        Op::Conv2d { x, w, b, .. } => {
            let mut v = vec![*x, *w];
            v.extend(b);
            v
        }
        Op::Concat(parts) => parts.clone(),
        Op::CrossEntropy { logits, .. } => vec![*logits],
    }
}

fn add_into<T: Real>(d: &mut [T], g: &[T]) {
    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
}

pub(crate) fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for z in row.iter_mut() {
        *z = (*z - max).exp();
        total += *z;
    }
    row.iter_mut().for_each(|z| *z /= total);
}

/// Cotangents produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
    shapes: Vec<Vec<usize>>,
    visited: usize,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    pub fn param(&self, id: ParamId) -> Option<Tensor<T>> {
        let &(_, v) = self.params.iter().find(|(p, _)| *p == id)?;
        self.get(v)
    }

    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_deref().map(|g| (id, g)))
    }

    /// Number of non-leaf operations whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}
