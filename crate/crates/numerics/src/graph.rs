use std::collections::HashMap;

use crate::error::{NumericsError, Result};
use crate::float::Float;
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Additive mask value for [`Graph::softmax`]: entries carrying it receive
/// exactly zero probability.
pub const MASKED: f64 = f64::NEG_INFINITY;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Convolution padding. There is no implicit padding: callers pick one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Padding {
    #[default]
    Valid,
    /// Output length `ceil(len / stride)`; the total pad is split with the
    /// smaller half on the left.
    Same,
}

impl Padding {
    /// Output length of a 1-D convolution, or `None` when a valid
    /// convolution's input is shorter than the kernel.
    pub fn output_len(self, len: usize, kernel: usize, stride: usize) -> Option<usize> {
        match self {
            Padding::Valid => (len >= kernel).then(|| (len - kernel) / stride + 1),
            Padding::Same => (len > 0).then(|| len.div_ceil(stride)),
        }
    }

    fn left_pad(self, len: usize, kernel: usize, stride: usize) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Same => {
                let out = len.div_ceil(stride);
                let total = ((out - 1) * stride + kernel).saturating_sub(len);
                total / 2
            }
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Conv1d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        groups: usize,
        pad_left: usize,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Mse(Var, Vec<T>),
    Mae(Var, Vec<T>),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A recording tape. Every operation evaluates eagerly, appends a node and
/// returns its [`Var`]; [`Graph::backward`] walks the tape in reverse.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Graph::gradients`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }
}

fn shape_mismatch(op: &'static str, a: &Tensor<impl Float>, b: &Tensor<impl Float>) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
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

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        let needs_grad = match op {
            Op::Leaf => false,
            Op::Param => true,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push("constant", value, Op::Leaf, &[])
    }

    /// Records parameter `id`. Repeated calls return the same node so that
    /// gradients from every use accumulate into one place.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self
            .push("param", store.value(id).clone(), Op::Param, &[])
            .unwrap_or_else(|_| panic!("parameter {} is not finite", store.get(id).name));
        self.params.insert(id, v);
        v
    }

    /// A constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        t.expect_rank(op, 2)?;
        Ok((t.rows(), t.cols()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(shape_mismatch("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.rank2("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push("transpose", Tensor::new(vec![n, m], out)?, Op::Transpose(a), &[a])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_mismatch(op, self.value(a), self.value(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, node: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(op, value, node, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.rank2("add_row", a)?;
        let tb = self.value(bias);
        if tb.shape() != [n] {
            return Err(shape_mismatch("add_row", self.value(a), tb));
        }
        let bias_data = tb.data().to_vec();
        let ta = self.value(a);
        let data = ta
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(&bias_data).map(|(&x, &b)| x + b))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add_row", value, Op::AddRow(a, bias), &[a, bias])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let ta = self.value(a);
        let value = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| x * c).collect())?;
        self.push("scale", value, Op::Scale(a, c), &[a])
    }

    /// Row-wise softmax over the last axis. `mask`, when given, has the same
    /// shape and is added to the logits; use [`MASKED`] to exclude an entry.
    pub fn softmax(&mut self, a: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let (m, n) = self.rank2("softmax", a)?;
        if let Some(mask) = mask {
            if mask.shape() != self.shape(a) {
                return Err(shape_mismatch("softmax", self.value(a), mask));
            }
        }
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let o = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                o[j] = row[j] + mask.map_or(T::zero(), |mk| mk.data()[i * n + j]);
            }
            let max = o.iter().copied().fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                return Err(NumericsError::invalid("softmax", format!("row {i} is fully masked")));
            }
            let mut total = T::zero();
            for v in o.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in o.iter_mut() {
                *v /= total;
            }
        }
        self.push("softmax", Tensor::new(vec![m, n], out)?, Op::Softmax(a), &[a])
    }

    /// Row-wise layer normalization with learned gain and shift. A constant
    /// row normalizes to zero, so its output is exactly `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.rank2("layer_norm", x)?;
        for p in [gamma, beta] {
            if self.shape(p) != [n] {
                return Err(shape_mismatch("layer_norm", self.value(x), self.value(p)));
            }
        }
        let eps = T::of(eps);
        let nf = T::of(n as f64);
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x * std_normal_cdf(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("gelu", value, Op::Gelu(a), &[a])
    }

    /// Grouped 1-D convolution over a time-major `len × in_channels` input.
    /// `w` is `out_channels × (in_channels / groups) × kernel`; the result is
    /// `out_len × out_channels`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        groups: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (len, c_in) = self.rank2("conv1d", x)?;
        let tw = self.value(w);
        tw.expect_rank("conv1d", 3)?;
        let (c_out, cin_g, kernel) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        if stride == 0 || groups == 0 || c_in % groups != 0 || c_out % groups != 0 || cin_g != c_in / groups {
            return Err(NumericsError::invalid(
                "conv1d",
                format!(
                    "input channels {c_in}, weight {:?}, groups {groups}, stride {stride} are inconsistent",
                    tw.shape()
                ),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(shape_mismatch("conv1d", tw, self.value(b)));
            }
        }
        let out_len = padding.output_len(len, kernel, stride).ok_or_else(|| {
            NumericsError::invalid(
                "conv1d",
                format!("input length {len} is shorter than kernel {kernel}"),
            )
        })?;
        let pad_left = padding.left_pad(len, kernel, stride);
        let cout_g = c_out / groups;
        let xs = self.value(x).data();
        let ws = tw.data();
        let mut out = vec![T::zero(); out_len * c_out];
        if let Some(b) = bias {
            let bs = self.value(b).data();
            for t in 0..out_len {
                out[t * c_out..(t + 1) * c_out].copy_from_slice(bs);
            }
        }
        for t in 0..out_len {
            for k in 0..kernel {
                let Some(p) = (t * stride + k).checked_sub(pad_left).filter(|&p| p < len) else {
                    continue;
                };
                let xrow = &xs[p * c_in..(p + 1) * c_in];
                for o in 0..c_out {
                    let g = o / cout_g;
                    let wrow = &ws[o * cin_g * kernel..(o + 1) * cin_g * kernel];
                    let mut acc = T::zero();
                    for c in 0..cin_g {
                        acc += wrow[c * kernel + k] * xrow[g * cin_g + c];
                    }
                    out[t * c_out + o] += acc;
                }
            }
        }
        let value = Tensor::new(vec![out_len, c_out], out)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.push(
            "conv1d",
            value,
            Op::Conv1d {
                x,
                w,
                bias,
                stride,
                groups,
                pad_left,
            },
            &parents,
        )
    }

    /// Selects rows of `a` by index (embedding lookup when `a` is a table).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.rank2("gather_rows", a)?;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(NumericsError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    extent: m,
                });
            }
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let value = Tensor::new(vec![indices.len(), n], out)?;
        self.push("gather_rows", value, Op::GatherRows(a, indices.to_vec()), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(NumericsError::invalid("concat_rows", "no inputs"));
        };
        let (_, n) = self.rank2("concat_rows", first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.rank2("concat_rows", p)?;
            if c != n {
                return Err(shape_mismatch("concat_rows", self.value(first), self.value(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, n], out)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.rank2("slice_rows", a)?;
        if start + len > m {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                extent: m,
            });
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let value = Tensor::new(vec![len, n], data)?;
        self.push("slice_rows", value, Op::SliceRows(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(NumericsError::invalid("concat_cols", "no inputs"));
        };
        let (m, _) = self.rank2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.rank2("concat_cols", p)?;
            if r != m {
                return Err(shape_mismatch("concat_cols", self.value(first), self.value(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![m, total], out)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.rank2("slice_cols", a)?;
        if start + len > n {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                extent: n,
            });
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let value = Tensor::new(vec![m, len], out)?;
        self.push("slice_cols", value, Op::SliceCols(a, start), &[a])
    }

    /// Mean cross-entropy of `N × C` logits against integer class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.rank2("cross_entropy", logits)?;
        if targets.len() != m || m == 0 {
            return Err(NumericsError::invalid(
                "cross_entropy",
                format!("{} targets for {m} rows", targets.len()),
            ));
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); m * n];
        let mut loss = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            if t >= n {
                return Err(NumericsError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    extent: n,
                });
            }
            let row = &src[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for j in 0..n {
                probs[i * n + j] = (row[j] - lse).exp();
            }
            loss += lse - row[t];
        }
        let value = Tensor::scalar(loss / T::of(m as f64));
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    fn check_target(&self, op: &'static str, a: Var, target: &Tensor<T>) -> Result<()> {
        if self.shape(a) != target.shape() {
            return Err(shape_mismatch(op, self.value(a), target));
        }
        if target.numel() == 0 {
            return Err(NumericsError::invalid(op, "empty input"));
        }
        Ok(())
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, a: Var, target: &Tensor<T>) -> Result<Var> {
        self.check_target("mse", a, target)?;
        let n = T::of(target.numel() as f64);
        let loss = self
            .value(a)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / n;
        self.push("mse", Tensor::scalar(loss), Op::Mse(a, target.data().to_vec()), &[a])
    }

    /// Mean absolute error against a constant target.
    pub fn mae(&mut self, a: Var, target: &Tensor<T>) -> Result<Var> {
        self.check_target("mae", a, target)?;
        let n = T::of(target.numel() as f64);
        let loss = self
            .value(a)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &y)| (x - y).abs())
            .sum::<T>()
            / n;
        self.push("mae", Tensor::scalar(loss), Op::Mae(a, target.data().to_vec()), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(NumericsError::invalid("mean", "empty input"));
        }
        let s = t.data().iter().copied().sum::<T>() / T::of(t.numel() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Reverse sweep from a scalar `loss`; returns gradients for every node
    /// that depends on a parameter.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.backprop_node(node, &dy, &mut grads)?;
            }
            grads[idx] = Some(dy);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Runs [`Graph::gradients`] and adds the parameter gradients into
    /// `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        let mut entries: Vec<_> = self.params.iter().collect();
        entries.sort_by_key(|(id, _)| **id);
        for (&id, &v) in entries {
            if let Some(g) = &grads.grads[v.0] {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(NumericsError::invalid(
                        "backward",
                        format!("non-finite gradient for parameter {}", store.get(id).name),
                    ));
                }
                store.accumulate_grad(id, g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if wants(*a) {
                    gemm_nt(dy, val(*b), slot(grads, self, *a), m, n, k);
                }
                if wants(*b) {
                    gemm_tn(val(*a), dy, slot(grads, self, *b), k, m, n);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                let g = slot(grads, self, *a);
                for i in 0..m {
                    for j in 0..n {
                        g[i * n + j] += dy[j * m + i];
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        axpy(slot(grads, self, v), dy, T::one());
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    axpy(slot(grads, self, *a), dy, T::one());
                }
                if wants(*b) {
                    axpy(slot(grads, self, *b), dy, -T::one());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let other = val(*b);
                    let g = slot(grads, self, *a);
                    for ((gi, &d), &o) in g.iter_mut().zip(dy).zip(other) {
                        *gi += d * o;
                    }
                }
                if wants(*b) {
                    let other = val(*a);
                    let g = slot(grads, self, *b);
                    for ((gi, &d), &o) in g.iter_mut().zip(dy).zip(other) {
                        *gi += d * o;
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if wants(*a) {
                    axpy(slot(grads, self, *a), dy, T::one());
                }
                if wants(*bias) {
                    let n = self.value(*bias).numel();
                    let g = slot(grads, self, *bias);
                    for row in dy.chunks(n) {
                        axpy(g, row, T::one());
                    }
                }
            }
            Op::Scale(a, c) => axpy(slot(grads, self, *a), dy, *c),
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = node.value.cols();
                let g = slot(grads, self, *a);
                for ((gr, yr), dr) in g.chunks_mut(n).zip(y.chunks(n)).zip(dy.chunks(n)) {
                    let dot: T = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                    for ((gi, &p), &d) in gr.iter_mut().zip(yr).zip(dr) {
                        *gi += p * (d - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = self.value(*x).cols();
                if wants(*gamma) {
                    let g = slot(grads, self, *gamma);
                    for (dr, hr) in dy.chunks(n).zip(xhat.chunks(n)) {
                        for ((gi, &d), &h) in g.iter_mut().zip(dr).zip(hr) {
                            *gi += d * h;
                        }
                    }
                }
                if wants(*beta) {
                    let g = slot(grads, self, *beta);
                    for dr in dy.chunks(n) {
                        axpy(g, dr, T::one());
                    }
                }
                if wants(*x) {
                    let gam = val(*gamma).to_vec();
                    let nf = T::of(n as f64);
                    let g = slot(grads, self, *x);
                    let mut dxhat = vec![T::zero(); n];
                    for (i, ((gr, dr), hr)) in g.chunks_mut(n).zip(dy.chunks(n)).zip(xhat.chunks(n)).enumerate() {
                        for j in 0..n {
                            dxhat[j] = dr[j] * gam[j];
                        }
                        let s1: T = dxhat.iter().copied().sum();
                        let s2: T = dxhat.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                        let scale = inv_std[i] / nf;
                        for j in 0..n {
                            gr[j] += scale * (nf * dxhat[j] - s1 - hr[j] * s2);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let x = val(*a).to_vec();
                let g = slot(grads, self, *a);
                let inv_sqrt_2pi = T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let half = T::of(0.5);
                for ((gi, &d), &xv) in g.iter_mut().zip(dy).zip(&x) {
                    let pdf = (-(xv * xv) * half).exp() * inv_sqrt_2pi;
                    *gi += d * (std_normal_cdf(xv) + xv * pdf);
                }
            }
            Op::Conv1d {
                x,
                w,
                bias,
                stride,
                groups,
                pad_left,
            } => {
                let (len, c_in) = (self.value(*x).rows(), self.value(*x).cols());
                let wshape = self.value(*w).shape().to_vec();
                let (c_out, cin_g, kernel) = (wshape[0], wshape[1], wshape[2]);
                let cout_g = c_out / groups;
                let out_len = node.value.rows();
                if let Some(b) = bias {
                    if wants(*b) {
                        let g = slot(grads, self, *b);
                        for dr in dy.chunks(c_out) {
                            axpy(g, dr, T::one());
                        }
                    }
                }
                let positions = |t: usize, k: usize| (t * stride + k).checked_sub(*pad_left).filter(|&p| p < len);
                if wants(*w) {
                    let xs = val(*x).to_vec();
                    let g = slot(grads, self, *w);
                    for t in 0..out_len {
                        for k in 0..kernel {
                            let Some(p) = positions(t, k) else { continue };
                            let xrow = &xs[p * c_in..(p + 1) * c_in];
                            for o in 0..c_out {
                                let d = dy[t * c_out + o];
                                let grp = o / cout_g;
                                for c in 0..cin_g {
                                    g[(o * cin_g + c) * kernel + k] += d * xrow[grp * cin_g + c];
                                }
                            }
                        }
                    }
                }
                if wants(*x) {
                    let ws = val(*w).to_vec();
                    let g = slot(grads, self, *x);
                    for t in 0..out_len {
                        for k in 0..kernel {
                            let Some(p) = positions(t, k) else { continue };
                            for o in 0..c_out {
                                let d = dy[t * c_out + o];
                                let grp = o / cout_g;
                                for c in 0..cin_g {
                                    g[p * c_in + grp * cin_g + c] += d * ws[(o * cin_g + c) * kernel + k];
                                }
                            }
                        }
                    }
                }
            }
            Op::GatherRows(a, indices) => {
                let n = self.value(*a).cols();
                let g = slot(grads, self, *a);
                for (r, &i) in indices.iter().enumerate() {
                    axpy(&mut g[i * n..(i + 1) * n], &dy[r * n..(r + 1) * n], T::one());
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if wants(p) {
                        axpy(slot(grads, self, p), &dy[offset..offset + len], T::one());
                    }
                    offset += len;
                }
            }
            Op::SliceRows(a, start) => {
                let n = self.value(*a).cols();
                let g = slot(grads, self, *a);
                axpy(&mut g[start * n..start * n + dy.len()], dy, T::one());
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if wants(p) {
                        let g = slot(grads, self, p);
                        for (i, gr) in g.chunks_mut(w).enumerate() {
                            axpy(gr, &dy[i * total + col..i * total + col + w], T::one());
                        }
                    }
                    col += w;
                }
            }
            Op::SliceCols(a, start) => {
                let n = self.value(*a).cols();
                let w = node.value.cols();
                let g = slot(grads, self, *a);
                for (i, dr) in dy.chunks(w).enumerate() {
                    axpy(&mut g[i * n + start..i * n + start + w], dr, T::one());
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = self.value(*logits).cols();
                let scale = dy[0] / T::of(targets.len() as f64);
                let g = slot(grads, self, *logits);
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..n {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        g[i * n + j] += scale * (probs[i * n + j] - onehot);
                    }
                }
            }
            Op::Mse(a, target) => {
                let x = val(*a).to_vec();
                let scale = dy[0] * T::of(2.0) / T::of(target.len() as f64);
                let g = slot(grads, self, *a);
                for ((gi, &xv), &tv) in g.iter_mut().zip(&x).zip(target) {
                    *gi += scale * (xv - tv);
                }
            }
            Op::Mae(a, target) => {
                let x = val(*a).to_vec();
                let scale = dy[0] / T::of(target.len() as f64);
                let g = slot(grads, self, *a);
                for ((gi, &xv), &tv) in g.iter_mut().zip(&x).zip(target) {
                    let diff = xv - tv;
                    let sign = if diff > T::zero() {
                        T::one()
                    } else if diff < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    *gi += scale * sign;
                }
            }
            Op::Sum(a) => {
                let g = slot(grads, self, *a);
                g.iter_mut().for_each(|gi| *gi += dy[0]);
            }
            Op::Mean(a) => {
                let g = slot(grads, self, *a);
                let d = dy[0] / T::of(g.len() as f64);
                g.iter_mut().for_each(|gi| *gi += d);
            }
        }
        Ok(())
    }
}

fn slot<'g, T: Float>(grads: &'g mut [Option<Vec<T>>], graph: &Graph<T>, v: Var) -> &'g mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); graph.nodes[v.0].value.numel()])
}

fn axpy<T: Float>(dst: &mut [T], src: &[T], alpha: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn std_normal_cdf<T: Float>(x: T) -> T {
    T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}
