use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{
    axis_split, block_mean, block_mean_backward, col2im_add, gemm, im2col, ConvGeom, Strides,
};
use super::{Real, Result, Tensor, TensorError, EPS};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    LogEps(usize),
    Relu(usize),
    SumAll(usize),
    SumAxis { x: usize, axis: usize, mean: bool },
    Reshape(usize),
    MatMul(usize, usize),
    AddRowBias(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        out_channels: usize,
    },
    BlockMean { x: usize, block: usize },
    Softmax(usize),
    L2Norm { x: usize, axis: usize },
    Concat(Vec<usize>),
    SliceRows { x: usize, start: usize },
    GatherRows { x: usize, rows: Vec<usize> },
    Pick { x: usize, cols: Vec<usize> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of tensor operations.
///
/// A graph supports exactly one [`Graph::backward`] call; a second call is an
/// error rather than a silent accumulation.
#[derive(Debug)]
pub struct Graph<T: Real = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    finished: bool,
}

/// Gradients of the requires-grad leaves, produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T: Real = f32> {
    graph: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get_mut(v.index).and_then(|g| g.take())
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn slot<'a, T: Real>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    i: usize,
) -> Option<&'a mut Vec<T>> {
    if !nodes[i].requires_grad {
        return None;
    }
    Some(grads[i].get_or_insert_with(|| vec![T::zero(); nodes[i].value.numel()]))
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            finished: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies the current value of `v` into a new constant leaf.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.get(v)?.clone();
        Ok(self.constant(value))
    }

    /// Value of a node. Panics if `v` belongs to another graph.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.get(v).expect("variable belongs to a different graph")
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn get(&self, v: Var) -> Result<&Tensor<T>> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(&self.nodes[v.index].value)
    }

    fn idx(&self, v: Var) -> Result<usize> {
        self.get(v).map(|_| v.index)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(mismatch(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, out, op(ia, ib), &[ia, ib])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let out = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())?;
        self.push(name, out, op, &[ia])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// `a / (b + ε)`; meant for nonnegative denominators.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let eps = T::of(EPS);
        self.binary("div", a, b, move |x, y| x / (y + eps), Op::Div)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let st = T::of(s);
        self.unary("scale", a, move |x| x * st, Op::Scale(ia, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let st = T::of(s);
        self.unary("add_scalar", a, move |x| x + st, Op::AddScalar(ia))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        self.unary("exp", a, |x| x.exp(), Op::Exp(ia))
    }

    /// `ln(a + ε)`.
    pub fn log_eps(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let eps = T::of(EPS);
        self.unary("log", a, move |x| (x + eps).ln(), Op::LogEps(ia))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        self.unary("relu", a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(ia))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.nodes[ia].value.data().iter().fold(T::zero(), |acc, &x| acc + x);
        self.push("sum", Tensor::scalar(s), Op::SumAll(ia), &[ia])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.get(a)?.numel();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    fn reduce_axis(&mut self, name: &'static str, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        if axis >= va.shape().len() {
            return Err(TensorError::Invalid {
                op: name,
                msg: format!("axis {axis} out of range for shape {:?}", va.shape()),
            });
        }
        let (outer, len, inner) = axis_split(va.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &va.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        if mean {
            let inv = T::of(1.0 / len as f64);
            out.iter_mut().for_each(|v| *v = *v * inv);
        }
        let mut shape = va.shape().to_vec();
        shape.remove(axis);
        self.push(name, Tensor::new(shape, out)?, Op::SumAxis { x: ia, axis, mean }, &[ia])
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("sum_axis", a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("mean_axis", a, axis, true)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.clone().reshape(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(ia), &[ia])
    }

    /// `[m,k] · [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            va.data(),
            Strides::row_major(k),
            vb.data(),
            Strides::row_major(n),
            T::zero(),
            &mut out,
            Strides::row_major(n),
        );
        self.push("matmul", Tensor::new([m, n], out)?, Op::MatMul(ia, ib), &[ia, ib])
    }

    /// Adds a length-`n` bias to every row of an `[m,n]` matrix.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(bias)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape().len() != 2 || vb.shape() != [va.shape()[1]] {
            return Err(mismatch("add_row_bias", va.shape(), vb.shape()));
        }
        let n = vb.numel();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vb.data()[i % n])
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add_row_bias", out, Op::AddRowBias(ia, ib), &[ia, ib])
    }

    /// Stride-1 convolution with zero "same" padding.
    ///
    /// `x: [N,C,H,W]`, `w: [O,C,K,K]` with odd `K`, optional `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let ib = b.map(|b| self.idx(b)).transpose()?;
        let (vx, vw) = (&self.nodes[ix].value, &self.nodes[iw].value);
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(mismatch("conv2d", sx, sw));
        }
        let out_channels = sw[0];
        if let Some(ib) = ib {
            let sb = self.nodes[ib].value.shape();
            if sb != [out_channels] {
                return Err(mismatch("conv2d", sw, sb));
            }
        }
        let geom = ConvGeom {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kernel: sw[2],
        };
        let batch = sx[0];
        let (hw, ckk) = (geom.pixels(), geom.col_rows());
        let mut col = vec![T::zero(); ckk * hw];
        let mut out = vec![T::zero(); batch * out_channels * hw];
        let in_stride = geom.channels * hw;
        for n in 0..batch {
            im2col(&vx.data()[n * in_stride..(n + 1) * in_stride], geom, &mut col);
            let dst = &mut out[n * out_channels * hw..(n + 1) * out_channels * hw];
            gemm(
                out_channels,
                ckk,
                hw,
                vw.data(),
                Strides::row_major(ckk),
                &col,
                Strides::row_major(hw),
                T::zero(),
                dst,
                Strides::row_major(hw),
            );
            if let Some(ib) = ib {
                let bias = self.nodes[ib].value.data();
                for (o, plane) in dst.chunks_mut(hw).enumerate() {
                    plane.iter_mut().for_each(|v| *v = *v + bias[o]);
                }
            }
        }
        let out = Tensor::new([batch, out_channels, geom.height, geom.width], out)?;
        let mut inputs = vec![ix, iw];
        inputs.extend(ib);
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                x: ix,
                w: iw,
                b: ib,
                geom,
                out_channels,
            },
            &inputs,
        )
    }

    fn block_mean_op(&mut self, name: &'static str, a: Var, block: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let s = va.shape();
        if s.len() != 4 {
            return Err(TensorError::Invalid {
                op: name,
                msg: format!("expected [N,C,H,W], got {s:?}"),
            });
        }
        for &dim in &s[2..] {
            if block == 0 || dim % block != 0 {
                return Err(TensorError::Indivisible {
                    op: name,
                    size: dim,
                    by: block,
                });
            }
        }
        let data = block_mean(va.data(), s[0] * s[1], s[2], s[3], block);
        let out = Tensor::new([s[0], s[1], s[2] / block, s[3] / block], data)?;
        self.push(name, out, Op::BlockMean { x: ia, block }, &[ia])
    }

    /// Non-overlapping `k×k` average pooling.
    pub fn avg_pool2d(&mut self, a: Var, k: usize) -> Result<Var> {
        self.block_mean_op("avg_pool2d", a, k)
    }

    /// Average pooling of an `S×S` map down to a `q×q` grid; `S` must divide by `q`.
    pub fn adaptive_avg_pool2d(&mut self, a: Var, q: usize) -> Result<Var> {
        let s = self.get(a)?.shape().to_vec();
        if s.len() != 4 {
            return Err(TensorError::Invalid {
                op: "adaptive_avg_pool2d",
                msg: format!("expected [N,C,H,W], got {s:?}"),
            });
        }
        if q == 0 || s[2] % q != 0 || s[3] % q != 0 || s[2] / q != s[3] / q {
            return Err(TensorError::Indivisible {
                op: "adaptive_avg_pool2d",
                size: s[2],
                by: q,
            });
        }
        self.block_mean_op("adaptive_avg_pool2d", a, s[2] / q)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let width = *va.shape().last().ok_or(TensorError::Invalid {
            op: "softmax",
            msg: "rank-0 input".into(),
        })?;
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / total);
        }
        let out = Tensor::new(va.shape().to_vec(), out)?;
        self.push("softmax", out, Op::Softmax(ia), &[ia])
    }

    /// Euclidean norm along `axis`.
    pub fn l2_norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        if axis >= va.shape().len() {
            return Err(TensorError::Invalid {
                op: "l2_norm",
                msg: format!("axis {axis} out of range for shape {:?}", va.shape()),
            });
        }
        let (outer, len, inner) = axis_split(va.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let x = va.data()[(o * len + l) * inner + i];
                    out[o * inner + i] = out[o * inner + i] + x * x;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = v.sqrt());
        let mut shape = va.shape().to_vec();
        shape.remove(axis);
        self.push("l2_norm", Tensor::new(shape, out)?, Op::L2Norm { x: ia, axis }, &[ia])
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let first = ids.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let tail = self.nodes[*first].value.shape().get(1..).unwrap_or(&[]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &i in &ids {
            let v = &self.nodes[i].value;
            if v.shape().is_empty() || v.shape()[1..] != tail[..] {
                return Err(mismatch("concat", self.nodes[*first].value.shape(), v.shape()));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push("concat", Tensor::new(shape, data)?, Op::Concat(ids.clone()), &ids)
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let s = va.shape();
        if s.is_empty() || start + len > s[0] {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of range for shape {s:?}", start + len),
            });
        }
        let width = va.numel() / s[0].max(1);
        let data = va.data()[start * width..(start + len) * width].to_vec();
        let mut shape = s.to_vec();
        shape[0] = len;
        self.push("slice_rows", Tensor::new(shape, data)?, Op::SliceRows { x: ia, start }, &[ia])
    }

    /// Selects rows of the leading axis by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let s = va.shape();
        if s.is_empty() {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: "rank-0 input".into(),
            });
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= s[0]) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("row {bad} out of range for shape {s:?}"),
            });
        }
        let width = va.numel() / s[0].max(1);
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            data.extend_from_slice(&va.data()[r * width..(r + 1) * width]);
        }
        let mut shape = s.to_vec();
        shape[0] = rows.len();
        let op = Op::GatherRows {
            x: ia,
            rows: rows.to_vec(),
        };
        self.push("gather_rows", Tensor::new(shape, data)?, op, &[ia])
    }

    /// `out[r] = a[r, cols[r]]` for an `[m,n]` matrix.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let s = va.shape();
        if s.len() != 2 || cols.len() != s[0] {
            return Err(mismatch("pick", s, &[cols.len()]));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= s[1]) {
            return Err(TensorError::Invalid {
                op: "pick",
                msg: format!("column {bad} out of range for shape {s:?}"),
            });
        }
        let data = cols
            .iter()
            .enumerate()
            .map(|(r, &c)| va.data()[r * s[1] + c])
            .collect();
        let op = Op::Pick {
            x: ia,
            cols: cols.to_vec(),
        };
        self.push("pick", Tensor::new([cols.len()], data)?, op, &[ia])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let il = self.idx(loss)?;
        if self.finished {
            return Err(TensorError::AlreadyBackpropagated);
        }
        let lv = &self.nodes[il].value;
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.finished = true;

        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; il + 1];
        let mut leaves: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[il].requires_grad {
            grads[il] = Some(vec![T::one()]);
        }

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    leaves[i] = Some(Tensor::new(out.shape().to_vec(), g)?);
                }
                &Op::Add(a, b) => {
                    if let Some(ga) = slot(&mut grads, nodes, a) {
                        ga.iter_mut().zip(&g).for_each(|(d, &s)| *d = *d + s);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, b) {
                        gb.iter_mut().zip(&g).for_each(|(d, &s)| *d = *d + s);
                    }
                }
                &Op::Sub(a, b) => {
                    if let Some(ga) = slot(&mut grads, nodes, a) {
                        ga.iter_mut().zip(&g).for_each(|(d, &s)| *d = *d + s);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, b) {
                        gb.iter_mut().zip(&g).for_each(|(d, &s)| *d = *d - s);
                    }
                }
                &Op::Mul(a, b) => {
                    let (va, vb) = (nodes[a].value.data(), nodes[b].value.data());
                    if let Some(ga) = slot(&mut grads, nodes, a) {
                        for k in 0..g.len() {
                            ga[k] = ga[k] + g[k] * vb[k];
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, b) {
                        for k in 0..g.len() {
                            gb[k] = gb[k] + g[k] * va[k];
                        }
                    }
                }
                &Op::Div(a, b) => {
                    let eps = T::of(EPS);
                    let (va, vb) = (nodes[a].value.data(), nodes[b].value.data());
                    if let Some(ga) = slot(&mut grads, nodes, a) {
                        for k in 0..g.len() {
                            ga[k] = ga[k] + g[k] / (vb[k] + eps);
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, b) {
                        for k in 0..g.len() {
                            let d = vb[k] + eps;
                            gb[k] = gb[k] - g[k] * va[k] / (d * d);
                        }
                    }
                }
                &Op::Scale(a, s) => {
                    let s = T::of(s);
                    if let Some(ga) = slot(&mut grads, nodes, a) {
                        ga.iter_mut().zip(&g).for_each(|(d, &x)| *d = *d + x * s);
                    }
                }
                &Op::AddScalar(a) | &Op::Reshape(a) => {
                    if let Some(ga) = slot(&mut grads, nodes, a) {
                        ga.iter_mut().zip(&g).for_each(|(d, &x)| *d = *d + x);
                    }
                }
                &Op::Exp(a) => {
                    if let Some(ga) = slot(&mut grads, nodes, a) {
                        for k in 0..g.len() {
                            ga[k] = ga[k] + g[k] * out.data()[k];
                        }
                    }
                }
                &Op::LogEps(a) => {
                    let eps = T::of(EPS);
                    let va = nodes[a].value.data();
                    if let Some(ga) = slot(&mut grads, nodes, a) {
                        for k in 0..g.len() {
                            ga[k] = ga[k] + g[k] / (va[k] + eps);
                        }
                    }
                }
                &Op::Relu(a) => {
                    let va = nodes[a].value.data();
                    if let Some(ga) = slot(&mut grads, nodes, a) {
                        for k in 0..g.len() {
                            if va[k] > T::zero() {
                                ga[k] = ga[k] + g[k];
                            }
                        }
                    }
                }
                &Op::SumAll(a) => {
                    if let Some(ga) = slot(&mut grads, nodes, a) {
                        ga.iter_mut().for_each(|d| *d = *d + g[0]);
                    }
                }
                &Op::SumAxis { x, axis, mean } => {
                    let (outer, len, inner) = axis_split(nodes[x].value.shape(), axis);
                    let scale = if mean {
                        T::of(1.0 / len as f64)
                    } else {
                        T::one()
                    };
                    if let Some(gx) = slot(&mut grads, nodes, x) {
                        for o in 0..outer {
                            for l in 0..len {
                                for i in 0..inner {
                                    let k = (o * len + l) * inner + i;
                                    gx[k] = gx[k] + g[o * inner + i] * scale;
                                }
                            }
                        }
                    }
                }
                &Op::MatMul(a, b) => {
                    let (sa, sb) = (nodes[a].value.shape(), nodes[b].value.shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let (va, vb) = (nodes[a].value.data(), nodes[b].value.data());
                    if let Some(ga) = slot(&mut grads, nodes, a) {
                        gemm(
                            m,
                            n,
                            k,
                            &g,
                            Strides::row_major(n),
                            vb,
                            Strides::transposed(n),
                            T::one(),
                            ga,
                            Strides::row_major(k),
                        );
                    }
                    if let Some(gb) = slot(&mut grads, nodes, b) {
                        gemm(
                            k,
                            m,
                            n,
                            va,
                            Strides::transposed(k),
                            &g,
                            Strides::row_major(n),
                            T::one(),
                            gb,
                            Strides::row_major(n),
                        );
                    }
                }
                &Op::AddRowBias(a, b) => {
                    if let Some(ga) = slot(&mut grads, nodes, a) {
                        ga.iter_mut().zip(&g).for_each(|(d, &x)| *d = *d + x);
                    }
                    let n = nodes[b].value.numel();
                    if let Some(gb) = slot(&mut grads, nodes, b) {
                        for row in g.chunks(n) {
                            gb.iter_mut().zip(row).for_each(|(d, &x)| *d = *d + x);
                        }
                    }
                }
                &Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    out_channels,
                } => {
                    let (hw, ckk) = (geom.pixels(), geom.col_rows());
                    let batch = nodes[x].value.shape()[0];
                    let in_stride = geom.channels * hw;
                    let out_stride = out_channels * hw;
                    let (vx, vw) = (nodes[x].value.data(), nodes[w].value.data());
                    let mut col = vec![T::zero(); ckk * hw];
                    if nodes[w].requires_grad {
                        let gw = slot(&mut grads, nodes, w).expect("requires grad");
                        for n in 0..batch {
                            im2col(&vx[n * in_stride..(n + 1) * in_stride], geom, &mut col);
                            gemm(
                                out_channels,
                                hw,
                                ckk,
                                &g[n * out_stride..(n + 1) * out_stride],
                                Strides::row_major(hw),
                                &col,
                                Strides::transposed(hw),
                                T::one(),
                                gw,
                                Strides::row_major(ckk),
                            );
                        }
                    }
                    if let Some(gx) = slot(&mut grads, nodes, x) {
                        for n in 0..batch {
                            gemm(
                                ckk,
                                out_channels,
                                hw,
                                vw,
                                Strides::transposed(ckk),
                                &g[n * out_stride..(n + 1) * out_stride],
                                Strides::row_major(hw),
                                T::zero(),
                                &mut col,
                                Strides::row_major(hw),
                            );
                            col2im_add(&col, geom, &mut gx[n * in_stride..(n + 1) * in_stride]);
                        }
                    }
                    if let Some(gb) = b.and_then(|b| slot(&mut grads, nodes, b)) {
                        for n in 0..batch {
                            for (o, plane) in g[n * out_stride..(n + 1) * out_stride]
                                .chunks(hw)
                                .enumerate()
                            {
                                gb[o] = plane.iter().fold(gb[o], |acc, &v| acc + v);
                            }
                        }
                    }
                }
                &Op::BlockMean { x, block } => {
                    let s = nodes[x].value.shape();
                    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                    if let Some(gx) = slot(&mut grads, nodes, x) {
                        block_mean_backward(&g, planes, h, w, block, gx);
                    }
                }
                &Op::Softmax(a) => {
                    let width = *out.shape().last().expect("softmax output has rank >= 1");
                    if let Some(ga) = slot(&mut grads, nodes, a) {
                        for ((yr, gr), dr) in out
                            .data()
                            .chunks(width)
                            .zip(g.chunks(width))
                            .zip(ga.chunks_mut(width))
                        {
                            let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&y, &gy)| s + y * gy);
                            for c in 0..width {
                                dr[c] = dr[c] + yr[c] * (gr[c] - dot);
                            }
                        }
                    }
                }
                &Op::L2Norm { x, axis } => {
                    let (outer, len, inner) = axis_split(nodes[x].value.shape(), axis);
                    let vx = nodes[x].value.data();
                    let eps = T::of(EPS);
                    if let Some(gx) = slot(&mut grads, nodes, x) {
                        for o in 0..outer {
                            for i in 0..inner {
                                let norm = out.data()[o * inner + i].max(eps);
                                let go = g[o * inner + i];
                                for l in 0..len {
                                    let k = (o * len + l) * inner + i;
                                    gx[k] = gx[k] + go * vx[k] / norm;
                                }
                            }
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = nodes[p].value.numel();
                        if let Some(gp) = slot(&mut grads, nodes, p) {
                            gp.iter_mut()
                                .zip(&g[offset..offset + n])
                                .for_each(|(d, &x)| *d = *d + x);
                        }
                        offset += n;
                    }
                }
                &Op::SliceRows { x, start } => {
                    let s = nodes[x].value.shape();
                    let width = nodes[x].value.numel() / s[0].max(1);
                    if let Some(gx) = slot(&mut grads, nodes, x) {
                        gx[start * width..start * width + g.len()]
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(d, &v)| *d = *d + v);
                    }
                }
                Op::GatherRows { x, rows } => {
                    let s = nodes[*x].value.shape();
                    let width = nodes[*x].value.numel() / s[0].max(1);
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (r, &src) in rows.iter().enumerate() {
                            for c in 0..width {
                                gx[src * width + c] = gx[src * width + c] + g[r * width + c];
                            }
                        }
                    }
                }
                Op::Pick { x, cols } => {
                    let width = nodes[*x].value.shape()[1];
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (r, &c) in cols.iter().enumerate() {
                            gx[r * width + c] = gx[r * width + c] + g[r];
                        }
                    }
                }
            }
        }

        Ok(Gradients {
            graph: self.id,
            grads: leaves,
        })
    }
}
