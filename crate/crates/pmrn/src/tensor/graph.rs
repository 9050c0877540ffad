//! Operation recording and reverse-mode differentiation.
//!
//! A [`Graph`] is an arena of nodes built during the forward pass. Node
//! indices are handed out as [`TensorId`]s; since an op can only reference
//! ids that already exist, the arena order is a topological order and
//! [`Graph::backward`] is a single reverse sweep.

use rayon::prelude::*;

use super::kernels::{self, ConvDims};
use super::Tensor;
use crate::error::{Error, Result};

/// Elementwise work on tensors at least this large fans out over threads;
/// each element is computed independently, so results stay bit-identical.
const PAR_ELEMWISE: usize = 1 << 16;

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Conv2d { x: TensorId, w: TensorId, stride: usize, pad: usize },
    ConvBlock { x: TensorId, w: TensorId, b: TensorId, stride: usize, pad: usize },
    BiasAdd { x: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: f64 },
    Relu { x: TensorId },
    Sigmoid { x: TensorId },
    Exp { x: TensorId },
    Log { x: TensorId },
    Softmax { x: TensorId, axis: usize },
    LogSoftmax { x: TensorId, axis: usize },
    GlobalAvgPool { x: TensorId },
    GlobalMaxPool { x: TensorId, argmax: Vec<usize> },
    ChannelMean { x: TensorId },
    Concat { inputs: Vec<TensorId>, axis: usize },
    Reshape { x: TensorId },
    Transpose { x: TensorId },
    Select { x: TensorId, index: usize },
    CosineSim { a: TensorId, b: TensorId },
    Sum { x: TensorId },
    Mean { x: TensorId },
    MaskFilter { f: TensorId, m: TensorId },
    NllMean { logp: TensorId, labels: Vec<usize> },
    InterleaveRows { a: TensorId, b: TensorId },
    RowCosine { a: TensorId, b: TensorId },
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Arena of recorded operations, append-only during a forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for `id`, or zeros of `shape` if the node was unreachable
    /// from the loss.
    pub fn or_zeros(&self, id: TensorId, shape: &[usize]) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, lane, inner)
}

fn add_into(acc: &mut [f64], src: &[f64]) {
    if acc.len() >= PAR_ELEMWISE {
        acc.par_chunks_mut(PAR_ELEMWISE)
            .zip(src.par_chunks(PAR_ELEMWISE))
            .for_each(|(a, s)| {
                for (g, &v) in a.iter_mut().zip(s) {
                    *g += v;
                }
            });
    } else {
        for (g, &v) in acc.iter_mut().zip(src) {
            *g += v;
        }
    }
}

/// a += f(b, c) elementwise, fanning out for large tensors.
fn add_zip_into(acc: &mut [f64], b: &[f64], c: &[f64], f: impl Fn(f64, f64) -> f64 + Sync) {
    if acc.len() >= PAR_ELEMWISE {
        acc.par_chunks_mut(PAR_ELEMWISE)
            .zip(b.par_chunks(PAR_ELEMWISE).zip(c.par_chunks(PAR_ELEMWISE)))
            .for_each(|(a, (bs, cs))| {
                for ((g, &x), &y) in a.iter_mut().zip(bs).zip(cs) {
                    *g += f(x, y);
                }
            });
    } else {
        for ((g, &x), &y) in acc.iter_mut().zip(b).zip(c) {
            *g += f(x, y);
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all recorded nodes but keeps the arena allocation.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            needs_grad: requires_grad,
            op: Op::Leaf,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, false)
    }

    fn needs(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn push(&mut self, name: &'static str, value: Tensor, needs_grad: bool, op: Op) -> Result<TensorId> {
        let finite = if value.numel() >= PAR_ELEMWISE {
            value
                .data()
                .par_chunks(PAR_ELEMWISE)
                .all(|c| c.iter().all(|v| v.is_finite()))
        } else {
            value.is_finite()
        };
        if !finite {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    // ---- ops ----------------------------------------------------------

    /// 2-D matrix product `[m,k]·[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul(ta.data(), tb.data(), m, k, n, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        let ng = self.needs(&[a, b]);
        self.push("matmul", t, ng, Op::MatMul { a, b })
    }

    /// Batched 2-D convolution: x `[B,C,H,W]`, w `[Cout,C,KH,KW]`.
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, stride: usize, pad: usize) -> Result<TensorId> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.shape().len() != 4 || tw.shape().len() != 4 || tx.shape()[1] != tw.shape()[1] || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let d = ConvDims {
            batch: tx.shape()[0],
            c_in: tx.shape()[1],
            h: tx.shape()[2],
            w: tx.shape()[3],
            c_out: tw.shape()[0],
            kh: tw.shape()[2],
            kw: tw.shape()[3],
            stride,
            pad,
        };
        let (oh, ow) = (d.out_h(), d.out_w());
        if oh == 0 || ow == 0 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: tx.shape().to_vec(),
                msg: format!("kernel {}x{} stride {stride} pad {pad} leaves no output", d.kh, d.kw),
            });
        }
        let y = kernels::conv2d_forward(tx.data(), tw.data(), &d);
        let t = Tensor::new(vec![d.batch, d.c_out, oh, ow], y)?;
        let ng = self.needs(&[x, w]);
        self.push("conv2d", t, ng, Op::Conv2d { x, w, stride, pad })
    }

    /// Fused `relu(conv2d(x, w) + bias)`: one pass over the output instead
    /// of three, with the composed backward rule. Numerically identical to
    /// the unfused chain.
    pub fn conv_block(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let ok = tx.shape().len() == 4
            && tw.shape().len() == 4
            && tb.shape().len() == 1
            && tx.shape()[1] == tw.shape()[1]
            && tb.shape()[0] == tw.shape()[0]
            && stride > 0;
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "conv_block",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let d = ConvDims {
            batch: tx.shape()[0],
            c_in: tx.shape()[1],
            h: tx.shape()[2],
            w: tx.shape()[3],
            c_out: tw.shape()[0],
            kh: tw.shape()[2],
            kw: tw.shape()[3],
            stride,
            pad,
        };
        let (oh, ow) = (d.out_h(), d.out_w());
        if oh == 0 || ow == 0 {
            return Err(Error::InvalidShape {
                op: "conv_block",
                shape: tx.shape().to_vec(),
                msg: format!("kernel {}x{} stride {stride} pad {pad} leaves no output", d.kh, d.kw),
            });
        }
        let mut y = kernels::conv2d_forward(tx.data(), tw.data(), &d);
        let spatial = oh * ow;
        let bias = tb.data();
        let row = d.c_out * spatial;
        let apply = |chunk: &mut [f64]| {
            for (ci, plane) in chunk.chunks_mut(spatial).enumerate() {
                let bv = bias[ci];
                for v in plane {
                    *v = (*v + bv).max(0.0);
                }
            }
        };
        if y.len() >= PAR_ELEMWISE {
            y.par_chunks_mut(row).for_each(apply);
        } else {
            y.chunks_mut(row).for_each(apply);
        }
        let t = Tensor::new(vec![d.batch, d.c_out, oh, ow], y)?;
        let ng = self.needs(&[x, w, b]);
        self.push("conv_block", t, ng, Op::ConvBlock { x, w, b, stride, pad })
    }

    /// Adds a bias vector along the channel axis: `[B,C,H,W]+[C]` or `[B,F]+[F]`.
    pub fn bias_add(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let (tx, tb) = (self.value(x), self.value(b));
        let ok = tb.shape().len() == 1
            && match tx.shape().len() {
                2 => tx.shape()[1] == tb.shape()[0],
                4 => tx.shape()[1] == tb.shape()[0],
                _ => false,
            };
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "bias_add",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let spatial: usize = tx.shape()[2..].iter().product();
        let c = tb.shape()[0];
        let bias = tb.data();
        let mut out = vec![0.0; tx.numel()];
        let fill = |(chunk, src): (&mut [f64], &[f64])| {
            for (ci, (plane, sp)) in chunk.chunks_mut(spatial).zip(src.chunks(spatial)).enumerate() {
                let bv = bias[ci];
                for (v, &s) in plane.iter_mut().zip(sp) {
                    *v = s + bv;
                }
            }
        };
        let row = c * spatial;
        if out.len() >= PAR_ELEMWISE {
            out.par_chunks_mut(row).zip(tx.data().par_chunks(row)).for_each(fill);
        } else {
            out.chunks_mut(row).zip(tx.data().chunks(row)).for_each(fill);
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.needs(&[x, b]);
        self.push("bias_add", t, ng, Op::BiasAdd { x, b })
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64 + Sync,
        op: Op,
    ) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = if ta.numel() >= PAR_ELEMWISE {
            ta.data()
                .par_iter()
                .zip(tb.data().par_iter())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        };
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(&[a, b]);
        self.push(name, t, ng, op)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Multiplication by a compile-time-known scalar constant.
    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v * c).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.needs(&[x]);
        self.push("scale", t, ng, Op::Scale { x, c })
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: TensorId,
        f: impl Fn(f64) -> f64 + Sync,
        op: Op,
    ) -> Result<TensorId> {
        let tx = self.value(x);
        let data = if tx.numel() >= PAR_ELEMWISE {
            tx.data().par_iter().map(|&v| f(v)).collect()
        } else {
            tx.data().iter().map(|&v| f(v)).collect()
        };
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.needs(&[x]);
        self.push(name, t, ng, op)
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary("sigmoid", x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid { x })
    }

    pub fn exp(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary("exp", x, f64::exp, Op::Exp { x })
    }

    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary("log", x, f64::ln, Op::Log { x })
    }

    fn softmax_forward(data: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
        let (outer, lane, inner) = lanes(shape, axis);
        let mut out = vec![0.0; data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * lane + j) * inner + i;
                let max = (0..lane).map(|j| data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for j in 0..lane {
                    denom += (data[at(j)] - max).exp();
                }
                if log {
                    let lse = max + denom.ln();
                    for j in 0..lane {
                        out[at(j)] = data[at(j)] - lse;
                    }
                } else {
                    for j in 0..lane {
                        out[at(j)] = (data[at(j)] - max).exp() / denom;
                    }
                }
            }
        }
        out
    }

    /// Softmax along `axis`; each slice sums to 1.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let tx = self.value(x);
        if axis >= tx.shape().len() {
            return Err(Error::InvalidShape {
                op: "softmax",
                shape: tx.shape().to_vec(),
                msg: format!("axis {axis} out of range"),
            });
        }
        let out = Self::softmax_forward(tx.data(), tx.shape(), axis, false);
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.needs(&[x]);
        self.push("softmax", t, ng, Op::Softmax { x, axis })
    }

    /// Numerically stable `log(softmax(x))` along `axis`.
    pub fn log_softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let tx = self.value(x);
        if axis >= tx.shape().len() {
            return Err(Error::InvalidShape {
                op: "log_softmax",
                shape: tx.shape().to_vec(),
                msg: format!("axis {axis} out of range"),
            });
        }
        let out = Self::softmax_forward(tx.data(), tx.shape(), axis, true);
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.needs(&[x]);
        self.push("log_softmax", t, ng, Op::LogSoftmax { x, axis })
    }

    fn pool_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
        match shape.len() {
            3 => Some((1, shape[0], shape[1] * shape[2])),
            4 => Some((shape[0], shape[1], shape[2] * shape[3])),
            _ => None,
        }
    }

    /// Mean over the two trailing spatial axes: `[C,H,W]->[C]`, `[B,C,H,W]->[B,C]`.
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let tx = self.value(x);
        let Some((b, c, sp)) = Self::pool_dims(tx.shape()) else {
            return Err(Error::InvalidShape {
                op: "global_avg_pool",
                shape: tx.shape().to_vec(),
                msg: "expected rank 3 or 4".into(),
            });
        };
        let mut out = vec![0.0; b * c];
        for (slot, plane) in out.iter_mut().zip(tx.data().chunks(sp)) {
            *slot = plane.iter().sum::<f64>() / sp as f64;
        }
        let shape = if tx.shape().len() == 3 { vec![c] } else { vec![b, c] };
        let t = Tensor::new(shape, out)?;
        let ng = self.needs(&[x]);
        self.push("global_avg_pool", t, ng, Op::GlobalAvgPool { x })
    }

    /// Max over the two trailing spatial axes.
    pub fn global_max_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let tx = self.value(x);
        let Some((b, c, sp)) = Self::pool_dims(tx.shape()) else {
            return Err(Error::InvalidShape {
                op: "global_max_pool",
                shape: tx.shape().to_vec(),
                msg: "expected rank 3 or 4".into(),
            });
        };
        let mut out = vec![0.0; b * c];
        let mut argmax = vec![0usize; b * c];
        for (slot, (plane_idx, plane)) in out.iter_mut().zip(tx.data().chunks(sp).enumerate()) {
            let (mut best, mut best_at) = (f64::NEG_INFINITY, 0);
            for (i, &v) in plane.iter().enumerate() {
                if v > best {
                    best = v;
                    best_at = i;
                }
            }
            *slot = best;
            argmax[plane_idx] = plane_idx * sp + best_at;
        }
        let shape = if tx.shape().len() == 3 { vec![c] } else { vec![b, c] };
        let t = Tensor::new(shape, out)?;
        let ng = self.needs(&[x]);
        self.push("global_max_pool", t, ng, Op::GlobalMaxPool { x, argmax })
    }

    /// Mean over the channel axis: `[C,H,W]->[H,W]`, `[K,C,H,W]->[K,H,W]`.
    pub fn channel_mean(&mut self, x: TensorId) -> Result<TensorId> {
        let tx = self.value(x);
        let (k, c, sp, shape) = match tx.shape() {
            [c, h, w] => (1, *c, h * w, vec![*h, *w]),
            [k, c, h, w] => (*k, *c, h * w, vec![*k, *h, *w]),
            other => {
                return Err(Error::InvalidShape {
                    op: "channel_mean",
                    shape: other.to_vec(),
                    msg: "expected rank 3 or 4".into(),
                })
            }
        };
        let mut out = vec![0.0; k * sp];
        for ki in 0..k {
            let block = &tx.data()[ki * c * sp..(ki + 1) * c * sp];
            let dst = &mut out[ki * sp..(ki + 1) * sp];
            for plane in block.chunks(sp) {
                for (d, &v) in dst.iter_mut().zip(plane) {
                    *d += v;
                }
            }
            for d in dst {
                *d /= c as f64;
            }
        }
        let t = Tensor::new(shape, out)?;
        let ng = self.needs(&[x]);
        self.push("channel_mean", t, ng, Op::ChannelMean { x })
    }

    /// Concatenation along `axis`. All other extents must match.
    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::InvalidShape {
                op: "concat",
                shape: vec![],
                msg: "no inputs".into(),
            });
        }
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidShape {
                op: "concat",
                shape: first,
                msg: format!("axis {axis} out of range"),
            });
        }
        let mut axis_total = 0;
        for &id in inputs {
            let s = self.value(id).shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let (outer, _, inner) = lanes(&shape, axis);
        let mut out = vec![0.0; shape.iter().product()];
        let row = axis_total * inner;
        let mut offset = 0;
        for &id in inputs {
            let s = self.value(id).shape();
            let block = s[axis] * inner;
            let data = self.value(id).data();
            for o in 0..outer {
                out[o * row + offset..o * row + offset + block]
                    .copy_from_slice(&data[o * block..(o + 1) * block]);
            }
            offset += block;
        }
        let t = Tensor::new(shape, out)?;
        let ng = self.needs(inputs);
        self.push("concat", t, ng, Op::Concat { inputs: inputs.to_vec(), axis })
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let tx = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != tx.numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                msg: format!("cannot reshape {} elements", tx.numel()),
            });
        }
        let t = Tensor::new(shape.to_vec(), tx.data().to_vec())?;
        let ng = self.needs(&[x]);
        self.push("reshape", t, ng, Op::Reshape { x })
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let tx = self.value(x);
        let [m, n] = tx.shape() else {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: tx.shape().to_vec(),
                msg: "expected rank 2".into(),
            });
        };
        let (m, n) = (*m, *n);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = tx.data()[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        let ng = self.needs(&[x]);
        self.push("transpose", t, ng, Op::Transpose { x })
    }

    /// Picks one subtensor along axis 0. Rank-1 input yields shape `[1]`.
    pub fn select(&mut self, x: TensorId, index: usize) -> Result<TensorId> {
        let tx = self.value(x);
        if tx.shape().is_empty() || index >= tx.shape()[0] {
            return Err(Error::InvalidShape {
                op: "select",
                shape: tx.shape().to_vec(),
                msg: format!("index {index} out of range"),
            });
        }
        let block: usize = tx.shape()[1..].iter().product();
        let shape = if tx.shape().len() == 1 {
            vec![1]
        } else {
            tx.shape()[1..].to_vec()
        };
        let data = tx.data()[index * block..(index + 1) * block].to_vec();
        let t = Tensor::new(shape, data)?;
        let ng = self.needs(&[x]);
        self.push("select", t, ng, Op::Select { x, index })
    }

    /// Cosine similarity of two vectors; rejects norms below 1e-12 instead
    /// of silently returning 0.
    pub fn cosine_sim(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 1 || ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "cosine_sim",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let na = ta.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = tb.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if na < 1e-12 || nb < 1e-12 {
            return Err(Error::ZeroNorm {
                what: "cosine_sim operand".into(),
            });
        }
        let dot: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        let t = Tensor::scalar(dot / (na * nb));
        let ng = self.needs(&[a, b]);
        self.push("cosine_sim", t, ng, Op::CosineSim { a, b })
    }

    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let tx = self.value(x);
        let t = Tensor::scalar(tx.data().iter().sum());
        let ng = self.needs(&[x]);
        self.push("sum", t, ng, Op::Sum { x })
    }

    pub fn mean(&mut self, x: TensorId) -> Result<TensorId> {
        let tx = self.value(x);
        let t = Tensor::scalar(tx.data().iter().sum::<f64>() / tx.numel() as f64);
        let ng = self.needs(&[x]);
        self.push("mean", t, ng, Op::Mean { x })
    }

    /// Per-mask channel-wise filtering: f `[C,H,W]`, m `[K,H,W]` → `[K,C,H,W]`
    /// with `out[k,c,s] = f[c,s] * m[k,s]`.
    pub fn mask_filter(&mut self, f: TensorId, m: TensorId) -> Result<TensorId> {
        let (tf, tm) = (self.value(f), self.value(m));
        let ok = tf.shape().len() == 3
            && tm.shape().len() == 3
            && tf.shape()[1..] == tm.shape()[1..];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "mask_filter",
                lhs: tf.shape().to_vec(),
                rhs: tm.shape().to_vec(),
            });
        }
        let (c, h, w) = (tf.shape()[0], tf.shape()[1], tf.shape()[2]);
        let k = tm.shape()[0];
        let sp = h * w;
        let mut out = vec![0.0; k * c * sp];
        for ki in 0..k {
            let mask = &tm.data()[ki * sp..(ki + 1) * sp];
            for ci in 0..c {
                let plane = &tf.data()[ci * sp..(ci + 1) * sp];
                let dst = &mut out[(ki * c + ci) * sp..(ki * c + ci + 1) * sp];
                for ((d, &fv), &mv) in dst.iter_mut().zip(plane).zip(mask) {
                    *d = fv * mv;
                }
            }
        }
        let t = Tensor::new(vec![k, c, h, w], out)?;
        let ng = self.needs(&[f, m]);
        self.push("mask_filter", t, ng, Op::MaskFilter { f, m })
    }

    /// Mean negative log-likelihood: logp `[B,N]`, one label per row.
    pub fn nll_mean(&mut self, logp: TensorId, labels: &[usize]) -> Result<TensorId> {
        let tl = self.value(logp);
        let [b, n] = tl.shape() else {
            return Err(Error::InvalidShape {
                op: "nll_mean",
                shape: tl.shape().to_vec(),
                msg: "expected rank 2".into(),
            });
        };
        let (b, n) = (*b, *n);
        if labels.len() != b || labels.iter().any(|&l| l >= n) {
            return Err(Error::InvalidShape {
                op: "nll_mean",
                shape: tl.shape().to_vec(),
                msg: format!("bad labels (len {}, classes {n})", labels.len()),
            });
        }
        let total: f64 = labels.iter().enumerate().map(|(i, &l)| -tl.data()[i * n + l]).sum();
        let t = Tensor::scalar(total / b as f64);
        let ng = self.needs(&[logp]);
        self.push("nll_mean", t, ng, Op::NllMean { logp, labels: labels.to_vec() })
    }

    /// Zips two equal-length vectors into one row `[1,2n]` in
    /// (a₀,b₀,a₁,b₁,…) order.
    pub fn interleave_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 1 || ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "interleave_rows",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let n = ta.shape()[0];
        let mut out = Vec::with_capacity(2 * n);
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            out.push(x);
            out.push(y);
        }
        let t = Tensor::new(vec![1, 2 * n], out)?;
        let ng = self.needs(&[a, b]);
        self.push("interleave_rows", t, ng, Op::InterleaveRows { a, b })
    }

    /// Row-wise cosine similarity of two `[k,C]` matrices → `[k]`.
    /// Rejects rows with norm below 1e-12.
    pub fn row_cosine(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "row_cosine",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (k, c) = (ta.shape()[0], ta.shape()[1]);
        let mut out = Vec::with_capacity(k);
        for i in 0..k {
            let ra = &ta.data()[i * c..(i + 1) * c];
            let rb = &tb.data()[i * c..(i + 1) * c];
            let na = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na < 1e-12 || nb < 1e-12 {
                return Err(Error::ZeroNorm {
                    what: format!("row_cosine row {i}"),
                });
            }
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            out.push(dot / (na * nb));
        }
        let t = Tensor::new(vec![k], out)?;
        let ng = self.needs(&[a, b]);
        self.push("row_cosine", t, ng, Op::RowCosine { a, b })
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a scalar loss. Returns per-node gradients; nodes
    /// not on a path to the loss keep `None`.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidShape {
                op: "backward",
                shape: vec![],
                msg: "empty graph".into(),
            });
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                shape: self.value(loss).shape().to_vec(),
                msg: "loss must be scalar".into(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(mut gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.accumulate(idx, &mut gy, &mut grads);
            // Leaves keep their gradient; interior nodes release theirs.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(gy);
            }
        }

        let out = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|data| Tensor::new(self.nodes[i].value.shape().to_vec(), data).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads: out })
    }

    fn slot<'a>(
        &self,
        grads: &'a mut [Option<Vec<f64>>],
        id: TensorId,
    ) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[id.0].needs_grad {
            return None;
        }
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.numel()]))
    }

    /// Adds a fully materialized contribution, moving it in when the slot
    /// is still empty so large gradients avoid a zero-fill plus add pass.
    fn contribute(&self, grads: &mut [Option<Vec<f64>>], id: TensorId, vec: Vec<f64>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => add_into(g, &vec),
            slot @ None => *slot = Some(vec),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, idx: usize, gy: &mut [f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(ga) = self.slot(grads, *a) {
                    kernels::matmul_nt_acc(gy, tb.data(), m, n, k, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    kernels::matmul_tn_acc(ta.data(), gy, k, m, n, gb);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let d = ConvDims {
                    batch: tx.shape()[0],
                    c_in: tx.shape()[1],
                    h: tx.shape()[2],
                    w: tx.shape()[3],
                    c_out: tw.shape()[0],
                    kh: tw.shape()[2],
                    kw: tw.shape()[3],
                    stride: *stride,
                    pad: *pad,
                };
                let need_dx = self.nodes[x.0].needs_grad;
                let need_dw = self.nodes[w.0].needs_grad;
                let (dx, dw) =
                    kernels::conv2d_backward(tx.data(), tw.data(), gy, &d, need_dx, need_dw);
                if let Some(dx) = dx {
                    self.contribute(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.contribute(grads, *w, dw);
                }
            }
            Op::ConvBlock { x, w, b, stride, pad } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let d = ConvDims {
                    batch: tx.shape()[0],
                    c_in: tx.shape()[1],
                    h: tx.shape()[2],
                    w: tx.shape()[3],
                    c_out: tw.shape()[0],
                    kh: tw.shape()[2],
                    kw: tw.shape()[3],
                    stride: *stride,
                    pad: *pad,
                };
                let spatial = d.out_h() * d.out_w();
                // Gate through the relu in place: the saved output already
                // includes the activation, and this gradient buffer is not
                // used again after this arm.
                let y = node.value.data();
                let row = d.c_out * spatial;
                let gate = |(gys, ys): (&mut [f64], &[f64])| {
                    for (g, &v) in gys.iter_mut().zip(ys) {
                        if v <= 0.0 {
                            *g = 0.0;
                        }
                    }
                };
                if gy.len() >= PAR_ELEMWISE {
                    gy.par_chunks_mut(row).zip(y.par_chunks(row)).for_each(gate);
                } else {
                    gy.chunks_mut(row).zip(y.chunks(row)).for_each(gate);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for chunk in gy.chunks(row) {
                        for (ci, plane) in chunk.chunks(spatial).enumerate() {
                            gb[ci] += plane.iter().sum::<f64>();
                        }
                    }
                }
                let need_dx = self.nodes[x.0].needs_grad;
                let need_dw = self.nodes[w.0].needs_grad;
                let (dx, dw) =
                    kernels::conv2d_backward(tx.data(), tw.data(), gy, &d, need_dx, need_dw);
                if let Some(dx) = dx {
                    self.contribute(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.contribute(grads, *w, dw);
                }
            }
            Op::BiasAdd { x, b } => {
                let spatial: usize = self.value(*x).shape()[2..].iter().product();
                let c = self.value(*b).shape()[0];
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, gy);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for chunk in gy.chunks(c * spatial) {
                        for (ci, plane) in chunk.chunks(spatial).enumerate() {
                            gb[ci] += plane.iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    if let Some(g) = self.slot(grads, *id) {
                        add_into(g, gy);
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(g) = self.slot(grads, *a) {
                    for (g, v) in g.iter_mut().zip(gy.iter()) {
                        *g += v;
                    }
                }
                if let Some(g) = self.slot(grads, *b) {
                    for (g, v) in g.iter_mut().zip(gy.iter()) {
                        *g -= v;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if let Some(g) = self.slot(grads, *a) {
                    add_zip_into(g, gy, db, |v, o| v * o);
                }
                if let Some(g) = self.slot(grads, *b) {
                    add_zip_into(g, gy, da, |v, o| v * o);
                }
            }
            Op::Scale { x, c } => {
                if let Some(g) = self.slot(grads, *x) {
                    for (g, v) in g.iter_mut().zip(gy.iter()) {
                        *g += v * c;
                    }
                }
            }
            Op::Relu { x } => {
                let dx = self.value(*x).data();
                if let Some(g) = self.slot(grads, *x) {
                    add_zip_into(g, gy, dx, |v, xv| if xv > 0.0 { v } else { 0.0 });
                }
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                if let Some(g) = self.slot(grads, *x) {
                    add_zip_into(g, gy, y, |v, s| v * s * (1.0 - s));
                }
            }
            Op::Exp { x } => {
                let y = node.value.data();
                if let Some(g) = self.slot(grads, *x) {
                    for ((g, v), &e) in g.iter_mut().zip(gy.iter()).zip(y) {
                        *g += v * e;
                    }
                }
            }
            Op::Log { x } => {
                let dx = self.value(*x).data();
                if let Some(g) = self.slot(grads, *x) {
                    for ((g, v), &xv) in g.iter_mut().zip(gy.iter()).zip(dx) {
                        *g += v / xv;
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let shape = node.value.shape();
                let (outer, lane, inner) = lanes(shape, *axis);
                if let Some(g) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * lane + j) * inner + i;
                            let dot: f64 = (0..lane).map(|j| gy[at(j)] * y[at(j)]).sum();
                            for j in 0..lane {
                                g[at(j)] += y[at(j)] * (gy[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                let y = node.value.data();
                let shape = node.value.shape();
                let (outer, lane, inner) = lanes(shape, *axis);
                if let Some(g) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * lane + j) * inner + i;
                            let gsum: f64 = (0..lane).map(|j| gy[at(j)]).sum();
                            for j in 0..lane {
                                g[at(j)] += gy[at(j)] - y[at(j)].exp() * gsum;
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                let sp: usize = {
                    let s = self.value(*x).shape();
                    s[s.len() - 2..].iter().product()
                };
                if let Some(g) = self.slot(grads, *x) {
                    for (plane, &gv) in g.chunks_mut(sp).zip(gy.iter()) {
                        let share = gv / sp as f64;
                        for p in plane {
                            *p += share;
                        }
                    }
                }
            }
            Op::GlobalMaxPool { x, argmax } => {
                if let Some(g) = self.slot(grads, *x) {
                    for (&at, &gv) in argmax.iter().zip(gy.iter()) {
                        g[at] += gv;
                    }
                }
            }
            Op::ChannelMean { x } => {
                let s = self.value(*x).shape();
                let (k, c, sp) = match s.len() {
                    3 => (1, s[0], s[1] * s[2]),
                    _ => (s[0], s[1], s[2] * s[3]),
                };
                if let Some(g) = self.slot(grads, *x) {
                    for ki in 0..k {
                        let src = &gy[ki * sp..(ki + 1) * sp];
                        for ci in 0..c {
                            let dst = &mut g[(ki * c + ci) * sp..(ki * c + ci + 1) * sp];
                            for (d, &v) in dst.iter_mut().zip(src) {
                                *d += v / c as f64;
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, _, inner) = lanes(shape, *axis);
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &id in inputs {
                    let block = self.value(id).shape()[*axis] * inner;
                    if let Some(g) = self.slot(grads, id) {
                        for o in 0..outer {
                            for (d, &v) in g[o * block..(o + 1) * block]
                                .iter_mut()
                                .zip(&gy[o * row + offset..o * row + offset + block])
                            {
                                *d += v;
                            }
                        }
                    }
                    offset += block;
                }
            }
            Op::Reshape { x } => {
                if let Some(g) = self.slot(grads, *x) {
                    add_into(g, gy);
                }
            }
            Op::Transpose { x } => {
                let [n, m] = node.value.shape() else { unreachable!() };
                let (n, m) = (*n, *m);
                if let Some(g) = self.slot(grads, *x) {
                    for j in 0..n {
                        for i in 0..m {
                            g[i * n + j] += gy[j * m + i];
                        }
                    }
                }
            }
            Op::Select { x, index } => {
                let block: usize = self.value(*x).shape()[1..].iter().product();
                let block = block.max(1);
                if let Some(g) = self.slot(grads, *x) {
                    for (d, &v) in g[index * block..(index + 1) * block].iter_mut().zip(gy.iter()) {
                        *d += v;
                    }
                }
            }
            Op::CosineSim { a, b } => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let na = ta.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = tb.iter().map(|v| v * v).sum::<f64>().sqrt();
                let cos = node.value.item();
                let g0 = gy[0];
                if let Some(g) = self.slot(grads, *a) {
                    for ((g, &av), &bv) in g.iter_mut().zip(ta).zip(tb) {
                        *g += g0 * (bv / (na * nb) - cos * av / (na * na));
                    }
                }
                if let Some(g) = self.slot(grads, *b) {
                    for ((g, &bv), &av) in g.iter_mut().zip(tb).zip(ta) {
                        *g += g0 * (av / (na * nb) - cos * bv / (nb * nb));
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(g) = self.slot(grads, *x) {
                    for g in g.iter_mut() {
                        *g += gy[0];
                    }
                }
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel() as f64;
                if let Some(g) = self.slot(grads, *x) {
                    for g in g.iter_mut() {
                        *g += gy[0] / n;
                    }
                }
            }
            Op::MaskFilter { f, m } => {
                let (tf, tm) = (self.value(*f), self.value(*m));
                let (c, sp) = (tf.shape()[0], tf.shape()[1] * tf.shape()[2]);
                let k = tm.shape()[0];
                if let Some(g) = self.slot(grads, *f) {
                    for ki in 0..k {
                        let mask = &tm.data()[ki * sp..(ki + 1) * sp];
                        for ci in 0..c {
                            let gyb = &gy[(ki * c + ci) * sp..(ki * c + ci + 1) * sp];
                            let dst = &mut g[ci * sp..(ci + 1) * sp];
                            for ((d, &gv), &mv) in dst.iter_mut().zip(gyb).zip(mask) {
                                *d += gv * mv;
                            }
                        }
                    }
                }
                if let Some(g) = self.slot(grads, *m) {
                    for ki in 0..k {
                        let dst = &mut g[ki * sp..(ki + 1) * sp];
                        for ci in 0..c {
                            let gyb = &gy[(ki * c + ci) * sp..(ki * c + ci + 1) * sp];
                            let plane = &tf.data()[ci * sp..(ci + 1) * sp];
                            for ((d, &gv), &fv) in dst.iter_mut().zip(gyb).zip(plane) {
                                *d += gv * fv;
                            }
                        }
                    }
                }
            }
            Op::NllMean { logp, labels } => {
                let n = self.value(*logp).shape()[1];
                let scale = gy[0] / labels.len() as f64;
                if let Some(g) = self.slot(grads, *logp) {
                    for (i, &l) in labels.iter().enumerate() {
                        g[i * n + l] -= scale;
                    }
                }
            }
            Op::InterleaveRows { a, b } => {
                let n = self.value(*a).shape()[0];
                if let Some(g) = self.slot(grads, *a) {
                    for i in 0..n {
                        g[i] += gy[2 * i];
                    }
                }
                if let Some(g) = self.slot(grads, *b) {
                    for i in 0..n {
                        g[i] += gy[2 * i + 1];
                    }
                }
            }
            Op::RowCosine { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (k, c) = (ta.shape()[0], ta.shape()[1]);
                let y = node.value.data();
                for i in 0..k {
                    let ra = &ta.data()[i * c..(i + 1) * c];
                    let rb = &tb.data()[i * c..(i + 1) * c];
                    let na = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nb = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let cos = y[i];
                    let g0 = gy[i];
                    if let Some(g) = self.slot(grads, *a) {
                        for ((g, &av), &bv) in g[i * c..(i + 1) * c].iter_mut().zip(ra).zip(rb) {
                            *g += g0 * (bv / (na * nb) - cos * av / (na * na));
                        }
                    }
                    if let Some(g) = self.slot(grads, *b) {
                        for ((g, &bv), &av) in g[i * c..(i + 1) * c].iter_mut().zip(rb).zip(ra) {
                            *g += g0 * (av / (na * nb) - cos * bv / (nb * nb));
                        }
                    }
                }
            }
        }
    }
}
