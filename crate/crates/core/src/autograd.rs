//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! A [`Graph`] is the tape: each call appends a node holding the forward
//! value plus whatever the backward kernel needs. [`Graph::backward`] walks
//! the tape in reverse and returns a gradient for every node that depends on
//! a leaf created with `requires_grad`.

use crate::error::{Error, Result};
use crate::ops::activation::{relu, sigmoid, softmax_cross_entropy};
use crate::ops::conv::{self, Conv2dSpec, Conv3dSpec};
use crate::ops::linear::{linear, linear_backward};
use crate::ops::norm::{batch_norm, batch_norm_backward, RunningStats};
use crate::ops::pool::{self, PoolMode};
use crate::tensor::Tensor;
use crate::wavelet::{dwt2_packed, idwt2_packed, WaveletFamily};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec },
    Conv3d { x: Var, w: Var, b: Option<Var>, spec: Conv3dSpec },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, stride: usize },
    Pool2d { x: Var, mode: PoolMode, argmax: Vec<usize> },
    GlobalPool { x: Var, mode: PoolMode, argmax: Vec<usize> },
    ChannelPool { x: Var, mode: PoolMode, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64>, training: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    ScaleChannels { x: Var, g: Var },
    ScaleSpatial { x: Var, g: Var },
    Concat { parts: Vec<Var> },
    Slice { x: Var, start: usize },
    Reshape(Var),
    Dwt2 { x: Var, family: WaveletFamily },
    Idwt2 { ll: Var, high: Var, family: WaveletFamily },
    Binarize { w: Var },
    CrossEntropy { logits: Var, grad: Tensor },
    SumSquares { parts: Vec<Var>, coeff: f64 },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    label: &'static str,
}

/// The tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` where nothing flowed.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

fn channel_layout(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    if t.rank() < 2 {
        return Err(Error::dim(op, "rank", 4, t.rank()));
    }
    Ok((t.dim(0), t.dim(1), t.shape()[2..].iter().product()))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, label: &'static str) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            label,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, "constant")
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, "leaf");
        self.nodes[v.0].requires_grad = true;
        v
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Relu(x) | Op::Sigmoid(x) | Op::Reshape(x) | Op::Sum(x) => vec![*x],
            Op::Conv2d { x, w, b, .. }
            | Op::Conv3d { x, w, b, .. }
            | Op::ConvTranspose2d { x, w, b, .. }
            | Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Pool2d { x, .. } | Op::GlobalPool { x, .. } | Op::ChannelPool { x, .. } => vec![*x],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ScaleChannels { x, g } | Op::ScaleSpatial { x, g } => vec![*x, *g],
            Op::Concat { parts } | Op::SumSquares { parts, .. } => parts.clone(),
            Op::Slice { x, .. } | Op::Dwt2 { x, .. } => vec![*x],
            Op::Idwt2 { ll, high, .. } => vec![*ll, *high],
            Op::Binarize { w } => vec![*w],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), "add"))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b), "mul"))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).scale(s);
        self.push(v, Op::Scale(x, s), "scale")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = relu(self.value(x));
        self.push(v, Op::Relu(x), "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = sigmoid(self.value(x));
        self.push(v, Op::Sigmoid(x), "sigmoid")
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let v = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), &spec)?;
        Ok(self.push(v, Op::Conv2d { x, w, b, spec }, "conv2d"))
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv3dSpec) -> Result<Var> {
        let v = conv::conv3d(self.value(x), self.value(w), b.map(|b| self.value(b)), &spec)?;
        Ok(self.push(v, Op::Conv3d { x, w, b, spec }, "conv3d"))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let v = conv::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride)?;
        Ok(self.push(v, Op::ConvTranspose2d { x, w, b, stride }, "conv_transpose2d"))
    }

    pub fn pool2d(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let p = pool::pool2d(self.value(x), mode)?;
        Ok(self.push(p.value, Op::Pool2d { x, mode, argmax: p.argmax }, "pool2d"))
    }

    pub fn global_pool(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let p = pool::global_pool(self.value(x), mode)?;
        Ok(self.push(p.value, Op::GlobalPool { x, mode, argmax: p.argmax }, "global_pool"))
    }

    pub fn channel_pool(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let p = pool::channel_pool(self.value(x), mode)?;
        Ok(self.push(p.value, Op::ChannelPool { x, mode, argmax: p.argmax }, "channel_pool"))
    }

    /// Returns the output and, in training mode, the updated running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats,
        training: bool,
    ) -> Result<(Var, Option<RunningStats>)> {
        let out = batch_norm(self.value(x), self.value(gamma), self.value(beta), running, training)?;
        let v = self.push(
            out.y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: out.xhat,
                inv_std: out.inv_std,
                training,
            },
            "batch_norm",
        );
        Ok((v, out.updated))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let v = linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(v, Op::Linear { x, w, b }, "linear"))
    }

    /// `x: [N,C,...] ⊗ g: [N,C]`, gate broadcast over trailing axes.
    pub fn scale_channels(&mut self, x: Var, g: Var) -> Result<Var> {
        let (n, c, inner) = channel_layout("scale_channels", self.value(x))?;
        let gv = self.value(g);
        if gv.shape() != [n, c] {
            return Err(Error::Shape {
                op: "scale_channels",
                lhs: vec![n, c],
                rhs: gv.shape().to_vec(),
            });
        }
        let xv = self.value(x);
        let v = Tensor::from_fn(xv.shape(), |i| xv.data()[i] * gv.data()[i / inner]);
        Ok(self.push(v, Op::ScaleChannels { x, g }, "scale_channels"))
    }

    /// `x: [N,C,H,W] ⊗ g: [N,1,H,W]`, gate broadcast over channels.
    pub fn scale_spatial(&mut self, x: Var, g: Var) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_rank("scale_spatial", 4)?;
        let [n, c, h, w] = [xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3)];
        let gv = self.value(g);
        if gv.shape() != [n, 1, h, w] {
            return Err(Error::Shape {
                op: "scale_spatial",
                lhs: vec![n, 1, h, w],
                rhs: gv.shape().to_vec(),
            });
        }
        let plane = h * w;
        let v = Tensor::from_fn(xv.shape(), |i| {
            xv.data()[i] * gv.data()[(i / (c * plane)) * plane + i % plane]
        });
        Ok(self.push(v, Op::ScaleSpatial { x, g }, "scale_spatial"))
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let (n, _, inner) = channel_layout("concat", first)?;
        let tail = first.shape()[2..].to_vec();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != first.rank() || t.dim(0) != n || t.shape()[2..] != tail[..] {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            total += t.dim(1);
        }
        let mut data = Vec::with_capacity(n * total * inner);
        for bi in 0..n {
            for &p in parts {
                let t = self.value(p);
                let c = t.dim(1);
                data.extend_from_slice(&t.data()[bi * c * inner..][..c * inner]);
            }
        }
        let mut shape = vec![n, total];
        shape.extend(tail);
        let v = Tensor::new(&shape, data)?;
        Ok(self.push(v, Op::Concat { parts: parts.to_vec() }, "concat"))
    }

    /// Channels `start..start + len` along axis 1.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, inner) = channel_layout("slice_channels", xv)?;
        if start + len > c || len == 0 {
            return Err(Error::precondition(
                "slice_channels",
                format!("range {start}..{} outside {c} channels", start + len),
            ));
        }
        let mut data = Vec::with_capacity(n * len * inner);
        for bi in 0..n {
            data.extend_from_slice(&xv.data()[(bi * c + start) * inner..][..len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[1] = len;
        let v = Tensor::new(&shape, data)?;
        Ok(self.push(v, Op::Slice { x, start }, "slice_channels"))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), "reshape"))
    }

    /// One wavelet level in the packed `[N, 4C, H/2, W/2]` layout of
    /// [`dwt2_packed`].
    pub fn dwt2(&mut self, x: Var, family: WaveletFamily) -> Result<Var> {
        let v = dwt2_packed(self.value(x), family)?;
        Ok(self.push(v, Op::Dwt2 { x, family }, "dwt2"))
    }

    pub fn idwt2(&mut self, ll: Var, high: Var, family: WaveletFamily) -> Result<Var> {
        let v = idwt2_packed(self.value(ll), self.value(high), family)?;
        Ok(self.push(v, Op::Idwt2 { ll, high, family }, "idwt2"))
    }

    /// Effective binary weights `α_c · sign(W)`; backward is the clipped
    /// straight-through estimator.
    pub fn binarize(&mut self, w: Var) -> Var {
        let (signs, alpha) = crate::wtbc::binarize(self.value(w));
        let per = signs.len() / alpha.len();
        let v = Tensor::from_fn(signs.shape(), |i| alpha[i / per] * signs.data()[i]);
        self.push(v, Op::Binarize { w }, "binarize")
    }

    /// Scalar mean cross-entropy over non-ignored pixels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let (loss, grad) = softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, grad }, "cross_entropy"))
    }

    /// `coeff · Σ ‖part‖²` as a scalar.
    pub fn sum_squares(&mut self, parts: &[Var], coeff: f64) -> Var {
        let mut acc = 0.0;
        for &p in parts {
            acc += self.value(p).sq_norm();
        }
        self.push(
            Tensor::scalar(coeff * acc),
            Op::SumSquares {
                parts: parts.to_vec(),
                coeff,
            },
            "sum_squares",
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    /// Label of the first node whose value is not finite.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.label))
    }

    /// Backpropagates from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::precondition(
                "backward",
                format!("root must be scalar, has shape {:?}", self.value(root).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let contributions = self.node_backward(node, &gout)?;
            grads[idx] = Some(gout);
            for (parent, g) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, node: &Node, gout: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, gout.clone()));
                out.push((*b, gout.clone()));
            }
            Op::Mul(a, b) => {
                out.push((*a, gout.mul(val(*b))?));
                out.push((*b, gout.mul(val(*a))?));
            }
            Op::Scale(x, s) => out.push((*x, gout.scale(*s))),
            Op::Relu(x) => {
                out.push((*x, gout.zip_map(val(*x), |g, v| if v > 0.0 { g } else { 0.0 })?));
            }
            Op::Sigmoid(x) => {
                out.push((*x, gout.zip_map(&node.value, |g, s| g * s * (1.0 - s))?));
            }
            Op::Conv2d { x, w, b, spec } => {
                let gr = conv::conv2d_backward(val(*x), val(*w), gout, spec, self.needs(*x), self.needs(*w))?;
                push_conv_grads(&mut out, *x, *w, *b, gr);
            }
            Op::Conv3d { x, w, b, spec } => {
                let gr = conv::conv3d_backward(val(*x), val(*w), gout, spec, self.needs(*x), self.needs(*w))?;
                push_conv_grads(&mut out, *x, *w, *b, gr);
            }
            Op::ConvTranspose2d { x, w, b, stride } => {
                let gr = conv::conv_transpose2d_backward(
                    val(*x),
                    val(*w),
                    gout,
                    *stride,
                    self.needs(*x),
                    self.needs(*w),
                )?;
                push_conv_grads(&mut out, *x, *w, *b, gr);
            }
            Op::Pool2d { x, mode, argmax } => {
                out.push((*x, pool::pool2d_backward(val(*x).shape(), gout, *mode, argmax)));
            }
            Op::GlobalPool { x, mode, argmax } => {
                out.push((*x, pool::global_pool_backward(val(*x).shape(), gout, *mode, argmax)));
            }
            Op::ChannelPool { x, mode, argmax } => {
                out.push((*x, pool::channel_pool_backward(val(*x).shape(), gout, *mode, argmax)));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let (dx, dg, db) = batch_norm_backward(gout, xhat, inv_std, val(*gamma), *training);
                out.push((*x, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = linear_backward(val(*x), val(*w), gout);
                out.push((*x, dx));
                out.push((*w, dw));
                if let Some(b) = b {
                    out.push((*b, db));
                }
            }
            Op::ScaleChannels { x, g } => {
                let xv = val(*x);
                let gv = val(*g);
                let inner = xv.len() / gv.len();
                let dx = Tensor::from_fn(xv.shape(), |i| gout.data()[i] * gv.data()[i / inner]);
                let mut dg = Tensor::zeros(gv.shape());
                for (i, (&go, &xi)) in gout.data().iter().zip(xv.data()).enumerate() {
                    dg.data_mut()[i / inner] += go * xi;
                }
                out.push((*x, dx));
                out.push((*g, dg));
            }
            Op::ScaleSpatial { x, g } => {
                let xv = val(*x);
                let gv = val(*g);
                let (c, plane) = (xv.dim(1), xv.dim(2) * xv.dim(3));
                let gidx = |i: usize| (i / (c * plane)) * plane + i % plane;
                let dx = Tensor::from_fn(xv.shape(), |i| gout.data()[i] * gv.data()[gidx(i)]);
                let mut dg = Tensor::zeros(gv.shape());
                for (i, (&go, &xi)) in gout.data().iter().zip(xv.data()).enumerate() {
                    dg.data_mut()[gidx(i)] += go * xi;
                }
                out.push((*x, dx));
                out.push((*g, dg));
            }
            Op::Concat { parts } => {
                let n = gout.dim(0);
                let total = gout.dim(1);
                let inner = gout.len() / (n * total);
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let c = pv.dim(1);
                    let mut d = Vec::with_capacity(pv.len());
                    for bi in 0..n {
                        d.extend_from_slice(&gout.data()[(bi * total + offset) * inner..][..c * inner]);
                    }
                    offset += c;
                    out.push((p, Tensor::new(pv.shape(), d)?));
                }
            }
            Op::Slice { x, start } => {
                let xv = val(*x);
                let (n, c, inner) = channel_layout("slice_channels", xv)?;
                let len = gout.dim(1);
                let mut dx = Tensor::zeros(xv.shape());
                for bi in 0..n {
                    dx.data_mut()[(bi * c + start) * inner..][..len * inner]
                        .copy_from_slice(&gout.data()[bi * len * inner..][..len * inner]);
                }
                out.push((*x, dx));
            }
            Op::Reshape(x) => out.push((*x, gout.clone().reshape(val(*x).shape())?)),
            Op::Dwt2 { x, family } => {
                // Orthogonal analysis: the adjoint is the synthesis operator.
                let c4 = gout.dim(1);
                let c = c4 / 4;
                let n = gout.dim(0);
                let inner = gout.dim(2) * gout.dim(3);
                let mut ll = Vec::with_capacity(n * c * inner);
                let mut hi = Vec::with_capacity(n * 3 * c * inner);
                for bi in 0..n {
                    let base = bi * c4 * inner;
                    ll.extend_from_slice(&gout.data()[base..][..c * inner]);
                    hi.extend_from_slice(&gout.data()[base + c * inner..][..3 * c * inner]);
                }
                let ll = Tensor::new(&[n, c, gout.dim(2), gout.dim(3)], ll)?;
                let hi = Tensor::new(&[n, 3 * c, gout.dim(2), gout.dim(3)], hi)?;
                out.push((*x, idwt2_packed(&ll, &hi, *family)?));
            }
            Op::Idwt2 { ll, high, family } => {
                let packed = dwt2_packed(gout, *family)?;
                let n = packed.dim(0);
                let c = val(*ll).dim(1);
                let inner = packed.dim(2) * packed.dim(3);
                let mut dl = Vec::with_capacity(n * c * inner);
                let mut dh = Vec::with_capacity(n * 3 * c * inner);
                for bi in 0..n {
                    let base = bi * 4 * c * inner;
                    dl.extend_from_slice(&packed.data()[base..][..c * inner]);
                    dh.extend_from_slice(&packed.data()[base + c * inner..][..3 * c * inner]);
                }
                out.push((*ll, Tensor::new(val(*ll).shape(), dl)?));
                out.push((*high, Tensor::new(val(*high).shape(), dh)?));
            }
            Op::Binarize { w } => {
                out.push((*w, gout.zip_map(val(*w), |g, wv| if wv.abs() <= 1.0 { g } else { 0.0 })?));
            }
            Op::CrossEntropy { logits, grad } => {
                out.push((*logits, grad.scale(gout.item())));
            }
            Op::SumSquares { parts, coeff } => {
                let s = 2.0 * coeff * gout.item();
                for &p in parts {
                    out.push((p, val(p).scale(s)));
                }
            }
            Op::Sum(x) => out.push((*x, Tensor::full(val(*x).shape(), gout.item()))),
        }
        Ok(out)
    }
}

fn push_conv_grads(out: &mut Vec<(Var, Tensor)>, x: Var, w: Var, b: Option<Var>, gr: conv::ConvGrads) {
    if let Some(dx) = gr.dx {
        out.push((x, dx));
    }
    if let Some(dw) = gr.dw {
        out.push((w, dw));
    }
    if let Some(b) = b {
        out.push((b, gr.db));
    }
}

/// Central finite differences against the tape gradient of a scalar closure.
/// Returns `max_i |a_i − n_i| / max(|a_i|, |n_i|, 1e-8)`.
pub fn grad_check<F>(f: F, input: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(input.clone());
    let y = f(&mut g, x)?;
    let grads = g.backward(y)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(input.shape()));
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(t);
        let y = f(&mut g, x)?;
        Ok(g.value(y).item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..input.len() {
        let mut plus = input.clone();
        plus.data_mut()[i] += eps;
        let mut minus = input.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}
