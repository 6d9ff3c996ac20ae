use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{NdError, Result};
use crate::kernels::{self, CellRegion, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Gather {
        input: Var,
        index: Vec<usize>,
    },
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Softmax {
        input: Var,
        tau: f64,
    },
    LogSoftmax {
        input: Var,
        tau: f64,
    },
    SmoothL1(Var),
    L2Norm(Var),
}

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Reverse-mode differentiation tape.
///
/// Nodes are appended in creation order, which is always a topological
/// order, so backward is a single reverse sweep. A graph is meant to live
/// for one forward/backward pass and then be dropped.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(NdError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn last_axis(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape().last() {
        Some(&cols) => Ok((t.len() / cols, cols)),
        None => Err(NdError::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            reason: "expected at least one axis".into(),
        }),
    }
}

fn check_tau(op: &'static str, tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(NdError::InvalidArgument {
            op,
            reason: format!("temperature must be positive and finite, got {tau}"),
        })
    }
}

/// Row-wise softmax of `x / tau` over the last axis, max-subtracted.
pub fn softmax_rows(x: &[f64], cols: usize, tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = ((s - max) / tau).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

fn log_softmax_rows(x: &[f64], cols: usize, tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = src.iter().map(|&s| ((s - max) / tau).exp()).sum::<f64>().ln();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max) / tau - lse;
        }
    }
    out
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op,
        });
        Var(nodes.len() - 1)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op: Op::Leaf,
        });
        Var(nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn elementwise(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(op, &va, &vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, mk(a, b), &[a, b]))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Adds a vector to every row of `x`; `b` must match the last axis.
    pub fn add_bias(&self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        let (_, cols) = last_axis("add_bias", &vx)?;
        if vb.len() != cols || vb.rank() != 1 {
            return Err(NdError::ShapeMismatch {
                op: "add_bias",
                lhs: vx.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb.data()[i % cols])
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBias(x, b), &[x, b]))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(NdError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut c = vec![0.0; m * n];
        kernels::gemm(m, k, n, va.data(), false, vb.data(), false, 0.0, &mut c);
        Ok(self.push(Tensor::new(vec![m, n], c)?, Op::MatMul(a, b), &[a, b]))
    }

    /// 2-D convolution (cross-correlation). `x` is C×H×W or N×C×H×W,
    /// `w` is O×C×kh×kw, optional bias has length O. Zero padding `pad` on
    /// every side.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let batched = match vx.rank() {
            3 => false,
            4 => true,
            _ => {
                return Err(NdError::InvalidShape {
                    op: "conv2d",
                    shape: vx.shape().to_vec(),
                    reason: "input must be C×H×W or N×C×H×W".into(),
                })
            }
        };
        let xs = if batched {
            vx.shape().to_vec()
        } else {
            [&[1], vx.shape()].concat()
        };
        let ws = vw.shape();
        if ws.len() != 4 || ws[1] != xs[1] {
            return Err(NdError::ShapeMismatch {
                op: "conv2d",
                lhs: vx.shape().to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if stride == 0 {
            return Err(NdError::InvalidArgument {
                op: "conv2d",
                reason: "stride must be at least 1".into(),
            });
        }
        let (ph, pw) = (xs[2] + 2 * pad, xs[3] + 2 * pad);
        if ws[2] > ph || ws[3] > pw {
            return Err(NdError::ShapeMismatch {
                op: "conv2d",
                lhs: vx.shape().to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_c: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_c: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            out_h: (ph - ws[2]) / stride + 1,
            out_w: (pw - ws[3]) / stride + 1,
        };
        let bias_val = match b {
            Some(b) => {
                let vb = self.value(b);
                if vb.shape() != [geom.out_c] {
                    return Err(NdError::ShapeMismatch {
                        op: "conv2d bias",
                        lhs: ws.to_vec(),
                        rhs: vb.shape().to_vec(),
                    });
                }
                Some(vb)
            }
            None => None,
        };
        let data = kernels::conv2d_forward(&geom, vx.data(), vw.data(), bias_val.as_ref().map(|b| b.data()));
        let shape = if batched {
            vec![geom.batch, geom.out_c, geom.out_h, geom.out_w]
        } else {
            vec![geom.out_c, geom.out_h, geom.out_w]
        };
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Conv2d {
                input: x,
                weight: w,
                bias: b,
                geom,
            },
            &parents,
        ))
    }

    /// Max pooling over the last two axes with a k×k window.
    pub fn maxpool2d(&self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() < 2 || k == 0 || stride == 0 || s[s.len() - 2] < k || s[s.len() - 1] < k {
            return Err(NdError::InvalidShape {
                op: "maxpool2d",
                shape: s.to_vec(),
                reason: format!("cannot pool with window {k} stride {stride}"),
            });
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = vx.len() / (h * w);
        let (data, index) = kernels::maxpool2d(vx.data(), planes, h, w, k, stride);
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([(h - k) / stride + 1, (w - k) / stride + 1]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Gather { input: x, index }, &[x]))
    }

    /// Max pooling of C×H×W `x` over cell regions, each split into
    /// bins×bins near-equal cells. Output is N×C×bins×bins.
    pub fn roi_max_pool(&self, x: Var, regions: &[CellRegion], bins: usize) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 3 {
            return Err(NdError::InvalidShape {
                op: "roi_max_pool",
                shape: s.to_vec(),
                reason: "feature cube must be C×H×W".into(),
            });
        }
        if regions.is_empty() || bins == 0 {
            return Err(NdError::InvalidArgument {
                op: "roi_max_pool",
                reason: "need at least one region and one bin".into(),
            });
        }
        for r in regions {
            if r.y0 >= r.y1 || r.x0 >= r.x1 || r.y1 > s[1] || r.x1 > s[2] {
                return Err(NdError::InvalidArgument {
                    op: "roi_max_pool",
                    reason: format!("region {r:?} outside feature map {s:?}"),
                });
            }
        }
        let (data, index) = kernels::roi_max_pool(vx.data(), s[0], s[1], s[2], regions, bins);
        let shape = vec![regions.len(), s[0], bins, bins];
        Ok(self.push(Tensor::new(shape, data)?, Op::Gather { input: x, index }, &[x]))
    }

    /// Picks elements of `x` by flat index: `out[i] = x[index[i]]`.
    pub fn gather(&self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= vx.len()) {
            return Err(NdError::InvalidArgument {
                op: "gather",
                reason: format!("index {bad} out of range for shape {:?}", vx.shape()),
            });
        }
        let data = index.iter().map(|&i| vx.data()[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(out, Op::Gather { input: x, index }, &[x]))
    }

    pub fn relu(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v < 0.0 { 0.0 } else { v });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn exp(&self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x), &[x])
    }

    pub fn log(&self, x: Var) -> Var {
        let out = self.value(x).map(f64::ln);
        self.push(out, Op::Log(x), &[x])
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&self, x: Var) -> Var {
        let vx = self.value(x);
        let m = vx.data().iter().sum::<f64>() / vx.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let out = vx.reshaped(shape).map_err(|_| NdError::ShapeMismatch {
            op: "reshape",
            lhs: vx.shape().to_vec(),
            rhs: shape.to_vec(),
        })?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(NdError::InvalidArgument {
                op: "slice",
                reason: format!("range {start}..{end} on axis {axis} of shape {s:?}"),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            data.extend_from_slice(&vx.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = end - start;
        Ok(self.push(Tensor::new(shape, data)?, Op::Slice { input: x, axis, start }, &[x]))
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = match xs.first() {
            Some(&v) => self.value(v),
            None => {
                return Err(NdError::InvalidArgument {
                    op: "concat",
                    reason: "no inputs".into(),
                })
            }
        };
        let s0 = first.shape().to_vec();
        if axis >= s0.len() {
            return Err(NdError::InvalidArgument {
                op: "concat",
                reason: format!("axis {axis} out of range for {s0:?}"),
            });
        }
        let values: Vec<Rc<Tensor>> = xs.iter().map(|&v| self.value(v)).collect();
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == s0.len()
                && s.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(NdError::ShapeMismatch {
                    op: "concat",
                    lhs: s0.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let total_axis: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = s0;
        shape[axis] = total_axis;
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: xs.to_vec(),
                axis,
            },
            xs,
        ))
    }

    /// Softmax of `x / tau` over the last axis.
    pub fn softmax_with_temperature(&self, x: Var, tau: f64) -> Result<Var> {
        check_tau("softmax_with_temperature", tau)?;
        let vx = self.value(x);
        let (_, cols) = last_axis("softmax_with_temperature", &vx)?;
        let out = Tensor::new(vx.shape().to_vec(), softmax_rows(vx.data(), cols, tau))?;
        Ok(self.push(out, Op::Softmax { input: x, tau }, &[x]))
    }

    /// Log of [`Graph::softmax_with_temperature`], computed stably.
    pub fn log_softmax_with_temperature(&self, x: Var, tau: f64) -> Result<Var> {
        check_tau("log_softmax_with_temperature", tau)?;
        let vx = self.value(x);
        let (_, cols) = last_axis("log_softmax_with_temperature", &vx)?;
        let out = Tensor::new(vx.shape().to_vec(), log_softmax_rows(vx.data(), cols, tau))?;
        Ok(self.push(out, Op::LogSoftmax { input: x, tau }, &[x]))
    }

    /// Elementwise Huber-style smooth L1 with unit threshold.
    pub fn smooth_l1(&self, x: Var) -> Var {
        let out = self.value(x).map(smooth_l1);
        self.push(out, Op::SmoothL1(x), &[x])
    }

    /// Euclidean norm of all elements. The gradient at the origin is taken
    /// to be zero.
    pub fn l2_norm(&self, x: Var) -> Var {
        let n = self.value(x).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(Tensor::scalar(n), Op::L2Norm(x), &[x])
    }

    /// Reverse sweep from `root`, seeded with ones. Every node that requires
    /// a gradient and is an ancestor of `root` ends up with a gradient.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if root.0 >= nodes.len() {
            return Err(NdError::InvalidArgument {
                op: "backward",
                reason: format!("unknown node {}", root.0),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0; nodes[root.0].value.len()]);

        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &nodes[i];
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    f(slot);
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| -> &Tensor { &nodes[v.0].value };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            accumulate(grads, nodes, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            accumulate(grads, nodes, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            accumulate(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * vb[i];
                }
            });
            accumulate(grads, nodes, *b, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * va[i];
                }
            });
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            accumulate(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] / vb[i];
                }
            });
            accumulate(grads, nodes, *b, |d| {
                for i in 0..d.len() {
                    d[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                }
            });
        }
        Op::Scale(a, c) => {
            accumulate(grads, nodes, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c));
        }
        Op::AddBias(x, b) => {
            accumulate(grads, nodes, *x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            let cols = val(*b).len();
            accumulate(grads, nodes, *b, |d| {
                for (i, gi) in g.iter().enumerate() {
                    d[i % cols] += gi;
                }
            });
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            accumulate(grads, nodes, *a, |d| {
                kernels::gemm(m, n, k, g, false, vb.data(), true, 1.0, d);
            });
            accumulate(grads, nodes, *b, |d| {
                kernels::gemm(k, m, n, va.data(), true, g, false, 1.0, d);
            });
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
        } => {
            let need = (
                nodes[input.0].requires_grad,
                nodes[weight.0].requires_grad,
                bias.is_some_and(|b| nodes[b.0].requires_grad),
            );
            let cg = kernels::conv2d_backward(geom, val(*input).data(), val(*weight).data(), g, need);
            let add = |d: &mut [f64], s: &[f64]| d.iter_mut().zip(s).for_each(|(d, s)| *d += s);
            if let Some(dx) = cg.dx {
                accumulate(grads, nodes, *input, |d| add(d, &dx));
            }
            if let Some(dw) = cg.dw {
                accumulate(grads, nodes, *weight, |d| add(d, &dw));
            }
            if let (Some(db), Some(b)) = (cg.db, bias) {
                accumulate(grads, nodes, *b, |d| add(d, &db));
            }
        }
        Op::Gather { input, index } => {
            accumulate(grads, nodes, *input, |d| {
                for (gi, &src) in g.iter().zip(index) {
                    d[src] += gi;
                }
            });
        }
        Op::Relu(x) => {
            let vx = val(*x).data();
            accumulate(grads, nodes, *x, |d| {
                for i in 0..d.len() {
                    if vx[i] > 0.0 {
                        d[i] += g[i];
                    }
                }
            });
        }
        Op::Exp(x) => {
            let out = node.value.data();
            accumulate(grads, nodes, *x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * out[i];
                }
            });
        }
        Op::Log(x) => {
            let vx = val(*x).data();
            accumulate(grads, nodes, *x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] / vx[i];
                }
            });
        }
        Op::Sum(x) => {
            accumulate(grads, nodes, *x, |d| d.iter_mut().for_each(|d| *d += g[0]));
        }
        Op::Mean(x) => {
            let n = val(*x).len() as f64;
            accumulate(grads, nodes, *x, |d| d.iter_mut().for_each(|d| *d += g[0] / n));
        }
        Op::Reshape(x) => {
            accumulate(grads, nodes, *x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
        }
        Op::Slice { input, axis, start } => {
            let s = val(*input).shape();
            let inner: usize = s[axis + 1..].iter().product();
            let len = node.value.shape()[*axis];
            accumulate(grads, nodes, *input, |d| {
                for (o, chunk) in g.chunks(len * inner).enumerate() {
                    let base = o * s[*axis] * inner + start * inner;
                    d[base..base + chunk.len()]
                        .iter_mut()
                        .zip(chunk)
                        .for_each(|(d, g)| *d += g);
                }
            });
        }
        Op::Concat { inputs, axis } => {
            let s = node.value.shape();
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let row = s[*axis] * inner;
            let mut offset = 0;
            for &v in inputs {
                let chunk = val(v).shape()[*axis] * inner;
                accumulate(grads, nodes, v, |d| {
                    for o in 0..outer {
                        let src = &g[o * row + offset..][..chunk];
                        d[o * chunk..(o + 1) * chunk]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, g)| *d += g);
                    }
                });
                offset += chunk;
            }
        }
        Op::Softmax { input, tau } => {
            let y = node.value.data();
            let cols = *node.value.shape().last().expect("rank >= 1");
            accumulate(grads, nodes, *input, |d| {
                for ((dr, yr), gr) in d.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..cols {
                        dr[j] += yr[j] * (gr[j] - dot) / tau;
                    }
                }
            });
        }
        Op::LogSoftmax { input, tau } => {
            let y = node.value.data();
            let cols = *node.value.shape().last().expect("rank >= 1");
            accumulate(grads, nodes, *input, |d| {
                for ((dr, yr), gr) in d.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..cols {
                        dr[j] += (gr[j] - yr[j].exp() * total) / tau;
                    }
                }
            });
        }
        Op::SmoothL1(x) => {
            let vx = val(*x).data();
            accumulate(grads, nodes, *x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * smooth_l1_grad(vx[i]);
                }
            });
        }
        Op::L2Norm(x) => {
            let n = node.value.item();
            if n > 0.0 {
                let vx = val(*x).data();
                accumulate(grads, nodes, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[0] * vx[i] / n;
                    }
                });
            } else {
                accumulate(grads, nodes, *x, |_| {});
            }
        }
    }
}
