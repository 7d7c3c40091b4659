//! Append-only reverse-mode gradient tape.
//!
//! Every operation appends a node after its inputs, so node order is a
//! topological order and [`Graph::backward`] simply walks it in reverse.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::ops::{self, Conv3dSpec, ConvGeom, Direction, LayerNormSaved, MatmulPlan};
use crate::numerics::tensor::{Element, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    MatMul(Var, Var, MatmulPlan),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        saved: LayerNormSaved<F>,
    },
    Conv3d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Resample {
        x: Var,
        time_ratio: usize,
        space_ratio: usize,
        dir: Direction,
    },
    AdaptivePool {
        x: Var,
        out_h: usize,
        out_w: usize,
    },
    MeanAxis(Var, usize),
    SumAll(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        smoothing: f64,
        probs: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Graph<F: Element = f64> {
    nodes: Vec<Node<F>>,
    scope: String,
    macs: BTreeMap<String, u64>,
    check_finite: bool,
}

impl<F: Element> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            scope: String::new(),
            macs: BTreeMap::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enables or disables the per-operation finiteness check (on by default
    /// in debug builds).
    pub fn set_finite_checks(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Label under which subsequent multiply-accumulates are tallied.
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    /// Multiply-accumulates executed by forward kernels, per scope label.
    pub fn macs(&self) -> &BTreeMap<String, u64> {
        &self.macs
    }

    pub fn total_macs(&self) -> u64 {
        self.macs.values().sum()
    }

    fn tally(&mut self, n: u64) {
        if let Some(c) = self.macs.get_mut(&self.scope) {
            *c += n;
        } else {
            self.macs.insert(self.scope.clone(), n);
        }
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<F>,
        op: Op<F>,
        inputs: &[Var],
    ) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        self.push("add", y, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::mul(self.value(a), self.value(b))?;
        self.push("mul", y, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let k = F::lit(k);
        let y = self.value(a).map(|v| v * k);
        self.push("scale", y, Op::Scale(a, k), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let y = ops::gelu(self.value(a));
        self.push("gelu", y, Op::Gelu(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let y = self.value(a).reshape(dims.to_vec())?;
        self.push("reshape", y, Op::Reshape(a), &[a])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let y = ops::permute(self.value(a), perm)?;
        self.push("permute", y, Op::Permute(a, perm.to_vec()), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = ops::matmul_plan(self.dims(a), self.dims(b))?;
        let (y, macs) = ops::matmul_with_plan(&plan, self.value(a), self.value(b));
        self.tally(macs);
        self.push("matmul", y, Op::MatMul(a, b, plan), &[a, b])
    }

    /// `x · w + bias` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let y = ops::softmax_last(self.value(a))?;
        self.push("softmax", y, Op::Softmax(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let (y, saved) =
            ops::layer_norm_impl(self.value(x), self.value(gain), self.value(shift), eps)?;
        self.push(
            "layer_norm",
            y,
            Op::LayerNorm {
                x,
                gain,
                shift,
                saved,
            },
            &[x, gain, shift],
        )
    }

    pub fn conv3d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        spec: &Conv3dSpec,
    ) -> Result<Var> {
        let (y, geom, macs) = ops::conv3d_impl(
            self.value(x),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            spec,
        )?;
        self.tally(macs);
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.push(
            "conv3d",
            y,
            Op::Conv3d {
                x,
                kernel,
                bias,
                geom,
            },
            &inputs,
        )
    }

    /// Block-mean (down) or nearest-neighbour (up) resampling along T and H/W.
    pub fn resample(
        &mut self,
        x: Var,
        time_ratio: usize,
        space_ratio: usize,
        dir: Direction,
    ) -> Result<Var> {
        let y = ops::resample(self.value(x), time_ratio, space_ratio, dir)?;
        self.push(
            "resample",
            y,
            Op::Resample {
                x,
                time_ratio,
                space_ratio,
                dir,
            },
            &[x],
        )
    }

    pub fn resample_spatial(&mut self, x: Var, ratio: usize, dir: Direction) -> Result<Var> {
        self.resample(x, 1, ratio, dir)
    }

    pub fn adaptive_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = ops::adaptive_pool2d(self.value(x), out_h, out_w)?;
        self.push(
            "adaptive_pool2d",
            y,
            Op::AdaptivePool { x, out_h, out_w },
            &[x],
        )
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = ops::mean_axis(self.value(x), axis)?;
        self.push("mean_axis", y, Op::MeanAxis(x, axis), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        self.push("sum", y, Op::SumAll(x), &[x])
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let y = ops::slice_axis(self.value(x), axis, start, len)?;
        self.push("slice", y, Op::Slice { x, axis, start }, &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = ops::concat_axis(&vals, axis)?;
        self.push(
            "concat",
            y,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Mean cross-entropy of `logits: [B, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy_impl(self.value(logits), labels, smoothing)?;
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                smoothing,
                probs,
            },
            &[logits],
        )
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.dims(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![F::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let dims = node.value.dims();
            let send = |v: Var, gv: Vec<F>, grads: &mut Vec<Option<Vec<F>>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(gv).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gv),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.requires_grad(v) {
                            send(v, ops::reduce_to(&g, dims, self.dims(v)), &mut grads);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if self.requires_grad(*a) {
                        send(
                            *a,
                            ops::mul_adjoint(&g, dims, self.dims(*a), self.value(*b)),
                            &mut grads,
                        );
                    }
                    if self.requires_grad(*b) {
                        send(
                            *b,
                            ops::mul_adjoint(&g, dims, self.dims(*b), self.value(*a)),
                            &mut grads,
                        );
                    }
                }
                Op::Scale(a, k) => send(*a, g.iter().map(|&v| v * *k).collect(), &mut grads),
                Op::Gelu(a) => {
                    let x = self.value(*a).elems();
                    send(
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(&gv, &xv)| gv * ops::gelu_grad_scalar(xv))
                            .collect(),
                        &mut grads,
                    )
                }
                Op::Reshape(a) => send(*a, g, &mut grads),
                Op::Permute(a, perm) => {
                    let gt = Tensor::from_parts(dims.to_vec(), g);
                    let back = ops::permute(&gt, &ops::inverse_perm(perm)).expect("valid inverse");
                    send(*a, back.into_elems(), &mut grads)
                }
                Op::MatMul(a, b, plan) => {
                    let (ga, gb) = ops::matmul_backward(
                        plan,
                        self.value(*a),
                        self.value(*b),
                        &g,
                        self.requires_grad(*a),
                        self.requires_grad(*b),
                    );
                    if let Some(ga) = ga {
                        send(*a, ga, &mut grads);
                    }
                    if let Some(gb) = gb {
                        send(*b, gb, &mut grads);
                    }
                }
                Op::Softmax(a) => send(*a, ops::softmax_backward(&node.value, &g), &mut grads),
                Op::LayerNorm {
                    x,
                    gain,
                    shift,
                    saved,
                } => {
                    let (gx, ggain, gshift) =
                        ops::layer_norm_backward(saved, self.value(*gain), &g);
                    send(*x, gx, &mut grads);
                    send(*gain, ggain, &mut grads);
                    send(*shift, gshift, &mut grads);
                }
                Op::Conv3d {
                    x,
                    kernel,
                    bias,
                    geom,
                } => {
                    let need = [
                        self.requires_grad(*x),
                        self.requires_grad(*kernel),
                        bias.is_some_and(|b| self.requires_grad(b)),
                    ];
                    let cg =
                        ops::conv3d_backward(geom, self.value(*x), self.value(*kernel), &g, need);
                    if let Some(gx) = cg.x {
                        send(*x, gx, &mut grads);
                    }
                    if let Some(gk) = cg.kernel {
                        send(*kernel, gk, &mut grads);
                    }
                    if let (Some(b), Some(gb)) = (bias, cg.bias) {
                        send(*b, gb, &mut grads);
                    }
                }
                Op::Resample {
                    x,
                    time_ratio,
                    space_ratio,
                    dir,
                } => send(
                    *x,
                    ops::resample_backward(self.dims(*x), *time_ratio, *space_ratio, *dir, &g),
                    &mut grads,
                ),
                Op::AdaptivePool { x, out_h, out_w } => send(
                    *x,
                    ops::adaptive_pool2d_backward(self.dims(*x), *out_h, *out_w, &g),
                    &mut grads,
                ),
                Op::MeanAxis(x, axis) => send(
                    *x,
                    ops::mean_axis_backward(self.dims(*x), *axis, &g),
                    &mut grads,
                ),
                Op::SumAll(x) => send(*x, vec![g[0]; self.value(*x).numel()], &mut grads),
                Op::Slice { x, axis, start } => {
                    let in_dims = self.dims(*x);
                    let (outer, n, inner) = ops::split_axis(in_dims, *axis);
                    let len = dims[*axis];
                    let mut gx = vec![F::zero(); outer * n * inner];
                    for o in 0..outer {
                        gx[(o * n + start) * inner..(o * n + start + len) * inner]
                            .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    send(*x, gx, &mut grads)
                }
                Op::Concat { parts, axis } => {
                    let (outer, total, inner) = ops::split_axis(dims, *axis);
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.dims(p)[*axis];
                        if self.requires_grad(p) {
                            let mut gp = Vec::with_capacity(outer * n * inner);
                            for o in 0..outer {
                                let s = (o * total + offset) * inner;
                                gp.extend_from_slice(&g[s..s + n * inner]);
                            }
                            send(p, gp, &mut grads);
                        }
                        offset += n;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    smoothing,
                    probs,
                } => {
                    let k = self.dims(*logits)[1];
                    send(
                        *logits,
                        ops::cross_entropy_backward(probs, labels, k, *smoothing, g[0]),
                        &mut grads,
                    )
                }
            }
        }
        Ok(Gradients {
            grads,
            dims: self.nodes[..=loss.0]
                .iter()
                .map(|n| n.value.dims().to_vec())
                .collect(),
        })
    }
}

/// Gradients of a scalar loss with respect to the leaves of a [`Graph`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    dims: Vec<Vec<usize>>,
}

impl<F: Element> Gradients<F> {
    /// Gradient for `v`; a zero tensor when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor<F> {
        let dims = self.dims.get(v.0).cloned();
        match (self.grads.get(v.0).and_then(|g| g.as_ref()), dims) {
            (Some(g), Some(d)) => Tensor::from_parts(d, g.clone()),
            (None, Some(d)) => Tensor::zeros(d).expect("node dims are valid"),
            (_, None) => panic!("gradient requested for a node created after the loss"),
        }
    }
}
