//! Reverse-mode automatic differentiation on a Wengert list.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles; calling
//! [`Graph::backward`] on a scalar loss walks the list in reverse and
//! accumulates adjoints. Ops validate shapes eagerly and return descriptive
//! errors; every produced tensor is finiteness-checked on construction, so a
//! NaN is reported at the op that made it.
//!
//! Conventions:
//! * `matmul` treats the last two axes as matrix dims. Leading axes must be
//!   equal on both sides, or the right side may be a plain 2-D weight that is
//!   broadcast across the batch.
//! * elementwise `add`/`sub`/`mul` broadcast the right operand into the left
//!   using right-aligned NumPy rules (missing or size-1 axes expand).
//! * reductions (`sum_all`, `mean_all`) accumulate in f64 to keep large
//!   reductions well conditioned.
//! * `softmax`, `layer_norm`, `l2_normalize` operate over the last axis.

use crate::error::NumericsError;
use crate::tensor::Tensor;

type Result<T> = std::result::Result<T, NumericsError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f32),
    AddScalar,
    MaxScalar(f32),
    Clamp(f32, f32),
    Matmul,
    Conv2d {
        stride: (usize, usize),
        pad: ((usize, usize), (usize, usize)),
    },
    Transpose(usize, usize),
    Reshape,
    Narrow {
        axis: usize,
        start: usize,
        len: usize,
    },
    Concat {
        axis: usize,
    },
    RepeatAxis {
        axis: usize,
        k: usize,
    },
    Softmax,
    Log,
    Exp,
    Sqrt,
    Tanh,
    Sigmoid,
    Gelu,
    SumAll,
    MeanAll,
    SumAxis(usize),
    MeanAxis(usize),
    L2Normalize,
    LayerNorm {
        eps: f32,
    },
    Embedding {
        ids: Vec<usize>,
    },
}

struct Node {
    op: Op,
    parents: Vec<usize>,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    /// True when `v` was created by `input` (no parents, no gradient).
    pub fn is_input_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Input)
    }

    fn push(&mut self, op: Op, parents: Vec<usize>, value: Tensor) -> Var {
        let needs_grad = matches!(op, Op::Param)
            || parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node {
            op,
            parents,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient (data).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, vec![], t)
    }

    /// Leaf that participates in differentiation (parameter).
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Param, vec![], t)
    }

    pub fn scalar(&mut self, v: f32) -> Result<Var> {
        Ok(self.input(Tensor::scalar(v)?))
    }

    // ── elementwise with broadcasting ───────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul, "mul", |x, y| x * y)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        name: &'static str,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shape(va.shape(), vb.shape(), name)?;
        let data = broadcast_apply(va, vb, &out_shape, &f);
        let t = Tensor::checked(out_shape, data, name)?;
        Ok(self.push(op, vec![a.0, b.0], t))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Neg, "neg", |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        self.unary(a, Op::Scale(c), "scale", |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Result<Var> {
        self.unary(a, Op::AddScalar, "add_scalar", |x| x + c)
    }

    /// Elementwise max(x, c) — clamp from below.
    pub fn max_scalar(&mut self, a: Var, c: f32) -> Result<Var> {
        self.unary(a, Op::MaxScalar(c), "max_scalar", |x| x.max(c))
    }

    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Result<Var> {
        self.unary(a, Op::Clamp(lo, hi), "clamp", |x| x.clamp(lo, hi))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log, "log", |x| x.ln())
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp, "exp", |x| x.exp())
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sqrt, "sqrt", |x| x.sqrt())
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh, "tanh", |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid, "sigmoid", |x| 1.0 / (1.0 + (-x).exp()))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Gelu, "gelu", gelu_fwd)
    }

    fn unary(
        &mut self,
        a: Var,
        op: Op,
        name: &'static str,
        f: impl Fn(f32) -> f32,
    ) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::checked(va.shape().to_vec(), data, name)?;
        Ok(self.push(op, vec![a.0], t))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// Batched matrix product; see module docs for broadcast rules.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let plan = MatmulPlan::resolve(va.shape(), vb.shape())?;
        let mut out = vec![0.0f32; plan.batch * plan.m * plan.n];
        let (ad, bd) = (va.data(), vb.data());
        for i in 0..plan.batch {
            let a_off = i * plan.m * plan.k;
            let b_off = if plan.rhs_broadcast {
                0
            } else {
                i * plan.k * plan.n
            };
            mm(
                &ad[a_off..a_off + plan.m * plan.k],
                &bd[b_off..b_off + plan.k * plan.n],
                &mut out[i * plan.m * plan.n..(i + 1) * plan.m * plan.n],
                plan.m,
                plan.k,
                plan.n,
            );
        }
        let t = Tensor::checked(plan.out_shape.clone(), out, "matmul")?;
        Ok(self.push(Op::Matmul, vec![a.0, b.0], t))
    }

    /// 2-D convolution. `x: [B, Cin, H, W]`, `w: [Cout, Cin, KH, KW]`,
    /// `pad` is `((top, bottom), (left, right))` — asymmetric padding makes
    /// causal (left-only) padding expressible.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: (usize, usize),
        pad: ((usize, usize), (usize, usize)),
    ) -> Result<Var> {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let geom = ConvGeom::resolve(vx.shape(), vw.shape(), stride, pad)?;
        let out = conv2d_forward(vx.data(), vw.data(), &geom);
        let t = Tensor::checked(geom.out_shape(), out, "conv2d")?;
        Ok(self.push(Op::Conv2d { stride, pad }, vec![x.0, w.0], t))
    }

    // ── shape ops ───────────────────────────────────────────────────────

    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let nd = va.shape().len();
        if d0 >= nd || d1 >= nd {
            return Err(NumericsError::InvalidShape {
                op: "transpose",
                shape: va.shape().to_vec(),
                reason: format!("axes ({d0}, {d1}) out of range"),
            });
        }
        let t = transpose_copy(va, d0, d1)?;
        Ok(self.push(Op::Transpose(d0, d1), vec![a.0], t))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[a.0].value.reshaped(shape.to_vec())?;
        Ok(self.push(Op::Reshape, vec![a.0], t))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let shape = va.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(NumericsError::IndexOutOfRange {
                op: "narrow",
                index: start + len,
                size: *shape.get(axis).unwrap_or(&0),
            });
        }
        let (pre, ax, post) = split3(shape, axis);
        let mut out = Vec::with_capacity(pre * len * post);
        let src = va.data();
        for p in 0..pre {
            let base = p * ax * post + start * post;
            out.extend_from_slice(&src[base..base + len * post]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let t = Tensor::checked(out_shape, out, "narrow")?;
        Ok(self.push(Op::Narrow { axis, start, len }, vec![a.0], t))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumericsError::InvalidShape {
                op: "concat",
                shape: vec![],
                reason: "no inputs".into(),
            });
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(NumericsError::IndexOutOfRange {
                op: "concat",
                index: axis,
                size: first.len(),
            });
        }
        let mut total_axis = 0;
        for &p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(first.iter())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total_axis += s[axis];
        }
        let (pre, _, post) = split3(&first, axis);
        let mut out_shape = first.clone();
        out_shape[axis] = total_axis;
        let mut out = vec![0.0f32; pre * total_axis * post];
        let mut offset = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            let ax = v.shape()[axis];
            let src = v.data();
            for pr in 0..pre {
                let dst = pr * total_axis * post + offset * post;
                let s = pr * ax * post;
                out[dst..dst + ax * post].copy_from_slice(&src[s..s + ax * post]);
            }
            offset += ax;
        }
        let t = Tensor::checked(out_shape, out, "concat")?;
        Ok(self.push(
            Op::Concat { axis },
            parts.iter().map(|v| v.0).collect(),
            t,
        ))
    }

    /// Repeat each entry `k` times along `axis` (nearest-neighbor upsample).
    pub fn repeat_axis(&mut self, a: Var, axis: usize, k: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let shape = va.shape();
        if axis >= shape.len() || k == 0 {
            return Err(NumericsError::InvalidShape {
                op: "repeat_axis",
                shape: shape.to_vec(),
                reason: format!("axis {axis}, k {k}"),
            });
        }
        let (pre, ax, post) = split3(shape, axis);
        let mut out = Vec::with_capacity(pre * ax * k * post);
        let src = va.data();
        for p in 0..pre {
            for i in 0..ax {
                let row = &src[(p * ax + i) * post..(p * ax + i + 1) * post];
                for _ in 0..k {
                    out.extend_from_slice(row);
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = ax * k;
        let t = Tensor::checked(out_shape, out, "repeat_axis")?;
        Ok(self.push(Op::RepeatAxis { axis, k }, vec![a.0], t))
    }

    // ── normalization / activation over last axis ───────────────────────

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let d = last_dim(va.shape(), "softmax")?;
        let mut out = Vec::with_capacity(va.numel());
        for row in va.data().chunks_exact(d) {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f32> = row.iter().map(|&x| (x - m).exp()).collect();
            let s: f32 = exps.iter().sum();
            out.extend(exps.iter().map(|&e| e / s));
        }
        let t = Tensor::checked(va.shape().to_vec(), out, "softmax")?;
        Ok(self.push(Op::Softmax, vec![a.0], t))
    }

    /// x / (||x||_2 + 1e-12) over the last axis.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let d = last_dim(va.shape(), "l2_normalize")?;
        let mut out = Vec::with_capacity(va.numel());
        for row in va.data().chunks_exact(d) {
            let norm = row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt() as f32;
            let inv = 1.0 / (norm + 1e-12);
            out.extend(row.iter().map(|&x| x * inv));
        }
        let t = Tensor::checked(va.shape().to_vec(), out, "l2_normalize")?;
        Ok(self.push(Op::L2Normalize, vec![a.0], t))
    }

    /// (x - mean) / sqrt(var + eps) over the last axis (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f32) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let d = last_dim(va.shape(), "layer_norm")?;
        let mut out = Vec::with_capacity(va.numel());
        for row in va.data().chunks_exact(d) {
            let mean = row.iter().map(|&x| x as f64).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|&x| {
                    let c = x as f64 - mean;
                    c * c
                })
                .sum::<f64>()
                / d as f64;
            let inv = 1.0 / (var + eps as f64).sqrt();
            out.extend(row.iter().map(|&x| ((x as f64 - mean) * inv) as f32));
        }
        let t = Tensor::checked(va.shape().to_vec(), out, "layer_norm")?;
        Ok(self.push(Op::LayerNorm { eps }, vec![a.0], t))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.data().iter().map(|&x| x as f64).sum::<f64>();
        let t = Tensor::checked(vec![], vec![s as f32], "sum_all")?;
        Ok(self.push(Op::SumAll, vec![a.0], t))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.numel().max(1);
        let s = self.nodes[a.0].value.data().iter().map(|&x| x as f64).sum::<f64>();
        let t = Tensor::checked(vec![], vec![(s / n as f64) as f32], "mean_all")?;
        Ok(self.push(Op::MeanAll, vec![a.0], t))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let shape = va.shape();
        if axis >= shape.len() {
            return Err(NumericsError::IndexOutOfRange {
                op: "reduce_axis",
                index: axis,
                size: shape.len(),
            });
        }
        let (pre, ax, post) = split3(shape, axis);
        let mut out = vec![0.0f64; pre * post];
        let src = va.data();
        for p in 0..pre {
            for i in 0..ax {
                let base = (p * ax + i) * post;
                let dst = p * post;
                for j in 0..post {
                    out[dst + j] += src[base + j] as f64;
                }
            }
        }
        let denom = if mean { ax as f64 } else { 1.0 };
        let data: Vec<f32> = out.iter().map(|&x| (x / denom) as f32).collect();
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let t = Tensor::checked(out_shape, data, "reduce_axis")?;
        let op = if mean {
            Op::MeanAxis(axis)
        } else {
            Op::SumAxis(axis)
        };
        Ok(self.push(op, vec![a.0], t))
    }

    // ── lookup ──────────────────────────────────────────────────────────

    /// Row lookup: `table: [V, D]`, `ids` of length `B` → `[B, D]`.
    /// Gradients scatter-add into the table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = &self.nodes[table.0].value;
        let shape = vt.shape();
        if shape.len() != 2 {
            return Err(NumericsError::InvalidShape {
                op: "embedding",
                shape: shape.to_vec(),
                reason: "table must be 2-D".into(),
            });
        }
        let (v, d) = (shape[0], shape[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NumericsError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(&vt.data()[id * d..(id + 1) * d]);
        }
        let t = Tensor::checked(vec![ids.len(), d], out, "embedding")?;
        Ok(self.push(Op::Embedding { ids: ids.to_vec() }, vec![table.0], t))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Returns adjoints for every node that
    /// requires a gradient (params and anything on a path to one).
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lnode = &self.nodes[loss.0];
        if lnode.value.numel() != 1 {
            return Err(NumericsError::NonScalarLoss {
                shape: lnode.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.accumulate_parents(idx, &gout, &mut grads)?;
            }
            grads[idx] = Some(gout);
        }

        let mut by_node = Vec::with_capacity(self.nodes.len());
        for (idx, g) in grads.into_iter().enumerate() {
            match g {
                Some(data) if self.nodes[idx].needs_grad => {
                    let shape = self.nodes[idx].value.shape().to_vec();
                    let t = Tensor::checked(shape, data, "backward").map_err(|_| {
                        NumericsError::NonFinite { op: "backward" }
                    })?;
                    by_node.push(Some(t));
                }
                _ => by_node.push(None),
            }
        }
        Ok(Grads { by_node })
    }

    fn accumulate_parents(
        &self,
        idx: usize,
        gout: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        let parent_grads = self.parent_grads(node, gout)?;
        for (slot, grad) in node.parents.iter().zip(parent_grads) {
            let Some(grad) = grad else { continue };
            if !self.nodes[*slot].needs_grad {
                continue;
            }
            match &mut grads[*slot] {
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grad) {
                        *a += g;
                    }
                }
                slot_ref => *slot_ref = Some(grad),
            }
        }
        Ok(())
    }

    /// Per-op adjoint rules. Returns one optional gradient per parent.
    fn parent_grads(&self, node: &Node, gout: &[f32]) -> Result<Vec<Option<Vec<f32>>>> {
        let pv = |i: usize| &self.nodes[node.parents[i]].value;
        let y = &node.value;
        let res: Vec<Option<Vec<f32>>> = match &node.op {
            Op::Input | Op::Param => vec![],
            Op::Add => {
                let ga = reduce_to_shape(gout, y.shape(), pv(0).shape());
                let gb = reduce_to_shape(gout, y.shape(), pv(1).shape());
                vec![Some(ga), Some(gb)]
            }
            Op::Sub => {
                let ga = reduce_to_shape(gout, y.shape(), pv(0).shape());
                let neg: Vec<f32> = gout.iter().map(|g| -g).collect();
                let gb = reduce_to_shape(&neg, y.shape(), pv(1).shape());
                vec![Some(ga), Some(gb)]
            }
            Op::Mul => {
                let (a, b) = (pv(0), pv(1));
                let ga_full = broadcast_apply_with_grad(b, y.shape(), gout);
                let gb_full = broadcast_apply_with_grad(a, y.shape(), gout);
                let ga = reduce_to_shape(&ga_full, y.shape(), a.shape());
                let gb = reduce_to_shape(&gb_full, y.shape(), b.shape());
                vec![Some(ga), Some(gb)]
            }
            Op::Neg => vec![Some(gout.iter().map(|g| -g).collect())],
            Op::Scale(c) => vec![Some(gout.iter().map(|g| g * c).collect())],
            Op::AddScalar => vec![Some(gout.to_vec())],
            Op::MaxScalar(c) => {
                let x = pv(0).data();
                vec![Some(
                    gout.iter()
                        .zip(x)
                        .map(|(g, &xv)| if xv > *c { *g } else { 0.0 })
                        .collect(),
                )]
            }
            Op::Clamp(lo, hi) => {
                let x = pv(0).data();
                vec![Some(
                    gout.iter()
                        .zip(x)
                        .map(|(g, &xv)| if xv > *lo && xv < *hi { *g } else { 0.0 })
                        .collect(),
                )]
            }
            Op::Log => {
                let x = pv(0).data();
                vec![Some(gout.iter().zip(x).map(|(g, &xv)| g / xv).collect())]
            }
            Op::Exp => vec![Some(
                gout.iter().zip(y.data()).map(|(g, &yv)| g * yv).collect(),
            )],
            Op::Sqrt => vec![Some(
                gout.iter()
                    .zip(y.data())
                    .map(|(g, &yv)| g * 0.5 / yv)
                    .collect(),
            )],
            Op::Tanh => vec![Some(
                gout.iter()
                    .zip(y.data())
                    .map(|(g, &t)| g * (1.0 - t * t))
                    .collect(),
            )],
            Op::Sigmoid => vec![Some(
                gout.iter()
                    .zip(y.data())
                    .map(|(g, &s)| g * s * (1.0 - s))
                    .collect(),
            )],
            Op::Gelu => {
                let x = pv(0).data();
                vec![Some(
                    gout.iter().zip(x).map(|(g, &xv)| g * gelu_grad(xv)).collect(),
                )]
            }
            Op::Matmul => {
                let (a, b) = (pv(0), pv(1));
                let plan = MatmulPlan::resolve(a.shape(), b.shape())?;
                let (ga, gb) = matmul_backward(a.data(), b.data(), gout, &plan);
                vec![Some(ga), Some(gb)]
            }
            Op::Conv2d { stride, pad } => {
                let (x, w) = (pv(0), pv(1));
                let geom = ConvGeom::resolve(x.shape(), w.shape(), *stride, *pad)?;
                let (gx, gw) = conv2d_backward(x.data(), w.data(), gout, &geom);
                vec![Some(gx), Some(gw)]
            }
            Op::Transpose(d0, d1) => {
                let gt = Tensor::checked(y.shape().to_vec(), gout.to_vec(), "transpose_bwd")?;
                let back = transpose_copy(&gt, *d0, *d1)?;
                vec![Some(back.to_vec())]
            }
            Op::Reshape => vec![Some(gout.to_vec())],
            Op::Narrow { axis, start, len } => {
                let shape = pv(0).shape();
                let (pre, ax, post) = split3(shape, *axis);
                let mut grad = vec![0.0f32; pv(0).numel()];
                for p in 0..pre {
                    let dst = p * ax * post + start * post;
                    let src = p * len * post;
                    grad[dst..dst + len * post].copy_from_slice(&gout[src..src + len * post]);
                }
                vec![Some(grad)]
            }
            Op::Concat { axis } => {
                let (pre, total_ax, post) = split3(y.shape(), *axis);
                let mut out = Vec::with_capacity(node.parents.len());
                let mut offset = 0;
                for &p in &node.parents {
                    let pshape = self.nodes[p].value.shape();
                    let ax = pshape[*axis];
                    let mut grad = vec![0.0f32; self.nodes[p].value.numel()];
                    for pr in 0..pre {
                        let src = pr * total_ax * post + offset * post;
                        let dst = pr * ax * post;
                        grad[dst..dst + ax * post]
                            .copy_from_slice(&gout[src..src + ax * post]);
                    }
                    offset += ax;
                    out.push(Some(grad));
                }
                out
            }
            Op::RepeatAxis { axis, k } => {
                let shape = pv(0).shape();
                let (pre, ax, post) = split3(shape, *axis);
                let mut grad = vec![0.0f32; pv(0).numel()];
                for p in 0..pre {
                    for i in 0..ax {
                        let dst = (p * ax + i) * post;
                        for r in 0..*k {
                            let src = (p * ax * k + i * k + r) * post;
                            for j in 0..post {
                                grad[dst + j] += gout[src + j];
                            }
                        }
                    }
                }
                vec![Some(grad)]
            }
            Op::Softmax => {
                let d = *y.shape().last().unwrap();
                let mut grad = vec![0.0f32; y.numel()];
                for (r, (yrow, grow)) in y
                    .data()
                    .chunks_exact(d)
                    .zip(gout.chunks_exact(d))
                    .enumerate()
                {
                    let dot: f32 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    let out = &mut grad[r * d..(r + 1) * d];
                    for j in 0..d {
                        out[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                vec![Some(grad)]
            }
            Op::L2Normalize => {
                let x = pv(0).data();
                let d = *y.shape().last().unwrap();
                let mut grad = vec![0.0f32; y.numel()];
                for r in 0..x.len() / d {
                    let xr = &x[r * d..(r + 1) * d];
                    let gr = &gout[r * d..(r + 1) * d];
                    let s = xr.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
                    let n = s + 1e-12;
                    let dot: f64 = gr
                        .iter()
                        .zip(xr)
                        .map(|(&g, &xv)| g as f64 * xv as f64)
                        .sum();
                    let coef = dot / (s.max(1e-20) * n * n);
                    let out = &mut grad[r * d..(r + 1) * d];
                    for j in 0..d {
                        out[j] = (gr[j] as f64 / n - coef * xr[j] as f64) as f32;
                    }
                }
                vec![Some(grad)]
            }
            Op::LayerNorm { eps } => {
                let x = pv(0).data();
                let d = *y.shape().last().unwrap();
                let mut grad = vec![0.0f32; y.numel()];
                for r in 0..x.len() / d {
                    let xr = &x[r * d..(r + 1) * d];
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &gout[r * d..(r + 1) * d];
                    let mean = xr.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
                    let var = xr
                        .iter()
                        .map(|&v| {
                            let c = v as f64 - mean;
                            c * c
                        })
                        .sum::<f64>()
                        / d as f64;
                    let inv = 1.0 / (var + *eps as f64).sqrt();
                    let mg: f64 = gr.iter().map(|&g| g as f64).sum::<f64>() / d as f64;
                    let mgy: f64 = gr
                        .iter()
                        .zip(yr)
                        .map(|(&g, &yv)| g as f64 * yv as f64)
                        .sum::<f64>()
                        / d as f64;
                    let out = &mut grad[r * d..(r + 1) * d];
                    for j in 0..d {
                        out[j] = (inv * (gr[j] as f64 - mg - yr[j] as f64 * mgy)) as f32;
                    }
                }
                vec![Some(grad)]
            }
            Op::SumAll => {
                let n = pv(0).numel();
                vec![Some(vec![gout[0]; n])]
            }
            Op::MeanAll => {
                let n = pv(0).numel();
                vec![Some(vec![gout[0] / n as f32; n])]
            }
            Op::SumAxis(axis) | Op::MeanAxis(axis) => {
                let shape = pv(0).shape();
                let (pre, ax, post) = split3(shape, *axis);
                let scale = if matches!(node.op, Op::MeanAxis(_)) {
                    1.0 / ax as f32
                } else {
                    1.0
                };
                let mut grad = vec![0.0f32; pv(0).numel()];
                for p in 0..pre {
                    for i in 0..ax {
                        let dst = (p * ax + i) * post;
                        let src = p * post;
                        for j in 0..post {
                            grad[dst + j] = gout[src + j] * scale;
                        }
                    }
                }
                vec![Some(grad)]
            }
            Op::Embedding { ids } => {
                let shape = pv(0).shape();
                let d = shape[1];
                let mut grad = vec![0.0f32; pv(0).numel()];
                for (row, &id) in ids.iter().enumerate() {
                    let src = &gout[row * d..(row + 1) * d];
                    let dst = &mut grad[id * d..(id + 1) * d];
                    for j in 0..d {
                        dst[j] += src[j];
                    }
                }
                vec![Some(grad)]
            }
        };
        Ok(res)
    }
}

// ── broadcasting helpers ────────────────────────────────────────────────

fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(NumericsError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` right-aligned into `out_shape`, 0 where broadcast.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let nd = out_shape.len();
    let offset = nd - shape.len();
    let mut strides = vec![0usize; nd];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

fn broadcast_apply(
    a: &Tensor,
    b: &Tensor,
    out_shape: &[usize],
    f: &impl Fn(f32, f32) -> f32,
) -> Vec<f32> {
    let numel: usize = out_shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    // Fast path: identical shapes.
    if a.shape() == out_shape && b.shape() == out_shape {
        return ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect();
    }
    // Fast path: rhs is a contiguous suffix tile of lhs (e.g. [B,S,D]+[D]).
    if a.shape() == out_shape && is_suffix(b.shape(), out_shape) {
        let tile = bd.len().max(1);
        let mut out = Vec::with_capacity(numel);
        for (i, &x) in ad.iter().enumerate() {
            out.push(f(x, bd[i % tile]));
        }
        return out;
    }
    // General odometer walk.
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let mut idx = vec![0usize; out_shape.len()];
    let mut out = Vec::with_capacity(numel);
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..numel {
        out.push(f(ad[oa], bd[ob]));
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
        }
    }
    out
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// For `mul` backward: gradient w.r.t. `a` is `gout * broadcast(b)`.
fn broadcast_apply_with_grad(b: &Tensor, out_shape: &[usize], gout: &[f32]) -> Vec<f32> {
    if b.shape() == out_shape {
        return gout.iter().zip(b.data()).map(|(g, &x)| g * x).collect();
    }
    let sb = broadcast_strides(b.shape(), out_shape);
    let bd = b.data();
    let mut idx = vec![0usize; out_shape.len()];
    let mut ob = 0usize;
    let mut out = Vec::with_capacity(gout.len());
    for &g in gout {
        out.push(g * bd[ob]);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ob -= sb[d] * out_shape[d];
        }
    }
    out
}

/// Sum `grad` (shaped `from`) down to `to` (right-aligned broadcast inverse).
fn reduce_to_shape(grad: &[f32], from: &[usize], to: &[usize]) -> Vec<f32> {
    if from == to {
        return grad.to_vec();
    }
    let to_numel: usize = to.iter().product::<usize>().max(1);
    // Fast path: `to` is a contiguous suffix tile of `from`.
    if is_suffix(to, from) && !to.contains(&1) {
        let mut out = vec![0.0f32; to_numel];
        for (i, &g) in grad.iter().enumerate() {
            out[i % to_numel] += g;
        }
        return out;
    }
    let st = broadcast_strides(to, from);
    let mut out = vec![0.0f32; to_numel];
    let mut idx = vec![0usize; from.len()];
    let mut ot = 0usize;
    for &g in grad {
        out[ot] += g;
        for d in (0..from.len()).rev() {
            idx[d] += 1;
            ot += st[d];
            if idx[d] < from[d] {
                break;
            }
            idx[d] = 0;
            ot -= st[d] * from[d];
        }
    }
    out
}

// ── matmul ──────────────────────────────────────────────────────────────

struct MatmulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    rhs_broadcast: bool,
    out_shape: Vec<usize>,
}

impl MatmulPlan {
    fn resolve(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
        if a.len() < 2 || b.len() < 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
        let rhs_broadcast = b.len() == 2 && a.len() > 2;
        let batch_a: usize = a[..a.len() - 2].iter().product();
        let batch_ok = rhs_broadcast
            || (a.len() == b.len() && a[..a.len() - 2] == b[..b.len() - 2])
            || (a.len() == 2 && b.len() == 2);
        if k != kb || !batch_ok {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        let mut out_shape = a[..a.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        Ok(MatmulPlan {
            batch: batch_a.max(1),
            m,
            k,
            n,
            rhs_broadcast,
            out_shape,
        })
    }
}

/// C += A @ B with ikj loop order (vectorizes over j).
fn mm(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        let ai = &a[i * k..(i + 1) * k];
        for (kk, &aik) in ai.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let bk = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                ci[j] += aik * bk[j];
            }
        }
    }
}

/// C += A^T @ B where A: [m, k], B: [m, n], C: [k, n] (axpy form).
fn mm_tn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        let bi = &b[i * n..(i + 1) * n];
        for (kk, &aik) in ai.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let ck = &mut c[kk * n..(kk + 1) * n];
            for j in 0..n {
                ck[j] += aik * bi[j];
            }
        }
    }
}

/// Plain 2-D transpose into a new buffer.
fn transpose2d(src: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

fn matmul_backward(
    a: &[f32],
    b: &[f32],
    gout: &[f32],
    plan: &MatmulPlan,
) -> (Vec<f32>, Vec<f32>) {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut ga = vec![0.0f32; plan.batch * m * k];
    let gb_len = if plan.rhs_broadcast {
        k * n
    } else {
        plan.batch * k * n
    };
    let mut gb = vec![0.0f32; gb_len];
    for i in 0..plan.batch {
        let g = &gout[i * m * n..(i + 1) * m * n];
        let ai = &a[i * m * k..(i + 1) * m * k];
        let b_off = if plan.rhs_broadcast { 0 } else { i * k * n };
        let bi = &b[b_off..b_off + k * n];
        // dA = dC @ B^T  — transpose B once, then fast ikj.
        let bt = transpose2d(bi, k, n);
        mm(g, &bt, &mut ga[i * m * k..(i + 1) * m * k], m, n, k);
        // dB (+)= A^T @ dC — axpy form, accumulates across batch when broadcast.
        let gb_slice = if plan.rhs_broadcast {
            &mut gb[..]
        } else {
            &mut gb[i * k * n..(i + 1) * k * n]
        };
        mm_tn(ai, g, gb_slice, m, k, n);
    }
    (ga, gb)
}

// ── conv2d ──────────────────────────────────────────────────────────────

struct ConvGeom {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: ((usize, usize), (usize, usize)),
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn resolve(
        x: &[usize],
        w: &[usize],
        stride: (usize, usize),
        pad: ((usize, usize), (usize, usize)),
    ) -> Result<ConvGeom> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
            return Err(NumericsError::ShapeMismatch {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        let (b, cin, h, wd) = (x[0], x[1], x[2], x[3]);
        let (cout, kh, kw) = (w[0], w[2], w[3]);
        let ph = h + pad.0 .0 + pad.0 .1;
        let pw = wd + pad.1 .0 + pad.1 .1;
        if kh > ph || kw > pw || stride.0 == 0 || stride.1 == 0 {
            return Err(NumericsError::InvalidShape {
                op: "conv2d",
                shape: x.to_vec(),
                reason: format!("kernel {kh}x{kw} stride {stride:?} pad {pad:?}"),
            });
        }
        let oh = (ph - kh) / stride.0 + 1;
        let ow = (pw - kw) / stride.1 + 1;
        Ok(ConvGeom {
            b,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.b, self.cout, self.oh, self.ow]
    }

    fn ckk(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

/// Gather conv patches: `cols[ckk, oh*ow]` for one batch item.
fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let l = g.oh * g.ow;
    cols.fill(0.0);
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride.0 + ky) as isize - g.pad.0 .0 as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let xrow = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride.1 + kx) as isize - g.pad.1 .0 as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ox] = xrow[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the col gradient back into the input image.
fn col2im(cols: &[f32], g: &ConvGeom, x_grad: &mut [f32]) {
    let l = g.oh * g.ow;
    for c in 0..g.cin {
        let xc = &mut x_grad[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride.0 + ky) as isize - g.pad.0 .0 as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let xrow = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.ow..(oy + 1) * g.ow];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride.1 + kx) as isize - g.pad.1 .0 as isize;
                        if ix >= 0 && ix < g.w as isize {
                            xrow[ix as usize] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward(x: &[f32], w: &[f32], g: &ConvGeom) -> Vec<f32> {
    let l = g.oh * g.ow;
    let ckk = g.ckk();
    let mut out = vec![0.0f32; g.b * g.cout * l];
    let mut cols = vec![0.0f32; ckk * l];
    for bi in 0..g.b {
        im2col(&x[bi * g.cin * g.h * g.w..], g, &mut cols);
        mm(
            w,
            &cols,
            &mut out[bi * g.cout * l..(bi + 1) * g.cout * l],
            g.cout,
            ckk,
            l,
        );
    }
    out
}

fn conv2d_backward(x: &[f32], w: &[f32], gout: &[f32], g: &ConvGeom) -> (Vec<f32>, Vec<f32>) {
    let l = g.oh * g.ow;
    let ckk = g.ckk();
    let img = g.cin * g.h * g.w;
    let mut gx = vec![0.0f32; g.b * img];
    let mut gw = vec![0.0f32; g.cout * ckk];
    let mut cols = vec![0.0f32; ckk * l];
    let mut gcols = vec![0.0f32; ckk * l];
    for bi in 0..g.b {
        let go = &gout[bi * g.cout * l..(bi + 1) * g.cout * l];
        // dW += dOut @ cols^T: transpose cols then ikj.
        im2col(&x[bi * img..], g, &mut cols);
        let colst = transpose2d(&cols, ckk, l);
        mm(go, &colst, &mut gw, g.cout, l, ckk);
        // dCols = W^T @ dOut (axpy form), then scatter back.
        gcols.fill(0.0);
        mm_tn(w, go, &mut gcols, g.cout, ckk, l);
        col2im(&gcols, g, &mut gx[bi * img..(bi + 1) * img]);
    }
    (gx, gw)
}

// ── misc helpers ────────────────────────────────────────────────────────

fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let pre: usize = shape[..axis].iter().product();
    let ax = shape[axis];
    let post: usize = shape[axis + 1..].iter().product();
    (pre.max(1), ax, post.max(1))
}

fn last_dim(shape: &[usize], op: &'static str) -> Result<usize> {
    shape.last().copied().filter(|&d| d > 0).ok_or_else(|| {
        NumericsError::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "needs a non-empty last axis".into(),
        }
    })
}

fn transpose_copy(t: &Tensor, d0: usize, d1: usize) -> Result<Tensor> {
    if d0 == d1 {
        return Ok(t.clone());
    }
    let shape = t.shape();
    let mut out_shape = shape.to_vec();
    out_shape.swap(d0, d1);
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let mut perm_strides = strides.clone();
    perm_strides.swap(d0, d1);
    let numel = t.numel();
    let src = t.data();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..numel {
        out.push(src[off]);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            off += perm_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            off -= perm_strides[d] * out_shape[d];
        }
    }
    Tensor::checked(out_shape, out, "transpose")
}

fn gelu_fwd(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
