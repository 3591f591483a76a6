//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Values are
//! referenced by [`Var`] handles; leaves are created with [`Graph::param`]
//! (differentiable) or [`Graph::constant`]. Calling [`Graph::backward`] on a
//! scalar walks the recorded nodes once in reverse order and returns a
//! gradient for every differentiable leaf.
//!
//! Graphs are throwaway: build one per forward pass and drop it after the
//! gradients are read.

mod gradcheck;
pub(crate) mod kernels;

pub use gradcheck::{grad_check, Coordinate, GradCheckConfig, GradCheckReport};

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};
use kernels::ConvGeometry;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every operation the graph can record, with its static attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// Elementwise, numpy-style broadcasting.
    Add,
    Sub,
    Mul,
    Scale(f64),
    /// `[m, k] x [k, n]`.
    MatMul,
    /// Inputs `x [B,Cin,H,W]`, `w [Cout,Cin,kh,kw]`, optional `bias [Cout]`.
    Conv2d {
        stride: usize,
        padding: usize,
    },
    /// Inputs `x [B,Cin,H,W]`, `w [Cin,Cout,kh,kw]`, optional `bias [Cout]`.
    ConvTranspose2d {
        stride: usize,
        padding: usize,
    },
    Relu,
    /// Inputs `x [B,C,...]`, `gamma [C]`, `beta [C]`.
    GroupNorm {
        groups: usize,
        eps: f64,
    },
    /// Inputs `x [B,C,...]`, `mask [C]`.
    ChannelMask,
    /// Mean of squared differences over every axis after the first
    /// `keep_dims`. The target may broadcast against the prediction.
    MeanSquaredError {
        keep_dims: usize,
    },
    /// Mean of all elements, giving a rank-0 tensor.
    Mean,
    Concat {
        axis: usize,
    },
    Reshape(Vec<usize>),
    /// Picks `index[b]` along axis 1 for each row `b` of axis 0.
    Select(Vec<usize>),
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "subtract",
            OpKind::Mul => "multiply",
            OpKind::Scale(_) => "scalar-multiply",
            OpKind::MatMul => "matrix-multiply",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::ConvTranspose2d { .. } => "conv-transpose2d",
            OpKind::Relu => "relu",
            OpKind::GroupNorm { .. } => "group-normalization",
            OpKind::ChannelMask => "channel-mask-multiply",
            OpKind::MeanSquaredError { .. } => "mean-squared-error",
            OpKind::Mean => "mean",
            OpKind::Concat { .. } => "concatenate",
            OpKind::Reshape(_) => "reshape",
            OpKind::Select(_) => "select",
        }
    }
}

enum Saved<T> {
    Nothing,
    GroupNorm { normalized: Vec<T>, inv_std: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Option<OpKind>,
    inputs: Vec<Var>,
    saved: Saved<T>,
    tracked: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    kink_probe: Option<KinkProbe>,
}

/// Fingerprint of every relu input's sign, used to detect finite-difference
/// steps that cross a kink.
#[derive(Debug, Clone, Copy, Default)]
struct KinkProbe {
    hash: u64,
    zeros: usize,
}

impl KinkProbe {
    fn absorb<T: Scalar>(&mut self, values: &[T]) {
        const PRIME: u64 = 0x100_0000_01b3;
        for &v in values {
            let class = if v > T::zero() {
                1u64
            } else if v < T::zero() {
                2
            } else {
                self.zeros += 1;
                3
            };
            self.hash = (self.hash ^ class).wrapping_mul(PRIME);
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            kink_probe: None,
        }
    }

    /// Records relu sign patterns; see [`Graph::kink_signature`].
    pub fn with_kink_probe() -> Self {
        Graph {
            nodes: Vec::new(),
            kink_probe: Some(KinkProbe {
                hash: 0xcbf2_9ce4_8422_2325,
                zeros: 0,
            }),
        }
    }

    /// Hash of the sign of every relu input seen so far and the number that
    /// sat exactly on zero. `None` unless built with [`Graph::with_kink_probe`].
    pub fn kink_signature(&self) -> Option<(u64, usize)> {
        self.kink_probe.map(|p| (p.hash, p.zeros))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            saved: Saved::Nothing,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    /// Every recorded value in recording order.
    pub fn values(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.nodes.iter().map(|n| &n.value)
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn is_tracked(&self, var: Var) -> bool {
        self.nodes[var.0].tracked
    }

    /// Records `kind` applied to `inputs` and returns the result.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity_ok = match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul | OpKind::ChannelMask => {
                inputs.len() == 2
            }
            OpKind::MeanSquaredError { .. } => inputs.len() == 2,
            OpKind::Conv2d { .. } | OpKind::ConvTranspose2d { .. } => {
                inputs.len() == 2 || inputs.len() == 3
            }
            OpKind::GroupNorm { .. } => inputs.len() == 3,
            OpKind::Concat { .. } => !inputs.is_empty(),
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            return Err(Error::InvalidArgument(format!(
                "{} does not take {} inputs",
                kind.name(),
                inputs.len()
            )));
        }
        let (value, saved) = self.forward(&kind, inputs)?;
        let tracked = inputs.iter().any(|&v| self.nodes[v.0].tracked);
        self.nodes.push(Node {
            value,
            op: Some(kind),
            inputs: inputs.to_vec(),
            saved: if tracked { saved } else { Saved::Nothing },
            tracked,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.apply(OpKind::Scale(factor), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.apply(OpKind::Conv2d { stride, padding }, &inputs)
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.apply(OpKind::ConvTranspose2d { stride, padding }, &inputs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[x])
    }

    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    ) -> Result<Var> {
        self.apply(OpKind::GroupNorm { groups, eps }, &[x, gamma, beta])
    }

    pub fn channel_mask(&mut self, x: Var, mask: Var) -> Result<Var> {
        self.apply(OpKind::ChannelMask, &[x, mask])
    }

    /// Scalar mean squared error over all elements.
    pub fn mse(&mut self, prediction: Var, target: Var) -> Result<Var> {
        self.apply(
            OpKind::MeanSquaredError { keep_dims: 0 },
            &[prediction, target],
        )
    }

    /// Mean squared error reduced over every axis after `keep_dims`.
    pub fn mse_per(&mut self, prediction: Var, target: Var, keep_dims: usize) -> Result<Var> {
        self.apply(
            OpKind::MeanSquaredError { keep_dims },
            &[prediction, target],
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(OpKind::Concat { axis }, xs)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.apply(OpKind::Reshape(shape.into()), &[x])
    }

    pub fn select(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        self.apply(OpKind::Select(index), &[x])
    }

    fn forward(&mut self, kind: &OpKind, inputs: &[Var]) -> Result<(Tensor<T>, Saved<T>)> {
        let name = kind.name();
        let val = |i: usize| &self.nodes[inputs[i].0].value;
        let plain = |t: Tensor<T>| Ok((t, Saved::Nothing));
        match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                let (a, b) = (val(0), val(1));
                let shape = kernels::broadcast_shape(a.shape(), b.shape())
                    .ok_or_else(|| Error::shape(name, a.shape(), b.shape()))?;
                let f: fn(T, T) -> T = match kind {
                    OpKind::Add => |x, y| x + y,
                    OpKind::Sub => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let data = if a.shape() == b.shape() {
                    a.data()
                        .iter()
                        .zip(b.data())
                        .map(|(&x, &y)| f(x, y))
                        .collect()
                } else {
                    let ia = kernels::broadcast_index(&shape, a.shape());
                    let ib = kernels::broadcast_index(&shape, b.shape());
                    ia.iter()
                        .zip(&ib)
                        .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
                        .collect()
                };
                plain(Tensor::new(shape, data)?)
            }
            OpKind::Scale(factor) => {
                let k = T::from_f64_lossy(*factor);
                plain(val(0).map(|v| v * k))
            }
            OpKind::MatMul => {
                let (a, b) = (val(0), val(1));
                if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(Error::shape(name, a.shape(), b.shape()));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut out = vec![T::zero(); m * n];
                gemm(
                    MatRef::new(a.data(), m, k),
                    MatRef::new(b.data(), k, n),
                    T::zero(),
                    &mut out,
                );
                plain(Tensor::new([m, n], out)?)
            }
            OpKind::Conv2d { stride, padding } => {
                let (x, w) = (val(0), val(1));
                let geo = conv_geometry(name, x.shape(), w.shape(), *stride, *padding)?;
                let (batch, cout) = (x.shape()[0], w.shape()[0]);
                check_bias(
                    name,
                    inputs.get(2).map(|&b| self.nodes[b.0].value.shape()),
                    cout,
                )?;
                let in_len = geo.channels * geo.height * geo.width;
                let out_len = cout * geo.col_cols();
                let mut out = vec![T::zero(); batch * out_len];
                let mut cols = vec![T::zero(); geo.col_rows() * geo.col_cols()];
                for b in 0..batch {
                    kernels::im2col(&geo, &x.data()[b * in_len..(b + 1) * in_len], &mut cols);
                    gemm(
                        MatRef::new(w.data(), cout, geo.col_rows()),
                        MatRef::new(&cols, geo.col_rows(), geo.col_cols()),
                        T::zero(),
                        &mut out[b * out_len..(b + 1) * out_len],
                    );
                }
                if let Some(&bias) = inputs.get(2) {
                    add_channel_bias(
                        &mut out,
                        self.nodes[bias.0].value.data(),
                        batch,
                        cout,
                        geo.col_cols(),
                    );
                }
                plain(Tensor::new([batch, cout, geo.out_h, geo.out_w], out)?)
            }
            OpKind::ConvTranspose2d { stride, padding } => {
                let (x, w) = (val(0), val(1));
                let geo = conv_transpose_geometry(name, x.shape(), w.shape(), *stride, *padding)?;
                let (batch, cin, cout) = (x.shape()[0], x.shape()[1], w.shape()[1]);
                check_bias(
                    name,
                    inputs.get(2).map(|&b| self.nodes[b.0].value.shape()),
                    cout,
                )?;
                let in_len = cin * geo.col_cols();
                let out_len = cout * geo.height * geo.width;
                let mut out = vec![T::zero(); batch * out_len];
                let mut cols = vec![T::zero(); geo.col_rows() * geo.col_cols()];
                for b in 0..batch {
                    gemm(
                        MatRef::transposed(w.data(), geo.col_rows(), cin),
                        MatRef::new(&x.data()[b * in_len..(b + 1) * in_len], cin, geo.col_cols()),
                        T::zero(),
                        &mut cols,
                    );
                    kernels::col2im_add(&geo, &cols, &mut out[b * out_len..(b + 1) * out_len]);
                }
                if let Some(&bias) = inputs.get(2) {
                    add_channel_bias(
                        &mut out,
                        self.nodes[bias.0].value.data(),
                        batch,
                        cout,
                        geo.height * geo.width,
                    );
                }
                plain(Tensor::new([batch, cout, geo.height, geo.width], out)?)
            }
            OpKind::Relu => {
                let x = val(0);
                let out = x.map(|v| if v > T::zero() { v } else { T::zero() });
                if let Some(probe) = self.kink_probe.as_mut() {
                    probe.absorb(self.nodes[inputs[0].0].value.data());
                }
                plain(out)
            }
            OpKind::GroupNorm { groups, eps } => {
                let (x, gamma, beta) = (val(0), val(1), val(2));
                let (batch, channels, spatial) = channel_layout(name, x.shape())?;
                if *groups == 0 || channels % groups != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "{name}: {groups} groups do not divide {channels} channels"
                    )));
                }
                if gamma.shape() != [channels] || beta.shape() != [channels] {
                    return Err(Error::shape(name, x.shape(), gamma.shape()));
                }
                let res = kernels::group_norm_forward(
                    x.data(),
                    gamma.data(),
                    beta.data(),
                    batch,
                    channels,
                    spatial,
                    *groups,
                    T::from_f64_lossy(*eps),
                );
                Ok((
                    Tensor::new(x.shape().to_vec(), res.output)?,
                    Saved::GroupNorm {
                        normalized: res.normalized,
                        inv_std: res.inv_std,
                    },
                ))
            }
            OpKind::ChannelMask => {
                let (x, mask) = (val(0), val(1));
                let (_, channels, spatial) = channel_layout(name, x.shape())?;
                if mask.shape() != [channels] {
                    return Err(Error::shape(name, x.shape(), mask.shape()));
                }
                let m = mask.data();
                let data = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v * m[(i / spatial) % channels])
                    .collect();
                plain(Tensor::new(x.shape().to_vec(), data)?)
            }
            OpKind::MeanSquaredError { keep_dims } => {
                let (a, b) = (val(0), val(1));
                let shape = kernels::broadcast_shape(a.shape(), b.shape());
                if shape.as_deref() != Some(a.shape()) || *keep_dims > a.shape().len() {
                    return Err(Error::shape(name, a.shape(), b.shape()));
                }
                let out_shape = a.shape()[..*keep_dims].to_vec();
                let inner: usize = a.shape()[*keep_dims..].iter().product();
                let ib = kernels::broadcast_index(a.shape(), b.shape());
                let denom = T::from_usize(inner).unwrap();
                let data = a
                    .data()
                    .chunks(inner)
                    .enumerate()
                    .map(|(r, chunk)| {
                        chunk
                            .iter()
                            .enumerate()
                            .map(|(i, &p)| {
                                let d = p - b.data()[ib[r * inner + i]];
                                d * d
                            })
                            .sum::<T>()
                            / denom
                    })
                    .collect();
                plain(Tensor::new(out_shape, data)?)
            }
            OpKind::Mean => {
                let x = val(0);
                let n = T::from_usize(x.numel()).unwrap();
                plain(Tensor::scalar(x.data().iter().copied().sum::<T>() / n))
            }
            OpKind::Concat { axis } => {
                let first = val(0).shape().to_vec();
                if *axis >= first.len() {
                    return Err(Error::InvalidArgument(format!(
                        "{name}: axis {axis} out of range for {first:?}"
                    )));
                }
                let mut total = 0;
                for &v in inputs {
                    let s = self.nodes[v.0].value.shape();
                    if s.len() != first.len()
                        || s[..*axis] != first[..*axis]
                        || s[axis + 1..] != first[axis + 1..]
                    {
                        return Err(Error::shape(name, &first, s));
                    }
                    total += s[*axis];
                }
                let outer: usize = first[..*axis].iter().product();
                let mut data =
                    Vec::with_capacity(outer * total * first[axis + 1..].iter().product::<usize>());
                for o in 0..outer {
                    for &v in inputs {
                        let t = &self.nodes[v.0].value;
                        let chunk = t.numel() / outer;
                        data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                    }
                }
                let mut shape = first;
                shape[*axis] = total;
                plain(Tensor::new(shape, data)?)
            }
            OpKind::Reshape(shape) => {
                let x = val(0);
                plain(x.clone().reshape(shape.clone())?)
            }
            OpKind::Select(index) => {
                let x = val(0);
                let s = x.shape();
                if s.len() < 2 || index.len() != s[0] {
                    return Err(Error::InvalidArgument(format!(
                        "{name}: {} indices for shape {s:?}",
                        index.len()
                    )));
                }
                let (rows, options) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let mut data = Vec::with_capacity(rows * inner);
                for (r, &j) in index.iter().enumerate() {
                    if j >= options {
                        return Err(Error::InvalidArgument(format!(
                            "{name}: index {j} out of range for {options} options"
                        )));
                    }
                    let start = (r * options + j) * inner;
                    data.extend_from_slice(&x.data()[start..start + inner]);
                }
                let mut shape = vec![rows];
                shape.extend_from_slice(&s[2..]);
                plain(Tensor::new(shape, data)?)
            }
        }
    }

    /// Differentiates the scalar `loss` with respect to every tracked leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar target, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.tracked {
            return Err(Error::InvalidArgument(
                "backward target does not depend on any parameter".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(op) = &node.op else { continue };
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(op, node, &g, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let n = &self.nodes[i];
                match (g, n.op.is_none() && n.tracked) {
                    (Some(g), true) => {
                        Some(Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(
        &self,
        op: &OpKind,
        node: &Node<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let inputs = &node.inputs;
        let tracked = |i: usize| self.nodes[inputs[i].0].tracked;
        let val = |i: usize| &self.nodes[inputs[i].0].value;
        let out_shape = node.value.shape();
        match op {
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                for side in 0..2 {
                    if !tracked(side) {
                        continue;
                    }
                    let this = val(side);
                    let other = val(1 - side);
                    if this.shape() == out_shape && other.shape() == out_shape {
                        let acc = match op {
                            OpKind::Add => g.to_vec(),
                            OpKind::Sub if side == 1 => g.iter().map(|&v| -v).collect(),
                            OpKind::Sub => g.to_vec(),
                            _ => g.iter().zip(other.data()).map(|(&gv, &o)| gv * o).collect(),
                        };
                        accumulate(grads, inputs[side], acc);
                        continue;
                    }
                    let mut acc = vec![T::zero(); this.numel()];
                    let idx_this = kernels::broadcast_index(out_shape, this.shape());
                    match op {
                        OpKind::Add => idx_this
                            .iter()
                            .zip(g)
                            .for_each(|(&i, &gv)| acc[i] = acc[i] + gv),
                        OpKind::Sub => {
                            let sign = if side == 0 { T::one() } else { -T::one() };
                            idx_this
                                .iter()
                                .zip(g)
                                .for_each(|(&i, &gv)| acc[i] = acc[i] + sign * gv)
                        }
                        _ => {
                            let idx_other = kernels::broadcast_index(out_shape, other.shape());
                            for ((&i, &j), &gv) in idx_this.iter().zip(&idx_other).zip(g) {
                                acc[i] = acc[i] + gv * other.data()[j];
                            }
                        }
                    }
                    accumulate(grads, inputs[side], acc);
                }
            }
            OpKind::Scale(factor) => {
                let k = T::from_f64_lossy(*factor);
                accumulate(grads, inputs[0], g.iter().map(|&v| v * k).collect());
            }
            OpKind::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                if tracked(0) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(
                        MatRef::new(g, m, n),
                        MatRef::transposed(b.data(), n, k),
                        T::zero(),
                        &mut ga,
                    );
                    accumulate(grads, inputs[0], ga);
                }
                if tracked(1) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(
                        MatRef::transposed(a.data(), k, m),
                        MatRef::new(g, m, n),
                        T::zero(),
                        &mut gb,
                    );
                    accumulate(grads, inputs[1], gb);
                }
            }
            OpKind::Conv2d { stride, padding } => {
                let (x, w) = (val(0), val(1));
                let geo = conv_geometry("conv2d", x.shape(), w.shape(), *stride, *padding)?;
                let (batch, cout) = (x.shape()[0], w.shape()[0]);
                let in_len = geo.channels * geo.height * geo.width;
                let out_len = cout * geo.col_cols();
                let mut cols = vec![T::zero(); geo.col_rows() * geo.col_cols()];
                let mut gx = tracked(0).then(|| vec![T::zero(); x.numel()]);
                let mut gw = tracked(1).then(|| vec![T::zero(); w.numel()]);
                for b in 0..batch {
                    let gout = &g[b * out_len..(b + 1) * out_len];
                    if let Some(gw) = gw.as_mut() {
                        kernels::im2col(&geo, &x.data()[b * in_len..(b + 1) * in_len], &mut cols);
                        gemm(
                            MatRef::new(gout, cout, geo.col_cols()),
                            MatRef::transposed(&cols, geo.col_cols(), geo.col_rows()),
                            T::one(),
                            gw,
                        );
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm(
                            MatRef::transposed(w.data(), geo.col_rows(), cout),
                            MatRef::new(gout, cout, geo.col_cols()),
                            T::zero(),
                            &mut cols,
                        );
                        kernels::col2im_add(&geo, &cols, &mut gx[b * in_len..(b + 1) * in_len]);
                    }
                }
                if let Some(gx) = gx {
                    accumulate(grads, inputs[0], gx);
                }
                if let Some(gw) = gw {
                    accumulate(grads, inputs[1], gw);
                }
                if inputs.len() == 3 && tracked(2) {
                    accumulate(
                        grads,
                        inputs[2],
                        channel_sums(g, batch, cout, geo.col_cols()),
                    );
                }
            }
            OpKind::ConvTranspose2d { stride, padding } => {
                let (x, w) = (val(0), val(1));
                let geo = conv_transpose_geometry(
                    "conv-transpose2d",
                    x.shape(),
                    w.shape(),
                    *stride,
                    *padding,
                )?;
                let (batch, cin, cout) = (x.shape()[0], x.shape()[1], w.shape()[1]);
                let in_len = cin * geo.col_cols();
                let out_len = cout * geo.height * geo.width;
                let mut cols = vec![T::zero(); geo.col_rows() * geo.col_cols()];
                let mut gx = tracked(0).then(|| vec![T::zero(); x.numel()]);
                let mut gw = tracked(1).then(|| vec![T::zero(); w.numel()]);
                for b in 0..batch {
                    kernels::im2col(&geo, &g[b * out_len..(b + 1) * out_len], &mut cols);
                    if let Some(gx) = gx.as_mut() {
                        gemm(
                            MatRef::new(w.data(), cin, geo.col_rows()),
                            MatRef::new(&cols, geo.col_rows(), geo.col_cols()),
                            T::zero(),
                            &mut gx[b * in_len..(b + 1) * in_len],
                        );
                    }
                    if let Some(gw) = gw.as_mut() {
                        gemm(
                            MatRef::new(
                                &x.data()[b * in_len..(b + 1) * in_len],
                                cin,
                                geo.col_cols(),
                            ),
                            MatRef::transposed(&cols, geo.col_cols(), geo.col_rows()),
                            T::one(),
                            gw,
                        );
                    }
                }
                if let Some(gx) = gx {
                    accumulate(grads, inputs[0], gx);
                }
                if let Some(gw) = gw {
                    accumulate(grads, inputs[1], gw);
                }
                if inputs.len() == 3 && tracked(2) {
                    accumulate(
                        grads,
                        inputs[2],
                        channel_sums(g, batch, cout, geo.height * geo.width),
                    );
                }
            }
            OpKind::Relu => {
                let x = val(0);
                let gx = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(grads, inputs[0], gx);
            }
            OpKind::GroupNorm { groups, .. } => {
                let Saved::GroupNorm {
                    normalized,
                    inv_std,
                } = &node.saved
                else {
                    unreachable!("group norm saves its statistics")
                };
                let (batch, channels, spatial) = channel_layout("group-normalization", out_shape)?;
                let (gx, ggamma, gbeta) = kernels::group_norm_backward(
                    g,
                    normalized,
                    inv_std,
                    val(1).data(),
                    batch,
                    channels,
                    spatial,
                    *groups,
                );
                if tracked(0) {
                    accumulate(grads, inputs[0], gx);
                }
                if tracked(1) {
                    accumulate(grads, inputs[1], ggamma);
                }
                if tracked(2) {
                    accumulate(grads, inputs[2], gbeta);
                }
            }
            OpKind::ChannelMask => {
                let (x, mask) = (val(0), val(1));
                let (_, channels, spatial) = channel_layout("channel-mask-multiply", x.shape())?;
                let m = mask.data();
                if tracked(0) {
                    let gx = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * m[(i / spatial) % channels])
                        .collect();
                    accumulate(grads, inputs[0], gx);
                }
                if tracked(1) {
                    let mut gm = vec![T::zero(); channels];
                    for (i, (&gv, &xv)) in g.iter().zip(x.data()).enumerate() {
                        let c = (i / spatial) % channels;
                        gm[c] = gm[c] + gv * xv;
                    }
                    accumulate(grads, inputs[1], gm);
                }
            }
            OpKind::MeanSquaredError { keep_dims } => {
                let (a, b) = (val(0), val(1));
                let inner: usize = a.shape()[*keep_dims..].iter().product();
                let ib = kernels::broadcast_index(a.shape(), b.shape());
                let two = T::from_f64_lossy(2.0) / T::from_usize(inner).unwrap();
                let ga: Vec<T> = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| two * g[i / inner] * (p - b.data()[ib[i]]))
                    .collect();
                if tracked(1) {
                    let mut gb = vec![T::zero(); b.numel()];
                    for (i, &v) in ga.iter().enumerate() {
                        gb[ib[i]] = gb[ib[i]] - v;
                    }
                    accumulate(grads, inputs[1], gb);
                }
                if tracked(0) {
                    accumulate(grads, inputs[0], ga);
                }
            }
            OpKind::Mean => {
                let x = val(0);
                let share = g[0] / T::from_usize(x.numel()).unwrap();
                accumulate(grads, inputs[0], vec![share; x.numel()]);
            }
            OpKind::Concat { axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let row = g.len() / outer;
                let mut offset = 0;
                for (i, &input) in inputs.iter().enumerate() {
                    let t = val(i);
                    let chunk = t.numel() / outer;
                    if tracked(i) {
                        let mut gi = Vec::with_capacity(t.numel());
                        for o in 0..outer {
                            gi.extend_from_slice(&g[o * row + offset..o * row + offset + chunk]);
                        }
                        accumulate(grads, input, gi);
                    }
                    offset += chunk;
                }
            }
            OpKind::Reshape(_) => accumulate(grads, inputs[0], g.to_vec()),
            OpKind::Select(index) => {
                let x = val(0);
                let options = x.shape()[1];
                let inner: usize = x.shape()[2..].iter().product();
                let mut gx = vec![T::zero(); x.numel()];
                for (r, &j) in index.iter().enumerate() {
                    let start = (r * options + j) * inner;
                    gx[start..start + inner].copy_from_slice(&g[r * inner..(r + 1) * inner]);
                }
                accumulate(grads, inputs[0], gx);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], var: Var, delta: Vec<T>) {
    match &mut grads[var.0] {
        Some(existing) => existing
            .iter_mut()
            .zip(delta)
            .for_each(|(e, d)| *e = *e + d),
        slot => *slot = Some(delta),
    }
}

/// `(batch, channels, spatial)` for a `[B, C, ...]` tensor.
fn channel_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, shape, &[]));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn check_bias(op: &'static str, bias: Option<&[usize]>, channels: usize) -> Result<()> {
    match bias {
        Some(s) if s != [channels] => Err(Error::shape(op, s, &[channels])),
        _ => Ok(()),
    }
}

fn add_channel_bias<T: Scalar>(
    out: &mut [T],
    bias: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
) {
    for b in 0..batch {
        for c in 0..channels {
            let start = (b * channels + c) * spatial;
            out[start..start + spatial]
                .iter_mut()
                .for_each(|v| *v = *v + bias[c]);
        }
    }
}

fn channel_sums<T: Scalar>(g: &[T], batch: usize, channels: usize, spatial: usize) -> Vec<T> {
    let mut sums = vec![T::zero(); channels];
    for b in 0..batch {
        for (c, sum) in sums.iter_mut().enumerate() {
            let start = (b * channels + c) * spatial;
            *sum = *sum + g[start..start + spatial].iter().copied().sum::<T>();
        }
    }
    sums
}

fn conv_geometry(
    op: &'static str,
    x: &[usize],
    w: &[usize],
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    if x.len() != 4 || w.len() != 4 || x[1] != w[1] || stride == 0 {
        return Err(Error::shape(op, x, w));
    }
    let (h, wd) = (x[2] + 2 * padding, x[3] + 2 * padding);
    if h < w[2] || wd < w[3] {
        return Err(Error::shape(op, x, w));
    }
    Ok(ConvGeometry {
        channels: x[1],
        height: x[2],
        width: x[3],
        kernel_h: w[2],
        kernel_w: w[3],
        stride,
        padding,
        out_h: (h - w[2]) / stride + 1,
        out_w: (wd - w[3]) / stride + 1,
    })
}

/// Geometry of the convolution whose adjoint is this transposed
/// convolution: the "image" is the transposed convolution's output.
fn conv_transpose_geometry(
    op: &'static str,
    x: &[usize],
    w: &[usize],
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    if x.len() != 4 || w.len() != 4 || x[1] != w[0] || stride == 0 {
        return Err(Error::shape(op, x, w));
    }
    let full_h = (x[2] - 1) * stride + w[2];
    let full_w = (x[3] - 1) * stride + w[3];
    if full_h <= 2 * padding || full_w <= 2 * padding {
        return Err(Error::shape(op, x, w));
    }
    Ok(ConvGeometry {
        channels: w[1],
        height: full_h - 2 * padding,
        width: full_w - 2 * padding,
        kernel_h: w[2],
        kernel_w: w[3],
        stride,
        padding,
        out_h: x[2],
        out_w: x[3],
    })
}

/// Gradients of one backward pass, indexed by leaf [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `var` is not a tracked leaf or was unreachable from the loss.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros shaped like it when unreachable.
    pub fn get_or_zeros(&self, graph: &Graph<T>, var: Var) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(var).to_vec()))
    }
}
