//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node whose inputs are earlier nodes, so the recording
//! order is a topological order and the tape is acyclic by construction.

use std::borrow::Cow;
use std::collections::BTreeMap;

use super::ops::{self, ConvGeometry};
use super::scalar::{sigmoid, softplus};
use super::{NumericsError, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Relu,
    Add,
    ChannelNorm,
    GlobalAvgPool,
    Linear,
    Sigmoid,
    Sum,
    Mean,
    Mul,
    Scale,
    CosineEmbedding,
    BinaryFocal,
    GoodnessLogistic,
}

enum Op<T> {
    Leaf,
    Conv2d { geom: ConvGeometry, cols: Vec<T>, bias: bool },
    Relu,
    Add,
    ChannelNorm { xhat: Vec<T>, inv_std: Vec<T> },
    GlobalAvgPool,
    Linear,
    Sigmoid,
    Sum,
    Mean,
    Mul,
    Scale(T),
    CosineEmbedding { same: bool, cos: T, na: T, nb: T },
    BinaryFocal { sign: T, alpha_t: T, gamma: T },
    GoodnessLogistic { sign: T, margin: T },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu => OpKind::Relu,
            Op::Add => OpKind::Add,
            Op::ChannelNorm { .. } => OpKind::ChannelNorm,
            Op::GlobalAvgPool => OpKind::GlobalAvgPool,
            Op::Linear => OpKind::Linear,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Sum => OpKind::Sum,
            Op::Mean => OpKind::Mean,
            Op::Mul => OpKind::Mul,
            Op::Scale(_) => OpKind::Scale,
            Op::CosineEmbedding { .. } => OpKind::CosineEmbedding,
            Op::BinaryFocal { .. } => OpKind::BinaryFocal,
            Op::GoodnessLogistic { .. } => OpKind::GoodnessLogistic,
        }
    }
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    inputs: Vec<usize>,
    requires_grad: bool,
    param: Option<Cow<'a, str>>,
}

/// Recorded computation. Parameters are named leaves; everything else is
/// either a constant input or the output of a primitive.
pub struct Graph<'a, T: Scalar = f32> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].inputs.iter().map(|&i| Var(i)).collect()
    }

    /// Names of the parameter leaves, in recording order.
    pub fn parameter_names(&self) -> Vec<&str> {
        self.nodes.iter().filter_map(|n| n.param.as_deref()).collect()
    }

    /// Side of every non-differentiable point the recorded values sit on:
    /// the sign of each ReLU input element and of each clamped
    /// different-class cosine. Two evaluations with equal patterns lie on
    /// the same smooth piece.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match n.op {
                Op::Relu => out.extend(self.nodes[n.inputs[0]].value.data().iter().map(|&v| v > T::ZERO)),
                Op::CosineEmbedding { same: false, cos, .. } => out.push(cos > T::ZERO),
                _ => {}
            }
        }
        out
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, inputs: Vec<usize>) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Cow<'a, Tensor<T>>, requires_grad: bool, param: Option<Cow<'a, str>>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(Cow::Owned(t), false, None)
    }

    pub fn input_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.leaf(Cow::Borrowed(t), false, None)
    }

    /// Unnamed leaf that receives a gradient (see [`Gradients::wrt`]).
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.leaf(Cow::Owned(t), true, None)
    }

    pub fn param(&mut self, name: &'a str, t: &'a Tensor<T>) -> Var {
        self.leaf(Cow::Borrowed(t), true, Some(Cow::Borrowed(name)))
    }

    pub fn param_owned(&mut self, name: impl Into<String>, t: Tensor<T>) -> Var {
        self.leaf(Cow::Owned(t), true, Some(Cow::Owned(name.into())))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, padding: usize, stride: usize) -> Result<Var, NumericsError> {
        let (y, cols, geom) =
            ops::conv2d_forward_cols(self.value(x), self.value(w), self.value(b), padding, stride)?;
        Ok(self.push(Cow::Owned(y), Op::Conv2d { geom, cols, bias: true }, vec![x.0, w.0, b.0]))
    }

    /// Convolution without a bias term, for layers followed by a norm.
    pub fn conv2d_unbiased(&mut self, x: Var, w: Var, padding: usize, stride: usize) -> Result<Var, NumericsError> {
        let c_out = self.value(w).shape().first().copied().unwrap_or(0);
        let zero = Tensor::zeros(&[c_out]);
        let (y, cols, geom) = ops::conv2d_forward_cols(self.value(x), self.value(w), &zero, padding, stride)?;
        Ok(self.push(Cow::Owned(y), Op::Conv2d { geom, cols, bias: false }, vec![x.0, w.0]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu_forward(self.value(x));
        self.push(Cow::Owned(y), Op::Relu, vec![x.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b))?;
        Ok(self.push(Cow::Owned(y), Op::Add, vec![a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumericsError::Shape(format!(
                "mul: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let y = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Cow::Owned(y), Op::Mul, vec![a.0, b.0]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let y = self.value(x).map(|v| v * factor);
        self.push(Cow::Owned(y), Op::Scale(factor), vec![x.0])
    }

    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumericsError> {
        let (y, xhat, inv_std) =
            ops::channel_norm_forward(self.value(x), self.value(gamma), self.value(beta))?;
        Ok(self.push(
            Cow::Owned(y),
            Op::ChannelNorm { xhat, inv_std },
            vec![x.0, gamma.0, beta.0],
        ))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, NumericsError> {
        let y = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(Cow::Owned(y), Op::GlobalAvgPool, vec![x.0]))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
        let y = ops::linear_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(Cow::Owned(y), Op::Linear, vec![x.0, w.0, b.0]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        self.push(Cow::Owned(y), Op::Sigmoid, vec![x.0])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Sum, vec![x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::from_usize(t.numel().max(1));
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Mean, vec![x.0])
    }

    /// Contrastive cosine loss: `1 - cos` for a same-class pair and
    /// `max(0, cos)` otherwise. Norms are stabilised by
    /// [`ops::COSINE_EPS`] so a dead embedding yields a finite loss.
    pub fn cosine_embedding_loss(&mut self, a: Var, b: Var, same: bool) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 1 || ta.shape() != tb.shape() {
            return Err(NumericsError::Shape(format!(
                "cosine loss needs equal-length vectors, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (cos, na, nb) = ops::cosine_parts(ta.data(), tb.data(), T::from_f64(ops::COSINE_EPS));
        let loss = if same { T::ONE - cos } else { cos.max(T::ZERO) };
        Ok(self.push(
            Cow::Owned(Tensor::scalar(loss)),
            Op::CosineEmbedding { same, cos, na, nb },
            vec![a.0, b.0],
        ))
    }

    /// Focal loss on a single logit: `-α_t (1 - p_t)^γ ln p_t` with
    /// `p_t = σ(z)` for target 1 and `1 - σ(z)` for target 0. With
    /// `alpha_t = 1, gamma = 0` this is binary cross-entropy.
    pub fn binary_focal(&mut self, z: Var, target: bool, alpha_t: T, gamma: T) -> Result<Var, NumericsError> {
        let tz = self.value(z);
        let Some(zv) = tz.item() else {
            return Err(NumericsError::Shape(format!(
                "focal loss expects a single logit, got {:?}",
                tz.shape()
            )));
        };
        let sign = if target { T::ONE } else { -T::ONE };
        let zs = sign * zv;
        let log_pt = -softplus(-zs);
        let one_minus = sigmoid(-zs);
        let loss = -alpha_t * one_minus.powf(gamma) * log_pt;
        Ok(self.push(
            Cow::Owned(Tensor::scalar(loss)),
            Op::BinaryFocal { sign, alpha_t, gamma },
            vec![z.0],
        ))
    }

    /// Goodness objective on hidden activities `h`: with `G = Σ h²`,
    /// `-ln σ(G - θ)` for a positive target and `-ln σ(θ - G)` otherwise.
    pub fn goodness_logistic(&mut self, h: Var, theta: T, target: bool) -> Var {
        let g: T = self.value(h).data().iter().map(|&v| v * v).sum();
        let sign = if target { T::ONE } else { -T::ONE };
        let margin = sign * (g - theta);
        let loss = softplus(-margin);
        self.push(
            Cow::Owned(Tensor::scalar(loss)),
            Op::GoodnessLogistic { sign, margin },
            vec![h.0],
        )
    }

    /// Reverse pass from a scalar node. The graph is left untouched.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let need = |k: usize| self.nodes[node.inputs[k]].requires_grad;
            let val = |k: usize| self.nodes[node.inputs[k]].value.as_ref();
            let mut out: Vec<(usize, Vec<T>)> = Vec::with_capacity(3);
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { geom, cols, bias } => {
                    let (dx, dw, db) = ops::conv2d_backward(geom, cols, val(1).data(), &dy, need(0));
                    if let Some(dx) = dx {
                        out.push((0, dx));
                    }
                    out.push((1, dw));
                    if *bias {
                        out.push((2, db));
                    }
                }
                Op::Relu => {
                    let x = val(0).data();
                    out.push((
                        0,
                        dy.iter()
                            .zip(x)
                            .map(|(&g, &v)| if v > T::ZERO { g } else { T::ZERO })
                            .collect(),
                    ));
                }
                Op::Add => {
                    out.push((0, dy.clone()));
                    out.push((1, dy));
                }
                Op::Mul => {
                    let (a, b) = (val(0).data(), val(1).data());
                    out.push((0, dy.iter().zip(b).map(|(&g, &v)| g * v).collect()));
                    out.push((1, dy.iter().zip(a).map(|(&g, &v)| g * v).collect()));
                }
                Op::Scale(f) => out.push((0, dy.iter().map(|&g| g * *f).collect())),
                Op::ChannelNorm { xhat, inv_std } => {
                    let (dx, dg, db) = ops::channel_norm_backward(xhat, inv_std, val(1).data(), &dy);
                    out.push((0, dx));
                    out.push((1, dg));
                    out.push((2, db));
                }
                Op::GlobalAvgPool => {
                    let shape = val(0).shape();
                    let n = shape[1] * shape[2];
                    let inv = T::ONE / T::from_usize(n);
                    let mut dx = Vec::with_capacity(shape[0] * n);
                    for &g in &dy {
                        dx.extend(std::iter::repeat_n(g * inv, n));
                    }
                    out.push((0, dx));
                }
                Op::Linear => {
                    let x = val(0).data();
                    let w = val(1).data();
                    let d = x.len();
                    if need(0) {
                        let mut dx = vec![T::ZERO; d];
                        for (r, &g) in dy.iter().enumerate() {
                            for (j, v) in dx.iter_mut().enumerate() {
                                *v += g * w[r * d + j];
                            }
                        }
                        out.push((0, dx));
                    }
                    let mut dw = Vec::with_capacity(dy.len() * d);
                    for &g in &dy {
                        dw.extend(x.iter().map(|&v| g * v));
                    }
                    out.push((1, dw));
                    out.push((2, dy));
                }
                Op::Sigmoid => {
                    let y = node.value.data();
                    out.push((
                        0,
                        dy.iter().zip(y).map(|(&g, &s)| g * s * (T::ONE - s)).collect(),
                    ));
                }
                Op::Sum => {
                    let n = val(0).numel();
                    out.push((0, vec![dy[0]; n]));
                }
                Op::Mean => {
                    let n = val(0).numel();
                    out.push((0, vec![dy[0] / T::from_usize(n.max(1)); n]));
                }
                Op::CosineEmbedding { same, cos, na, nb } => {
                    let dl_dc = if *same {
                        -T::ONE
                    } else if *cos > T::ZERO {
                        T::ONE
                    } else {
                        T::ZERO
                    };
                    let g = dy[0] * dl_dc;
                    let (a, b) = (val(0).data(), val(1).data());
                    let inv_ab = T::ONE / (*na * *nb);
                    let ca = *cos / (*na * *na);
                    let cb = *cos / (*nb * *nb);
                    out.push((0, a.iter().zip(b).map(|(&x, &y)| g * (y * inv_ab - ca * x)).collect()));
                    out.push((1, a.iter().zip(b).map(|(&x, &y)| g * (x * inv_ab - cb * y)).collect()));
                }
                Op::BinaryFocal { sign, alpha_t, gamma } => {
                    let zs = *sign * val(0).data()[0];
                    let log_pt = -softplus(-zs);
                    let pt = sigmoid(zs);
                    let one_minus = sigmoid(-zs);
                    let d = -*alpha_t
                        * *sign
                        * (-*gamma * pt * one_minus.powf(*gamma) * log_pt
                            + one_minus.powf(*gamma + T::ONE));
                    out.push((0, vec![dy[0] * d]));
                }
                Op::GoodnessLogistic { sign, margin } => {
                    let coeff = -dy[0] * *sign * sigmoid(-*margin) * T::from_f64(2.0);
                    out.push((0, val(0).data().iter().map(|&v| coeff * v).collect()));
                }
            }
            for (k, g) in out {
                let target = node.inputs[k];
                if !self.nodes[target].requires_grad {
                    continue;
                }
                match &mut grads[target] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(g) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let mut by_node = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let data = grads[idx]
                .take()
                .unwrap_or_else(|| vec![T::ZERO; node.value.numel()]);
            let t = Tensor::new(node.value.shape().to_vec(), data)?;
            by_node.push((idx, node.param.as_ref().map(|p| p.to_string()), t));
        }
        Ok(Gradients { by_node })
    }
}

/// Gradients of every differentiable leaf.
pub struct Gradients<T: Scalar = f32> {
    by_node: Vec<(usize, Option<String>, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.iter().find(|(i, _, _)| *i == v.0).map(|(_, _, t)| t)
    }

    /// Parameter gradients keyed by name; repeated names are summed.
    pub fn into_named(self) -> BTreeMap<String, Tensor<T>> {
        let mut map: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (_, name, t) in self.by_node {
            let Some(name) = name else { continue };
            match map.get_mut(&name) {
                Some(acc) => {
                    for (a, &v) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a += v;
                    }
                }
                None => {
                    map.insert(name, t);
                }
            }
        }
        map
    }
}
