//! Reverse-mode gradient tape over the operator set in [`crate::ops`].
//!
//! A tape records one forward evaluation. Parameters enter as borrowed leaves
//! tied to a [`ParamSet`]; constants are owned leaves that receive no
//! gradient. [`Tape::backward`] walks the nodes in reverse and returns one
//! gradient per parameter that the forward pass touched.

use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::ops::{self, Activation};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered, named collection of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Arc<[String]>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new(entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut seen = HashMap::new();
        for (i, (name, _)) in entries.iter().enumerate() {
            if seen.insert(name.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate parameter name {name}")));
            }
        }
        let (names, tensors): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
        Ok(Self {
            names: names.into(),
            tensors,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(ParamId)
            .ok_or_else(|| Error::Lookup(format!("no parameter named {name}")))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(self.get(self.id(name)?))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Per-parameter gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    names: Arc<[String]>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Empty accumulator matching `params`.
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        Self {
            names: params.names.clone(),
            grads: params.tensors.iter().map(|t| Some(Tensor::zeros(t.shape()))).collect(),
        }
    }

    /// Gradient of a parameter the forward pass used.
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Lookup(format!("no parameter named {name}")))?;
        self.grads[idx]
            .as_ref()
            .ok_or_else(|| Error::Lookup(format!("parameter {name} was not recorded on the tape")))
    }

    pub fn by_id(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// `self += scale * other`; untouched entries of `other` are skipped.
    pub fn accumulate(&mut self, other: &Gradients<T>, scale: T) -> Result<()> {
        if self.grads.len() != other.grads.len() {
            return shape_err("gradient collections of different parameter sets");
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.add_scaled(t, scale)?,
                    None => *mine = Some(t.map(|v| v * scale)),
                }
            }
        }
        Ok(())
    }

    /// Gradient for every parameter, zero where the forward pass did not reach it.
    pub fn dense(&self, params: &ParamSet<T>) -> Vec<Tensor<T>> {
        self.grads
            .iter()
            .zip(&params.tensors)
            .map(|(g, p)| g.clone().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }
}

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Constant,
    Param(ParamId),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
    },
    Linear {
        weight: Var,
        bias: Option<Var>,
        input: Var,
    },
    Activation(Activation, Var),
    MeanPool(Var),
    Mul(Var, Var),
    ChannelScale {
        gate: Var,
        input: Var,
    },
    /// `Σ c_k · x_k` over same-shaped inputs.
    Combine(Vec<(Var, T)>),
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Focal {
        probs: Var,
        class: usize,
        weight: T,
        gamma: T,
        eps: T,
    },
    Kl {
        p: Var,
        q: Var,
        eps: T,
    },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
}

/// Records a forward pass for reverse-mode differentiation.
pub struct Tape<'a, T: Scalar> {
    params: Option<&'a ParamSet<T>>,
    nodes: Vec<Node<'a, T>>,
}

impl<'a, T: Scalar> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    /// Tape without parameters; every leaf is a constant.
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
        }
    }

    pub fn with_params(params: &'a ParamSet<T>) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sign of every ReLU input on the tape, in recording order. Two
    /// evaluations with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Activation(Activation::Relu, x) = node.op {
                out.extend(self.value(x).data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let params = self
            .params
            .ok_or_else(|| Error::Lookup("tape has no parameter set".into()))?;
        if id.0 >= params.len() {
            return Err(Error::Lookup(format!("parameter index {} out of range", id.0)));
        }
        Ok(self.push(Cow::Borrowed(params.get(id)), Op::Param(id)))
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let params = self
            .params
            .ok_or_else(|| Error::Lookup("tape has no parameter set".into()))?;
        let id = params.id(name)?;
        self.param(id)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let out = ops::conv2d_strided(
            self.value(kernel),
            bias.map(|b| self.value(b)),
            self.value(input),
            stride,
        )?;
        Ok(self.push(
            Cow::Owned(out),
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
            },
        ))
    }

    pub fn linear(&mut self, weight: Var, bias: Option<Var>, input: Var) -> Result<Var> {
        let out = ops::fully_connected(self.value(weight), bias.map(|b| self.value(b)), self.value(input))?;
        Ok(self.push(Cow::Owned(out), Op::Linear { weight, bias, input }))
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let out = ops::activation(kind, self.value(x));
        self.push(Cow::Owned(out), Op::Activation(kind, x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(Activation::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        self.activation(Activation::Softmax, x)
    }

    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::mean_pool_spatial(self.value(x))?;
        Ok(self.push(Cow::Owned(out), Op::MeanPool(x)))
    }

    /// Same-shape Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(Cow::Owned(out), Op::Mul(a, b)))
    }

    /// Channel vector `gate` broadcast over the spatial dims of `input`.
    pub fn channel_scale(&mut self, gate: Var, input: Var) -> Result<Var> {
        let out = ops::channel_scale(self.value(gate), self.value(input))?;
        Ok(self.push(Cow::Owned(out), Op::ChannelScale { gate, input }))
    }

    /// Linear combination `Σ c_k · x_k` of same-shaped values.
    pub fn combine(&mut self, terms: Vec<(Var, T)>) -> Result<Var> {
        let (first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::Shape("combine of zero terms".into()))?;
        let mut out = self.value(first.0).map(|v| v * first.1);
        for &(v, c) in rest {
            out.add_scaled(self.value(v), c)?;
        }
        Ok(self.push(Cow::Owned(out), Op::Combine(terms)))
    }

    pub fn sum_of(&mut self, vars: &[Var]) -> Result<Var> {
        self.combine(vars.iter().map(|&v| (v, T::one())).collect())
    }

    /// Elementwise multiplication by a fixed mask (already including the
    /// inverted-dropout rescale).
    pub fn dropout(&mut self, input: Var, mask: Vec<T>) -> Result<Var> {
        let x = self.value(input);
        if mask.len() != x.numel() {
            return shape_err(format!("dropout mask of {} for {} values", mask.len(), x.numel()));
        }
        let data = x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(Cow::Owned(out), Op::Dropout { input, mask }))
    }

    /// `-weight · (1 - p_t)^γ · ln(max(p_t, eps))` where `p_t = probs[class]`.
    pub fn focal(&mut self, probs: Var, class: usize, weight: T, gamma: T, eps: T) -> Result<Var> {
        let p = self.value(probs);
        if class >= p.numel() {
            return shape_err(format!("class {class} outside {} probabilities", p.numel()));
        }
        let pt = p.data()[class];
        let loss = focal_term(pt, weight, gamma, eps);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(loss)),
            Op::Focal {
                probs,
                class,
                weight,
                gamma,
                eps,
            },
        ))
    }

    /// `Σ p_n ln(p_n / max(q_n, eps))`, zero-mass terms of `p` contribute 0.
    pub fn kl(&mut self, p: Var, q: Var, eps: T) -> Result<Var> {
        let v = kl_value(self.value(p).data(), self.value(q).data(), eps)?;
        Ok(self.push(Cow::Owned(Tensor::scalar(v)), Op::Kl { p, q, eps }))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let (names, n_params) = match self.params {
            Some(p) => (p.names.clone(), p.len()),
            None => (Arc::from(Vec::<String>::new()), 0),
        };
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let mut param_grads: Vec<Option<Tensor<T>>> = vec![None; n_params];
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => accumulate(&mut param_grads[id.0], g)?,
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                } => {
                    let need_input = self.needs_grad(*input);
                    let cg = ops::conv2d_backward(
                        self.value(*kernel),
                        self.value(*input),
                        *stride,
                        &g,
                        need_input,
                    )?;
                    accumulate(&mut grads[kernel.0], cg.kernel)?;
                    if let Some(b) = bias {
                        accumulate(&mut grads[b.0], cg.bias)?;
                    }
                    if let Some(dx) = cg.input {
                        accumulate(&mut grads[input.0], dx)?;
                    }
                }
                Op::Linear { weight, bias, input } => {
                    let lg = ops::fully_connected_backward(self.value(*weight), self.value(*input), &g);
                    accumulate(&mut grads[weight.0], lg.weight)?;
                    if let Some(b) = bias {
                        accumulate(&mut grads[b.0], lg.bias)?;
                    }
                    accumulate(&mut grads[input.0], lg.input)?;
                }
                Op::Activation(kind, x) => {
                    let dx = ops::activation_backward(*kind, self.value(*x), &node.value, &g);
                    accumulate(&mut grads[x.0], dx)?;
                }
                Op::MeanPool(x) => {
                    let dx = ops::mean_pool_spatial_backward(&g, self.value(*x).shape());
                    accumulate(&mut grads[x.0], dx)?;
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |x, y| x * y)?;
                    let db = g.zip_map(self.value(*a), |x, y| x * y)?;
                    accumulate(&mut grads[a.0], da)?;
                    accumulate(&mut grads[b.0], db)?;
                }
                Op::ChannelScale { gate, input } => {
                    let (dgate, dx) = ops::channel_scale_backward(self.value(*gate), self.value(*input), &g);
                    accumulate(&mut grads[gate.0], dgate)?;
                    accumulate(&mut grads[input.0], dx)?;
                }
                Op::Combine(terms) => {
                    for &(v, c) in terms {
                        accumulate(&mut grads[v.0], g.map(|x| x * c))?;
                    }
                }
                Op::Dropout { input, mask } => {
                    let data = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                    accumulate(&mut grads[input.0], Tensor::new(g.shape().to_vec(), data)?)?;
                }
                Op::Focal {
                    probs,
                    class,
                    weight,
                    gamma,
                    eps,
                } => {
                    let p = self.value(*probs);
                    let pt = p.data()[*class];
                    let upstream = g.data()[0];
                    let mut dp = Tensor::zeros(p.shape());
                    dp.data_mut()[*class] = upstream * focal_derivative(pt, *weight, *gamma, *eps);
                    accumulate(&mut grads[probs.0], dp)?;
                }
                Op::Kl { p, q, eps } => {
                    let upstream = g.data()[0];
                    let pv = self.value(*p);
                    let qv = self.value(*q);
                    let zero = T::zero();
                    let dp = pv.zip_map(qv, |x, y| {
                        if x > zero {
                            upstream * ((x / y.max(*eps)).ln() + T::one())
                        } else {
                            zero
                        }
                    })?;
                    let dq = pv.zip_map(qv, |x, y| if y > *eps { -upstream * x / y } else { zero })?;
                    accumulate(&mut grads[p.0], dp)?;
                    accumulate(&mut grads[q.0], dq)?;
                }
            }
        }
        Ok(Gradients {
            names,
            grads: param_grads,
        })
    }

    fn needs_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Constant)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(existing) => existing.add_scaled(&g, T::one()),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

pub(crate) fn focal_term<T: Scalar>(pt: T, weight: T, gamma: T, eps: T) -> T {
    // `max` would otherwise turn a NaN probability into a zero loss
    if pt.is_nan() {
        return pt;
    }
    let modulator = if gamma == T::zero() {
        T::one()
    } else {
        (T::one() - pt).max(T::zero()).powf(gamma)
    };
    -weight * modulator * pt.max(eps).ln()
}

fn focal_derivative<T: Scalar>(pt: T, weight: T, gamma: T, eps: T) -> T {
    let one = T::one();
    let q = (one - pt).max(T::zero());
    let modulator = if gamma == T::zero() { one } else { q.powf(gamma) };
    // d/dp of ln(max(p, eps)) vanishes on the clamped side
    let dlog = if pt > eps { one / pt } else { T::zero() };
    let dmod = if gamma > T::zero() && q > T::zero() {
        -gamma * q.powf(gamma - one)
    } else {
        T::zero()
    };
    -weight * (dmod * pt.max(eps).ln() + modulator * dlog)
}

pub(crate) fn kl_value<T: Scalar>(p: &[T], q: &[T], eps: T) -> Result<T> {
    if p.len() != q.len() {
        return shape_err(format!("KL inputs of length {} and {}", p.len(), q.len()));
    }
    if p.iter().chain(q).any(|v| v.is_nan()) {
        return Ok(T::nan());
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&x, _)| x > T::zero())
        .map(|(&x, &y)| x * (x / y.max(eps)).ln())
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, t: Tensor<f64>) -> ParamSet<f64> {
        ParamSet::new(vec![(name.to_string(), t)]).unwrap()
    }

    #[test]
    fn nan_probabilities_propagate() {
        assert!(focal_term(f64::NAN, 0.25, 2.0, 1e-8).is_nan());
        assert!(kl_value(&[0.5, 0.5], &[f64::NAN, 0.5], 1e-8).unwrap().is_nan());
        assert!(kl_value(&[f64::NAN, 0.5], &[0.5, 0.5], 1e-8).unwrap().is_nan());
    }

    #[test]
    fn square_derivative() {
        let params = single("w", Tensor::scalar(3.0));
        let mut tape = Tape::with_params(&params);
        let w = tape.param_named("w").unwrap();
        let sq = tape.mul(w, w).unwrap();
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.get("w").unwrap().data(), &[6.0]);
    }

    #[test]
    fn bilinear_sum() {
        let params = ParamSet::new(vec![
            ("a".into(), Tensor::vector(vec![1.0, 2.0])),
            ("b".into(), Tensor::vector(vec![3.0, 4.0])),
        ])
        .unwrap();
        let mut tape = Tape::with_params(&params);
        let a = tape.param_named("a").unwrap();
        let b = tape.param_named("b").unwrap();
        let prod = tape.mul(a, b).unwrap();
        // sum via a ones-weighted linear layer
        let ones = tape.constant(Tensor::ones(&[1, 2]));
        let s = tape.linear(ones, None, prod).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get("a").unwrap().data(), &[3.0, 4.0]);
        assert_eq!(g.get("b").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn unrecorded_parameter_is_lookup_error() {
        let params = ParamSet::new(vec![
            ("used".into(), Tensor::scalar(2.0)),
            ("unused".into(), Tensor::scalar(5.0)),
        ])
        .unwrap();
        let mut tape = Tape::with_params(&params);
        let u = tape.param_named("used").unwrap();
        let y = tape.mul(u, u).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(matches!(g.get("unused"), Err(Error::Lookup(_))));
        assert!(matches!(g.get("missing"), Err(Error::Lookup(_))));
        assert!(matches!(tape.param_named("missing"), Err(Error::Lookup(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape: Tape<f64> = Tape::new();
        let v = tape.constant(Tensor::ones(&[2]));
        assert!(tape.backward(v).is_err());
    }

    #[test]
    fn focal_gamma_zero_is_cross_entropy() {
        let v: f64 = focal_term(0.3, 1.0, 0.0, 1e-8);
        assert!((v + 0.3f64.ln()).abs() < 1e-15);
        assert_eq!(focal_term(1.0f64, 1.0, 2.0, 1e-8), 0.0);
        // clamped log stays finite
        assert!(focal_term(0.0f64, 1.0, 2.0, 1e-8).is_finite());
    }

    #[test]
    fn duplicate_param_names_rejected() {
        let r = ParamSet::new(vec![
            ("x".into(), Tensor::<f64>::scalar(1.0)),
            ("x".into(), Tensor::scalar(2.0)),
        ]);
        assert!(r.is_err());
    }
}
