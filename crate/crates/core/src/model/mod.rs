//! Grouped multi-task attention network.
//!
//! Pipeline per image:
//!
//! 1. backbone: strided 3×3 conv + ReLU stages → shared feature `X` (`C×H′×W′`)
//! 2. weight-shared group-specific attention: `Z = mean_pool(X)`; for each group
//!    `Ψ_g = sigmoid(expand_g(relu(reduce_g(Z))))`; one shared conv stack `f`
//!    (1×1, 3×3, 1×1) gives `X′_g = Ψ_g ⊗ f(X)`
//! 3. cross-group fusion: `F_g = Σ_j X′_g ⊗ X′_j`, `X̃_g = relu(θ F_g + (1 − θ) X′_g)`
//! 4. one head per attribute: pool `X̃_{g(i)}`, dropout, FC to two logits, softmax

mod config;
mod count;

pub use config::ModelConfig;
pub use count::{
    attention_pair_params, count_parameters, counting_formula, reference_attention_overhead,
    shared_stack_params, ParamCount, REFERENCE_CHANNELS, REFERENCE_GROUPS, REFERENCE_REDUCTION,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grouping::AttributeGrouping;
use crate::scalar::Scalar;
use crate::tape::{ParamId, ParamSet, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active with masks drawn from this seed.
    Train { dropout_seed: u64 },
}

#[derive(Debug, Clone, Copy)]
struct ConvIds {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
}

#[derive(Debug, Clone, Copy)]
struct AttentionIds {
    reduce_w: ParamId,
    reduce_b: Option<ParamId>,
    expand_w: ParamId,
    expand_b: Option<ParamId>,
}

#[derive(Debug, Clone, Copy)]
struct HeadIds {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    names: Vec<(String, Vec<usize>)>,
    backbone: Vec<ConvIds>,
    shared: Vec<ConvIds>,
    attention: Vec<AttentionIds>,
    heads: Vec<HeadIds>,
}

impl Layout {
    fn build(config: &ModelConfig, groups: usize, attributes: usize) -> Self {
        let mut names = Vec::new();
        let mut add = |name: String, shape: Vec<usize>| {
            names.push((name, shape));
            ParamId(names.len() - 1)
        };
        let k = config.backbone_kernel;
        let mut in_c = config.input[0];
        let mut backbone = Vec::new();
        for (i, (&w, &s)) in config
            .backbone_widths
            .iter()
            .zip(&config.backbone_strides)
            .enumerate()
        {
            backbone.push(ConvIds {
                weight: add(format!("backbone.{i}.weight"), vec![w, in_c, k, k]),
                bias: add(format!("backbone.{i}.bias"), vec![w]),
                stride: s,
            });
            in_c = w;
        }
        let c = config.channels();
        let mid = config.bottleneck_width();
        let plan = [(c, mid, 1), (mid, mid, 3), (mid, c, 1)];
        let shared = plan
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, ks))| ConvIds {
                weight: add(format!("shared.{i}.weight"), vec![cout, cin, ks, ks]),
                bias: add(format!("shared.{i}.bias"), vec![cout]),
                stride: 1,
            })
            .collect();
        let hidden = config.attention_hidden();
        let attention = (0..groups)
            .map(|g| {
                let reduce_w = add(format!("attention.{g}.reduce.weight"), vec![hidden, c]);
                let reduce_b = config
                    .attention_bias
                    .then(|| add(format!("attention.{g}.reduce.bias"), vec![hidden]));
                let expand_w = add(format!("attention.{g}.expand.weight"), vec![c, hidden]);
                let expand_b = config
                    .attention_bias
                    .then(|| add(format!("attention.{g}.expand.bias"), vec![c]));
                AttentionIds {
                    reduce_w,
                    reduce_b,
                    expand_w,
                    expand_b,
                }
            })
            .collect();
        let heads = (0..attributes)
            .map(|i| HeadIds {
                weight: add(format!("head.{i}.weight"), vec![2, c]),
                bias: add(format!("head.{i}.bias"), vec![2]),
            })
            .collect();
        Self {
            names,
            backbone,
            shared,
            attention,
            heads,
        }
    }
}

/// Group attention FC pair, as plain tensors.
#[derive(Debug, Clone)]
pub struct GroupAttention<T> {
    pub reduce_weight: Tensor<T>,
    pub reduce_bias: Option<Tensor<T>>,
    pub expand_weight: Tensor<T>,
    pub expand_bias: Option<Tensor<T>>,
}

/// Handles to the interesting intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub shared_feature: Var,
    pub attention: Vec<Var>,
    pub group_features: Vec<Var>,
    pub fused: Vec<Var>,
    /// Spatially pooled fused feature per group (before dropout).
    pub pooled: Vec<Var>,
    /// One two-way probability vector per attribute.
    pub probs: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `[P(negative), P(positive)]` per attribute.
    pub probs: Vec<[T; 2]>,
    pub fused: Vec<Tensor<T>>,
}

/// Network architecture. Holds no weights; parameters live in a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    grouping: AttributeGrouping,
    layout: Layout,
}

impl Model {
    pub fn new(config: ModelConfig, grouping: AttributeGrouping) -> Result<Self> {
        config.validate()?;
        let layout = Layout::build(&config, grouping.num_groups(), grouping.num_attributes());
        Ok(Self {
            config,
            grouping,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn grouping(&self) -> &AttributeGrouping {
        &self.grouping
    }

    /// `(name, shape)` of every parameter, in storage order.
    pub fn param_shapes(&self) -> &[(String, Vec<usize>)] {
        &self.layout.names
    }

    /// Uniform fan-in initialisation (`±sqrt(6/fan_in)` for convolutions,
    /// `±1/sqrt(fan_in)` for FC layers), zero biases.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamSet<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = self
            .layout
            .names
            .iter()
            .map(|(name, shape)| {
                let tensor = if shape.len() == 1 {
                    Tensor::zeros(shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = if shape.len() == 4 {
                        (6.0 / fan_in as f64).sqrt()
                    } else {
                        1.0 / (fan_in as f64).sqrt()
                    };
                    let n = shape.iter().product();
                    let data = (0..n)
                        .map(|_| T::lit(rng.random_range(-bound..bound)))
                        .collect();
                    Tensor::new(shape.clone(), data).expect("layout shape")
                };
                (name.clone(), tensor)
            })
            .collect();
        ParamSet::new(entries).expect("layout names are unique")
    }

    pub fn zero_params<T: Scalar>(&self) -> ParamSet<T> {
        let entries = self
            .layout
            .names
            .iter()
            .map(|(n, s)| (n.clone(), Tensor::zeros(s)))
            .collect();
        ParamSet::new(entries).expect("layout names are unique")
    }

    /// Checks that `params` has exactly this model's names and shapes.
    pub fn check_params<T: Scalar>(&self, params: &ParamSet<T>) -> Result<()> {
        if params.len() != self.layout.names.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                self.layout.names.len(),
                params.len()
            )));
        }
        for ((name, shape), (pname, t)) in self.layout.names.iter().zip(params.iter()) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter {pname} {:?} does not match {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    fn check_image<T: Scalar>(&self, image: &Tensor<T>) -> Result<()> {
        if image.shape() != self.config.input {
            return Err(Error::Shape(format!(
                "image {:?} does not match configured input {:?}",
                image.shape(),
                self.config.input
            )));
        }
        Ok(())
    }

    fn conv_on_tape<T: Scalar>(tape: &mut Tape<'_, T>, ids: &ConvIds, x: Var) -> Result<Var> {
        let w = tape.param(ids.weight)?;
        let b = tape.param(ids.bias)?;
        tape.conv2d(x, w, Some(b), ids.stride)
    }

    pub fn backbone_on_tape<T: Scalar>(&self, tape: &mut Tape<'_, T>, image: Var) -> Result<Var> {
        self.check_image(tape.value(image))?;
        let mut x = image;
        for ids in &self.layout.backbone {
            let y = Self::conv_on_tape(tape, ids, x)?;
            x = tape.relu(y);
        }
        Ok(x)
    }

    /// Shared conv stack `f`, ReLU between the three convolutions.
    fn shared_stack_on_tape<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layout.shared.len() - 1;
        for (i, ids) in self.layout.shared.iter().enumerate() {
            h = Self::conv_on_tape(tape, ids, h)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Returns `(Ψ_g, X′_g)` for every group. `f(X)` is recorded once.
    pub fn wsgsa_on_tape<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<(Vec<Var>, Vec<Var>)> {
        let z = tape.mean_pool(x)?;
        let fx = self.shared_stack_on_tape(tape, x)?;
        let mut gates = Vec::with_capacity(self.layout.attention.len());
        let mut features = Vec::with_capacity(self.layout.attention.len());
        for ids in &self.layout.attention {
            let rw = tape.param(ids.reduce_w)?;
            let rb = ids.reduce_b.map(|b| tape.param(b)).transpose()?;
            let ew = tape.param(ids.expand_w)?;
            let eb = ids.expand_b.map(|b| tape.param(b)).transpose()?;
            let psi = attention_gate(tape, z, rw, rb, ew, eb)?;
            features.push(tape.channel_scale(psi, fx)?);
            gates.push(psi);
        }
        Ok((gates, features))
    }

    /// Per-attribute probabilities from fused group features. Returns
    /// `(pooled per group, probs per attribute)`.
    pub fn heads_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        fused: &[Var],
        mode: Mode,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        if fused.len() != self.grouping.num_groups() {
            return Err(Error::Config(format!(
                "{} group features for {} groups",
                fused.len(),
                self.grouping.num_groups()
            )));
        }
        let pooled = fused
            .iter()
            .map(|&f| tape.mean_pool(f))
            .collect::<Result<Vec<_>>>()?;
        let c = self.config.channels();
        let mut rng = match mode {
            Mode::Train { dropout_seed } if self.config.dropout > 0.0 => {
                Some(ChaCha8Rng::seed_from_u64(dropout_seed))
            }
            _ => None,
        };
        let keep = 1.0 - self.config.dropout;
        let scale = T::lit(1.0 / keep);
        let mut probs = Vec::with_capacity(self.layout.heads.len());
        for (i, ids) in self.layout.heads.iter().enumerate() {
            let g = self.grouping.group_of(i)?;
            let mut v = pooled[g];
            if let Some(rng) = rng.as_mut() {
                let mask = (0..c)
                    .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
                    .collect();
                v = tape.dropout(v, mask)?;
            }
            let w = tape.param(ids.weight)?;
            let b = tape.param(ids.bias)?;
            let logits = tape.linear(w, Some(b), v)?;
            probs.push(tape.softmax(logits));
        }
        Ok((pooled, probs))
    }

    /// Full forward pass recorded on `tape`.
    pub fn forward_on_tape<T: Scalar>(&self, tape: &mut Tape<'_, T>, image: Var, mode: Mode) -> Result<ForwardVars> {
        let shared_feature = self.backbone_on_tape(tape, image)?;
        let (attention, group_features) = self.wsgsa_on_tape(tape, shared_feature)?;
        let fused = cgff_on_tape(tape, &group_features, T::lit(self.config.theta))?;
        let (pooled, probs) = self.heads_on_tape(tape, &fused, mode)?;
        Ok(ForwardVars {
            shared_feature,
            attention,
            group_features,
            fused,
            pooled,
            probs,
        })
    }

    pub fn backbone_forward<T: Scalar>(&self, params: &ParamSet<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::with_params(params);
        let x = tape.constant(image.clone());
        let out = self.backbone_on_tape(&mut tape, x)?;
        Ok(tape.value(out).clone())
    }

    /// `X′_g` for every group given the shared feature `X`.
    pub fn wsgsa_forward<T: Scalar>(&self, params: &ParamSet<T>, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        if x.shape() != self.config.feature_shape() {
            return Err(Error::Shape(format!(
                "shared feature {:?}, expected {:?}",
                x.shape(),
                self.config.feature_shape()
            )));
        }
        let mut tape = Tape::with_params(params);
        let xv = tape.constant(x.clone());
        let (_, features) = self.wsgsa_on_tape(&mut tape, xv)?;
        Ok(features.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Attention FC pair of group `g`.
    pub fn group_attention<T: Scalar>(&self, params: &ParamSet<T>, g: usize) -> Result<GroupAttention<T>> {
        let ids = self
            .layout
            .attention
            .get(g)
            .ok_or_else(|| Error::Lookup(format!("group {g} out of range")))?;
        Ok(GroupAttention {
            reduce_weight: params.get(ids.reduce_w).clone(),
            reduce_bias: ids.reduce_b.map(|b| params.get(b).clone()),
            expand_weight: params.get(ids.expand_w).clone(),
            expand_bias: ids.expand_b.map(|b| params.get(b).clone()),
        })
    }

    pub fn predict_heads<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        fused: &[Tensor<T>],
        mode: Mode,
    ) -> Result<Vec<[T; 2]>> {
        let mut tape = Tape::with_params(params);
        let vars: Vec<Var> = fused.iter().map(|f| tape.constant(f.clone())).collect();
        let (_, probs) = self.heads_on_tape(&mut tape, &vars, mode)?;
        Ok(probs.iter().map(|&p| pair(tape.value(p))).collect())
    }

    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, image: &Tensor<T>, mode: Mode) -> Result<ForwardOutput<T>> {
        let mut tape = Tape::with_params(params);
        let x = tape.constant(image.clone());
        let vars = self.forward_on_tape(&mut tape, x, mode)?;
        Ok(ForwardOutput {
            probs: vars.probs.iter().map(|&p| pair(tape.value(p))).collect(),
            fused: vars.fused.iter().map(|&f| tape.value(f).clone()).collect(),
        })
    }

    /// Parameter count of this model (shared stack counted once).
    pub fn count(&self) -> ParamCount {
        count_parameters(
            &self.config,
            self.grouping.num_groups(),
            self.grouping.num_attributes(),
            true,
        )
    }
}

fn pair<T: Scalar>(t: &Tensor<T>) -> [T; 2] {
    [t.data()[0], t.data()[1]]
}

/// `Ψ = sigmoid(expand(relu(reduce(z))))`
pub fn attention_gate<T: Scalar>(
    tape: &mut Tape<'_, T>,
    z: Var,
    reduce_w: Var,
    reduce_b: Option<Var>,
    expand_w: Var,
    expand_b: Option<Var>,
) -> Result<Var> {
    let h = tape.linear(reduce_w, reduce_b, z)?;
    let h = tape.relu(h);
    let a = tape.linear(expand_w, expand_b, h)?;
    Ok(tape.sigmoid(a))
}

/// Group attention `Ψ_g` from the pooled feature `z`.
pub fn wsgsa_attention<T: Scalar>(z: &Tensor<T>, group: &GroupAttention<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let rw = tape.constant(group.reduce_weight.clone());
    let rb = group.reduce_bias.clone().map(|b| tape.constant(b));
    let ew = tape.constant(group.expand_weight.clone());
    let eb = group.expand_bias.clone().map(|b| tape.constant(b));
    let psi = attention_gate(&mut tape, zv, rw, rb, ew, eb)?;
    if tape.value(psi).numel() != z.numel() {
        return Err(Error::Shape(format!(
            "attention of length {} for {} channels",
            tape.value(psi).numel(),
            z.numel()
        )));
    }
    Ok(tape.value(psi).clone())
}

/// Cross-group fusion in factorised form: `F_g = X′_g ⊗ Σ_j X′_j`.
pub fn cgff_on_tape<T: Scalar>(tape: &mut Tape<'_, T>, features: &[Var], theta: T) -> Result<Vec<Var>> {
    if features.is_empty() {
        return Err(Error::Shape("cross-group fusion of zero groups".into()));
    }
    let total = tape.sum_of(features)?;
    features
        .iter()
        .map(|&xg| {
            let f = tape.mul(xg, total)?;
            let mixed = tape.combine(vec![(f, theta), (xg, T::one() - theta)])?;
            Ok(tape.relu(mixed))
        })
        .collect()
}

pub fn cgff_fuse<T: Scalar>(features: &[Tensor<T>], theta: T) -> Result<Vec<Tensor<T>>> {
    if !(theta >= T::zero() && theta <= T::one()) {
        return Err(Error::Config(format!("theta {theta} outside [0, 1]")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = features.iter().map(|f| tape.constant(f.clone())).collect();
    let fused = cgff_on_tape(&mut tape, &vars, theta)?;
    Ok(fused.iter().map(|&v| tape.value(v).clone()).collect())
}
