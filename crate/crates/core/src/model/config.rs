use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. Group and attribute counts come from the
/// [`AttributeGrouping`](crate::grouping::AttributeGrouping) the model is built with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input image shape `[channels, height, width]`.
    pub input: [usize; 3],
    /// Output channels of each backbone stage; the last entry is the shared
    /// feature width `C`.
    pub backbone_widths: Vec<usize>,
    pub backbone_strides: Vec<usize>,
    pub backbone_kernel: usize,
    /// Middle width of the shared 1×1 → 3×3 → 1×1 stack; `C / 4` when unset.
    pub bottleneck: Option<usize>,
    /// Channel-attention reduction ratio `r`.
    pub reduction: usize,
    /// Residual mix between fused and original group features.
    pub theta: f64,
    /// Dropout rate before each attribute head.
    pub dropout: f64,
    /// Whether the attention FC layers carry biases.
    pub attention_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input: [3, 32, 32],
            backbone_widths: vec![16, 32, 64],
            backbone_strides: vec![2, 2, 1],
            backbone_kernel: 3,
            bottleneck: None,
            reduction: 16,
            theta: 0.3,
            dropout: 0.15,
            attention_bias: true,
        }
    }
}

impl ModelConfig {
    /// Input 3×16×16, C = 32: small enough for exhaustive gradient checks.
    pub fn tiny() -> Self {
        Self {
            input: [3, 16, 16],
            backbone_widths: vec![8, 16, 32],
            backbone_strides: vec![2, 1, 1],
            ..Self::default()
        }
    }

    /// Shared feature width `C`.
    pub fn channels(&self) -> usize {
        self.backbone_widths.last().copied().unwrap_or(0)
    }

    pub fn bottleneck_width(&self) -> usize {
        self.bottleneck.unwrap_or(self.channels() / 4).max(1)
    }

    /// Width of the attention bottleneck, `C / r`.
    pub fn attention_hidden(&self) -> usize {
        self.channels() / self.reduction.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.input.contains(&0) {
            return cfg(format!("input shape {:?} has a zero dimension", self.input));
        }
        if self.backbone_widths.is_empty() || self.backbone_widths.contains(&0) {
            return cfg("backbone needs at least one stage of positive width".into());
        }
        if self.backbone_strides.len() != self.backbone_widths.len() {
            return cfg(format!(
                "{} backbone strides for {} stages",
                self.backbone_strides.len(),
                self.backbone_widths.len()
            ));
        }
        if self.backbone_strides.contains(&0) {
            return cfg("backbone strides must be positive".into());
        }
        if self.backbone_kernel.is_multiple_of(2) {
            return cfg(format!("backbone kernel {} must be odd", self.backbone_kernel));
        }
        let c = self.channels();
        if self.reduction == 0 || !c.is_multiple_of(self.reduction) {
            return cfg(format!("C = {c} is not divisible by r = {}", self.reduction));
        }
        if self.bottleneck == Some(0) {
            return cfg("bottleneck width must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return cfg(format!("theta {} outside [0, 1]", self.theta));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return cfg(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Spatial size `(H′, W′)` of the shared feature.
    pub fn feature_hw(&self) -> (usize, usize) {
        let k = self.backbone_kernel;
        let pad = k / 2;
        self.backbone_strides
            .iter()
            .fold((self.input[1], self.input[2]), |(h, w), &s| {
                ((h + 2 * pad - k) / s + 1, (w + 2 * pad - k) / s + 1)
            })
    }

    pub fn feature_shape(&self) -> [usize; 3] {
        let (h, w) = self.feature_hw();
        [self.channels(), h, w]
    }
}
