//! Parameter arithmetic for shared versus per-group convolution stacks.

use super::ModelConfig;

/// Full-scale reference case: C = 2048, r = 16, G = 7.
pub const REFERENCE_CHANNELS: usize = 2048;
pub const REFERENCE_REDUCTION: usize = 16;
pub const REFERENCE_GROUPS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub backbone: usize,
    /// One copy of the 1×1 → 3×3 → 1×1 stack.
    pub shared_stack: usize,
    /// Copies of the stack: 1 when shared, `G` otherwise.
    pub stack_copies: usize,
    /// One attention FC pair, honouring the config's bias flag.
    pub attention_pair: usize,
    pub attention_pair_no_bias: usize,
    pub attention_total: usize,
    /// `G` bias-free attention pairs.
    pub attention_overhead_no_bias: usize,
    pub heads: usize,
    pub total: usize,
}

/// Weights (and optionally biases) of one reduce/expand FC pair.
pub fn attention_pair_params(channels: usize, reduction: usize, bias: bool) -> usize {
    let hidden = channels / reduction;
    let weights = 2 * channels * hidden;
    if bias {
        weights + hidden + channels
    } else {
        weights
    }
}

pub fn shared_stack_params(channels: usize, mid: usize) -> usize {
    (channels * mid + mid) + (mid * mid * 9 + mid) + (mid * channels + channels)
}

/// `P_conv + G·P_att` when shared, `G·(P_conv + P_att)` otherwise.
pub fn counting_formula(p_conv: usize, p_att: usize, groups: usize, shared: bool) -> usize {
    if shared {
        p_conv + groups * p_att
    } else {
        groups * (p_conv + p_att)
    }
}

/// Bias-free channel-attention overhead of the reference case: 3,670,016.
pub fn reference_attention_overhead() -> usize {
    REFERENCE_GROUPS * attention_pair_params(REFERENCE_CHANNELS, REFERENCE_REDUCTION, false)
}

pub fn count_parameters(config: &ModelConfig, groups: usize, attributes: usize, shared: bool) -> ParamCount {
    let k = config.backbone_kernel;
    let mut in_c = config.input[0];
    let mut backbone = 0;
    for &w in &config.backbone_widths {
        backbone += w * in_c * k * k + w;
        in_c = w;
    }
    let c = config.channels();
    let shared_stack = shared_stack_params(c, config.bottleneck_width());
    let stack_copies = if shared { 1 } else { groups };
    let attention_pair = attention_pair_params(c, config.reduction, config.attention_bias);
    let attention_pair_no_bias = attention_pair_params(c, config.reduction, false);
    let attention_total = groups * attention_pair;
    let heads = attributes * (2 * c + 2);
    ParamCount {
        backbone,
        shared_stack,
        stack_copies,
        attention_pair,
        attention_pair_no_bias,
        attention_total,
        attention_overhead_no_bias: groups * attention_pair_no_bias,
        heads,
        total: backbone + counting_formula(shared_stack, attention_pair, groups, shared) + heads,
    }
}
