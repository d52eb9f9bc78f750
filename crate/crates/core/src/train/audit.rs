use std::fmt::Write;

use crate::grouping::AttributeGrouping;
use crate::model::{
    attention_pair_params, count_parameters, reference_attention_overhead, ModelConfig, REFERENCE_CHANNELS,
    REFERENCE_GROUPS, REFERENCE_REDUCTION,
};

/// Parameter breakdown of `config` with `grouping`, shared versus one stack
/// per group, followed by the C = 2048, r = 16, G = 7 reference overhead.
pub fn params_audit(config: &ModelConfig, grouping: &AttributeGrouping) -> String {
    let g = grouping.num_groups();
    let k = grouping.num_attributes();
    let shared = count_parameters(config, g, k, true);
    let separate = count_parameters(config, g, k, false);
    let mut s = String::new();
    let c = config.channels();
    let _ = writeln!(s, "model: C={c} r={} G={g} K={k} bias={}", config.reduction, config.attention_bias);
    let _ = writeln!(s, "  backbone                 {:>12}", shared.backbone);
    let _ = writeln!(s, "  conv stack (one copy)    {:>12}", shared.shared_stack);
    let _ = writeln!(s, "  attention pair           {:>12}", shared.attention_pair);
    let _ = writeln!(s, "  attention total          {:>12}", shared.attention_total);
    let _ = writeln!(s, "  attention overhead (no bias) {:>8}", shared.attention_overhead_no_bias);
    let _ = writeln!(s, "  heads                    {:>12}", shared.heads);
    let _ = writeln!(s, "  total, shared stack      {:>12}", shared.total);
    let _ = writeln!(s, "  total, stack per group   {:>12}", separate.total);
    let _ = writeln!(
        s,
        "reference: C={REFERENCE_CHANNELS} r={REFERENCE_REDUCTION} G={REFERENCE_GROUPS} bias=false"
    );
    let _ = writeln!(
        s,
        "  attention pair           {:>12}",
        attention_pair_params(REFERENCE_CHANNELS, REFERENCE_REDUCTION, false)
    );
    let _ = writeln!(s, "  attention overhead       {:>12}", reference_attention_overhead());
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reports_reference_and_both_totals() {
        let text = params_audit(&ModelConfig::default(), &AttributeGrouping::default_celeba());
        assert!(text.contains("attention overhead            3670016"), "{text}");
        let shared = count_parameters(&ModelConfig::default(), 7, 40, true).total;
        let separate = count_parameters(&ModelConfig::default(), 7, 40, false).total;
        assert!(shared < separate);
        assert!(text.contains(&shared.to_string()) && text.contains(&separate.to_string()));
    }
}
