//! Exact parameter and FLOP accounting, broken down by component:
//! embedding, temporal operators, spatial operators, and the
//! aggregation/output stage.
//!
//! Conventions, applied consistently so grouped/ungrouped ratios are
//! convention-independent: one multiply-accumulate = 2 FLOPs, one
//! elementwise nonlinearity or add = 1 FLOP per element, softmax = 4
//! FLOPs per element (max, shift, exp, divide), layer norm = 8 FLOPs
//! per element (two statistics passes, normalize, affine). Pure data
//! movement (shuffles, transposes, slicing, masking) costs nothing.

use crate::model::{LightCtsModel, ModelConfig};
use crate::ConfigError;

pub const COMPONENT_COUNT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Embedding,
    TemporalOperators,
    SpatialOperators,
    AggregationOutput,
}

impl Component {
    pub const ALL: [Component; COMPONENT_COUNT] = [
        Component::Embedding,
        Component::TemporalOperators,
        Component::SpatialOperators,
        Component::AggregationOutput,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Embedding => "embedding",
            Component::TemporalOperators => "temporal-operators",
            Component::SpatialOperators => "spatial-operators",
            Component::AggregationOutput => "aggregation-output",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentCost {
    pub component: Component,
    pub params: u64,
    pub flops: u64,
}

/// Per-component cost table for one forward pass at the model's
/// configured input shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub components: Vec<ComponentCost>,
}

impl CostReport {
    fn from_sides(params: [u64; COMPONENT_COUNT], flops: [u64; COMPONENT_COUNT]) -> CostReport {
        CostReport {
            components: Component::ALL
                .iter()
                .zip(params.iter().zip(flops.iter()))
                .map(|(&component, (&params, &flops))| ComponentCost {
                    component,
                    params,
                    flops,
                })
                .collect(),
        }
    }

    pub fn total_params(&self) -> u64 {
        self.components.iter().map(|c| c.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.components.iter().map(|c| c.flops).sum()
    }

    /// Share of total parameters per component, in percent.
    pub fn param_percentages(&self) -> Vec<f64> {
        let total = self.total_params() as f64;
        self.components
            .iter()
            .map(|c| {
                if total == 0.0 {
                    0.0
                } else {
                    c.params as f64 / total * 100.0
                }
            })
            .collect()
    }

    /// Share of total FLOPs per component, in percent.
    pub fn flop_percentages(&self) -> Vec<f64> {
        let total = self.total_flops() as f64;
        self.components
            .iter()
            .map(|c| {
                if total == 0.0 {
                    0.0
                } else {
                    c.flops as f64 / total * 100.0
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,params,flops,param_pct,flop_pct\n");
        let pp = self.param_percentages();
        let fp = self.flop_percentages();
        for (i, c) in self.components.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{:.4},{:.4}\n",
                c.component.name(),
                c.params,
                c.flops,
                pp[i],
                fp[i]
            ));
        }
        out.push_str(&format!(
            "total,{},{},100.0000,100.0000\n",
            self.total_params(),
            self.total_flops()
        ));
        out
    }

    pub fn to_table(&self) -> String {
        let pp = self.param_percentages();
        let fp = self.flop_percentages();
        let mut out = format!(
            "{:<22} {:>12} {:>16} {:>9} {:>9}\n",
            "component", "params", "flops", "param %", "flop %"
        );
        for (i, c) in self.components.iter().enumerate() {
            out.push_str(&format!(
                "{:<22} {:>12} {:>16} {:>8.2}% {:>8.2}%\n",
                c.component.name(),
                c.params,
                c.flops,
                pp[i],
                fp[i]
            ));
        }
        out.push_str(&format!(
            "{:<22} {:>12} {:>16}\n",
            "total",
            self.total_params(),
            self.total_flops()
        ));
        out
    }
}

// ── parameter side ───────────────────────────────────────────────────

fn params_by_component(model: &LightCtsModel) -> [u64; COMPONENT_COUNT] {
    let mut sums = [0u64; COMPONENT_COUNT];
    model.embedding.visit(&mut |t| sums[0] += t.numel() as u64);
    model.ltcn.visit(&mut |t| sums[1] += t.numel() as u64);
    model.glformer.visit(&mut |t| sums[2] += t.numel() as u64);
    model.head.visit(&mut |t| sums[3] += t.numel() as u64);
    sums
}

/// Enumerates every registered tensor, grouped by owning component.
/// The component sums always equal the total registered-parameter
/// count because the walk and registration share the same visitors.
pub fn count_params(model: &LightCtsModel) -> CostReport {
    CostReport::from_sides(params_by_component(model), [0; COMPONENT_COUNT])
}

// ── FLOP side ────────────────────────────────────────────────────────

/// 2·m·n·k for an m×k by k×n product.
pub fn matmul_flops(m: u64, n: u64, k: u64) -> u64 {
    2 * m * n * k
}

/// Weight-only FLOPs of one grouped causal convolution over `[n, p, d]`:
/// 2·n·p·k·d²/g. Biases and activations are excluded so grouped and
/// ungrouped twins differ by exactly the weight term.
pub fn conv_weight_flops(n: u64, p: u64, k: u64, d: u64, g: u64) -> u64 {
    let dg = d / g;
    debug_assert_eq!(dg * g, d);
    2 * n * p * k * dg * dg * g
}

/// Weight-only parameter count of one grouped convolution: k·d²/g.
pub fn conv_weight_params(k: u64, d: u64, g: u64) -> u64 {
    let dg = d / g;
    k * dg * dg * g
}

/// Query/key/value projection FLOPs of grouped attention over n tokens:
/// 6·n·d²/g (three projections, each 2·n·(d/g)·(d/g) per group).
pub fn mha_projection_flops(n: u64, d: u64, g: u64) -> u64 {
    let dg = d / g;
    6 * n * dg * dg * g
}

/// Query/key/value projection parameters: 3·d²/g.
pub fn mha_projection_params(d: u64, g: u64) -> u64 {
    let dg = d / g;
    3 * dg * dg * g
}

/// Attention score FLOPs over n tokens: 2·n²·(d/g/h) per head per
/// group, which sums to 2·n²·d regardless of the grouping.
pub fn attention_score_flops(n: u64, d: u64) -> u64 {
    2 * n * n * d
}

/// Weight-only FLOPs of the two feed-forward layers over n tokens; the
/// first is ungrouped, the second grouped: 2·n·d·dp + 2·n·dp·d/g.
pub fn ffn_weight_flops(n: u64, d: u64, dp: u64, g: u64) -> u64 {
    2 * n * d * dp + 2 * n * (dp / g) * (d / g) * g
}

/// Weight-only feed-forward parameters: d·dp + dp·d/g.
pub fn ffn_weight_params(d: u64, dp: u64, g: u64) -> u64 {
    d * dp + (dp / g) * (d / g) * g
}

fn embedding_flops(cfg: &ModelConfig) -> u64 {
    let (n, p, f, d) = (
        cfg.n_nodes as u64,
        cfg.history_len as u64,
        cfg.in_features as u64,
        cfg.ltcn.embed_dim as u64,
    );
    // Pointwise conv plus bias add.
    2 * n * p * f * d + n * p * d
}

fn temporal_flops(cfg: &ModelConfig) -> u64 {
    let (n, p) = (cfg.n_nodes as u64, cfg.history_len as u64);
    let d = cfg.ltcn.embed_dim as u64;
    let k = cfg.ltcn.kernel_size as u64;
    let g = cfg.ltcn.groups as u64;
    let layers = cfg.ltcn.n_layers as u64;
    let r = cfg.ltcn.se_reduction as u64;
    // Per layer: two grouped convs with biases, then tanh, sigmoid, and
    // the gating product.
    let per_layer = 2 * (conv_weight_flops(n, p, k, d, g) + n * p * d) + 3 * n * p * d;
    // Last-shot accumulation: layers-1 adds of an [n, d] slice.
    let compress = (layers - 1) * n * d;
    // SE gate: mean over nodes, two tiny matmuls, relu, sigmoid, and
    // the recalibration product.
    let se = (n * d + d) + 4 * d * (d / r) + (d / r) + d + n * d;
    layers * per_layer + compress + se
}

/// Spatial-operator FLOPs for attention over `n` tokens, repeated
/// `temporal_len` times. The assembled model always passes 1 because
/// the temporal stage compresses history to a single step; passing the
/// raw history length instead shows the cost the compression avoids.
pub fn spatial_flops(cfg: &ModelConfig, temporal_len: u64) -> u64 {
    let n = cfg.n_nodes as u64;
    let d = cfg.glformer.embed_dim as u64;
    let gm = cfg.glformer.mha_groups as u64;
    let gf = cfg.glformer.ffn_groups as u64;
    let dp = cfg.glformer.hidden_dim as u64;
    let h = cfg.glformer.heads as u64;
    let blocks = cfg.glformer.n_blocks as u64;
    let pe = n * d;
    let mha = mha_projection_flops(n, d, gm)
        + attention_score_flops(n, d)      // q·kᵀ over all heads and groups
        + 5 * n * n * h * gm               // scale (1) + softmax (4) per score entry
        + 2 * n * n * d; // attention-weighted sum of values
    let ffn = 2 * n * d * dp + n * dp      // first layer + bias
        + n * dp                           // relu
        + 2 * n * (dp / gf) * (d / gf) * gf + n * d; // grouped second layer + bias
    let per_block = mha + ffn + 2 * n * d + 2 * 8 * n * d; // residuals + two layer norms
    temporal_len * (pe + blocks * per_block)
}

fn aggregation_flops(cfg: &ModelConfig) -> u64 {
    let n = cfg.n_nodes as u64;
    let d = cfg.ltcn.embed_dim as u64;
    let dh = cfg.head_hidden as u64;
    let l = cfg.out_len() as u64;
    // Fusion add, then linear / bias / relu / linear / bias.
    n * d + 2 * n * d * dh + n * dh + n * dh + 2 * n * dh * l + n * l
}

fn flops_by_component(cfg: &ModelConfig) -> [u64; COMPONENT_COUNT] {
    [
        embedding_flops(cfg),
        temporal_flops(cfg),
        spatial_flops(cfg, 1),
        aggregation_flops(cfg),
    ]
}

/// Analytic FLOPs of one forward pass at the configured input shape,
/// grouped by component.
pub fn count_flops(model: &LightCtsModel) -> CostReport {
    CostReport::from_sides([0; COMPONENT_COUNT], flops_by_component(model.config()))
}

/// Parameters and FLOPs together.
pub fn profile(model: &LightCtsModel) -> CostReport {
    CostReport::from_sides(
        params_by_component(model),
        flops_by_component(model.config()),
    )
}

// ── grouped/ungrouped twins ──────────────────────────────────────────

/// A grouped operator's count next to its ungrouped twin at the same
/// shapes. Ratios are asserted by cross-multiplication so they hold
/// exactly in integer arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TwinCounts {
    pub grouped: u64,
    pub ungrouped: u64,
}

impl TwinCounts {
    /// True when grouped / ungrouped == num / den exactly.
    pub fn ratio_is(&self, num: u64, den: u64) -> bool {
        self.grouped * den == self.ungrouped * num
    }
}

/// Weight-only FLOP twins for one temporal conv layer; ratio 1/G.
pub fn tcn_weight_twins(cfg: &ModelConfig) -> TwinCounts {
    let (n, p) = (cfg.n_nodes as u64, cfg.history_len as u64);
    let (k, d, g) = (
        cfg.ltcn.kernel_size as u64,
        cfg.ltcn.embed_dim as u64,
        cfg.ltcn.groups as u64,
    );
    TwinCounts {
        grouped: conv_weight_flops(n, p, k, d, g),
        ungrouped: conv_weight_flops(n, p, k, d, 1),
    }
}

/// Projection FLOP twins for one attention block; ratio 1/G.
pub fn mha_projection_twins(cfg: &ModelConfig) -> TwinCounts {
    let n = cfg.n_nodes as u64;
    let (d, g) = (cfg.glformer.embed_dim as u64, cfg.glformer.mha_groups as u64);
    TwinCounts {
        grouped: mha_projection_flops(n, d, g),
        ungrouped: mha_projection_flops(n, d, 1),
    }
}

/// Weight-only FLOP twins for the two feed-forward layers; the first
/// layer is shared, so the ratio is (1 + 1/G) / 2.
pub fn ffn_weight_twins(cfg: &ModelConfig) -> TwinCounts {
    let n = cfg.n_nodes as u64;
    let (d, dp, g) = (
        cfg.glformer.embed_dim as u64,
        cfg.glformer.hidden_dim as u64,
        cfg.glformer.ffn_groups as u64,
    );
    TwinCounts {
        grouped: ffn_weight_flops(n, d, dp, g),
        ungrouped: ffn_weight_flops(n, d, dp, 1),
    }
}

// ── scaling regressions ──────────────────────────────────────────────

/// Axis a scaling sweep varies, with the exponent the analytic count
/// must follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepVar {
    /// Channel width on conv weight FLOPs: slope 2.
    EmbedDim,
    /// Token count on attention score FLOPs: slope 2.
    Nodes,
    /// Window length on conv weight FLOPs: slope 1.
    HistoryLen,
    /// Temporal groups on conv weight FLOPs: slope -1.
    TcnGroups,
    /// Attention groups on projection FLOPs: slope -1.
    MhaGroups,
}

impl SweepVar {
    pub fn expected_slope(self) -> f64 {
        match self {
            SweepVar::EmbedDim | SweepVar::Nodes => 2.0,
            SweepVar::HistoryLen => 1.0,
            SweepVar::TcnGroups | SweepVar::MhaGroups => -1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepVar::EmbedDim => "embed_dim",
            SweepVar::Nodes => "n_nodes",
            SweepVar::HistoryLen => "history_len",
            SweepVar::TcnGroups => "tcn_groups",
            SweepVar::MhaGroups => "mha_groups",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingPoint {
    pub value: usize,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingResult {
    pub var: SweepVar,
    pub points: Vec<ScalingPoint>,
    /// Log-log least-squares slope of count against the swept value.
    pub slope: f64,
}

/// Evaluates the designated counter at each swept value, holding the
/// rest of `base` fixed, and regresses log(count) on log(value).
pub fn scaling_check(
    base: &ModelConfig,
    var: SweepVar,
    values: &[usize],
) -> Result<ScalingResult, ConfigError> {
    if values.len() < 3 {
        return Err(ConfigError(format!(
            "scaling sweep over {} needs at least 3 points, got {}",
            var.name(),
            values.len()
        )));
    }
    let mut points = Vec::with_capacity(values.len());
    for &value in values {
        if value == 0 {
            return Err(ConfigError(format!(
                "scaling sweep over {} includes 0",
                var.name()
            )));
        }
        let v = value as u64;
        let n = base.n_nodes as u64;
        let p = base.history_len as u64;
        let k = base.ltcn.kernel_size as u64;
        let d = base.ltcn.embed_dim as u64;
        let gt = base.ltcn.groups as u64;
        let count = match var {
            SweepVar::EmbedDim => {
                if v % gt != 0 {
                    return Err(ConfigError(format!(
                        "swept embed_dim {v} is not divisible by groups {gt}"
                    )));
                }
                conv_weight_flops(n, p, k, v, gt)
            }
            SweepVar::Nodes => attention_score_flops(v, base.glformer.embed_dim as u64),
            SweepVar::HistoryLen => conv_weight_flops(n, v, k, d, gt),
            SweepVar::TcnGroups => {
                if d % v != 0 {
                    return Err(ConfigError(format!(
                        "swept groups {v} does not divide embed_dim {d}"
                    )));
                }
                conv_weight_flops(n, p, k, d, v)
            }
            SweepVar::MhaGroups => {
                let dg = base.glformer.embed_dim as u64;
                if dg % v != 0 {
                    return Err(ConfigError(format!(
                        "swept groups {v} does not divide embed_dim {dg}"
                    )));
                }
                mha_projection_flops(n, dg, v)
            }
        };
        points.push(ScalingPoint { value, count });
    }
    let xs: Vec<f64> = points.iter().map(|p| (p.value as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| (p.count as f64).ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    Ok(ScalingResult {
        var,
        points,
        slope: num / den,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{MaskMatrix, TargetMode};
    use crate::glformer::{BlockKind, GlFormerConfig};
    use crate::ltcn::LtcnConfig;
    use crate::model::LightCtsModel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            n_nodes: 5,
            in_features: 2,
            history_len: 4,
            horizon: 3,
            mode: TargetMode::MultiStep,
            ltcn: LtcnConfig {
                n_layers: 2,
                embed_dim: 8,
                kernel_size: 2,
                dilations: vec![1, 2],
                groups: 2,
                se_reduction: 4,
            },
            glformer: GlFormerConfig {
                n_blocks: 2,
                embed_dim: 8,
                heads: 2,
                mha_groups: 2,
                ffn_groups: 2,
                hidden_dim: 16,
                pattern: vec![BlockKind::Global, BlockKind::Local],
            },
            head_hidden: 8,
        }
    }

    fn small_model() -> LightCtsModel {
        LightCtsModel::init(
            small_config(),
            Some(MaskMatrix::all_true(5)),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap()
    }

    #[test]
    fn matmul_convention() {
        assert_eq!(matmul_flops(3, 2, 4), 48);
    }

    #[test]
    fn dense_layer_parameter_example() {
        // A 3 -> 2 linear map with bias holds 3*2 + 2 = 8 parameters;
        // the output head's second layer realizes exactly that shape.
        let mut cfg = small_config();
        cfg.head_hidden = 3;
        cfg.horizon = 2;
        let model = LightCtsModel::init(
            cfg,
            Some(MaskMatrix::all_true(5)),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert_eq!(model.head.w2.numel() + model.head.b2.numel(), 8);
    }

    #[test]
    fn component_params_sum_to_registered_total() {
        let model = small_model();
        let report = count_params(&model);
        assert_eq!(report.total_params(), model.n_params() as u64);
    }

    #[test]
    fn percentages_sum_to_one_hundred() {
        let model = small_model();
        let report = profile(&model);
        let p: f64 = report.param_percentages().iter().sum();
        let f: f64 = report.flop_percentages().iter().sum();
        assert!((p - 100.0).abs() < 0.01, "param percentages sum to {p}");
        assert!((f - 100.0).abs() < 0.01, "flop percentages sum to {f}");
    }

    #[test]
    fn doubling_history_doubles_conv_flops() {
        assert_eq!(
            conv_weight_flops(5, 24, 2, 8, 2),
            2 * conv_weight_flops(5, 12, 2, 8, 2)
        );
    }

    #[test]
    fn twin_ratios_are_exact() {
        let cfg = small_config();
        assert!(tcn_weight_twins(&cfg).ratio_is(1, cfg.ltcn.groups as u64));
        assert!(mha_projection_twins(&cfg).ratio_is(1, cfg.glformer.mha_groups as u64));
        let gf = cfg.glformer.ffn_groups as u64;
        assert!(ffn_weight_twins(&cfg).ratio_is(gf + 1, 2 * gf));
    }

    #[test]
    fn scaling_needs_three_points() {
        let cfg = small_config();
        let err = scaling_check(&cfg, SweepVar::EmbedDim, &[16, 32]).unwrap_err();
        assert!(err.0.contains("at least 3"), "got: {err}");
    }

    #[test]
    fn scaling_slopes_match_expectations() {
        let cfg = small_config();
        for (var, values) in [
            (SweepVar::EmbedDim, vec![16usize, 32, 64]),
            (SweepVar::Nodes, vec![10, 20, 40, 80]),
            (SweepVar::HistoryLen, vec![6, 12, 24]),
            (SweepVar::TcnGroups, vec![1, 2, 4]),
            (SweepVar::MhaGroups, vec![1, 2, 4]),
        ] {
            let res = scaling_check(&cfg, var, &values).unwrap();
            let want = var.expected_slope();
            assert!(
                (res.slope - want).abs() < 1e-9,
                "{}: slope {} want {want}",
                var.name(),
                res.slope
            );
        }
    }

    #[test]
    fn tcn_group_sweep_ratios() {
        // FLOPs at G in {1, 2, 4} stand in ratio 1 : 1/2 : 1/4.
        let f1 = conv_weight_flops(5, 12, 2, 16, 1);
        let f2 = conv_weight_flops(5, 12, 2, 16, 2);
        let f4 = conv_weight_flops(5, 12, 2, 16, 4);
        assert_eq!(f1, 2 * f2);
        assert_eq!(f1, 4 * f4);
    }

    #[test]
    fn spatial_flops_scale_exactly_with_temporal_len() {
        let cfg = small_config();
        let once = spatial_flops(&cfg, 1);
        for p in [2u64, 7, 12] {
            assert_eq!(spatial_flops(&cfg, p), p * once);
        }
    }

    #[test]
    fn csv_lists_components_and_total() {
        let report = profile(&small_model());
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "component,params,flops,param_pct,flop_pct");
        for c in Component::ALL {
            assert!(
                lines.next().unwrap().starts_with(c.name()),
                "row order should follow Component::ALL"
            );
        }
        assert!(lines.next().unwrap().starts_with("total,"));
    }
}
