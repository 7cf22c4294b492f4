//! Analytic parameter and FLOP accounting for a model configuration.
//!
//! Conventions: one fused multiply-accumulate counts as one FLOP (the
//! convention common profilers report and reference figures use), and only
//! multiply-accumulate work is counted — convolutions, linear projections
//! and the attention score/weighting products. Top-k, gather, normalization,
//! pooling, resizing and residual adds count zero. Parameter counts cover
//! every trainable tensor, biases and norm affines included.
//!
//! Per DSSA block at an H x W x C map with a grid of S² regions,
//! T = HW/S² tokens per region, k₂ = round(λ k₁ T):
//!
//! ```text
//! params = 9C² + 44C
//!        = 3C² (qkv) + 6C² (mlp, ratio 3) + 10C (dwconv) + 26C (lce)
//!          + 4C (norms) + 4C (mlp biases)
//! flops  = 3 HW C²          qkv projections
//!        + S⁴ C             region scores
//!        + S² T (k₁ T) C    pixel scores against gathered keys
//!        + S² T k₂ C        value weighting over the survivors
//!        + 25 HW C + 9 HW C local context + position convs
//!        + 6 HW C²          mlp
//! ```

use crate::blocks::{MLP_RATIO, PPM_BINS};
use crate::net::ModelConfig;

/// Cost of one named piece of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct CostEntry {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

/// Whole-model accounting; totals equal the sum of the breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub entries: Vec<CostEntry>,
    pub params: u64,
    pub flops: u64,
}

impl CostReport {
    pub fn giga_flops(&self) -> f64 {
        self.flops as f64 / 1e9
    }

    pub fn mega_params(&self) -> f64 {
        self.params as f64 / 1e6
    }

    /// Fixed-width text table with one row per entry plus a total row.
    pub fn format_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<10} {:>12} {:>14}\n", "module", "params", "flops"));
        for e in &self.entries {
            out.push_str(&format!("{:<10} {:>12} {:>14}\n", e.name, e.params, e.flops));
        }
        out.push_str(&format!(
            "{:<10} {:>12} {:>14}\n",
            "total", self.params, self.flops
        ));
        out
    }
}

fn conv(h: usize, w: usize, cin: usize, cout: usize, k: usize, groups: usize) -> (u64, u64) {
    let weights = (cout * (cin / groups) * k * k) as u64;
    let params = weights + cout as u64;
    let flops = (h * w) as u64 * weights;
    (params, flops)
}

fn linear(tokens: usize, fin: usize, fout: usize) -> (u64, u64) {
    (
        (fin * fout + fout) as u64,
        (tokens * fin * fout) as u64,
    )
}

fn norm(c: usize) -> u64 {
    2 * c as u64
}

fn block(cfg: &ModelConfig, level: usize, h: usize, w: usize, c: usize) -> (u64, u64) {
    let s = cfg.grid_for(h, w);
    let k1 = cfg.k1_schedule[level].min(s * s);
    let tokens = (h / s) * (w / s);
    let k2 = ((cfg.lambda * (k1 * tokens) as f64 + 0.5).floor() as usize).max(1);
    let n = h * w;

    let (dw_p, dw_f) = conv(h, w, c, c, 3, c);
    let (lce_p, lce_f) = conv(h, w, c, c, 5, c);
    let qkv_p = 3 * (c * c) as u64;
    let qkv_f = 3 * (n * c * c) as u64;
    let region_f = (s * s * s * s * c) as u64;
    let pixel_f = (s * s * tokens * (k1 * tokens) * c) as u64;
    let weight_f = (s * s * tokens * k2 * c) as u64;
    let (m1_p, m1_f) = linear(n, c, MLP_RATIO * c);
    let (m2_p, m2_f) = linear(n, MLP_RATIO * c, c);

    let params = dw_p + lce_p + qkv_p + m1_p + m2_p + 2 * norm(c);
    let flops = dw_f + lce_f + qkv_f + region_f + pixel_f + weight_f + m1_f + m2_f;
    (params, flops)
}

/// Analytic accounting for one input extent; mirrors the model layer by
/// layer, including the run-time grid and k₁ clamping and the PPM bin
/// clamping on small bottlenecks.
pub fn count_cost(cfg: &ModelConfig, input_h: usize, input_w: usize) -> CostReport {
    assert!(
        input_h % 32 == 0 && input_w % 32 == 0,
        "input extents must be divisible by 32"
    );
    let ch = cfg.channels;
    let cd = cfg.decoder_width;
    let mut entries: Vec<CostEntry> = Vec::new();
    let mut push = |name: &str, p: u64, f: u64| {
        entries.push(CostEntry {
            name: name.to_string(),
            params: p,
            flops: f,
        });
    };

    // patch embedding: 3 -> C/2 at H/2, C/2 -> C at H/4, norms after each
    let mid = (ch[0] / 2).max(1);
    let (e1p, e1f) = conv(input_h / 2, input_w / 2, cfg.in_channels, mid, 3, 1);
    let (e2p, e2f) = conv(input_h / 4, input_w / 4, mid, ch[0], 3, 1);
    push("embed", e1p + e2p + norm(mid) + norm(ch[0]), e1f + e2f);

    // encoder stages at 1/4, 1/8, 1/16, 1/32
    for i in 0..4 {
        let (h, w) = (input_h >> (2 + i), input_w >> (2 + i));
        let mut p = 0;
        let mut f = 0;
        if i > 0 {
            let (mp, mf) = conv(h, w, ch[i - 1], ch[i], 3, 1);
            p += mp + norm(ch[i]);
            f += mf;
        }
        let (bp, bf) = block(cfg, i, h, w, ch[i]);
        p += cfg.depths[i] as u64 * bp;
        f += cfg.depths[i] as u64 * bf;
        push(&format!("enc{}", i + 1), p, f);
    }

    // pyramid pooling at the bottleneck
    let (bh, bw) = (input_h / 32, input_w / 32);
    {
        let mut p = 0;
        let mut f = 0;
        for bin in PPM_BINS {
            let b = bin.min(bh).min(bw);
            let (cp, cf) = conv(b, b, ch[3], cd, 1, 1);
            p += cp;
            f += cf;
        }
        let (fp, ff) = conv(bh, bw, ch[3] + PPM_BINS.len() * cd, cd, 3, 1);
        push("ppm", p + fp, f + ff);
    }

    // decoder stages 5..8 at 1/32, 1/16, 1/8, 1/4
    for i in 0..4 {
        let (h, w) = (input_h >> (5 - i), input_w >> (5 - i));
        let mut p = 0;
        let mut f = 0;
        let skip_on = match i {
            1 => cfg.skip_mask[2],
            2 => cfg.skip_mask[1],
            3 => cfg.skip_mask[0],
            _ => false,
        };
        if skip_on {
            let (sp, sf) = conv(h, w, ch[3 - i], cd, 1, 1);
            p += sp;
            f += sf;
        }
        if i == 1 {
            let (up, uf) = conv(h, w, cd, cd, 1, 1);
            p += up;
            f += uf;
        }
        let (bp, bf) = block(cfg, 3 - i, h, w, cd);
        p += cfg.depths[i] as u64 * bp;
        f += cfg.depths[i] as u64 * bf;
        push(&format!("dec{}", i + 5), p, f);
    }

    // fusion head at 1/4 plus the full-resolution classifier conv
    {
        let (h, w) = (input_h / 4, input_w / 4);
        let head_in = if cfg.mff_enabled { 4 * cd } else { cd };
        let (pp, pf) = conv(h, w, head_in, cd, 1, 1);
        let (op, of) = conv(input_h, input_w, cd, cfg.num_classes, 3, 1);
        push("head", pp + op, pf + of);
    }

    let params = entries.iter().map(|e| e.params).sum();
    let flops = entries.iter().map(|e| e.flops).sum();
    CostReport {
        entries,
        params,
        flops,
    }
}

/// Published cost of the reference configuration at 256x256, used by the
/// reporting command to print a verdict.
pub const REFERENCE_PARAMS_M: f64 = 29.25;
pub const REFERENCE_FLOPS_G: f64 = 7.15;
pub const PARAMS_TOLERANCE: f64 = 0.20;
pub const FLOPS_TOLERANCE: f64 = 0.15;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Model;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            channels: [8, 16, 32, 64],
            depths: [1, 1, 1, 1],
            decoder_width: 8,
            num_classes: 3,
            k1_schedule: [1, 4, 16, 64],
            lambda: 0.125,
            skip_mask: [true, true, true],
            mff_enabled: true,
            head_dim: 4,
            regions: 8,
            in_channels: 3,
        }
    }

    #[test]
    fn totals_equal_the_breakdown_sum() {
        let r = count_cost(&ModelConfig::default(), 256, 256);
        assert_eq!(r.params, r.entries.iter().map(|e| e.params).sum::<u64>());
        assert_eq!(r.flops, r.entries.iter().map(|e| e.flops).sum::<u64>());
    }

    #[test]
    fn analytic_params_match_the_real_model_exactly() {
        for (cfg, seed) in [
            (tiny_cfg(), 1u64),
            (
                ModelConfig {
                    skip_mask: [false, true, false],
                    mff_enabled: false,
                    ..tiny_cfg()
                },
                2,
            ),
        ] {
            let model = Model::<f32>::init(cfg.clone(), seed).unwrap();
            let report = count_cost(&cfg, 64, 64);
            assert_eq!(
                report.params,
                model.param_count() as u64,
                "analytic and actual parameter counts diverge for {cfg:?}"
            );
        }
    }

    #[test]
    fn reference_params_match_the_real_model_exactly() {
        let cfg = ModelConfig::default();
        let model = Model::<f32>::init(cfg.clone(), 3).unwrap();
        let report = count_cost(&cfg, 256, 256);
        assert_eq!(report.params, model.param_count() as u64);
    }

    #[test]
    fn block_param_formula_matches_a_hand_count() {
        // 9C² + 44C at C = 8: 576 + 352 = 928; one-block stage at any extent
        let (p, _) = super::block(&tiny_cfg(), 0, 16, 16, 8);
        assert_eq!(p, 9 * 64 + 44 * 8);
    }

    #[test]
    fn reference_config_lands_near_published_cost() {
        let r = count_cost(&ModelConfig::default(), 256, 256);
        let params_m = r.mega_params();
        let flops_g = r.giga_flops();
        assert!(
            (params_m - REFERENCE_PARAMS_M).abs() / REFERENCE_PARAMS_M <= PARAMS_TOLERANCE,
            "params {params_m:.2} M vs reference {REFERENCE_PARAMS_M} M"
        );
        assert!(
            (flops_g - REFERENCE_FLOPS_G).abs() / REFERENCE_FLOPS_G <= FLOPS_TOLERANCE,
            "flops {flops_g:.2} G vs reference {REFERENCE_FLOPS_G} G"
        );
    }

    #[test]
    fn flops_strictly_decrease_as_lambda_shrinks() {
        let mut prev = u64::MAX;
        for lambda in [0.25, 0.125, 0.0625] {
            let cfg = ModelConfig {
                lambda,
                ..ModelConfig::default()
            };
            let f = count_cost(&cfg, 256, 256).flops;
            assert!(f < prev, "lambda {lambda}: flops {f} not below {prev}");
            prev = f;
        }
    }

    #[test]
    fn wider_k1_schedule_costs_more_at_equal_lambda() {
        for lambda in [0.25, 0.125, 0.0625] {
            let narrow = count_cost(
                &ModelConfig {
                    lambda,
                    ..ModelConfig::default()
                },
                256,
                256,
            )
            .flops;
            let wide = count_cost(
                &ModelConfig {
                    lambda,
                    k1_schedule: [2, 8, 32, 64],
                    ..ModelConfig::default()
                },
                256,
                256,
            )
            .flops;
            assert!(wide > narrow, "lambda {lambda}: {wide} <= {narrow}");
        }
    }

    #[test]
    fn attention_flops_respond_to_lambda_per_the_closed_form() {
        // the λ term only touches the value weighting: Σ S²·T·Δk₂·C over
        // blocks; check the exact delta between λ = 1/4 and λ = 1/8
        let base = ModelConfig::default();
        let quarter = count_cost(
            &ModelConfig {
                lambda: 0.25,
                ..base.clone()
            },
            256,
            256,
        )
        .flops;
        let eighth = count_cost(
            &ModelConfig {
                lambda: 0.125,
                ..base.clone()
            },
            256,
            256,
        )
        .flops;
        let mut expected_delta = 0u64;
        // encoder stages
        for i in 0..4 {
            let (h, w) = (256 >> (2 + i), 256 >> (2 + i));
            let s = base.grid_for(h, w);
            let t = (h / s) * (w / s);
            let k1 = base.k1_schedule[i].min(s * s);
            let dk2 = ((0.25 * (k1 * t) as f64 + 0.5).floor() as usize).max(1)
                - ((0.125 * (k1 * t) as f64 + 0.5).floor() as usize).max(1);
            expected_delta +=
                (base.depths[i] * s * s * t * dk2 * base.channels[i]) as u64;
        }
        // decoder stages
        for i in 0..4 {
            let (h, w) = (256 >> (5 - i), 256 >> (5 - i));
            let s = base.grid_for(h, w);
            let t = (h / s) * (w / s);
            let k1 = base.k1_schedule[3 - i].min(s * s);
            let dk2 = ((0.25 * (k1 * t) as f64 + 0.5).floor() as usize).max(1)
                - ((0.125 * (k1 * t) as f64 + 0.5).floor() as usize).max(1);
            expected_delta +=
                (base.depths[i] * s * s * t * dk2 * base.decoder_width) as u64;
        }
        assert_eq!(quarter - eighth, expected_delta);
    }
}
