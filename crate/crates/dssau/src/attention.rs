//! Dual sparse selection attention.
//!
//! The mechanism keeps two nested selections per query. The feature map is
//! split into an S x S grid of regions; region-level scores (means of the
//! pixel tokens) route each region to its top-k₁ most relevant regions, whose
//! pixel tokens are gathered into per-region key/value sets. Each pixel-level
//! query then scores the gathered keys and keeps only its top-k₂, softmaxes
//! those survivors and takes the weighted sum of the matching values. A 5x5
//! depth-wise convolution of the value map (local context enhancement) is
//! added to the attention output.
//!
//! Region routing is shared across heads; pixel-level selection and the
//! weighted sum run per head. Pixel-level logits are scaled by
//! 1/sqrt(head_dim) so the dense limit (k₁ = S², λ = 1) reproduces standard
//! multi-head attention exactly; region scores stay unscaled since only
//! their ordering matters.

use crate::tensor::{IndexTensor, Scalar, Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

// ── Configuration ──────────────────────────────────────────────────────────

/// Sparsity and head layout of one attention instance.
#[derive(Debug, Clone, PartialEq)]
pub struct DssaConfig {
    /// Regions per image side; the grid has `s * s` regions.
    pub s: usize,
    /// Regions kept per query region.
    pub k1: usize,
    /// Pixel-level keep fraction; k₂ = round(λ · k₁ · tokens_per_region).
    pub lambda: f64,
    pub heads: usize,
    pub head_dim: usize,
}

impl DssaConfig {
    pub fn new(
        s: usize,
        k1: usize,
        lambda: f64,
        channels: usize,
        head_dim: usize,
    ) -> Result<Self> {
        if s == 0 {
            return Err(TensorError::InvalidParam {
                op: "dssa_config",
                msg: "region grid must be non-empty".into(),
            });
        }
        if k1 == 0 || k1 > s * s {
            return Err(TensorError::InvalidParam {
                op: "dssa_config",
                msg: format!("k1={k1} out of range 1..={}", s * s),
            });
        }
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(TensorError::InvalidParam {
                op: "dssa_config",
                msg: format!("lambda={lambda} outside (0, 1]"),
            });
        }
        if head_dim == 0 || channels % head_dim != 0 {
            return Err(TensorError::InvalidParam {
                op: "dssa_config",
                msg: format!("head_dim {head_dim} does not divide channels {channels}"),
            });
        }
        Ok(DssaConfig {
            s,
            k1,
            lambda,
            heads: channels / head_dim,
            head_dim,
        })
    }

    /// Retained keys per pixel query for a region of `tokens` pixels:
    /// round-half-up of λ · k₁ · tokens, floored at 1.
    pub fn k2_for_tokens(&self, tokens: usize) -> usize {
        let exact = self.lambda * (self.k1 * tokens) as f64;
        ((exact + 0.5).floor() as usize).max(1)
    }
}

// ── Parameters ─────────────────────────────────────────────────────────────

/// Projection weights and the local context enhancement convolution.
pub struct DssaParams<T: Scalar> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    /// Depth-wise 5x5 kernel, (C, 1, 5, 5).
    pub lce_w: Tensor<T>,
    pub lce_b: Tensor<T>,
}

impl<T: Scalar> DssaParams<T> {
    pub fn init<R: rand::Rng>(channels: usize, rng: &mut R) -> Self {
        let std = 1.0 / (channels as f64).sqrt();
        DssaParams {
            wq: Tensor::randn(&[channels, channels], std, rng).with_grad(),
            wk: Tensor::randn(&[channels, channels], std, rng).with_grad(),
            wv: Tensor::randn(&[channels, channels], std, rng).with_grad(),
            lce_w: Tensor::randn(&[channels, 1, 5, 5], (2.0 / 25.0_f64).sqrt(), rng).with_grad(),
            lce_b: Tensor::zeros(&[channels]).with_grad(),
        }
    }

    pub fn zeros(channels: usize) -> Self {
        DssaParams {
            wq: Tensor::zeros(&[channels, channels]).with_grad(),
            wk: Tensor::zeros(&[channels, channels]).with_grad(),
            wv: Tensor::zeros(&[channels, channels]).with_grad(),
            lce_w: Tensor::zeros(&[channels, 1, 5, 5]).with_grad(),
            lce_b: Tensor::zeros(&[channels]).with_grad(),
        }
    }

    pub fn parameters(&self) -> Vec<Tensor<T>> {
        vec![
            self.wq.clone(),
            self.wk.clone(),
            self.wv.clone(),
            self.lce_w.clone(),
            self.lce_b.clone(),
        ]
    }

    pub fn named_parameters(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        vec![
            (format!("{prefix}.wq"), self.wq.clone()),
            (format!("{prefix}.wk"), self.wk.clone()),
            (format!("{prefix}.wv"), self.wv.clone()),
            (format!("{prefix}.lce.weight"), self.lce_w.clone()),
            (format!("{prefix}.lce.bias"), self.lce_b.clone()),
        ]
    }
}

// ── Diagnostics ────────────────────────────────────────────────────────────

/// Routing decisions and sparsity accounting captured by one forward pass.
/// All tensors are detached copies; counters are per batch element and per
/// head.
pub struct AttentionTrace<T: Scalar> {
    /// Region-to-region scores, (B, S², S²).
    pub region_scores: Tensor<T>,
    /// Top-k₁ region indices per query region, (B, S², k₁), descending.
    pub region_indices: IndexTensor,
    /// Top-k₂ gathered-key indices per pixel query, (B, heads, S², T, k₂).
    pub pixel_indices: IndexTensor,
    /// Post-softmax weights over each query's k₂ survivors, same shape.
    pub pixel_weights: Tensor<T>,
    /// Ratio of attended pixel pairs vs dense attention: k₂·S²·T / (HW)².
    pub kept_fraction: f64,
    /// Query-key score evaluations in the pixel-level stage: S²·T·(k₁·T).
    pub score_evals: u64,
    /// Score entries retained after top-k₂: S²·T·k₂.
    pub retained_pairs: u64,
}

// ── Region layout ──────────────────────────────────────────────────────────

/// (B, H, W, C) -> (B, S², HW/S², C): region-major, pixels raster-ordered
/// within their region.
pub fn to_regions<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let sh = x.shape();
    if sh.len() != 4 {
        return Err(TensorError::InvalidParam {
            op: "to_regions",
            msg: format!("expected (B, H, W, C), got {sh:?}"),
        });
    }
    let (b, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(TensorError::InvalidParam {
            op: "to_regions",
            msg: format!("spatial extents {h}x{w} not divisible into {s}x{s} regions"),
        });
    }
    let (bh, bw) = (h / s, w / s);
    x.reshape(&[b, s, bh, s, bw, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, s * s, bh * bw, c])
}

/// Inverse of [`to_regions`].
pub fn from_regions<T: Scalar>(x: &Tensor<T>, s: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let sh = x.shape();
    if sh.len() != 4 || sh[1] != s * s || sh[2] != (h / s) * (w / s) {
        return Err(TensorError::InvalidParam {
            op: "from_regions",
            msg: format!(
                "expected (B, {}, {}, C), got {sh:?}",
                s * s,
                (h / s) * (w / s)
            ),
        });
    }
    let (b, c) = (sh[0], sh[3]);
    let (bh, bw) = (h / s, w / s);
    x.reshape(&[b, s, s, bh, bw, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, h, w, c])
}

// ── The mechanism, step by step ────────────────────────────────────────────

/// Bias-free query/key/value projections of the region-tokenized input.
pub fn project_qkv<T: Scalar>(
    xr: &Tensor<T>,
    wq: &Tensor<T>,
    wk: &Tensor<T>,
    wv: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    Ok((xr.matmul(wq)?, xr.matmul(wk)?, xr.matmul(wv)?))
}

/// Region-level routing: means of the pixel tokens per region, region-score
/// matrix Aʳ = Qʳ(Kʳ)ᵀ (unscaled), and the per-row top-k₁ column indices in
/// descending score order.
pub fn region_route<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    cfg: &DssaConfig,
) -> Result<(IndexTensor, Tensor<T>)> {
    let rank = q.rank();
    if rank < 3 {
        return Err(TensorError::InvalidParam {
            op: "region_route",
            msg: format!("expected (.., S², T, C), got {:?}", q.shape()),
        });
    }
    let qr = q.mean_axis(rank - 2);
    let kr = k.mean_axis(rank - 2);
    let ar = qr.matmul(&kr.transpose_last2()?)?;
    let (_, ir) = ar.topk(cfg.k1, ar.rank() - 1)?;
    Ok((ir, ar))
}

/// Gather the pixel tokens of each query region's k₁ selected regions,
/// concatenated in routing order: (.., S², T, C) -> (.., S², k₁·T, C).
pub fn gather_regions<T: Scalar>(
    k: &Tensor<T>,
    v: &Tensor<T>,
    ir: &IndexTensor,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let gather_one = |x: &Tensor<T>| -> Result<Tensor<T>> {
        let rank = x.rank();
        if rank < 3 {
            return Err(TensorError::InvalidParam {
                op: "gather_regions",
                msg: format!("expected (.., S², T, C), got {:?}", x.shape()),
            });
        }
        let axis = rank - 3; // the region axis
        let g = x.gather(ir, axis)?; // (.., S², k₁, T, C)
        let gs = g.shape().to_vec();
        let mut out_shape = gs[..axis + 1].to_vec();
        out_shape.push(gs[axis + 1] * gs[axis + 2]);
        out_shape.push(gs[axis + 3]);
        g.reshape(&out_shape)
    };
    Ok((gather_one(k)?, gather_one(v)?))
}

/// Pixel-level selection: scores of each query against the gathered keys,
/// scaled by 1/sqrt(head_dim), then per-query top-k₂ values and indices in
/// descending order.
pub fn pixel_select<T: Scalar>(
    q: &Tensor<T>,
    kg: &Tensor<T>,
    cfg: &DssaConfig,
) -> Result<(Tensor<T>, IndexTensor)> {
    let rank = q.rank();
    if rank < 2 || kg.rank() < 2 {
        return Err(TensorError::InvalidParam {
            op: "pixel_select",
            msg: "operands must have token and channel axes".into(),
        });
    }
    let d = q.shape()[rank - 1];
    let tokens = q.shape()[rank - 2];
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let ap = q.matmul(&kg.transpose_last2()?)?.mul_scalar(scale);
    let k2 = cfg.k2_for_tokens(tokens);
    let (vals, ip) = ap.topk(k2, ap.rank() - 1)?;
    Ok((vals, ip))
}

/// Full mechanism over a (B, H, W, C) map: region routing shared across
/// heads, per-head pixel selection and value weighting, heads re-merged,
/// plus the depth-wise local context enhancement of the value map.
pub fn dssa_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &DssaParams<T>,
    cfg: &DssaConfig,
) -> Result<(Tensor<T>, AttentionTrace<T>)> {
    let sh = x.shape();
    if sh.len() != 4 {
        return Err(TensorError::InvalidParam {
            op: "dssa_forward",
            msg: format!("expected (B, H, W, C), got {sh:?}"),
        });
    }
    let (b, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
    if cfg.heads * cfg.head_dim != c {
        return Err(TensorError::InvalidParam {
            op: "dssa_forward",
            msg: format!(
                "heads {} x head_dim {} != channels {c}",
                cfg.heads, cfg.head_dim
            ),
        });
    }
    let s = cfg.s;
    let xr = to_regions(x, s)?; // validates divisibility
    let regions = s * s;
    let tokens = (h / s) * (w / s);
    let (q, k, v) = project_qkv(&xr, &params.wq, &params.wk, &params.wv)?;
    let (ir, ar) = region_route(&q, &k, cfg)?;
    let (kg, vg) = gather_regions(&k, &v, &ir)?;

    // Split heads: (B, S², T, C) -> (B, heads, S², T, dh)
    let split = |t: &Tensor<T>, tok: usize| -> Result<Tensor<T>> {
        t.reshape(&[b, regions, tok, cfg.heads, cfg.head_dim])?
            .permute(&[0, 3, 1, 2, 4])
    };
    let qh = split(&q, tokens)?;
    let kgh = split(&kg, cfg.k1 * tokens)?;
    let vgh = split(&vg, cfg.k1 * tokens)?;

    let (ap_top, ip) = pixel_select(&qh, &kgh, cfg)?;
    let k2 = cfg.k2_for_tokens(tokens);
    let weights = ap_top.softmax(ap_top.rank() - 1); // (B, heads, S², T, k₂)

    // Gather each query's selected values: (B, heads, S², T, k₂, dh)
    let vgg = vgh.gather(&ip, 3)?;
    let weighted = weights
        .reshape(&[b, cfg.heads, regions, tokens, k2, 1])?
        .mul_t(&vgg)?
        .sum_axis(4); // (B, heads, S², T, dh)

    // Merge heads and restore the spatial layout.
    let merged = weighted
        .permute(&[0, 2, 3, 1, 4])?
        .reshape(&[b, regions, tokens, c])?;
    let attn_out = from_regions(&merged, s, h, w)?;

    // Local context enhancement: depth-wise 5x5 over the value map.
    let v_spatial = from_regions(&v, s, h, w)?.permute(&[0, 3, 1, 2])?;
    let lce = v_spatial
        .conv2d(&params.lce_w, 1, 2, c)?
        .add_t(&params.lce_b.reshape(&[c, 1, 1])?)?
        .permute(&[0, 2, 3, 1])?;
    let out = attn_out.add_t(&lce)?;

    let hw = (h * w) as f64;
    let trace = AttentionTrace {
        region_scores: ar.detached(),
        region_indices: ir,
        pixel_indices: ip,
        pixel_weights: weights.detached(),
        kept_fraction: k2 as f64 * regions as f64 * tokens as f64 / (hw * hw),
        score_evals: (regions * tokens * cfg.k1 * tokens) as u64,
        retained_pairs: (regions * tokens * k2) as u64,
    };
    Ok((out, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{dense_attention, grad_check};
    use crate::testutil::rand_tensor;

    fn cfg(s: usize, k1: usize, lambda: f64, c: usize, hd: usize) -> DssaConfig {
        DssaConfig::new(s, k1, lambda, c, hd).unwrap()
    }

    #[test]
    fn config_rejects_invalid_ranges() {
        assert!(DssaConfig::new(2, 0, 0.5, 8, 4).is_err());
        assert!(DssaConfig::new(2, 5, 0.5, 8, 4).is_err());
        assert!(DssaConfig::new(2, 4, 0.0, 8, 4).is_err());
        assert!(DssaConfig::new(2, 4, 1.5, 8, 4).is_err());
        assert!(DssaConfig::new(2, 4, 0.5, 8, 3).is_err());
        let c = cfg(2, 4, 0.5, 8, 4);
        assert_eq!(c.heads, 2);
    }

    #[test]
    fn k2_rounds_half_up_and_floors_at_one() {
        let c = cfg(8, 1, 0.125, 32, 32);
        assert_eq!(c.k2_for_tokens(64), 8); // 0.125 * 64 = 8
        assert_eq!(c.k2_for_tokens(4), 1); // 0.5 rounds up
        assert_eq!(c.k2_for_tokens(1), 1); // floored
        let c = cfg(8, 3, 0.5, 32, 32);
        assert_eq!(c.k2_for_tokens(3), 5); // 4.5 rounds half-up
    }

    #[test]
    fn region_layout_roundtrip_and_ordering() {
        // 4x4 map, S=2: region r holds its 2x2 block in raster order
        let vals: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = Tensor::from_vec(vals, &[1, 4, 4, 1]).unwrap();
        let xr = to_regions(&x, 2).unwrap();
        assert_eq!(xr.shape(), &[1, 4, 4, 1]);
        assert_eq!(
            xr.to_vec(),
            vec![
                0.0, 1.0, 4.0, 5.0, // region (0,0)
                2.0, 3.0, 6.0, 7.0, // region (0,1)
                8.0, 9.0, 12.0, 13.0, // region (1,0)
                10.0, 11.0, 14.0, 15.0 // region (1,1)
            ]
        );
        let back = from_regions(&xr, 2, 4, 4).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn project_qkv_identity_and_zero() {
        let xr = rand_tensor::<f64>(&[2, 3, 4], 70);
        let eye = {
            let mut d = vec![0.0; 16];
            for i in 0..4 {
                d[i * 4 + i] = 1.0;
            }
            Tensor::from_vec(d, &[4, 4]).unwrap()
        };
        let w = rand_tensor::<f64>(&[4, 4], 71);
        let (q, k, v) = project_qkv(&xr, &eye, &w, &w).unwrap();
        assert_eq!(q.to_vec(), xr.to_vec());
        let zero = Tensor::<f64>::zeros(&[2, 3, 4]);
        let (q0, k0, v0) = project_qkv(&zero, &w, &w, &w).unwrap();
        assert!(q0.to_vec().iter().all(|&x| x == 0.0));
        assert!(k0.to_vec().iter().all(|&x| x == 0.0));
        assert!(v0.to_vec().iter().all(|&x| x == 0.0));
        let _ = (k, v);
    }

    #[test]
    fn project_qkv_matches_per_token_matvec() {
        let xr = rand_tensor::<f64>(&[3, 2, 5], 72);
        let wq = rand_tensor::<f64>(&[5, 5], 73);
        let (q, _, _) = project_qkv(&xr, &wq, &wq, &wq).unwrap();
        let xv = xr.to_vec();
        let wv = wq.to_vec();
        let qv = q.to_vec();
        for tok in 0..6 {
            for j in 0..5 {
                let mut acc = 0.0;
                for i in 0..5 {
                    acc += xv[tok * 5 + i] * wv[i * 5 + j];
                }
                assert!((qv[tok * 5 + j] - acc).abs() < 1e-12, "token {tok} col {j}");
            }
        }
    }

    #[test]
    fn region_route_full_k1_is_a_permutation_per_row() {
        let q = rand_tensor::<f64>(&[4, 3, 6], 74);
        let k = rand_tensor::<f64>(&[4, 3, 6], 75);
        let c = cfg(2, 4, 1.0, 6, 6);
        let (ir, ar) = region_route(&q, &k, &c).unwrap();
        assert_eq!(ar.shape(), &[4, 4]);
        assert_eq!(ir.shape(), &[4, 4]);
        for r in 0..4 {
            let mut seen = [false; 4];
            for &j in &ir.values()[r * 4..(r + 1) * 4] {
                assert!(!seen[j]);
                seen[j] = true;
            }
        }
    }

    #[test]
    fn region_route_prefers_a_dominant_region() {
        // make region 2's tokens identical to each query region and high-norm
        let mut qd = vec![0.0f64; 4 * 2 * 3];
        let mut kd = vec![0.0f64; 4 * 2 * 3];
        for r in 0..4 {
            for t in 0..2 {
                qd[(r * 2 + t) * 3] = 5.0;
            }
        }
        for t in 0..2 {
            kd[(2 * 2 + t) * 3] = 50.0; // region 2 aligned and large
        }
        let q = Tensor::from_vec(qd, &[4, 2, 3]).unwrap();
        let k = Tensor::from_vec(kd, &[4, 2, 3]).unwrap();
        let (ir, _) = region_route(&q, &k, &cfg(2, 2, 1.0, 3, 3)).unwrap();
        for r in 0..4 {
            assert_eq!(ir.values()[r * 2], 2, "row {r} should route to region 2 first");
        }
    }

    #[test]
    fn region_route_matches_exhaustive_argsort() {
        let q = rand_tensor::<f64>(&[4, 5, 6], 76);
        let k = rand_tensor::<f64>(&[4, 5, 6], 77);
        let c = cfg(2, 3, 1.0, 6, 6);
        let (ir, _) = region_route(&q, &k, &c).unwrap();
        // brute force: compute region means and scores independently
        let qv = q.to_vec();
        let kv = k.to_vec();
        let mean = |d: &[f64], r: usize, ch: usize| -> f64 {
            (0..5).map(|t| d[(r * 5 + t) * 6 + ch]).sum::<f64>() / 5.0
        };
        for r in 0..4 {
            let mut scores = [0.0f64; 4];
            for (j, score) in scores.iter_mut().enumerate() {
                *score = (0..6).map(|ch| mean(&qv, r, ch) * mean(&kv, j, ch)).sum();
            }
            let mut order: Vec<usize> = (0..4).collect();
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            assert_eq!(&ir.values()[r * 3..(r + 1) * 3], &order[..3], "row {r}");
        }
    }

    #[test]
    fn gather_regions_self_routing_is_identity() {
        let k = rand_tensor::<f64>(&[4, 3, 2], 78);
        let v = rand_tensor::<f64>(&[4, 3, 2], 79);
        let ir = IndexTensor::from_vec(vec![0, 1, 2, 3], &[4, 1]).unwrap();
        let (kg, vg) = gather_regions(&k, &v, &ir).unwrap();
        assert_eq!(kg.shape(), &[4, 3, 2]);
        assert_eq!(kg.to_vec(), k.to_vec());
        assert_eq!(vg.to_vec(), v.to_vec());
    }

    #[test]
    fn gather_regions_dense_limit_collects_all_tokens() {
        let k = rand_tensor::<f64>(&[4, 3, 2], 80);
        let ir = IndexTensor::from_vec(
            (0..4).flat_map(|_| 0..4).collect(),
            &[4, 4],
        )
        .unwrap();
        let (kg, _) = gather_regions(&k, &k, &ir).unwrap();
        assert_eq!(kg.shape(), &[4, 12, 2]);
        // each row is the full token set in region order
        let kv = k.to_vec();
        let gv = kg.to_vec();
        for r in 0..4 {
            assert_eq!(&gv[r * 24..(r + 1) * 24], &kv[..], "row {r}");
        }
    }

    #[test]
    fn gather_regions_matches_manual_concatenation() {
        let k = rand_tensor::<f64>(&[4, 2, 3], 81);
        let v = rand_tensor::<f64>(&[4, 2, 3], 82);
        let ir = IndexTensor::from_vec(vec![2, 0, 1, 3, 3, 1, 0, 2], &[4, 2]).unwrap();
        let (kg, _) = gather_regions(&k, &v, &ir).unwrap();
        assert_eq!(kg.shape(), &[4, 4, 3]);
        let kv = k.to_vec();
        let gv = kg.to_vec();
        for r in 0..4 {
            let mut manual = Vec::new();
            for &j in &ir.values()[r * 2..(r + 1) * 2] {
                manual.extend_from_slice(&kv[j * 6..(j + 1) * 6]);
            }
            assert_eq!(&gv[r * 12..(r + 1) * 12], &manual[..], "row {r}");
        }
    }

    #[test]
    fn pixel_select_dense_lambda_is_a_sorted_permutation() {
        let q = rand_tensor::<f64>(&[2, 4, 3], 83);
        let kg = rand_tensor::<f64>(&[2, 8, 3], 84);
        let c = cfg(2, 2, 1.0, 3, 3);
        let (ap, ip) = pixel_select(&q, &kg, &c).unwrap();
        assert_eq!(ap.shape(), &[2, 4, 8]);
        let apv = ap.to_vec();
        for lane in 0..8 {
            let row = &apv[lane * 8..(lane + 1) * 8];
            assert!(row.windows(2).all(|w| w[0] >= w[1]), "row not descending");
            let mut seen = [false; 8];
            for &j in &ip.values()[lane * 8..(lane + 1) * 8] {
                assert!(!seen[j]);
                seen[j] = true;
            }
        }
    }

    #[test]
    fn pixel_select_dominant_key_comes_first() {
        // query orthogonal to all keys but one
        let q = Tensor::from_vec(vec![1.0, 0.0], &[1, 1, 2]).unwrap();
        let mut kgd = vec![0.0; 4 * 2];
        kgd[2 * 2] = 3.0; // key 2 is the only one with overlap
        kgd[1] = 9.0;
        kgd[3 * 2 + 1] = 9.0; // others orthogonal
        let kg = Tensor::from_vec(kgd, &[1, 4, 2]).unwrap();
        let (_, ip) = pixel_select(&q, &kg, &cfg(2, 2, 0.5, 2, 2)).unwrap();
        assert_eq!(ip.values()[0], 2);
    }

    #[test]
    fn pixel_select_matches_exhaustive_per_row_sort() {
        // two regions, four tokens each
        let q = rand_tensor::<f64>(&[2, 4, 3], 85);
        let kg = rand_tensor::<f64>(&[2, 8, 3], 86);
        let c = cfg(2, 2, 0.5, 3, 3);
        let (ap, ip) = pixel_select(&q, &kg, &c).unwrap();
        let k2 = c.k2_for_tokens(4); // 0.5 * 2 * 4 = 4
        assert_eq!(k2, 4);
        let qv = q.to_vec();
        let kv = kg.to_vec();
        let scale = 1.0 / 3.0_f64.sqrt();
        for r in 0..2 {
            for t in 0..4 {
                let mut scores = [0.0f64; 8];
                for (j, score) in scores.iter_mut().enumerate() {
                    *score = (0..3)
                        .map(|ch| qv[(r * 4 + t) * 3 + ch] * kv[(r * 8 + j) * 3 + ch])
                        .sum::<f64>()
                        * scale;
                }
                let mut order: Vec<usize> = (0..8).collect();
                order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
                let lane = (r * 4 + t) * k2;
                assert_eq!(&ip.values()[lane..lane + k2], &order[..k2]);
                for kk in 0..k2 {
                    assert!((ap.to_vec()[lane + kk] - scores[order[kk]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dense_limit_matches_dense_attention_oracle() {
        // k1 = S², λ = 1, zero local-context branch: identical to dense
        // multi-head attention over the region-ordered token set
        for (b, hw, c, hd, seed) in [(1usize, 8usize, 8usize, 4usize, 90u64), (2, 16, 8, 2, 91)] {
            let s = 4;
            let config = cfg(s, s * s, 1.0, c, hd);
            let x = rand_tensor::<f64>(&[b, hw, hw, c], seed);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 1);
            let mut params = DssaParams::<f64>::init(c, &mut rng);
            params.lce_w = Tensor::zeros(&[c, 1, 5, 5]).with_grad();
            let (out, _) = dssa_forward(&x, &params, &config).unwrap();

            let xr = to_regions(&x, s).unwrap();
            let (q, k, v) = project_qkv(&xr, &params.wq, &params.wk, &params.wv).unwrap();
            let tokens = (hw / s) * (hw / s);
            let flat = |t: &Tensor<f64>| t.reshape(&[b, s * s * tokens, c]).unwrap();
            let dense = dense_attention(&flat(&q), &flat(&k), &flat(&v), config.heads);
            let dense_spatial = from_regions(
                &dense.reshape(&[b, s * s, tokens, c]).unwrap(),
                s,
                hw,
                hw,
            )
            .unwrap();
            let (ov, dv) = (out.to_vec(), dense_spatial.to_vec());
            for i in 0..ov.len() {
                assert!(
                    (ov[i] - dv[i]).abs() < 1e-10,
                    "b={b} hw={hw}: element {i}: {} vs {}",
                    ov[i],
                    dv[i]
                );
            }
        }
    }

    use rand::SeedableRng;

    #[test]
    fn zero_input_with_zero_bias_gives_zero_output() {
        let c = cfg(2, 2, 0.5, 4, 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(92);
        let params = DssaParams::<f32>::init(4, &mut rng); // bias is zero-initialized
        let x = Tensor::<f32>::zeros(&[1, 4, 4, 4]);
        let (out, _) = dssa_forward(&x, &params, &c).unwrap();
        assert!(out.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kept_fraction_equals_lambda_k1_over_regions() {
        // defaults: 8x8 regions, λ = 1/8; with exact rounding the kept
        // fraction collapses to λ·k1/S²
        let config = cfg(8, 16, 0.125, 8, 8);
        let x = rand_tensor::<f32>(&[1, 16, 16, 8], 93);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(94);
        let params = DssaParams::<f32>::init(8, &mut rng);
        let (_, trace) = dssa_forward(&x, &params, &config).unwrap();
        assert_eq!(trace.kept_fraction, 0.125 * 16.0 / 64.0);
    }

    #[test]
    fn sparsity_counters_match_closed_form() {
        let config = cfg(4, 3, 0.5, 6, 3);
        let x = rand_tensor::<f32>(&[1, 8, 8, 6], 95);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(96);
        let params = DssaParams::<f32>::init(6, &mut rng);
        let (_, trace) = dssa_forward(&x, &params, &config).unwrap();
        // S²=16 regions, T=4 tokens, gathered keys k1·T=12, k2=6
        assert_eq!(trace.score_evals, 16 * 4 * 12);
        assert_eq!(trace.retained_pairs, 16 * 4 * 6);
        assert_eq!(
            trace.retained_pairs as f64,
            trace.score_evals as f64 * config.lambda
        );
    }

    #[test]
    fn attention_weights_sum_to_one_per_query() {
        let config = cfg(4, 5, 0.4, 8, 4);
        let x = rand_tensor::<f32>(&[2, 8, 8, 8], 97);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(98);
        let params = DssaParams::<f32>::init(8, &mut rng);
        let (_, trace) = dssa_forward(&x, &params, &config).unwrap();
        let w = trace.pixel_weights.to_vec();
        let k2 = *trace.pixel_weights.shape().last().unwrap();
        for lane in w.chunks(k2) {
            let s: f32 = lane.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "weights sum to {s}");
        }
    }

    #[test]
    fn permuting_regions_permutes_the_output() {
        // with the local-context conv zeroed, routing is equivariant under
        // region permutations (no ties in random scores)
        let s = 2;
        let config = cfg(s, 2, 0.5, 4, 2);
        let x = rand_tensor::<f64>(&[1, 4, 4, 4], 99);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(100);
        let mut params = DssaParams::<f64>::init(4, &mut rng);
        params.lce_w = Tensor::zeros(&[4, 1, 5, 5]).with_grad();
        let (out, _) = dssa_forward(&x, &params, &config).unwrap();

        let perm = [2usize, 0, 3, 1];
        let xr = to_regions(&x, s).unwrap();
        let idx = IndexTensor::from_vec(perm.to_vec(), &[1, 4]).unwrap();
        let xp = from_regions(&xr.gather(&idx, 1).unwrap(), s, 4, 4).unwrap();
        let (out_p, _) = dssa_forward(&xp, &params, &config).unwrap();

        // un-permute: position perm[i] of the permuted output region list
        // corresponds to original region... out_p region i == out region perm[i]
        let opr = to_regions(&out_p, s).unwrap();
        let or = to_regions(&out, s).unwrap();
        let (opv, ov) = (opr.to_vec(), or.to_vec());
        let tc = 4 * 4; // tokens * channels per region
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(
                &opv[i * tc..(i + 1) * tc],
                &ov[p * tc..(p + 1) * tc],
                "region {i}"
            );
        }
    }

    #[test]
    fn full_mechanism_gradient_matches_finite_differences() {
        // gradients flow through projections, gathers, softmax and the
        // weighted sum; the discrete index choices have zero derivative
        let config = cfg(2, 2, 0.5, 4, 2);
        let x = rand_tensor::<f64>(&[1, 4, 4, 4], 101).with_grad();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(102);
        let params = DssaParams::<f64>::init(4, &mut rng);
        let mut all = vec![x];
        all.extend(params.parameters());
        let worst = grad_check(
            |p| {
                let pr = DssaParams {
                    wq: p[1].clone(),
                    wk: p[2].clone(),
                    wv: p[3].clone(),
                    lce_w: p[4].clone(),
                    lce_b: p[5].clone(),
                };
                let (out, _) = dssa_forward(&p[0], &pr, &config).unwrap();
                // square so the loss is sensitive to every output
                out.mul_t(&out).unwrap().sum_all()
            },
            &all,
            1e-4,
            8,
            103,
        );
        assert!(worst < 1e-3, "worst rel err {worst}");
    }

    #[test]
    fn rejects_indivisible_spatial_extents() {
        let config = cfg(4, 4, 0.5, 4, 2);
        let x = Tensor::<f32>::zeros(&[1, 6, 6, 4]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(104);
        let params = DssaParams::<f32>::init(4, &mut rng);
        assert!(matches!(
            dssa_forward(&x, &params, &config),
            Err(TensorError::InvalidParam { .. })
        ));
    }
}
