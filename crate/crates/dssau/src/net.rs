//! The full U-shaped network: four encoder stages over DSSA blocks, a
//! pyramid-pooling bottleneck, four decoder stages at a fixed width with
//! convolutional skip connections, and a multiscale fusion head.
//!
//! Resolutions for an H x W input (H, W divisible by 32):
//!
//! ```text
//! encoder  X1 H/4 x C   X2 H/8 x 2C   X3 H/16 x 4C   X4 H/32 x 8C
//! decoder  X5 H/32      X6 H/16       X7 H/8         X8 H/4     (all C_d)
//! logits   H x W x classes
//! ```

use crate::attention::DssaConfig;
use crate::blocks::{nchw_to_nhwc, nhwc_to_nchw, Conv, DssaBlock, PatchEmbed, PatchMerge, Ppm};
use crate::tensor::{concat, Scalar, Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Result<T> = std::result::Result<T, TensorError>;

// ── Configuration ──────────────────────────────────────────────────────────

/// Architecture hyperparameters. The default is the reference configuration:
/// channels [96, 192, 384, 768], depths [2, 2, 8, 2] (applied to decoder
/// stages 5-8 in the same order, so stage 7 carries the deep group), decoder
/// width 64, 8x8 regions, k₁ schedule [1, 4, 16, 64] by resolution level and
/// λ = 1/8.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Encoder stage widths [C, 2C, 4C, 8C].
    pub channels: [usize; 4],
    /// Blocks per encoder stage; reused in order for decoder stages 5-8.
    pub depths: [usize; 4],
    /// Decoder width C_d shared by all decoder maps.
    pub decoder_width: usize,
    /// Segmentation classes (background, PS, FH).
    pub num_classes: usize,
    /// Regions kept per query region, indexed by resolution level
    /// (1/4, 1/8, 1/16, 1/32); clamped to the region count at run time.
    pub k1_schedule: [usize; 4],
    /// Pixel-level keep fraction.
    pub lambda: f64,
    /// Skip connections enabled at 1/4, 1/8 and 1/16 resolution.
    pub skip_mask: [bool; 3],
    /// Multiscale feature fusion head on/off.
    pub mff_enabled: bool,
    /// Channels per attention head.
    pub head_dim: usize,
    /// Regions per side of the attention grid (clamped to the map extent).
    pub regions: usize,
    /// Input image channels.
    pub in_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: [96, 192, 384, 768],
            depths: [2, 2, 8, 2],
            decoder_width: 64,
            num_classes: 3,
            k1_schedule: [1, 4, 16, 64],
            lambda: 0.125,
            skip_mask: [true, true, true],
            mff_enabled: true,
            head_dim: 32,
            regions: 8,
            in_channels: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| TensorError::InvalidParam {
            op: "model_config",
            msg,
        };
        if self.num_classes < 2 {
            return Err(err(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(err(format!("lambda {} outside (0, 1]", self.lambda)));
        }
        for (i, &c) in self.channels.iter().enumerate() {
            if c == 0 || c % self.head_dim != 0 {
                return Err(err(format!(
                    "stage {i} channels {c} not divisible by head_dim {}",
                    self.head_dim
                )));
            }
        }
        if self.decoder_width == 0 || self.decoder_width % self.head_dim != 0 {
            return Err(err(format!(
                "decoder width {} not divisible by head_dim {}",
                self.decoder_width, self.head_dim
            )));
        }
        if self.depths.iter().any(|&d| d == 0) {
            return Err(err(format!("stage depths must be positive: {:?}", self.depths)));
        }
        if self.k1_schedule.iter().any(|&k| k == 0) {
            return Err(err(format!("k1 schedule must be positive: {:?}", self.k1_schedule)));
        }
        if self.regions == 0 {
            return Err(err("regions must be positive".into()));
        }
        Ok(())
    }

    /// Region grid side for a map extent: the largest s <= `regions` that
    /// divides both extents, so small maps keep a valid grid.
    pub fn grid_for(&self, h: usize, w: usize) -> usize {
        (1..=self.regions.min(h).min(w))
            .rev()
            .find(|&s| h % s == 0 && w % s == 0)
            .unwrap_or(1)
    }

    /// Attention config at one resolution level for a map of `h` x `w` and
    /// `channels`; k₁ is clamped to the region count.
    pub fn attn_cfg(&self, level: usize, h: usize, w: usize, channels: usize) -> Result<DssaConfig> {
        let s = self.grid_for(h, w);
        let k1 = self.k1_schedule[level].min(s * s);
        DssaConfig::new(s, k1, self.lambda, channels, self.head_dim)
    }
}

// ── Stage outputs ──────────────────────────────────────────────────────────

/// Encoder maps X1..X4 at 1/4, 1/8, 1/16, 1/32 resolution.
pub struct EncoderMaps<T: Scalar> {
    pub maps: [Tensor<T>; 4],
}

/// Decoder maps X5..X8 at 1/32, 1/16, 1/8, 1/4 resolution, all C_d wide.
pub struct DecoderMaps<T: Scalar> {
    pub maps: [Tensor<T>; 4],
}

// ── Model ──────────────────────────────────────────────────────────────────

struct EncStage<T: Scalar> {
    merge: Option<PatchMerge<T>>,
    blocks: Vec<DssaBlock<T>>,
}

struct DecStage<T: Scalar> {
    /// 1x1 projection of the same-resolution encoder map, when the skip is
    /// enabled.
    skip: Option<Conv<T>>,
    /// 1x1 projection of the upsampled previous decoder map (stage 6 only).
    up_proj: Option<Conv<T>>,
    blocks: Vec<DssaBlock<T>>,
}

pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    embed: PatchEmbed<T>,
    enc: Vec<EncStage<T>>,
    ppm: Ppm<T>,
    dec: Vec<DecStage<T>>,
    head_proj: Conv<T>,
    head_out: Conv<T>,
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialization from a seed.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let ch = cfg.channels;
        let cd = cfg.decoder_width;

        let embed = PatchEmbed::init(cfg.in_channels, ch[0], rng);
        let mut enc = Vec::with_capacity(4);
        for i in 0..4 {
            let merge = (i > 0).then(|| PatchMerge::init(ch[i - 1], ch[i], rng));
            let blocks = (0..cfg.depths[i]).map(|_| DssaBlock::init(ch[i], rng)).collect();
            enc.push(EncStage { merge, blocks });
        }
        let ppm = Ppm::init(ch[3], cd, rng);

        // decoder stages 5..8; stage i (0-based) runs at resolution level 3-i
        let mut dec = Vec::with_capacity(4);
        for i in 0..4 {
            let skip = match i {
                1 if cfg.skip_mask[2] => Some(Conv::init(ch[2], cd, 1, 1, 0, 1, rng)), // 1/16
                2 if cfg.skip_mask[1] => Some(Conv::init(ch[1], cd, 1, 1, 0, 1, rng)), // 1/8
                3 if cfg.skip_mask[0] => Some(Conv::init(ch[0], cd, 1, 1, 0, 1, rng)), // 1/4
                _ => None,
            };
            let up_proj = (i == 1).then(|| Conv::init(cd, cd, 1, 1, 0, 1, rng));
            let blocks = (0..cfg.depths[i]).map(|_| DssaBlock::init(cd, rng)).collect();
            dec.push(DecStage { skip, up_proj, blocks });
        }

        let head_in = if cfg.mff_enabled { 4 * cd } else { cd };
        let head_proj = Conv::init(head_in, cd, 1, 1, 0, 1, rng);
        let head_out = Conv::init(cd, cfg.num_classes, 3, 1, 1, 1, rng);

        Ok(Model {
            cfg,
            embed,
            enc,
            ppm,
            dec,
            head_proj,
            head_out,
        })
    }

    /// Encoder pass: X1..X4.
    pub fn encode(&self, x: &Tensor<T>) -> Result<EncoderMaps<T>> {
        let sh = x.shape();
        if sh.len() != 4 || sh[1] % 32 != 0 || sh[2] % 32 != 0 || sh[3] != self.cfg.in_channels {
            return Err(TensorError::InvalidParam {
                op: "encode",
                msg: format!(
                    "expected (B, H, W, {}) with H, W divisible by 32, got {sh:?}",
                    self.cfg.in_channels
                ),
            });
        }
        let mut maps: Vec<Tensor<T>> = Vec::with_capacity(4);
        let mut cur = self.embed.forward(x)?;
        for (i, stage) in self.enc.iter().enumerate() {
            if let Some(merge) = &stage.merge {
                cur = merge.forward(&cur)?;
            }
            let (h, w, c) = (cur.shape()[1], cur.shape()[2], cur.shape()[3]);
            let attn_cfg = self.cfg.attn_cfg(i, h, w, c)?;
            for block in &stage.blocks {
                cur = block.forward(&cur, &attn_cfg)?;
            }
            maps.push(cur.clone());
        }
        let maps: [Tensor<T>; 4] = maps.try_into().map_err(|_| TensorError::InvalidParam {
            op: "encode",
            msg: "internal: wrong stage count".into(),
        })?;
        Ok(EncoderMaps { maps })
    }

    fn upsample2(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        nchw_to_nhwc(&nhwc_to_nchw(x)?.upsample_bilinear(2)?)
    }

    /// Decoder pass: X5..X8 from the encoder maps. Each stage fuses the
    /// 1x1-projected same-resolution encoder map (when its skip is enabled)
    /// into the 2x-upsampled previous decoder map by element-wise addition,
    /// then runs its DSSA blocks.
    pub fn decode(&self, enc: &EncoderMaps<T>) -> Result<DecoderMaps<T>> {
        let mut maps: Vec<Tensor<T>> = Vec::with_capacity(4);
        // PPM bins are clamped to the bottleneck extent so small desk-scale
        // inputs stay usable.
        let mut cur = self.ppm.forward_clamped(&enc.maps[3])?;
        for (i, stage) in self.dec.iter().enumerate() {
            if i > 0 {
                let mut up = self.upsample2(&cur)?;
                if let Some(proj) = &stage.up_proj {
                    up = proj.forward(&up)?;
                }
                cur = match &stage.skip {
                    Some(conv) => {
                        let skip = conv.forward(&enc.maps[3 - i])?;
                        up.add_t(&skip)?
                    }
                    None => up,
                };
            }
            let (h, w, c) = (cur.shape()[1], cur.shape()[2], cur.shape()[3]);
            let attn_cfg = self.cfg.attn_cfg(3 - i, h, w, c)?;
            for block in &stage.blocks {
                cur = block.forward(&cur, &attn_cfg)?;
            }
            maps.push(cur.clone());
        }
        let maps: [Tensor<T>; 4] = maps.try_into().map_err(|_| TensorError::InvalidParam {
            op: "decode",
            msg: "internal: wrong stage count".into(),
        })?;
        Ok(DecoderMaps { maps })
    }

    /// Prediction head: upsample X5/X6/X7 by 8/4/2 onto X8's grid,
    /// concatenate (4 C_d), 1x1 conv to C_d, 4x upsample, 3x3 conv to the
    /// class count. With fusion disabled the head consumes X8 alone.
    pub fn mff_head(&self, dec: &DecoderMaps<T>) -> Result<Tensor<T>> {
        let fused = if self.cfg.mff_enabled {
            let mut parts = Vec::with_capacity(4);
            for (i, factor) in [(0usize, 8usize), (1, 4), (2, 2)] {
                let up = nhwc_to_nchw(&dec.maps[i])?.upsample_bilinear(factor)?;
                parts.push(nchw_to_nhwc(&up)?);
            }
            parts.push(dec.maps[3].clone());
            concat(&parts, 3)?
        } else {
            dec.maps[3].clone()
        };
        let projected = self.head_proj.forward(&fused)?;
        let up = nchw_to_nhwc(&nhwc_to_nchw(&projected)?.upsample_bilinear(4)?)?;
        self.head_out.forward(&up)
    }

    /// Full pass: logits of shape (B, H, W, classes).
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let enc = self.encode(x)?;
        let dec = self.decode(&enc)?;
        self.mff_head(&dec)
    }

    /// Full pass keeping every stage map, for shape and ablation checks.
    pub fn forward_with_stages(
        &self,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, EncoderMaps<T>, DecoderMaps<T>)> {
        let enc = self.encode(x)?;
        let dec = self.decode(&enc)?;
        let logits = self.mff_head(&dec)?;
        Ok((logits, enc, dec))
    }

    /// Stable-ordered (name, tensor) pairs of every trainable parameter.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = self.embed.named("embed");
        for (i, stage) in self.enc.iter().enumerate() {
            let sp = format!("enc{}", i + 1);
            if let Some(m) = &stage.merge {
                out.extend(m.named(&format!("{sp}.merge")));
            }
            for (bi, b) in stage.blocks.iter().enumerate() {
                out.extend(b.named(&format!("{sp}.block{bi}")));
            }
        }
        out.extend(self.ppm.named("ppm"));
        for (i, stage) in self.dec.iter().enumerate() {
            let sp = format!("dec{}", i + 5);
            if let Some(c) = &stage.skip {
                out.extend(c.named(&format!("{sp}.skip")));
            }
            if let Some(c) = &stage.up_proj {
                out.extend(c.named(&format!("{sp}.up_proj")));
            }
            for (bi, b) in stage.blocks.iter().enumerate() {
                out.extend(b.named(&format!("{sp}.block{bi}")));
            }
        }
        out.extend(self.head_proj.named("head.proj"));
        out.extend(self.head_out.named("head.out"));
        out
    }

    pub fn parameters(&self) -> Vec<Tensor<T>> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }
}
