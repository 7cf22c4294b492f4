//! Network building blocks: linear/conv parameter bundles, overlapped patch
//! embedding, patch merging, the DSSA block and the pyramid pooling module.
//!
//! Feature maps cross block boundaries in (B, H, W, C) layout; convolutions
//! run internally in (B, C, H, W).

use crate::attention::{dssa_forward, DssaConfig, DssaParams};
use crate::tensor::{Scalar, Tensor, TensorError};
use rand::Rng;

type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn nhwc_to_nchw<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.permute(&[0, 3, 1, 2])
}

pub(crate) fn nchw_to_nhwc<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.permute(&[0, 2, 3, 1])
}

// ── Parameter bundles ──────────────────────────────────────────────────────

/// Linear layer y = x W + b over the trailing channel axis.
pub struct Linear<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        Linear {
            w: Tensor::randn(&[fan_in, fan_out], std, rng).with_grad(),
            b: Tensor::zeros(&[fan_out]).with_grad(),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Tensor::zeros(&[fan_in, fan_out]).with_grad(),
            b: Tensor::zeros(&[fan_out]).with_grad(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&self.w)?.add_t(&self.b)
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        vec![
            (format!("{prefix}.weight"), self.w.clone()),
            (format!("{prefix}.bias"), self.b.clone()),
        ]
    }
}

/// Convolution parameters with stride/padding/groups baked in; input and
/// output are (B, H, W, C).
pub struct Conv<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<T: Scalar> Conv<T> {
    pub fn init<R: Rng>(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (cin / groups) * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        Conv {
            w: Tensor::randn(&[cout, cin / groups, k, k], std, rng).with_grad(),
            b: Tensor::zeros(&[cout]).with_grad(),
            stride,
            padding,
            groups,
        }
    }

    pub fn zeros(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Self {
        Conv {
            w: Tensor::zeros(&[cout, cin / groups, k, k]).with_grad(),
            b: Tensor::zeros(&[cout]).with_grad(),
            stride,
            padding,
            groups,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let cout = self.w.shape()[0];
        let y = nhwc_to_nchw(x)?
            .conv2d(&self.w, self.stride, self.padding, self.groups)?
            .add_t(&self.b.reshape(&[cout, 1, 1])?)?;
        nchw_to_nhwc(&y)
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        vec![
            (format!("{prefix}.weight"), self.w.clone()),
            (format!("{prefix}.bias"), self.b.clone()),
        ]
    }
}

/// Affine layer-norm pair over the channel axis.
pub struct Norm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> Norm<T> {
    pub fn init(c: usize) -> Self {
        Norm {
            gamma: Tensor::ones(&[c]).with_grad(),
            beta: Tensor::zeros(&[c]).with_grad(),
        }
    }

    pub fn zeros(c: usize) -> Self {
        Norm {
            gamma: Tensor::zeros(&[c]).with_grad(),
            beta: Tensor::zeros(&[c]).with_grad(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gamma, &self.beta)
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        vec![
            (format!("{prefix}.gamma"), self.gamma.clone()),
            (format!("{prefix}.beta"), self.beta.clone()),
        ]
    }
}

// ── Patch embedding / merging ──────────────────────────────────────────────

/// Overlapped patch embedding: two 3x3 stride-2 convolutions (3 -> C/2 -> C)
/// with layer norm after each and a GELU between, quartering the resolution.
pub struct PatchEmbed<T: Scalar> {
    pub conv1: Conv<T>,
    pub norm1: Norm<T>,
    pub conv2: Conv<T>,
    pub norm2: Norm<T>,
}

impl<T: Scalar> PatchEmbed<T> {
    pub fn init<R: Rng>(in_ch: usize, c: usize, rng: &mut R) -> Self {
        let mid = (c / 2).max(1);
        PatchEmbed {
            conv1: Conv::init(in_ch, mid, 3, 2, 1, 1, rng),
            norm1: Norm::init(mid),
            conv2: Conv::init(mid, c, 3, 2, 1, 1, rng),
            norm2: Norm::init(c),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let sh = x.shape();
        if sh.len() != 4 || sh[1] % 4 != 0 || sh[2] % 4 != 0 {
            return Err(TensorError::InvalidParam {
                op: "patch_embed",
                msg: format!("expected (B, H, W, C) with H, W divisible by 4, got {sh:?}"),
            });
        }
        let y = self.norm1.forward(&self.conv1.forward(x)?)?.gelu();
        self.norm2.forward(&self.conv2.forward(&y)?)
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = self.conv1.named(&format!("{prefix}.conv1"));
        out.extend(self.norm1.named(&format!("{prefix}.norm1")));
        out.extend(self.conv2.named(&format!("{prefix}.conv2")));
        out.extend(self.norm2.named(&format!("{prefix}.norm2")));
        out
    }
}

/// Token-halving downsampling between stages: strided 3x3 convolution that
/// doubles the channel count, followed by layer norm.
pub struct PatchMerge<T: Scalar> {
    pub conv: Conv<T>,
    pub norm: Norm<T>,
}

impl<T: Scalar> PatchMerge<T> {
    pub fn init<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Self {
        PatchMerge {
            conv: Conv::init(cin, cout, 3, 2, 1, 1, rng),
            norm: Norm::init(cout),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let sh = x.shape();
        if sh.len() != 4 || sh[1] % 2 != 0 || sh[2] % 2 != 0 {
            return Err(TensorError::InvalidParam {
                op: "patch_merge",
                msg: format!("expected even spatial extents, got {sh:?}"),
            });
        }
        self.norm.forward(&self.conv.forward(x)?)
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = self.conv.named(&format!("{prefix}.conv"));
        out.extend(self.norm.named(&format!("{prefix}.norm")));
        out
    }
}

// ── DSSA block ─────────────────────────────────────────────────────────────

/// Expansion ratio of the per-token MLP inside each block.
pub const MLP_RATIO: usize = 3;

/// One attention block:
///
/// ```text
/// u   = DWConv(z) + z
/// ẑ   = DSSA(LN(u)) + u
/// out = MLP(LN(ẑ)) + ẑ
/// ```
///
/// The depth-wise 3x3 encodes relative position; three residual paths make
/// the block the identity map when all learned weights are zero.
pub struct DssaBlock<T: Scalar> {
    pub dwconv: Conv<T>,
    pub norm1: Norm<T>,
    pub attn: DssaParams<T>,
    pub norm2: Norm<T>,
    pub mlp_in: Linear<T>,
    pub mlp_out: Linear<T>,
}

impl<T: Scalar> DssaBlock<T> {
    pub fn init<R: Rng>(c: usize, rng: &mut R) -> Self {
        DssaBlock {
            dwconv: Conv::init(c, c, 3, 1, 1, c, rng),
            norm1: Norm::init(c),
            attn: DssaParams::init(c, rng),
            norm2: Norm::init(c),
            mlp_in: Linear::init(c, MLP_RATIO * c, rng),
            mlp_out: Linear::init(MLP_RATIO * c, c, rng),
        }
    }

    pub fn zeros(c: usize) -> Self {
        DssaBlock {
            dwconv: Conv::zeros(c, c, 3, 1, 1, c),
            norm1: Norm::zeros(c),
            attn: DssaParams::zeros(c),
            norm2: Norm::zeros(c),
            mlp_in: Linear::zeros(c, MLP_RATIO * c),
            mlp_out: Linear::zeros(MLP_RATIO * c, c),
        }
    }

    pub fn forward(&self, z: &Tensor<T>, cfg: &DssaConfig) -> Result<Tensor<T>> {
        let u = self.dwconv.forward(z)?.add_t(z)?;
        let (attn, _) = dssa_forward(&self.norm1.forward(&u)?, &self.attn, cfg)?;
        let zhat = attn.add_t(&u)?;
        let mlp = self
            .mlp_out
            .forward(&self.mlp_in.forward(&self.norm2.forward(&zhat)?)?.gelu())?;
        mlp.add_t(&zhat)
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = self.dwconv.named(&format!("{prefix}.dwconv"));
        out.extend(self.norm1.named(&format!("{prefix}.norm1")));
        out.extend(self.attn.named_parameters(&format!("{prefix}.attn")));
        out.extend(self.norm2.named(&format!("{prefix}.norm2")));
        out.extend(self.mlp_in.named(&format!("{prefix}.mlp_in")));
        out.extend(self.mlp_out.named(&format!("{prefix}.mlp_out")));
        out
    }
}

// ── Pyramid pooling module ─────────────────────────────────────────────────

pub const PPM_BINS: [usize; 4] = [1, 2, 3, 6];

/// Pyramid pooling over the bottleneck map: adaptive means at bin sizes
/// {1, 2, 3, 6}, a 1x1 convolution per branch down to the decoder width,
/// bilinear upsampling back to the input extent, concatenation with the
/// input and a 3x3 fuse convolution to the decoder width.
pub struct Ppm<T: Scalar> {
    pub branches: Vec<Conv<T>>,
    pub fuse: Conv<T>,
}

impl<T: Scalar> Ppm<T> {
    pub fn init<R: Rng>(cin: usize, cd: usize, rng: &mut R) -> Self {
        Ppm {
            branches: PPM_BINS
                .iter()
                .map(|_| Conv::init(cin, cd, 1, 1, 0, 1, rng))
                .collect(),
            fuse: Conv::init(cin + PPM_BINS.len() * cd, cd, 3, 1, 1, 1, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let sh = x.shape();
        if sh.len() != 4 {
            return Err(TensorError::InvalidParam {
                op: "ppm",
                msg: format!("expected (B, H, W, C), got {sh:?}"),
            });
        }
        let (h, w) = (sh[1], sh[2]);
        let max_bin = *PPM_BINS.iter().max().unwrap();
        if h < max_bin || w < max_bin {
            return Err(TensorError::InvalidParam {
                op: "ppm",
                msg: format!("input {h}x{w} smaller than the largest pooling bin {max_bin}"),
            });
        }
        self.run(x, h, w, false)
    }

    /// Like [`Ppm::forward`], but bins are clamped to the map extent so the
    /// module stays usable on bottlenecks smaller than the largest bin
    /// (desk-scale inputs down to 64x64).
    pub fn forward_clamped(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let sh = x.shape();
        if sh.len() != 4 {
            return Err(TensorError::InvalidParam {
                op: "ppm",
                msg: format!("expected (B, H, W, C), got {sh:?}"),
            });
        }
        self.run(x, sh[1], sh[2], true)
    }

    fn run(&self, x: &Tensor<T>, h: usize, w: usize, clamp: bool) -> Result<Tensor<T>> {
        let mut parts = vec![x.clone()];
        for (bin, conv) in PPM_BINS.iter().zip(&self.branches) {
            let b = if clamp { (*bin).min(h).min(w) } else { *bin };
            let pooled = nhwc_to_nchw(x)?.adaptive_avg_pool2d(b, b)?;
            let projected = conv.forward(&nchw_to_nhwc(&pooled)?)?;
            let up = nhwc_to_nchw(&projected)?.resize_bilinear(h, w)?;
            parts.push(nchw_to_nhwc(&up)?);
        }
        let cat = crate::tensor::concat(&parts, 3)?;
        self.fuse.forward(&cat)
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.branches.iter().enumerate() {
            out.extend(b.named(&format!("{prefix}.branch{i}")));
        }
        out.extend(self.fuse.named(&format!("{prefix}.fuse")));
        out
    }
}
