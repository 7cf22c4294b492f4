//! Structured kernels: 2-d convolution, region/adaptive pooling, bilinear
//! resize and layer normalization.
//!
//! Spatial kernels operate on the trailing two axes. Convolution takes
//! (N, C, H, W) activations and (Cout, Cin/groups, KH, KW) weights with
//! cross-correlation semantics.

use super::{Result, Scalar, Tensor, TensorError};

impl<T: Scalar> Tensor<T> {
    /// 2-d cross-correlation with stride, symmetric zero padding and groups.
    /// `groups == channels` gives a depth-wise convolution.
    pub fn conv2d(
        &self,
        w: &Tensor<T>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Tensor<T>> {
        let xs = self.shape();
        let ws = w.shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(TensorError::DimMismatch {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, cpg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cpg != cin / groups {
            return Err(TensorError::InvalidParam {
                op: "conv2d",
                msg: format!(
                    "channels {cin}->{cout} incompatible with groups {groups} and weight {ws:?}"
                ),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidParam {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(TensorError::InvalidParam {
                op: "conv2d",
                msg: format!(
                    "spatial extents {h}x{wd} smaller than kernel {kh}x{kw} after padding {padding}"
                ),
            });
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (wd + 2 * padding - kw) / stride + 1;
        let ocg = cout / groups;
        let xd = self.data();
        let wv = w.data();
        let mut out = vec![T::zero(); n * cout * oh * ow];
        for ni in 0..n {
            for oc in 0..cout {
                let g = oc / ocg;
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let mut acc = T::zero();
                        for icg in 0..cpg {
                            let ic = g * cpg + icg;
                            for khi in 0..kh {
                                let ih = ohi * stride + khi;
                                if ih < padding || ih - padding >= h {
                                    continue;
                                }
                                let xrow = (ni * cin + ic) * h * wd + (ih - padding) * wd;
                                let wrow = ((oc * cpg + icg) * kh + khi) * kw;
                                for kwi in 0..kw {
                                    let iw = owi * stride + kwi;
                                    if iw < padding || iw - padding >= wd {
                                        continue;
                                    }
                                    acc = acc.add(xd[xrow + iw - padding].mul(wv[wrow + kwi]));
                                }
                            }
                        }
                        out[((ni * cout + oc) * oh + ohi) * ow + owi] = acc;
                    }
                }
            }
        }
        drop(xd);
        drop(wv);
        let backward = Box::new(move |go: &[T], parents: &[Tensor<T>]| {
            let (x, w) = (&parents[0], &parents[1]);
            let xd = x.data();
            let wv = w.data();
            let mut gx = vec![T::zero(); xd.len()];
            let mut gw = vec![T::zero(); wv.len()];
            for ni in 0..n {
                for oc in 0..cout {
                    let g = oc / ocg;
                    for ohi in 0..oh {
                        for owi in 0..ow {
                            let gov = go[((ni * cout + oc) * oh + ohi) * ow + owi];
                            for icg in 0..cpg {
                                let ic = g * cpg + icg;
                                for khi in 0..kh {
                                    let ih = ohi * stride + khi;
                                    if ih < padding || ih - padding >= h {
                                        continue;
                                    }
                                    let xrow = (ni * cin + ic) * h * wd + (ih - padding) * wd;
                                    let wrow = ((oc * cpg + icg) * kh + khi) * kw;
                                    for kwi in 0..kw {
                                        let iw = owi * stride + kwi;
                                        if iw < padding || iw - padding >= wd {
                                            continue;
                                        }
                                        gx[xrow + iw - padding] =
                                            gx[xrow + iw - padding].add(wv[wrow + kwi].mul(gov));
                                        gw[wrow + kwi] =
                                            gw[wrow + kwi].add(xd[xrow + iw - padding].mul(gov));
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(gx), Some(gw)]
        });
        Ok(Tensor::from_op(
            vec![n, cout, oh, ow],
            out,
            vec![self.clone(), w.clone()],
            backward,
        ))
    }

    /// Mean over non-overlapping blocks partitioning the trailing two axes
    /// into an S x S grid; extents must be divisible by `s`.
    pub fn avg_pool_region(&self, s: usize) -> Result<Tensor<T>> {
        let rank = self.rank();
        if rank < 2 {
            return Err(TensorError::InvalidParam {
                op: "avg_pool_region",
                msg: format!("rank {rank} tensor has no spatial axes"),
            });
        }
        let (h, w) = (self.shape()[rank - 2], self.shape()[rank - 1]);
        if s == 0 || h % s != 0 || w % s != 0 {
            return Err(TensorError::InvalidParam {
                op: "avg_pool_region",
                msg: format!("extents {h}x{w} not divisible into {s}x{s} regions"),
            });
        }
        let (bh, bw) = (h / s, w / s);
        let lead: usize = self.shape()[..rank - 2].iter().product();
        let xd = self.data();
        let inv = T::one().div(T::from_f64((bh * bw) as f64));
        let mut out = vec![T::zero(); lead * s * s];
        for l in 0..lead {
            for ri in 0..s {
                for rj in 0..s {
                    let mut acc = T::zero();
                    for bi in 0..bh {
                        let row = l * h * w + (ri * bh + bi) * w + rj * bw;
                        for bj in 0..bw {
                            acc = acc.add(xd[row + bj]);
                        }
                    }
                    out[(l * s + ri) * s + rj] = acc.mul(inv);
                }
            }
        }
        drop(xd);
        let mut shape = self.shape()[..rank - 2].to_vec();
        shape.push(s);
        shape.push(s);
        let backward = Box::new(move |go: &[T], parents: &[Tensor<T>]| {
            let mut gx = vec![T::zero(); parents[0].numel()];
            for l in 0..lead {
                for ri in 0..s {
                    for rj in 0..s {
                        let g = go[(l * s + ri) * s + rj].mul(inv);
                        for bi in 0..bh {
                            let row = l * h * w + (ri * bh + bi) * w + rj * bw;
                            for bj in 0..bw {
                                gx[row + bj] = gx[row + bj].add(g);
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        });
        Ok(Tensor::from_op(shape, out, vec![self.clone()], backward))
    }

    /// Adaptive mean pooling of the trailing two axes to `oh x ow` bins with
    /// floor/ceil window boundaries, so non-dividing extents are covered.
    pub fn adaptive_avg_pool2d(&self, oh: usize, ow: usize) -> Result<Tensor<T>> {
        let rank = self.rank();
        if rank < 2 {
            return Err(TensorError::InvalidParam {
                op: "adaptive_avg_pool2d",
                msg: format!("rank {rank} tensor has no spatial axes"),
            });
        }
        let (h, w) = (self.shape()[rank - 2], self.shape()[rank - 1]);
        if oh == 0 || ow == 0 || oh > h || ow > w {
            return Err(TensorError::InvalidParam {
                op: "adaptive_avg_pool2d",
                msg: format!("output {oh}x{ow} invalid for input {h}x{w}"),
            });
        }
        let lo = |i: usize, out: usize, ext: usize| i * ext / out;
        let hi = |i: usize, out: usize, ext: usize| ((i + 1) * ext + out - 1) / out;
        let lead: usize = self.shape()[..rank - 2].iter().product();
        let xd = self.data();
        let mut out = vec![T::zero(); lead * oh * ow];
        for l in 0..lead {
            for i in 0..oh {
                let (h0, h1) = (lo(i, oh, h), hi(i, oh, h));
                for j in 0..ow {
                    let (w0, w1) = (lo(j, ow, w), hi(j, ow, w));
                    let mut acc = T::zero();
                    for y in h0..h1 {
                        let row = l * h * w + y * w;
                        for x in w0..w1 {
                            acc = acc.add(xd[row + x]);
                        }
                    }
                    let area = T::from_f64(((h1 - h0) * (w1 - w0)) as f64);
                    out[(l * oh + i) * ow + j] = acc.div(area);
                }
            }
        }
        drop(xd);
        let mut shape = self.shape()[..rank - 2].to_vec();
        shape.push(oh);
        shape.push(ow);
        let backward = Box::new(move |go: &[T], parents: &[Tensor<T>]| {
            let mut gx = vec![T::zero(); parents[0].numel()];
            for l in 0..lead {
                for i in 0..oh {
                    let (h0, h1) = (lo(i, oh, h), hi(i, oh, h));
                    for j in 0..ow {
                        let (w0, w1) = (lo(j, ow, w), hi(j, ow, w));
                        let area = T::from_f64(((h1 - h0) * (w1 - w0)) as f64);
                        let g = go[(l * oh + i) * ow + j].div(area);
                        for y in h0..h1 {
                            let row = l * h * w + y * w;
                            for x in w0..w1 {
                                gx[row + x] = gx[row + x].add(g);
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        });
        Ok(Tensor::from_op(shape, out, vec![self.clone()], backward))
    }

    /// Bilinear resize of the trailing two axes using half-pixel centers:
    /// output pixel i samples source coordinate (i + 0.5) * in/out - 0.5,
    /// clamped at the borders.
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Result<Tensor<T>> {
        let rank = self.rank();
        if rank < 2 || oh == 0 || ow == 0 {
            return Err(TensorError::InvalidParam {
                op: "resize_bilinear",
                msg: format!("invalid target {oh}x{ow} for rank {rank}"),
            });
        }
        let (h, w) = (self.shape()[rank - 2], self.shape()[rank - 1]);
        let lead: usize = self.shape()[..rank - 2].iter().product();
        // (low index, high index, high weight) per output coordinate
        let taps = |out: usize, ext: usize| -> Vec<(usize, usize, f64)> {
            (0..out)
                .map(|i| {
                    let src = ((i as f64 + 0.5) * ext as f64 / out as f64 - 0.5)
                        .clamp(0.0, (ext - 1) as f64);
                    let i0 = src.floor() as usize;
                    let i1 = (i0 + 1).min(ext - 1);
                    (i0, i1, src - i0 as f64)
                })
                .collect()
        };
        let ty = taps(oh, h);
        let tx = taps(ow, w);
        let xd = self.data();
        let mut out = vec![T::zero(); lead * oh * ow];
        for l in 0..lead {
            let plane = &xd[l * h * w..(l + 1) * h * w];
            for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let v00 = plane[y0 * w + x0].to_f64();
                    let v01 = plane[y0 * w + x1].to_f64();
                    let v10 = plane[y1 * w + x0].to_f64();
                    let v11 = plane[y1 * w + x1].to_f64();
                    let top = v00 + (v01 - v00) * fx;
                    let bot = v10 + (v11 - v10) * fx;
                    out[(l * oh + i) * ow + j] = T::from_f64(top + (bot - top) * fy);
                }
            }
        }
        drop(xd);
        let mut shape = self.shape()[..rank - 2].to_vec();
        shape.push(oh);
        shape.push(ow);
        let backward = Box::new(move |go: &[T], parents: &[Tensor<T>]| {
            let taps = |out: usize, ext: usize| -> Vec<(usize, usize, f64)> {
                (0..out)
                    .map(|i| {
                        let src = ((i as f64 + 0.5) * ext as f64 / out as f64 - 0.5)
                            .clamp(0.0, (ext - 1) as f64);
                        let i0 = src.floor() as usize;
                        let i1 = (i0 + 1).min(ext - 1);
                        (i0, i1, src - i0 as f64)
                    })
                    .collect()
            };
            let ty = taps(oh, h);
            let tx = taps(ow, w);
            let mut gx = vec![T::zero(); parents[0].numel()];
            for l in 0..lead {
                for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let g = go[(l * oh + i) * ow + j].to_f64();
                        let base = l * h * w;
                        let mut put = |y: usize, x: usize, wgt: f64| {
                            let o = base + y * w + x;
                            gx[o] = gx[o].add(T::from_f64(g * wgt));
                        };
                        put(y0, x0, (1.0 - fy) * (1.0 - fx));
                        put(y0, x1, (1.0 - fy) * fx);
                        put(y1, x0, fy * (1.0 - fx));
                        put(y1, x1, fy * fx);
                    }
                }
            }
            vec![Some(gx)]
        });
        Ok(Tensor::from_op(shape, out, vec![self.clone()], backward))
    }

    /// Integer-factor bilinear upsampling; factors 2, 4 and 8 are supported.
    pub fn upsample_bilinear(&self, factor: usize) -> Result<Tensor<T>> {
        if !matches!(factor, 2 | 4 | 8) {
            return Err(TensorError::InvalidParam {
                op: "upsample_bilinear",
                msg: format!("unsupported factor {factor}, expected 2, 4 or 8"),
            });
        }
        let rank = self.rank();
        if rank < 2 {
            return Err(TensorError::InvalidParam {
                op: "upsample_bilinear",
                msg: format!("rank {rank} tensor has no spatial axes"),
            });
        }
        let (h, w) = (self.shape()[rank - 2], self.shape()[rank - 1]);
        self.resize_bilinear(h * factor, w * factor)
    }

    /// Layer normalization over the trailing (channel) axis with affine
    /// gain/shift, epsilon 1e-5.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
        let rank = self.rank();
        if rank == 0 {
            return Err(TensorError::InvalidParam {
                op: "layer_norm",
                msg: "rank-0 tensor has no channel axis".into(),
            });
        }
        let c = self.shape()[rank - 1];
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(TensorError::DimMismatch {
                op: "layer_norm",
                lhs: vec![c],
                rhs: gamma.shape().to_vec(),
            });
        }
        let eps = 1e-5;
        let lanes = self.numel() / c;
        let xd = self.data();
        let gd = gamma.data();
        let bd = beta.data();
        let mut out = vec![T::zero(); xd.len()];
        let mut means = vec![0f64; lanes];
        let mut inv_stds = vec![0f64; lanes];
        for l in 0..lanes {
            let lane = &xd[l * c..(l + 1) * c];
            let mut mu = 0f64;
            for &v in lane {
                mu += v.to_f64();
            }
            mu /= c as f64;
            let mut var = 0f64;
            for &v in lane {
                let d = v.to_f64() - mu;
                var += d * d;
            }
            var /= c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            means[l] = mu;
            inv_stds[l] = inv;
            for i in 0..c {
                let xhat = (lane[i].to_f64() - mu) * inv;
                out[l * c + i] =
                    T::from_f64(xhat * gd[i].to_f64() + bd[i].to_f64());
            }
        }
        drop(xd);
        drop(gd);
        drop(bd);
        let backward = Box::new(move |go: &[T], parents: &[Tensor<T>]| {
            let (x, gamma) = (&parents[0], &parents[1]);
            let xd = x.data();
            let gd = gamma.data();
            let mut gx = vec![T::zero(); xd.len()];
            let mut ggamma = vec![0f64; c];
            let mut gbeta = vec![0f64; c];
            for l in 0..lanes {
                let lane = &xd[l * c..(l + 1) * c];
                let glane = &go[l * c..(l + 1) * c];
                let (mu, inv) = (means[l], inv_stds[l]);
                // dxhat accumulated per lane, then the two projection terms
                let mut sum_dxhat = 0f64;
                let mut sum_dxhat_xhat = 0f64;
                let mut xhat = vec![0f64; c];
                let mut dxhat = vec![0f64; c];
                for i in 0..c {
                    xhat[i] = (lane[i].to_f64() - mu) * inv;
                    dxhat[i] = glane[i].to_f64() * gd[i].to_f64();
                    sum_dxhat += dxhat[i];
                    sum_dxhat_xhat += dxhat[i] * xhat[i];
                    ggamma[i] += glane[i].to_f64() * xhat[i];
                    gbeta[i] += glane[i].to_f64();
                }
                let nc = c as f64;
                for i in 0..c {
                    let v = inv * (dxhat[i] - sum_dxhat / nc - xhat[i] * sum_dxhat_xhat / nc);
                    gx[l * c + i] = T::from_f64(v);
                }
            }
            vec![
                Some(gx),
                Some(ggamma.into_iter().map(T::from_f64).collect()),
                Some(gbeta.into_iter().map(T::from_f64).collect()),
            ]
        });
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            backward,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::grad_check;
    use crate::testutil::{assert_close, rand_tensor};

    #[test]
    fn conv2d_ones_counts_overlap() {
        // all-ones 3x3 input and 3x3 kernel, pad 1: each output counts the
        // 3x3 neighborhood inside the image
        let x = Tensor::<f32>::ones(&[1, 1, 3, 3]);
        let w = Tensor::<f32>::ones(&[1, 1, 3, 3]);
        let y = x.conv2d(&w, 1, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(
            y.to_vec(),
            vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
    }

    #[test]
    fn conv2d_unit_1x1_kernel_is_identity() {
        let x = rand_tensor::<f64>(&[2, 1, 4, 5], 50);
        let w = Tensor::<f64>::ones(&[1, 1, 1, 1]);
        let y = x.conv2d(&w, 1, 0, 1).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn conv2d_depthwise_gradient_matches_finite_differences() {
        let x = rand_tensor::<f64>(&[2, 4, 8, 8], 51).with_grad();
        let w = rand_tensor::<f64>(&[4, 1, 5, 5], 52).with_grad();
        let worst = grad_check(
            |p| p[0].conv2d(&p[1], 1, 2, 4).unwrap().sum_all(),
            &[x, w],
            1e-4,
            12,
            53,
        );
        assert!(worst < 1e-4, "worst rel err {worst}");
    }

    #[test]
    fn conv2d_strided_output_extent() {
        let x = Tensor::<f32>::zeros(&[1, 3, 9, 9]);
        let w = Tensor::<f32>::zeros(&[8, 3, 3, 3]);
        let y = x.conv2d(&w, 2, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 8, 5, 5]);
    }

    #[test]
    fn conv2d_rejects_bad_groups() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f32>::zeros(&[4, 1, 3, 3]);
        assert!(matches!(
            x.conv2d(&w, 1, 1, 2),
            Err(TensorError::InvalidParam { op: "conv2d", .. })
        ));
    }

    #[test]
    fn conv2d_rejects_kernel_larger_than_padded_input() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let w = Tensor::<f32>::zeros(&[1, 1, 5, 5]);
        assert!(x.conv2d(&w, 1, 0, 1).is_err());
    }

    #[test]
    fn avg_pool_region_constant_input() {
        let x = Tensor::<f32>::full(&[1, 8, 8], 2.5);
        let y = x.avg_pool_region(4).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4]);
        assert!(y.to_vec().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn avg_pool_region_hand_mean() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let y = x.avg_pool_region(1).unwrap();
        assert_eq!(y.shape(), &[1, 1]);
        assert_eq!(y.item(), 2.5);
    }

    #[test]
    fn avg_pool_region_matches_brute_force_block_means() {
        let x = rand_tensor::<f64>(&[8, 8], 54);
        let y = x.avg_pool_region(2).unwrap();
        let xv = x.to_vec();
        for ri in 0..2 {
            for rj in 0..2 {
                let mut acc = 0.0;
                for bi in 0..4 {
                    for bj in 0..4 {
                        acc += xv[(ri * 4 + bi) * 8 + rj * 4 + bj];
                    }
                }
                let expect = acc / 16.0;
                let got = y.to_vec()[ri * 2 + rj];
                assert!((got - expect).abs() < 1e-12, "region ({ri},{rj})");
            }
        }
    }

    #[test]
    fn avg_pool_region_rejects_non_divisible_extents() {
        let x = Tensor::<f32>::zeros(&[1, 6, 6]);
        assert!(matches!(
            x.avg_pool_region(4),
            Err(TensorError::InvalidParam { op: "avg_pool_region", .. })
        ));
    }

    #[test]
    fn avg_pool_region_gradient_matches_finite_differences() {
        let x = rand_tensor::<f64>(&[2, 4, 4], 55).with_grad();
        let w = rand_tensor::<f64>(&[2, 2, 2], 56);
        let worst = grad_check(
            |p| p[0].avg_pool_region(2).unwrap().mul_t(&w).unwrap().sum_all(),
            &[x],
            1e-4,
            10,
            57,
        );
        assert!(worst < 1e-4);
    }

    #[test]
    fn adaptive_pool_bin1_is_global_mean() {
        let x = rand_tensor::<f64>(&[3, 5, 7], 58);
        let y = x.adaptive_avg_pool2d(1, 1).unwrap();
        let xv = x.to_vec();
        for l in 0..3 {
            let mean: f64 = xv[l * 35..(l + 1) * 35].iter().sum::<f64>() / 35.0;
            assert!((y.to_vec()[l] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn adaptive_pool_windows_cover_non_dividing_extents() {
        let x = rand_tensor::<f64>(&[1, 8, 8], 59).with_grad();
        let y = x.adaptive_avg_pool2d(3, 3).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        let worst = grad_check(
            |p| p[0].adaptive_avg_pool2d(3, 3).unwrap().sum_all(),
            &[x],
            1e-4,
            10,
            60,
        );
        assert!(worst < 1e-4);
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let x = Tensor::<f32>::full(&[1, 3, 3], -1.25);
        let y = x.upsample_bilinear(4).unwrap();
        assert_eq!(y.shape(), &[1, 12, 12]);
        assert!(y.to_vec().iter().all(|&v| v == -1.25));
    }

    #[test]
    fn upsample_degenerate_1x1_replicates() {
        let x = Tensor::<f64>::from_vec(vec![7.5], &[1, 1]).unwrap();
        let y = x.upsample_bilinear(2).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert_eq!(y.to_vec(), vec![7.5; 4]);
    }

    #[test]
    fn upsample_then_block_mean_recovers_smooth_ramp() {
        // on a smooth ramp, 2x block-mean of the 2x upsample stays within
        // 25% relative tolerance of the source
        let h = 6;
        let data: Vec<f64> = (0..h * h)
            .map(|i| 1.0 + (i / h) as f64 + 0.5 * (i % h) as f64)
            .collect();
        let x = Tensor::<f64>::from_vec(data, &[h, h]).unwrap();
        let up = x.upsample_bilinear(2).unwrap();
        let down = up.avg_pool_region(h).unwrap();
        let xv = x.to_vec();
        let dv = down.to_vec();
        for i in 0..h * h {
            let rel = (dv[i] - xv[i]).abs() / xv[i].abs();
            assert!(rel < 0.25, "element {i}: {} vs {} (rel {rel})", dv[i], xv[i]);
        }
    }

    #[test]
    fn upsample_rejects_unsupported_factor() {
        let x = Tensor::<f32>::zeros(&[2, 2]);
        assert!(matches!(
            x.upsample_bilinear(3),
            Err(TensorError::InvalidParam { op: "upsample_bilinear", .. })
        ));
    }

    #[test]
    fn upsample_gradient_matches_finite_differences() {
        let x = rand_tensor::<f64>(&[1, 3, 3], 61).with_grad();
        let w = rand_tensor::<f64>(&[1, 6, 6], 62);
        let worst = grad_check(
            |p| p[0].upsample_bilinear(2).unwrap().mul_t(&w).unwrap().sum_all(),
            &[x],
            1e-4,
            9,
            63,
        );
        assert!(worst < 1e-4);
    }

    #[test]
    fn layer_norm_standardizes_a_lane() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0], &[1, 3]).unwrap();
        let g = Tensor::<f64>::ones(&[3]);
        let b = Tensor::<f64>::zeros(&[3]);
        let y = x.layer_norm(&g, &b).unwrap();
        let v = y.to_vec();
        let mean: f64 = v.iter().sum::<f64>() / 3.0;
        let var: f64 = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4, "variance {var} (epsilon effect)");
    }

    #[test]
    fn layer_norm_constant_input_returns_beta() {
        let x = Tensor::<f64>::full(&[2, 4], 5.0);
        let g = Tensor::<f64>::ones(&[4]);
        let b = Tensor::<f64>::from_vec(vec![0.5, -1.0, 2.0, 0.0], &[4]).unwrap();
        let y = x.layer_norm(&g, &b).unwrap();
        let v = y.to_vec();
        assert_close(&v[..4], &b.to_vec(), 1e-9, "lane 0");
        assert_close(&v[4..], &b.to_vec(), 1e-9, "lane 1");
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let x = rand_tensor::<f64>(&[2, 6], 64).with_grad();
        let g = rand_tensor::<f64>(&[6], 65).add_scalar(1.5).with_grad();
        let b = rand_tensor::<f64>(&[6], 66).with_grad();
        let w = rand_tensor::<f64>(&[2, 6], 67);
        let worst = grad_check(
            |p| {
                p[0].layer_norm(&p[1], &p[2])
                    .unwrap()
                    .mul_t(&w)
                    .unwrap()
                    .sum_all()
            },
            &[x, g, b],
            1e-4,
            12,
            68,
        );
        assert!(worst < 1e-4, "worst rel err {worst}");
    }

    #[test]
    fn layer_norm_rejects_mismatched_affine_shapes() {
        let x = Tensor::<f32>::zeros(&[2, 4]);
        let g = Tensor::<f32>::ones(&[3]);
        let b = Tensor::<f32>::zeros(&[3]);
        assert!(x.layer_norm(&g, &b).is_err());
    }
}
