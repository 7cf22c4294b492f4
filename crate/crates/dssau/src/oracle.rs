//! Independent verification instruments: a dense multi-head attention
//! reference written as straight loops, and a central finite-difference
//! gradient checker.
//!
//! Both are deliberately naive so they share no code with the kernels they
//! check.

use crate::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense softmax(Q Kᵀ / sqrt(d_head)) V per head, no sparsity.
///
/// `q` is (B, M, C); `k` and `v` are (B, N, C); `heads * head_dim == C`.
/// The result is (B, M, C) with heads concatenated back.
pub fn dense_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Tensor<T> {
    let qs = q.shape();
    assert_eq!(qs.len(), 3, "dense_attention expects (B, M, C)");
    assert_eq!(k.shape(), v.shape());
    assert_eq!(k.shape()[0], qs[0]);
    assert_eq!(k.shape()[2], qs[2]);
    let (b, m, c) = (qs[0], qs[1], qs[2]);
    let n = k.shape()[1];
    assert_eq!(c % heads, 0, "heads must divide the channel count");
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qd = q.data();
    let kd = k.data();
    let vd = v.data();
    let mut out = vec![T::zero(); b * m * c];
    let at = |d: &[T], bi: usize, tokens: usize, ti: usize, h: usize, e: usize| {
        d[(bi * tokens + ti) * c + h * dh + e].to_f64()
    };
    for bi in 0..b {
        for h in 0..heads {
            for qi in 0..m {
                let mut scores = vec![0f64; n];
                for ki in 0..n {
                    let mut dot = 0f64;
                    for e in 0..dh {
                        dot += at(&qd, bi, m, qi, h, e) * at(&kd, bi, n, ki, h, e);
                    }
                    scores[ki] = dot * scale;
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0f64;
                for s in scores.iter_mut() {
                    *s = (*s - mx).exp();
                    z += *s;
                }
                for e in 0..dh {
                    let mut acc = 0f64;
                    for ki in 0..n {
                        acc += scores[ki] / z * at(&vd, bi, n, ki, h, e);
                    }
                    out[(bi * m + qi) * c + h * dh + e] = T::from_f64(acc);
                }
            }
        }
    }
    Tensor::from_vec(out, &[b, m, c]).expect("shape is consistent by construction")
}

/// Worst relative disagreement between reverse-mode gradients and central
/// finite differences, over a sampled subset of coordinates.
///
/// `f` must rebuild its graph from `params` on every call. For each
/// parameter tensor, `coords_per_tensor` coordinates are sampled (all of
/// them when the tensor is smaller) and perturbed by ±h.
pub fn grad_check<F>(
    f: F,
    params: &[Tensor<f64>],
    h: f64,
    coords_per_tensor: usize,
    seed: u64,
) -> f64
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    for p in params {
        p.zero_grad();
    }
    let loss = f(params);
    loss.backward().expect("grad_check loss must be scalar");
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let coords: Vec<usize> = if n <= coords_per_tensor {
            (0..n).collect()
        } else {
            (0..coords_per_tensor).map(|_| rng.gen_range(0..n)).collect()
        };
        for ci in coords {
            let orig = p.data()[ci];
            p.data_mut()[ci] = orig + h;
            let up = f(params).item();
            p.data_mut()[ci] = orig - h;
            let dn = f(params).item();
            p.data_mut()[ci] = orig;
            let fd = (up - dn) / (2.0 * h);
            let an = analytic[pi][ci];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            let rel = (an - fd).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(data, shape).unwrap()
    }

    #[test]
    fn singleton_key_returns_its_value_row() {
        // softmax over one key is 1 regardless of the query
        let q = randn(&[1, 1, 4], 1);
        let k = randn(&[1, 1, 4], 2);
        let v = randn(&[1, 1, 4], 3);
        let o = dense_attention(&q, &k, &v, 2);
        let ov = o.to_vec();
        let vv = v.to_vec();
        for (a, b) in ov.iter().zip(&vv) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dominant_key_saturates_to_its_value() {
        // one key aligned with the query and scaled far above the other
        let q = Tensor::from_vec(vec![10.0, 0.0], &[1, 1, 2]).unwrap();
        let k = Tensor::from_vec(vec![10.0, 0.0, -10.0, 0.0], &[1, 2, 2]).unwrap();
        let v = Tensor::from_vec(vec![1.0, 2.0, -5.0, 7.0], &[1, 2, 2]).unwrap();
        let o = dense_attention(&q, &k, &v, 1);
        let ov = o.to_vec();
        assert!((ov[0] - 1.0).abs() < 1e-6 && (ov[1] - 2.0).abs() < 1e-6, "{ov:?}");
    }

    #[test]
    fn quadratic_gradcheck_is_nearly_exact() {
        // central differences are exact for quadratics up to fp noise
        let x = randn(&[6], 7).with_grad();
        let worst = grad_check(
            |p| p[0].mul_t(&p[0]).unwrap().sum_all(),
            &[x],
            1e-4,
            10,
            11,
        );
        assert!(worst < 1e-8, "worst rel err {worst}");
    }
}
