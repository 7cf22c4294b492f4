//! Elementwise, linear-algebra, reduction, shape and indexing kernels.
//!
//! Every differentiable kernel installs a backward closure computing the
//! exact vector-Jacobian product; discrete index outputs (top-k indices)
//! carry no derivative.

use super::{strides_of, IndexTensor, Result, Scalar, Tensor, TensorError};

// ── Broadcasting ───────────────────────────────────────────────────────────

/// Trailing-axis broadcast of two shapes; extents must match or be 1.
pub(crate) fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(TensorError::DimMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Strides of `shape` padded/broadcast to `out_shape`: broadcast axes get
/// stride 0 so a flat output index maps straight to a source offset.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let src = strides_of(shape);
    let mut out = vec![0usize; rank];
    for i in 0..shape.len() {
        out[offset + i] = if shape[i] == 1 { 0 } else { src[i] };
    }
    out
}

fn offsets_for<'a>(
    out_shape: &'a [usize],
    strides: &'a [usize],
) -> impl Iterator<Item = usize> + 'a {
    let numel: usize = out_shape.iter().product();
    let rank = out_shape.len();
    (0..numel).map(move |flat| {
        let mut rem = flat;
        let mut off = 0;
        for d in (0..rank).rev() {
            let c = rem % out_shape[d];
            rem /= out_shape[d];
            off += c * strides[d];
        }
        off
    })
}

/// Sum a gradient over the axes that were broadcast, back to `shape`.
pub(crate) fn reduce_to_shape<T: Scalar>(
    grad: &[T],
    grad_shape: &[usize],
    shape: &[usize],
) -> Vec<T> {
    if grad_shape == shape {
        return grad.to_vec();
    }
    let strides = broadcast_strides(shape, grad_shape);
    let mut out = vec![T::zero(); shape.iter().product()];
    for (flat, off) in offsets_for(grad_shape, &strides).enumerate() {
        out[off] = out[off].add(grad[flat]);
    }
    out
}

fn binary_broadcast<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: fn(T, T) -> T,
    // d(out)/d(a), d(out)/d(b) given the operand values
    df: fn(T, T) -> (T, T),
) -> Result<Tensor<T>> {
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &shape);
    let sb = broadcast_strides(b.shape(), &shape);
    let ad = a.data();
    let bd = b.data();
    let mut data = Vec::with_capacity(shape.iter().product());
    for (oa, ob) in offsets_for(&shape, &sa).zip(offsets_for(&shape, &sb)) {
        data.push(f(ad[oa], bd[ob]));
    }
    drop(ad);
    drop(bd);
    let out_shape = shape.clone();
    let backward = Box::new(move |g: &[T], parents: &[Tensor<T>]| {
        let (a, b) = (&parents[0], &parents[1]);
        let ad = a.data();
        let bd = b.data();
        let sa = broadcast_strides(a.shape(), &shape);
        let sb = broadcast_strides(b.shape(), &shape);
        let mut ga = vec![T::zero(); g.len()];
        let mut gb = vec![T::zero(); g.len()];
        for ((flat, oa), ob) in offsets_for(&shape, &sa)
            .enumerate()
            .zip(offsets_for(&shape, &sb))
        {
            let (da, db) = df(ad[oa], bd[ob]);
            ga[flat] = g[flat].mul(da);
            gb[flat] = g[flat].mul(db);
        }
        vec![
            Some(reduce_to_shape(&ga, &shape, a.shape())),
            Some(reduce_to_shape(&gb, &shape, b.shape())),
        ]
    });
    Ok(Tensor::from_op(
        out_shape,
        data,
        vec![a.clone(), b.clone()],
        backward,
    ))
}

fn unary_map<T: Scalar>(x: &Tensor<T>, f: fn(T) -> T, df: fn(T) -> T) -> Tensor<T> {
    let data: Vec<T> = x.data().iter().map(|&v| f(v)).collect();
    let backward = Box::new(move |g: &[T], parents: &[Tensor<T>]| {
        let xd = parents[0].data();
        let gx = g
            .iter()
            .zip(xd.iter())
            .map(|(&gi, &xi)| gi.mul(df(xi)))
            .collect();
        vec![Some(gx)]
    });
    Tensor::from_op(x.shape().to_vec(), data, vec![x.clone()], backward)
}

// ── Elementwise ────────────────────────────────────────────────────────────

impl<T: Scalar> Tensor<T> {
    pub fn add_t(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary_broadcast("add", self, rhs, |a, b| a.add(b), |_, _| (T::one(), T::one()))
    }

    pub fn sub_t(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary_broadcast(
            "sub",
            self,
            rhs,
            |a, b| a.sub(b),
            |_, _| (T::one(), T::one().neg()),
        )
    }

    pub fn mul_t(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary_broadcast("mul", self, rhs, |a, b| a.mul(b), |a, b| (b, a))
    }

    pub fn div_t(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary_broadcast(
            "div",
            self,
            rhs,
            |a, b| a.div(b),
            |a, b| (T::one().div(b), a.neg().div(b.mul(b))),
        )
    }

    pub fn neg_t(&self) -> Tensor<T> {
        unary_map(self, |v| v.neg(), |_| T::one().neg())
    }

    pub fn exp_t(&self) -> Tensor<T> {
        unary_map(self, |v| v.exp(), |v| v.exp())
    }

    pub fn ln_t(&self) -> Tensor<T> {
        unary_map(self, |v| v.ln(), |v| T::one().div(v))
    }

    pub fn sqrt_t(&self) -> Tensor<T> {
        unary_map(
            self,
            |v| v.sqrt(),
            |v| T::from_f64(0.5).div(v.sqrt()),
        )
    }

    pub fn mul_scalar(&self, c: T) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&v| v.mul(c)).collect();
        let backward = Box::new(move |g: &[T], _: &[Tensor<T>]| {
            vec![Some(g.iter().map(|&gi| gi.mul(c)).collect())]
        });
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], backward)
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&v| v.add(c)).collect();
        let backward =
            Box::new(move |g: &[T], _: &[Tensor<T>]| vec![Some(g.to_vec())]);
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], backward)
    }

    /// Clamp to `[lo, hi]`; the gradient passes through interior values and
    /// is zero where the input was clipped.
    pub fn clamp_t(&self, lo: T, hi: T) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&v| v.maxv(lo).minv(hi)).collect();
        let backward = Box::new(move |g: &[T], parents: &[Tensor<T>]| {
            let xd = parents[0].data();
            let gx = g
                .iter()
                .zip(xd.iter())
                .map(|(&gi, &xi)| {
                    if xi >= lo && xi <= hi {
                        gi
                    } else {
                        T::zero()
                    }
                })
                .collect();
            vec![Some(gx)]
        });
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], backward)
    }

    /// Gaussian error linear unit, tanh form.
    pub fn gelu(&self) -> Tensor<T> {
        fn fwd<T: Scalar>(x: T) -> T {
            let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
            let a = T::from_f64(0.044715);
            let u = c.mul(x.add(a.mul(x).mul(x).mul(x)));
            T::from_f64(0.5).mul(x).mul(T::one().add(u.tanh()))
        }
        fn dfd<T: Scalar>(x: T) -> T {
            let c = T::from_f64(0.797_884_560_802_865_4);
            let a = T::from_f64(0.044715);
            let u = c.mul(x.add(a.mul(x).mul(x).mul(x)));
            let t = u.tanh();
            let du = c.mul(T::one().add(T::from_f64(3.0).mul(a).mul(x).mul(x)));
            let half = T::from_f64(0.5);
            half.mul(T::one().add(t))
                .add(half.mul(x).mul(T::one().sub(t.mul(t))).mul(du))
        }
        unary_map(self, fwd::<T>, dfd::<T>)
    }
}

// ── Matmul ─────────────────────────────────────────────────────────────────

fn mm<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j].add(av.mul(brow[j]));
            }
        }
    }
}

/// c[m,k] += a[m,n] * b[k,n]^T
fn mm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for j in 0..n {
                acc = acc.add(arow[j].mul(brow[j]));
            }
            crow[p] = crow[p].add(acc);
        }
    }
}

/// c[k,n] += a[m,k]^T * b[m,n]
fn mm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j].add(av.mul(brow[j]));
            }
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// Batched matrix product over the trailing two axes. Leading axes must
    /// be equal on both operands, or absent on one of them (that operand is
    /// broadcast across the batch).
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (a_sh, b_sh) = (self.shape(), rhs.shape());
        if a_sh.len() < 2 || b_sh.len() < 2 {
            return Err(TensorError::DimMismatch {
                op: "matmul",
                lhs: a_sh.to_vec(),
                rhs: b_sh.to_vec(),
            });
        }
        let (m, ka) = (a_sh[a_sh.len() - 2], a_sh[a_sh.len() - 1]);
        let (kb, n) = (b_sh[b_sh.len() - 2], b_sh[b_sh.len() - 1]);
        let lead_a = &a_sh[..a_sh.len() - 2];
        let lead_b = &b_sh[..b_sh.len() - 2];
        let lead_ok = lead_a == lead_b || lead_a.is_empty() || lead_b.is_empty();
        if ka != kb || !lead_ok {
            return Err(TensorError::DimMismatch {
                op: "matmul",
                lhs: a_sh.to_vec(),
                rhs: b_sh.to_vec(),
            });
        }
        let k = ka;
        let lead: Vec<usize> = if lead_a.is_empty() {
            lead_b.to_vec()
        } else {
            lead_a.to_vec()
        };
        let batch: usize = lead.iter().product();
        let (a_step, b_step) = (
            if lead_a.is_empty() { 0 } else { m * k },
            if lead_b.is_empty() { 0 } else { k * n },
        );
        let mut shape = lead.clone();
        shape.push(m);
        shape.push(n);
        let mut data = vec![T::zero(); batch * m * n];
        {
            let ad = self.data();
            let bd = rhs.data();
            for bi in 0..batch {
                mm(
                    &ad[bi * a_step..bi * a_step + m * k],
                    &bd[bi * b_step..bi * b_step + k * n],
                    &mut data[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let backward = Box::new(move |g: &[T], parents: &[Tensor<T>]| {
            let (a, b) = (&parents[0], &parents[1]);
            let ad = a.data();
            let bd = b.data();
            let mut ga = vec![T::zero(); ad.len()];
            let mut gb = vec![T::zero(); bd.len()];
            for bi in 0..batch {
                let go = &g[bi * m * n..(bi + 1) * m * n];
                mm_nt(
                    go,
                    &bd[bi * b_step..bi * b_step + k * n],
                    &mut ga[bi * a_step..bi * a_step + m * k],
                    m,
                    n,
                    k,
                );
                mm_tn(
                    &ad[bi * a_step..bi * a_step + m * k],
                    go,
                    &mut gb[bi * b_step..bi * b_step + k * n],
                    m,
                    k,
                    n,
                );
            }
            vec![Some(ga), Some(gb)]
        });
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone(), rhs.clone()],
            backward,
        ))
    }
}

// ── Lane iteration (softmax, reductions over one axis) ─────────────────────

/// Decompose a shape around `axis` into (outer, extent, inner) so lane `l`
/// of `outer*inner` starts at `(l / inner) * extent * inner + l % inner`
/// with stride `inner`.
fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn lane_start(l: usize, extent: usize, inner: usize) -> usize {
    (l / inner) * extent * inner + l % inner
}

impl<T: Scalar> Tensor<T> {
    /// Numerically-stable softmax along `axis`: the lane maximum is
    /// subtracted before exponentiation.
    pub fn softmax(&self, axis: usize) -> Tensor<T> {
        assert!(axis < self.rank(), "softmax: axis {axis} out of range");
        let shape = self.shape().to_vec();
        let (outer, extent, inner) = lane_dims(&shape, axis);
        let xd = self.data();
        let mut data = vec![T::zero(); xd.len()];
        for l in 0..outer * inner {
            let base = lane_start(l, extent, inner);
            let mut mx = xd[base];
            for i in 1..extent {
                mx = mx.maxv(xd[base + i * inner]);
            }
            let mut sum = T::zero();
            for i in 0..extent {
                let e = xd[base + i * inner].sub(mx).exp();
                data[base + i * inner] = e;
                sum = sum.add(e);
            }
            for i in 0..extent {
                data[base + i * inner] = data[base + i * inner].div(sum);
            }
        }
        drop(xd);
        let y = data.clone();
        let backward = Box::new(move |g: &[T], _: &[Tensor<T>]| {
            let mut gx = vec![T::zero(); g.len()];
            for l in 0..outer * inner {
                let base = lane_start(l, extent, inner);
                let mut dot = T::zero();
                for i in 0..extent {
                    let o = base + i * inner;
                    dot = dot.add(g[o].mul(y[o]));
                }
                for i in 0..extent {
                    let o = base + i * inner;
                    gx[o] = y[o].mul(g[o].sub(dot));
                }
            }
            vec![Some(gx)]
        });
        Tensor::from_op(shape, data, vec![self.clone()], backward)
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum_all(&self) -> Tensor<T> {
        let mut acc = T::zero();
        for &v in self.data().iter() {
            acc = acc.add(v);
        }
        let n = self.numel();
        let backward =
            Box::new(move |g: &[T], _: &[Tensor<T>]| vec![Some(vec![g[0]; n])]);
        Tensor::from_op(vec![], vec![acc], vec![self.clone()], backward)
    }

    /// Sum along `axis`, dropping it.
    pub fn sum_axis(&self, axis: usize) -> Tensor<T> {
        assert!(axis < self.rank(), "sum_axis: axis {axis} out of range");
        let shape = self.shape().to_vec();
        let (outer, extent, inner) = lane_dims(&shape, axis);
        let xd = self.data();
        let mut data = vec![T::zero(); outer * inner];
        for l in 0..outer * inner {
            let base = lane_start(l, extent, inner);
            let mut acc = T::zero();
            for i in 0..extent {
                acc = acc.add(xd[base + i * inner]);
            }
            data[l] = acc;
        }
        drop(xd);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let backward = Box::new(move |g: &[T], _: &[Tensor<T>]| {
            let mut gx = vec![T::zero(); outer * extent * inner];
            for l in 0..outer * inner {
                let base = lane_start(l, extent, inner);
                for i in 0..extent {
                    gx[base + i * inner] = g[l];
                }
            }
            vec![Some(gx)]
        });
        Tensor::from_op(out_shape, data, vec![self.clone()], backward)
    }

    /// Mean along `axis`, dropping it.
    pub fn mean_axis(&self, axis: usize) -> Tensor<T> {
        let n = self.shape()[axis];
        self.sum_axis(axis).mul_scalar(T::one().div(T::from_f64(n as f64)))
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.numel();
        self.sum_all().mul_scalar(T::one().div(T::from_f64(n as f64)))
    }
}

// ── Shape ops ──────────────────────────────────────────────────────────────

impl<T: Scalar> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let expected: usize = shape.iter().product();
        if expected != self.numel() {
            return Err(TensorError::DimMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.to_vec();
        let backward =
            Box::new(move |g: &[T], _: &[Tensor<T>]| vec![Some(g.to_vec())]);
        Ok(Tensor::from_op(
            shape.to_vec(),
            data,
            vec![self.clone()],
            backward,
        ))
    }

    /// Reorder axes; `axes` must be a permutation of `0..rank`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::InvalidParam {
                op: "permute",
                msg: format!("axes {axes:?} is not a permutation of 0..{rank}"),
            });
        }
        let src_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| src_shape[a]).collect();
        let data = permute_raw(&self.data(), &src_shape, axes);
        let axes_owned = axes.to_vec();
        let backward = Box::new(move |g: &[T], _: &[Tensor<T>]| {
            let mut inverse = vec![0usize; axes_owned.len()];
            for (i, &a) in axes_owned.iter().enumerate() {
                inverse[a] = i;
            }
            let out_shape: Vec<usize> = axes_owned.iter().map(|&a| src_shape[a]).collect();
            vec![Some(permute_raw(g, &out_shape, &inverse))]
        });
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            backward,
        ))
    }

    /// Swap the trailing two axes.
    pub fn transpose_last2(&self) -> Result<Tensor<T>> {
        let rank = self.rank();
        if rank < 2 {
            return Err(TensorError::InvalidParam {
                op: "transpose",
                msg: format!("rank {rank} tensor has no trailing axis pair"),
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }
}

pub(crate) fn permute_raw<T: Scalar>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides = strides_of(shape);
    let out_strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let numel: usize = shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut coords = vec![0usize; rank];
    for _ in 0..numel {
        let mut off = 0;
        for d in 0..rank {
            off += coords[d] * out_strides[d];
        }
        out.push(src[off]);
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

/// Concatenate along `axis`; all other extents must match.
pub fn concat<T: Scalar>(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    assert!(!parts.is_empty(), "concat of zero tensors");
    let first = parts[0].shape().to_vec();
    let rank = first.len();
    let mut axis_total = 0;
    for p in parts {
        let s = p.shape();
        if s.len() != rank
            || s.iter()
                .enumerate()
                .any(|(i, &e)| i != axis && e != first[i])
        {
            return Err(TensorError::DimMismatch {
                op: "concat",
                lhs: first.clone(),
                rhs: s.to_vec(),
            });
        }
        axis_total += s[axis];
    }
    let mut shape = first.clone();
    shape[axis] = axis_total;
    let inner: usize = first[axis + 1..].iter().product();
    let outer: usize = first[..axis].iter().product();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let e = p.shape()[axis];
            let pd = p.data();
            data.extend_from_slice(&pd[o * e * inner..(o + 1) * e * inner]);
        }
    }
    let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let backward = Box::new(move |g: &[T], parents: &[Tensor<T>]| {
        let mut grads: Vec<Vec<T>> = parents.iter().map(|p| Vec::with_capacity(p.numel())).collect();
        let mut cursor = 0;
        for _ in 0..outer {
            for (pi, &e) in extents.iter().enumerate() {
                grads[pi].extend_from_slice(&g[cursor..cursor + e * inner]);
                cursor += e * inner;
            }
        }
        grads.into_iter().map(Some).collect()
    });
    Ok(Tensor::from_op(shape, data, parts.to_vec(), backward))
}

// ── Gather / top-k ─────────────────────────────────────────────────────────

impl<T: Scalar> Tensor<T> {
    /// Batched index selection along `axis`. The index shape must start with
    /// `self.shape()[..axis]`; those axes pair up with the source batch, and
    /// the remaining index axes replace `axis` in the output:
    ///
    /// `out[b.., t.., s..] = x[b.., idx[b.., t..], s..]`
    ///
    /// The backward pass scatter-adds into the source, so duplicated indices
    /// accumulate their gradients.
    pub fn gather(&self, idx: &IndexTensor, axis: usize) -> Result<Tensor<T>> {
        let x_sh = self.shape();
        if axis >= x_sh.len() {
            return Err(TensorError::InvalidParam {
                op: "gather",
                msg: format!("axis {axis} out of range for rank {}", x_sh.len()),
            });
        }
        let prefix = &x_sh[..axis];
        if idx.shape().len() < prefix.len() || &idx.shape()[..prefix.len()] != prefix {
            return Err(TensorError::DimMismatch {
                op: "gather",
                lhs: x_sh.to_vec(),
                rhs: idx.shape().to_vec(),
            });
        }
        let extent = x_sh[axis];
        idx.validate(extent, "gather")?;
        let p: usize = prefix.iter().product();
        let tail: usize = idx.shape()[prefix.len()..].iter().product();
        let suffix: usize = x_sh[axis + 1..].iter().product();
        let mut shape: Vec<usize> = prefix.to_vec();
        shape.extend_from_slice(&idx.shape()[prefix.len()..]);
        shape.extend_from_slice(&x_sh[axis + 1..]);
        let xd = self.data();
        let iv = idx.values();
        let mut data = Vec::with_capacity(p * tail * suffix);
        for b in 0..p {
            for t in 0..tail {
                let j = iv[b * tail + t];
                let src = (b * extent + j) * suffix;
                data.extend_from_slice(&xd[src..src + suffix]);
            }
        }
        drop(xd);
        let idx_owned = idx.clone();
        let backward = Box::new(move |g: &[T], parents: &[Tensor<T>]| {
            let mut gx = vec![T::zero(); parents[0].numel()];
            let iv = idx_owned.values();
            for b in 0..p {
                for t in 0..tail {
                    let j = iv[b * tail + t];
                    let dst = (b * extent + j) * suffix;
                    let src = (b * tail + t) * suffix;
                    for s in 0..suffix {
                        gx[dst + s] = gx[dst + s].add(g[src + s]);
                    }
                }
            }
            vec![Some(gx)]
        });
        Ok(Tensor::from_op(shape, data, vec![self.clone()], backward))
    }

    /// The `k` largest entries along `axis`, descending, ties broken by the
    /// lower index. Values are produced by a gather on the returned indices,
    /// so `gather(x, indices, axis)` reproduces them exactly and gradients
    /// flow into the selected source entries.
    pub fn topk(&self, k: usize, axis: usize) -> Result<(Tensor<T>, IndexTensor)> {
        let rank = self.rank();
        if axis >= rank {
            return Err(TensorError::InvalidParam {
                op: "topk",
                msg: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        let extent = self.shape()[axis];
        if k == 0 || k > extent {
            return Err(TensorError::InvalidParam {
                op: "topk",
                msg: format!("k={k} out of range 1..={extent}"),
            });
        }
        // Work on the last axis; permute there and back if needed.
        if axis != rank - 1 {
            let mut to_last: Vec<usize> = (0..rank).filter(|&a| a != axis).collect();
            to_last.push(axis);
            let xp = self.permute(&to_last)?;
            let (vals, idx) = xp.topk(k, rank - 1)?;
            // Inverse permutation restores the original axis order.
            let mut inverse = vec![0usize; rank];
            for (i, &a) in to_last.iter().enumerate() {
                inverse[a] = i;
            }
            let vals = vals.permute(&inverse)?;
            let idx_data = permute_usize(idx.values(), idx.shape(), &inverse);
            let idx_shape: Vec<usize> = inverse.iter().map(|&a| idx.shape()[a]).collect();
            return Ok((vals, IndexTensor::from_vec(idx_data, &idx_shape)?));
        }
        let lanes = self.numel() / extent;
        let xd = self.data();
        let mut indices = Vec::with_capacity(lanes * k);
        let mut order: Vec<usize> = Vec::with_capacity(extent);
        for l in 0..lanes {
            let lane = &xd[l * extent..(l + 1) * extent];
            order.clear();
            order.extend(0..extent);
            order.sort_by(|&a, &b| {
                lane[b]
                    .partial_cmp(&lane[a])
                    .expect("topk: non-comparable value")
                    .then(a.cmp(&b))
            });
            indices.extend_from_slice(&order[..k]);
        }
        drop(xd);
        let mut idx_shape = self.shape().to_vec();
        idx_shape[rank - 1] = k;
        let idx = IndexTensor::from_vec(indices, &idx_shape)?;
        let vals = self.gather(&idx, rank - 1)?;
        Ok((vals, idx))
    }
}

fn permute_usize(src: &[usize], shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let src_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let numel: usize = shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut coords = vec![0usize; shape.len()];
    for _ in 0..numel {
        let off: usize = coords.iter().zip(&out_strides).map(|(c, s)| c * s).sum();
        out.push(src[off]);
        for d in (0..shape.len()).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

/// One-hot encode integer labels into a trailing class axis.
pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize, shape: &[usize]) -> Result<Tensor<T>> {
    let expected: usize = shape.iter().product();
    if labels.len() != expected {
        return Err(TensorError::LengthMismatch {
            expected,
            got: labels.len(),
        });
    }
    let mut data = vec![T::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(TensorError::IndexOutOfRange {
                op: "one_hot",
                index: l,
                extent: classes,
            });
        }
        data[i * classes + l] = T::one();
    }
    let mut out_shape = shape.to_vec();
    out_shape.push(classes);
    Tensor::from_vec(data, &out_shape)
}
