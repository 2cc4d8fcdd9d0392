//! Raw loops over contiguous buffers. No shape validation happens here.

use super::Scalar;

/// `(outer, len, inner)` split of a shape around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Row-major `[p, q] x [q, r]` accumulate into `out` with the given `beta`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_nn<T: Scalar>(
    p: usize,
    q: usize,
    r: usize,
    a: &[T],
    b: &[T],
    beta: T,
    out: &mut [T],
) {
    debug_assert!(a.len() >= p * q && b.len() >= q * r && out.len() >= p * r);
    // SAFETY: the three slices are distinct borrows sized for the views below.
    unsafe {
        T::gemm(
            p,
            q,
            r,
            T::one(),
            a.as_ptr(),
            q as isize,
            1,
            b.as_ptr(),
            r as isize,
            1,
            beta,
            out.as_mut_ptr(),
            r as isize,
            1,
        )
    }
}

/// `out[p, q] += dy[p, r] * b[q, r]^T`.
pub(crate) fn gemm_nt_acc<T: Scalar>(p: usize, r: usize, q: usize, dy: &[T], b: &[T], out: &mut [T]) {
    debug_assert!(dy.len() >= p * r && b.len() >= q * r && out.len() >= p * q);
    // SAFETY: b viewed as its transpose via strides (row stride 1, column stride r).
    unsafe {
        T::gemm(
            p,
            r,
            q,
            T::one(),
            dy.as_ptr(),
            r as isize,
            1,
            b.as_ptr(),
            1,
            r as isize,
            T::one(),
            out.as_mut_ptr(),
            q as isize,
            1,
        )
    }
}

/// `out[q, r] += a[p, q]^T * dy[p, r]`.
pub(crate) fn gemm_tn_acc<T: Scalar>(q: usize, p: usize, r: usize, a: &[T], dy: &[T], out: &mut [T]) {
    debug_assert!(a.len() >= p * q && dy.len() >= p * r && out.len() >= q * r);
    // SAFETY: a viewed as its transpose via strides (row stride 1, column stride q).
    unsafe {
        T::gemm(
            q,
            p,
            r,
            T::one(),
            a.as_ptr(),
            1,
            q as isize,
            dy.as_ptr(),
            r as isize,
            1,
            T::one(),
            out.as_mut_ptr(),
            r as isize,
            1,
        )
    }
}

/// Batch → operand-slot maps for the indexed batched product.
#[derive(Debug, Clone)]
pub(crate) struct BatchMap {
    pub batch: usize,
    pub a_slot: Vec<usize>,
    pub b_slot: Vec<usize>,
}

/// Batched product `out[i] = (init[i]) + a[a_slot[i]] * b[b_slot[i]]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bmm_forward<T: Scalar>(
    map: &BatchMap,
    p: usize,
    q: usize,
    r: usize,
    a: &[T],
    b: &[T],
    out: &mut [T],
    accumulate: bool,
) {
    let beta = if accumulate { T::one() } else { T::zero() };
    for i in 0..map.batch {
        let ao = map.a_slot[i] * p * q;
        let bo = map.b_slot[i] * q * r;
        gemm_nn(
            p,
            q,
            r,
            &a[ao..ao + p * q],
            &b[bo..bo + q * r],
            beta,
            &mut out[i * p * r..(i + 1) * p * r],
        );
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bmm_backward_a<T: Scalar>(
    map: &BatchMap,
    p: usize,
    q: usize,
    r: usize,
    b: &[T],
    dy: &[T],
    a_batches: usize,
) -> Vec<T> {
    let mut da = vec![T::zero(); a_batches * p * q];
    for i in 0..map.batch {
        let ao = map.a_slot[i] * p * q;
        let bo = map.b_slot[i] * q * r;
        gemm_nt_acc(
            p,
            r,
            q,
            &dy[i * p * r..(i + 1) * p * r],
            &b[bo..bo + q * r],
            &mut da[ao..ao + p * q],
        );
    }
    da
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bmm_backward_b<T: Scalar>(
    map: &BatchMap,
    p: usize,
    q: usize,
    r: usize,
    a: &[T],
    dy: &[T],
    b_batches: usize,
) -> Vec<T> {
    let mut db = vec![T::zero(); b_batches * q * r];
    for i in 0..map.batch {
        let ao = map.a_slot[i] * p * q;
        let bo = map.b_slot[i] * q * r;
        gemm_tn_acc(
            q,
            p,
            r,
            &a[ao..ao + p * q],
            &dy[i * p * r..(i + 1) * p * r],
            &mut db[bo..bo + q * r],
        );
    }
    db
}

/// `out[rows of seg] = (init) + a[rows of seg] * w[seg.0]` for consecutive
/// row segments `(group, len)` of `a: [R, q]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn seg_forward<T: Scalar>(
    segs: &[(usize, usize)],
    q: usize,
    r: usize,
    a: &[T],
    w: &[T],
    out: &mut [T],
    accumulate: bool,
) {
    let beta = if accumulate { T::one() } else { T::zero() };
    let mut row = 0;
    for &(g, len) in segs {
        if len > 0 {
            gemm_nn(
                len,
                q,
                r,
                &a[row * q..(row + len) * q],
                &w[g * q * r..(g + 1) * q * r],
                beta,
                &mut out[row * r..(row + len) * r],
            );
        }
        row += len;
    }
}

pub(crate) fn seg_backward_a<T: Scalar>(segs: &[(usize, usize)], q: usize, r: usize, w: &[T], dy: &[T]) -> Vec<T> {
    let rows: usize = segs.iter().map(|s| s.1).sum();
    let mut da = vec![T::zero(); rows * q];
    let mut row = 0;
    for &(g, len) in segs {
        if len > 0 {
            gemm_nt_acc(
                len,
                r,
                q,
                &dy[row * r..(row + len) * r],
                &w[g * q * r..(g + 1) * q * r],
                &mut da[row * q..(row + len) * q],
            );
        }
        row += len;
    }
    da
}

pub(crate) fn seg_backward_w<T: Scalar>(
    segs: &[(usize, usize)],
    q: usize,
    r: usize,
    a: &[T],
    dy: &[T],
    groups: usize,
) -> Vec<T> {
    let mut dw = vec![T::zero(); groups * q * r];
    let mut row = 0;
    for &(g, len) in segs {
        if len > 0 {
            gemm_tn_acc(
                q,
                len,
                r,
                &a[row * q..(row + len) * q],
                &dy[row * r..(row + len) * r],
                &mut dw[g * q * r..(g + 1) * q * r],
            );
        }
        row += len;
    }
    dw
}

pub(crate) fn index_select<T: Scalar>(x: &[T], shape: &[usize], axis: usize, idx: &[usize]) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = Vec::with_capacity(outer * idx.len() * inner);
    for o in 0..outer {
        let base = o * len * inner;
        for &j in idx {
            out.extend_from_slice(&x[base + j * inner..base + (j + 1) * inner]);
        }
    }
    out
}

/// `out[.., idx[t], ..] += values[.., t, ..]` in order of `t`.
pub(crate) fn index_add_into<T: Scalar>(
    out: &mut [T],
    shape: &[usize],
    axis: usize,
    idx: &[usize],
    values: &[T],
) {
    let (outer, len, inner) = axis_split(shape, axis);
    let n = idx.len();
    for o in 0..outer {
        let base = o * len * inner;
        let vbase = o * n * inner;
        for (t, &j) in idx.iter().enumerate() {
            let dst = &mut out[base + j * inner..base + (j + 1) * inner];
            let src = &values[vbase + t * inner..vbase + (t + 1) * inner];
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
        }
    }
}

/// Softmax over `axis` with optional key mask (`true` keeps the entry).
/// Masked entries and fully masked slices produce zeros.
pub(crate) fn softmax<T: Scalar>(
    x: &[T],
    shape: &[usize],
    axis: usize,
    mask: Option<&[bool]>,
) -> (Vec<T>, u64) {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    let mut fully_masked = 0;
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let keep = |j: usize| mask.is_none_or(|m| m[at(j)]);
            let mut max = T::neg_infinity();
            for j in 0..len {
                if keep(j) && x[at(j)] > max {
                    max = x[at(j)];
                }
            }
            if max == T::neg_infinity() {
                fully_masked += 1;
                continue;
            }
            let mut sum = T::zero();
            for j in 0..len {
                if keep(j) {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
            }
            let inv = sum.recip();
            for j in 0..len {
                out[at(j)] *= inv;
            }
        }
    }
    (out, fully_masked)
}

pub(crate) fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let dot: T = (0..len).map(|j| y[at(j)] * dy[at(j)]).sum();
            for j in 0..len {
                dx[at(j)] = y[at(j)] * (dy[at(j)] - dot);
            }
        }
    }
    dx
}

/// Per-row `(mean, rstd)` of a layer norm over the last axis.
pub(crate) fn layer_norm_stats<T: Scalar>(x: &[T], width: usize, eps: T) -> Vec<(T, T)> {
    let nf = T::of(width as f64);
    x.chunks(width)
        .map(|row| {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            (mean, (var + eps).sqrt().recip())
        })
        .collect()
}

/// Rotates interleaved feature pairs `[offset + 2i, offset + 2i + 1]` of each
/// vector of width `width` by `pos * theta^(-2i / d_r)`; `sign = -1` applies
/// the inverse rotation.
pub(crate) fn rope<T: Scalar>(
    x: &[T],
    width: usize,
    offset: usize,
    positions: &[usize],
    theta: f64,
    sign: f64,
) -> Vec<T> {
    let d_r = width - offset;
    let mut out = x.to_vec();
    let inv_freq: Vec<f64> = (0..d_r / 2)
        .map(|i| theta.powf(-((2 * i) as f64) / d_r as f64))
        .collect();
    for (row, &pos) in out.chunks_mut(width).zip(positions) {
        for (i, &f) in inv_freq.iter().enumerate() {
            let angle = pos as f64 * f;
            let (s, c) = (sign * angle).sin_cos();
            let (s, c) = (T::of(s), T::of(c));
            let a = row[offset + 2 * i];
            let b = row[offset + 2 * i + 1];
            row[offset + 2 * i] = a * c - b * s;
            row[offset + 2 * i + 1] = a * s + b * c;
        }
    }
    out
}

pub(crate) fn permute<T: Scalar>(x: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; nd];
    for _ in 0..x.len() {
        let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(x[src]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}
