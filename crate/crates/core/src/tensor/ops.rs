use super::counters;
use super::kernels::{self, axis_split, BatchMap};
use super::{numel_of, Op, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Index {
            op,
            index: axis,
            bound: shape.len(),
        });
    }
    Ok(())
}

fn check_indices(op: &'static str, idx: &[usize], bound: usize) -> Result<()> {
    match idx.iter().find(|&&i| i >= bound) {
        Some(&index) => Err(Error::Index { op, index, bound }),
        None => Ok(()),
    }
}

/// Validated operand layout of a batched product.
struct Product {
    map: BatchMap,
    p: usize,
    q: usize,
    r: usize,
}

fn plan_batched(op: &'static str, a: &[usize], b: &[usize]) -> Result<Product> {
    if a.len() != 3 || b.len() != 3 || a[2] != b[1] {
        return Err(shape_err(op, a, b));
    }
    let batch = match (a[0], b[0]) {
        (x, y) if x == y => x,
        (1, y) => y,
        (x, 1) => x,
        _ => return Err(shape_err(op, a, b)),
    };
    let slot = |n: usize, i: usize| if n == 1 { 0 } else { i };
    Ok(Product {
        map: BatchMap {
            batch,
            a_slot: (0..batch).map(|i| slot(a[0], i)).collect(),
            b_slot: (0..batch).map(|i| slot(b[0], i)).collect(),
        },
        p: a[1],
        q: a[2],
        r: b[2],
    })
}

fn plan_grouped(op: &'static str, a: &[usize], w: &[usize], groups: &[usize]) -> Result<Product> {
    if a.len() != 3 || w.len() != 3 || a[2] != w[1] || groups.len() != a[0] {
        return Err(shape_err(op, a, w));
    }
    check_indices(op, groups, w[0])?;
    Ok(Product {
        map: BatchMap {
            batch: a[0],
            a_slot: (0..a[0]).collect(),
            b_slot: groups.to_vec(),
        },
        p: a[1],
        q: a[2],
        r: w[2],
    })
}

fn check_segmented(op: &'static str, a: &[usize], w: &[usize], segs: &[(usize, usize)]) -> Result<(usize, usize)> {
    if a.len() != 2 || w.len() != 3 || a[1] != w[1] {
        return Err(shape_err(op, a, w));
    }
    let rows: usize = segs.iter().map(|s| s.1).sum();
    if rows != a[0] {
        return Err(shape_err(op, a, &[rows]));
    }
    let groups: Vec<usize> = segs.iter().map(|s| s.0).collect();
    check_indices(op, &groups, w[0])?;
    Ok((w[1], w[2]))
}

impl<T: Scalar> Tensor<T> {
    fn product(&self, b: &Tensor<T>, pr: Product) -> Tensor<T> {
        let Product { map, p, q, r } = pr;
        let mut out = vec![T::zero(); map.batch * p * r];
        kernels::bmm_forward(&map, p, q, r, self.data(), b.data(), &mut out, false);
        counters::add_flops((2 * map.batch * p * q * r) as u64);
        let shape = vec![map.batch, p, r];
        Tensor::from_op(out, shape, Op::Matmul { map, p, q, r }, vec![self.clone(), b.clone()])
    }

    fn fused_product(bias: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>, pr: Product) -> Result<Tensor<T>> {
        let Product { map, p, q, r } = pr;
        let shape = vec![map.batch, p, r];
        if bias.shape() != shape.as_slice() {
            return Err(shape_err("fused_multiply_accumulate", bias.shape(), &shape));
        }
        // The bias copy is the accumulation target; the product is added into it
        // by the GEMM itself (beta = 1), with no separate addition pass.
        let mut out = bias.data().to_vec();
        kernels::bmm_forward(&map, p, q, r, a.data(), b.data(), &mut out, true);
        counters::add_flops((2 * map.batch * p * q * r) as u64);
        Ok(Tensor::from_op(
            out,
            shape,
            Op::Fma { map, p, q, r },
            vec![bias.clone(), a.clone(), b.clone()],
        ))
    }

    /// `[b, p, q] x [b, q, r] -> [b, p, r]`; either batch may be 1 and broadcast.
    pub fn matmul_batched(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let pr = plan_batched("matmul_batched", self.shape(), b.shape())?;
        Ok(self.product(b, pr))
    }

    /// Plain `[p, q] x [q, r] -> [p, r]`.
    pub fn matmul(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let pr = plan_batched("matmul", &[1, sa[0], sa[1]], &[1, sb[0], sb[1]])?;
        let a3 = self.reshape(&[1, sa[0], sa[1]])?;
        let b3 = b.reshape(&[1, sb[0], sb[1]])?;
        a3.product(&b3, pr).reshape(&[sa[0], sb[1]])
    }

    /// `out[u] = self[u] x w[groups[u]]` for `self: [U, p, q]`, `w: [n, q, r]`.
    ///
    /// This is the uniformly encoded expert product: every routed unit names
    /// the expert slice it multiplies with, so one call covers all experts.
    pub fn matmul_grouped(&self, w: &Tensor<T>, groups: &[usize]) -> Result<Tensor<T>> {
        let pr = plan_grouped("matmul_grouped", self.shape(), w.shape(), groups)?;
        Ok(self.product(w, pr))
    }

    /// `bias + a x b` for `[b, p, q] x [b, q, r]` with `bias: [b, p, r]`.
    pub fn fused_multiply_accumulate(bias: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let pr = plan_batched("fused_multiply_accumulate", a.shape(), b.shape())?;
        Self::fused_product(bias, a, b, pr)
    }

    /// Grouped form of [`Tensor::fused_multiply_accumulate`].
    pub fn fused_multiply_accumulate_grouped(
        bias: &Tensor<T>,
        a: &Tensor<T>,
        w: &Tensor<T>,
        groups: &[usize],
    ) -> Result<Tensor<T>> {
        let pr = plan_grouped("fused_multiply_accumulate", a.shape(), w.shape(), groups)?;
        Self::fused_product(bias, a, w, pr)
    }

    /// Expert product over consecutive row segments: `self: [R, q]`,
    /// `w: [n, q, r]`, and each `(group, len)` segment of rows is multiplied
    /// by `w[group]`. Segment lengths may differ, which is what ragged
    /// per-expert loads need.
    pub fn matmul_segmented(&self, w: &Tensor<T>, segments: &[(usize, usize)]) -> Result<Tensor<T>> {
        let (q, r) = check_segmented("matmul_segmented", self.shape(), w.shape(), segments)?;
        let rows = self.shape()[0];
        let mut out = vec![T::zero(); rows * r];
        kernels::seg_forward(segments, q, r, self.data(), w.data(), &mut out, false);
        counters::add_flops((2 * rows * q * r) as u64);
        Ok(Tensor::from_op(
            out,
            vec![rows, r],
            Op::SegMatmul {
                segs: segments.to_vec(),
                q,
                r,
            },
            vec![self.clone(), w.clone()],
        ))
    }

    /// `bias + a.matmul_segmented(w, segments)` with the bias copy as the
    /// accumulation target.
    pub fn fused_multiply_accumulate_segmented(
        bias: &Tensor<T>,
        a: &Tensor<T>,
        w: &Tensor<T>,
        segments: &[(usize, usize)],
    ) -> Result<Tensor<T>> {
        let (q, r) = check_segmented("fused_multiply_accumulate", a.shape(), w.shape(), segments)?;
        let rows = a.shape()[0];
        if bias.shape() != [rows, r] {
            return Err(shape_err("fused_multiply_accumulate", bias.shape(), &[rows, r]));
        }
        let mut out = bias.data().to_vec();
        kernels::seg_forward(segments, q, r, a.data(), w.data(), &mut out, true);
        counters::add_flops((2 * rows * q * r) as u64);
        Ok(Tensor::from_op(
            out,
            vec![rows, r],
            Op::SegFma {
                segs: segments.to_vec(),
                q,
                r,
            },
            vec![bias.clone(), a.clone(), w.clone()],
        ))
    }

    fn zip_same(&self, other: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        if self.shape() != other.shape() {
            return Err(shape_err(op, self.shape(), other.shape()));
        }
        Ok(self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect())
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.zip_same(other, "add", |a, b| a + b)?;
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::Add, vec![self.clone(), other.clone()]))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.zip_same(other, "sub", |a, b| a - b)?;
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::Sub, vec![self.clone(), other.clone()]))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.zip_same(other, "mul", |a, b| a * b)?;
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::Mul, vec![self.clone(), other.clone()]))
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        let out = self.data().iter().map(|&v| v * c).collect();
        Tensor::from_op(out, self.shape().to_vec(), Op::Scale(c), vec![self.clone()])
    }

    /// Adds `bias` (a vector matching the last axis) to every row.
    pub fn add_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let width = bias.numel();
        if bias.ndim() != 1 || self.shape().last() != Some(&width) {
            return Err(shape_err("add_bias", self.shape(), bias.shape()));
        }
        let out = self
            .data()
            .chunks(width)
            .flat_map(|row| row.iter().zip(bias.data()).map(|(&a, &b)| a + b))
            .collect();
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::AddBias, vec![self.clone(), bias.clone()]))
    }

    /// Scales each row (last-axis vector) by the matching entry of `s`.
    pub fn scale_rows(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        let width = self.shape().last().copied().unwrap_or(1);
        if s.numel() * width != self.numel() {
            return Err(shape_err("scale_rows", self.shape(), s.shape()));
        }
        let out = self
            .data()
            .chunks(width)
            .zip(s.data())
            .flat_map(|(row, &sv)| row.iter().map(move |&v| v * sv))
            .collect();
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::ScaleRows, vec![self.clone(), s.clone()]))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        self.softmax_impl(axis, None)
    }

    /// Softmax along `axis` where `keep[i] == false` entries get zero weight.
    /// Slices with no kept entry produce zeros and bump
    /// [`counters::fully_masked_rows`].
    pub fn softmax_masked(&self, axis: usize, keep: &[bool]) -> Result<Tensor<T>> {
        if keep.len() != self.numel() {
            return Err(shape_err("softmax_masked", self.shape(), &[keep.len()]));
        }
        self.softmax_impl(axis, Some(keep))
    }

    fn softmax_impl(&self, axis: usize, keep: Option<&[bool]>) -> Result<Tensor<T>> {
        check_axis("softmax", self.shape(), axis)?;
        let (out, fully_masked) = kernels::softmax(self.data(), self.shape(), axis, keep);
        counters::add_flops(5 * self.numel() as u64);
        if fully_masked > 0 {
            counters::add_fully_masked_rows(fully_masked);
        }
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::Softmax { axis }, vec![self.clone()]))
    }

    pub fn silu(&self) -> Tensor<T> {
        let out = self
            .data()
            .iter()
            .map(|&v| v / (T::one() + (-v).exp()))
            .collect();
        Tensor::from_op(out, self.shape().to_vec(), Op::Silu, vec![self.clone()])
    }

    /// Gathers slices along `axis` in `idx` order; duplicates are copied.
    pub fn index_select(&self, axis: usize, idx: &[usize]) -> Result<Tensor<T>> {
        check_axis("index_select", self.shape(), axis)?;
        check_indices("index_select", idx, self.shape()[axis])?;
        let out = kernels::index_select(self.data(), self.shape(), axis, idx);
        let mut shape = self.shape().to_vec();
        shape[axis] = idx.len();
        Ok(Tensor::from_op(
            out,
            shape,
            Op::IndexSelect {
                axis,
                idx: idx.to_vec(),
            },
            vec![self.clone()],
        ))
    }

    /// `self` with `values[.., t, ..]` added at position `idx[t]` along
    /// `axis`; duplicate indices accumulate in order of `t`.
    pub fn index_add(&self, axis: usize, idx: &[usize], values: &Tensor<T>) -> Result<Tensor<T>> {
        check_axis("index_add", self.shape(), axis)?;
        check_indices("index_add", idx, self.shape()[axis])?;
        let mut expected = self.shape().to_vec();
        expected[axis] = idx.len();
        if values.shape() != expected.as_slice() {
            return Err(shape_err("index_add", &expected, values.shape()));
        }
        let mut out = self.data().to_vec();
        kernels::index_add_into(&mut out, self.shape(), axis, idx, values.data());
        counters::add_flops(values.numel() as u64);
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::IndexAdd {
                axis,
                idx: idx.to_vec(),
            },
            vec![self.clone(), values.clone()],
        ))
    }

    /// Copying reshape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel_of(shape) != self.numel() {
            return Err(shape_err("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(self.data().to_vec(), shape.to_vec(), Op::Reshape, vec![self.clone()]))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        for &a in axes {
            if a >= nd || std::mem::replace(&mut seen[a], true) {
                return Err(shape_err("permute", self.shape(), axes));
            }
        }
        if axes.len() != nd {
            return Err(shape_err("permute", self.shape(), axes));
        }
        let (out, shape) = kernels::permute(self.data(), self.shape(), axes);
        Ok(Tensor::from_op(out, shape, Op::Permute { axes: axes.to_vec() }, vec![self.clone()]))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor<T>> {
        let nd = self.ndim();
        if nd < 2 {
            return Err(shape_err("transpose_last2", self.shape(), &[]));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let width = gamma.numel();
        if self.shape().last() != Some(&width) || beta.numel() != width {
            return Err(shape_err("layer_norm", self.shape(), gamma.shape()));
        }
        let stats = kernels::layer_norm_stats(self.data(), width, T::of(eps));
        let mut out = Vec::with_capacity(self.numel());
        for (row, &(mean, rstd)) in self.data().chunks(width).zip(&stats) {
            for ((&v, &g), &b) in row.iter().zip(gamma.data()).zip(beta.data()) {
                out.push((v - mean) * rstd * g + b);
            }
        }
        counters::add_flops(5 * self.numel() as u64);
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::LayerNorm { stats },
            vec![self.clone(), gamma.clone(), beta.clone()],
        ))
    }

    /// Rotary embedding on features `[offset, width)` of every last-axis
    /// vector; `positions[v]` is the position of vector `v`.
    pub fn rope(&self, positions: &[usize], offset: usize, theta: f64) -> Result<Tensor<T>> {
        let width = self.shape().last().copied().unwrap_or(0);
        if offset > width || !(width - offset).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rope: rotated width {} must be even",
                width.saturating_sub(offset)
            )));
        }
        if width == 0 || positions.len() * width != self.numel() {
            return Err(shape_err("rope", self.shape(), &[positions.len()]));
        }
        let out = kernels::rope(self.data(), width, offset, positions, theta, 1.0);
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Rope {
                offset,
                positions: positions.to_vec(),
                theta,
            },
            vec![self.clone()],
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `self: [rows, vocab]`.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor<T>> {
        if self.ndim() != 2 || self.shape()[0] != targets.len() || targets.is_empty() {
            return Err(shape_err("cross_entropy", self.shape(), &[targets.len()]));
        }
        let vocab = self.shape()[1];
        check_indices("cross_entropy", targets, vocab)?;
        let (probs, _) = kernels::softmax(self.data(), self.shape(), 1, None);
        let mut nll = T::zero();
        for (&t, logits) in targets.iter().zip(self.data().chunks(vocab)) {
            let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            nll += lse - logits[t];
        }
        counters::add_flops(5 * self.numel() as u64);
        let mean = nll / T::of(targets.len() as f64);
        Ok(Tensor::from_op(
            vec![mean],
            Vec::new(),
            Op::CrossEntropy {
                targets: targets.to_vec(),
                probs,
            },
            vec![self.clone()],
        ))
    }

    pub fn sum(&self) -> Tensor<T> {
        let total = self.data().iter().copied().sum();
        Tensor::from_op(vec![total], Vec::new(), Op::Sum, vec![self.clone()])
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis("sum_axis", self.shape(), axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, &s)| *d += s);
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_op(out, shape, Op::SumAxis { axis }, vec![self.clone()]))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis("mean_axis", self.shape(), axis)?;
        let len = T::of(self.shape()[axis] as f64);
        Ok(self.sum_axis(axis)?.scale(len.recip()))
    }

    /// Concatenation along axis 0.
    pub fn concat(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tail = &first.shape()[1..];
        let mut rows = 0;
        for p in parts {
            if p.ndim() == 0 || &p.shape()[1..] != tail {
                return Err(shape_err("concat", first.shape(), p.shape()));
            }
            rows += p.shape()[0];
        }
        let mut out = Vec::with_capacity(parts.iter().map(Tensor::numel).sum());
        for p in parts {
            out.extend_from_slice(p.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        Ok(Tensor::from_op(
            out,
            shape,
            Op::Concat {
                sizes: parts.iter().map(Tensor::numel).collect(),
            },
            parts.to_vec(),
        ))
    }
}
