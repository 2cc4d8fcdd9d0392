//! Recorded operations and the reverse pass.

use std::collections::{HashMap, HashSet};

use super::kernels::{self, axis_split, BatchMap};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) enum Op<T: Scalar> {
    /// Inputs `[a, b]`.
    Matmul {
        map: BatchMap,
        p: usize,
        q: usize,
        r: usize,
    },
    /// Inputs `[bias, a, b]`.
    Fma {
        map: BatchMap,
        p: usize,
        q: usize,
        r: usize,
    },
    /// Inputs `[a, w]`; row segments `(group, len)` of `a` use `w[group]`.
    SegMatmul {
        segs: Vec<(usize, usize)>,
        q: usize,
        r: usize,
    },
    /// Inputs `[bias, a, w]`.
    SegFma {
        segs: Vec<(usize, usize)>,
        q: usize,
        r: usize,
    },
    Add,
    Sub,
    Mul,
    Scale(T),
    /// Inputs `[x, bias]`, bias broadcast over the last axis.
    AddBias,
    /// Inputs `[x, s]`, each row of width `x.shape[-1]` scaled by `s[row]`.
    ScaleRows,
    Softmax {
        axis: usize,
    },
    Silu,
    IndexSelect {
        axis: usize,
        idx: Vec<usize>,
    },
    /// Inputs `[base, values]`.
    IndexAdd {
        axis: usize,
        idx: Vec<usize>,
    },
    Reshape,
    Permute {
        axes: Vec<usize>,
    },
    /// Inputs `[x, gamma, beta]`.
    LayerNorm {
        stats: Vec<(T, T)>,
    },
    Rope {
        offset: usize,
        positions: Vec<usize>,
        theta: f64,
    },
    CrossEntropy {
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum,
    SumAxis {
        axis: usize,
    },
    /// Concatenation along axis 0; `sizes` are the per-input element counts.
    Concat {
        sizes: Vec<usize>,
    },
}

impl<T: Scalar> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Matmul { .. } => "matmul",
            Op::Fma { .. } => "fused_multiply_accumulate",
            Op::SegMatmul { .. } => "matmul_segmented",
            Op::SegFma { .. } => "fused_multiply_accumulate_segmented",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddBias => "add_bias",
            Op::ScaleRows => "scale_rows",
            Op::Softmax { .. } => "softmax",
            Op::Silu => "silu",
            Op::IndexSelect { .. } => "index_select",
            Op::IndexAdd { .. } => "index_add",
            Op::Reshape => "reshape",
            Op::Permute { .. } => "permute",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Rope { .. } => "rope",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Concat { .. } => "concat",
        }
    }

    /// Gradients for each input given the output and its upstream gradient.
    fn backward(&self, out: &Tensor<T>, inputs: &[Tensor<T>], dy: &[T]) -> Vec<Option<Vec<T>>> {
        let need = |i: usize| inputs[i].requires_grad();
        match self {
            Op::Matmul { map, p, q, r } => {
                let (a, b) = (&inputs[0], &inputs[1]);
                let a_batches = a.numel() / (p * q);
                let b_batches = b.numel() / (q * r);
                vec![
                    need(0).then(|| kernels::bmm_backward_a(map, *p, *q, *r, b.data(), dy, a_batches)),
                    need(1).then(|| kernels::bmm_backward_b(map, *p, *q, *r, a.data(), dy, b_batches)),
                ]
            }
            Op::Fma { map, p, q, r } => {
                let (a, b) = (&inputs[1], &inputs[2]);
                let a_batches = a.numel() / (p * q);
                let b_batches = b.numel() / (q * r);
                vec![
                    need(0).then(|| dy.to_vec()),
                    need(1).then(|| kernels::bmm_backward_a(map, *p, *q, *r, b.data(), dy, a_batches)),
                    need(2).then(|| kernels::bmm_backward_b(map, *p, *q, *r, a.data(), dy, b_batches)),
                ]
            }
            Op::SegMatmul { segs, q, r } => {
                let (a, w) = (&inputs[0], &inputs[1]);
                let groups = w.shape()[0];
                vec![
                    need(0).then(|| kernels::seg_backward_a(segs, *q, *r, w.data(), dy)),
                    need(1).then(|| kernels::seg_backward_w(segs, *q, *r, a.data(), dy, groups)),
                ]
            }
            Op::SegFma { segs, q, r } => {
                let (a, w) = (&inputs[1], &inputs[2]);
                let groups = w.shape()[0];
                vec![
                    need(0).then(|| dy.to_vec()),
                    need(1).then(|| kernels::seg_backward_a(segs, *q, *r, w.data(), dy)),
                    need(2).then(|| kernels::seg_backward_w(segs, *q, *r, a.data(), dy, groups)),
                ]
            }
            Op::Add => vec![need(0).then(|| dy.to_vec()), need(1).then(|| dy.to_vec())],
            Op::Sub => vec![
                need(0).then(|| dy.to_vec()),
                need(1).then(|| dy.iter().map(|&g| -g).collect()),
            ],
            Op::Mul => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                vec![
                    need(0).then(|| dy.iter().zip(b).map(|(&g, &v)| g * v).collect()),
                    need(1).then(|| dy.iter().zip(a).map(|(&g, &v)| g * v).collect()),
                ]
            }
            Op::Scale(c) => vec![Some(dy.iter().map(|&g| g * *c).collect())],
            Op::AddBias => {
                let width = inputs[1].numel();
                vec![
                    need(0).then(|| dy.to_vec()),
                    need(1).then(|| {
                        let mut db = vec![T::zero(); width];
                        for row in dy.chunks(width) {
                            db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                        }
                        db
                    }),
                ]
            }
            Op::ScaleRows => {
                let (x, s) = (&inputs[0], &inputs[1]);
                let width = x.numel() / s.numel().max(1);
                vec![
                    need(0).then(|| {
                        dy.chunks(width)
                            .zip(s.data())
                            .flat_map(|(row, &sv)| row.iter().map(move |&g| g * sv))
                            .collect()
                    }),
                    need(1).then(|| {
                        dy.chunks(width)
                            .zip(x.data().chunks(width))
                            .map(|(g, xv)| g.iter().zip(xv).map(|(&a, &b)| a * b).sum())
                            .collect()
                    }),
                ]
            }
            Op::Softmax { axis } => vec![Some(kernels::softmax_backward(out.data(), dy, out.shape(), *axis))],
            Op::Silu => {
                let x = inputs[0].data();
                vec![Some(
                    x.iter()
                        .zip(dy)
                        .map(|(&v, &g)| {
                            let s = (T::one() + (-v).exp()).recip();
                            g * s * (T::one() + v * (T::one() - s))
                        })
                        .collect(),
                )]
            }
            Op::IndexSelect { axis, idx } => {
                let x = &inputs[0];
                let mut dx = vec![T::zero(); x.numel()];
                kernels::index_add_into(&mut dx, x.shape(), *axis, idx, dy);
                vec![Some(dx)]
            }
            Op::IndexAdd { axis, idx } => vec![
                need(0).then(|| dy.to_vec()),
                need(1).then(|| kernels::index_select(dy, out.shape(), *axis, idx)),
            ],
            Op::Reshape => vec![Some(dy.to_vec())],
            Op::Permute { axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                vec![Some(kernels::permute(dy, out.shape(), &inverse).0)]
            }
            Op::LayerNorm { stats } => {
                let (x, gamma) = (inputs[0].data(), inputs[1].data());
                let width = gamma.len();
                let nf = T::of(width as f64);
                let mut dx = vec![T::zero(); x.len()];
                let mut dgamma = vec![T::zero(); width];
                let mut dbeta = vec![T::zero(); width];
                for (row, &(mean, rstd)) in stats.iter().enumerate() {
                    let xr = &x[row * width..(row + 1) * width];
                    let gr = &dy[row * width..(row + 1) * width];
                    let xhat: Vec<T> = xr.iter().map(|&v| (v - mean) * rstd).collect();
                    let dxhat: Vec<T> = gr.iter().zip(gamma).map(|(&g, &w)| g * w).collect();
                    let mean_d = dxhat.iter().copied().sum::<T>() / nf;
                    let mean_dx = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / nf;
                    for j in 0..width {
                        dx[row * width + j] = rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                }
                vec![need(0).then_some(dx), need(1).then_some(dgamma), need(2).then_some(dbeta)]
            }
            Op::Rope {
                offset,
                positions,
                theta,
            } => {
                let width = *out.shape().last().expect("rope input has a feature axis");
                vec![Some(kernels::rope(dy, width, *offset, positions, *theta, -1.0))]
            }
            Op::CrossEntropy { targets, probs } => {
                let rows = targets.len();
                let vocab = probs.len() / rows;
                let scale = dy[0] / T::of(rows as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * vocab + t] -= scale;
                }
                vec![Some(dx)]
            }
            Op::Sum => vec![Some(vec![dy[0]; inputs[0].numel()])],
            Op::SumAxis { axis } => {
                let x = &inputs[0];
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let mut dx = vec![T::zero(); x.numel()];
                for o in 0..outer {
                    for j in 0..len {
                        let dst = &mut dx[(o * len + j) * inner..(o * len + j + 1) * inner];
                        dst.copy_from_slice(&dy[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(dx)]
            }
            Op::Concat { sizes } => {
                let mut offset = 0;
                sizes
                    .iter()
                    .enumerate()
                    .map(|(i, &n)| {
                        let g = need(i).then(|| dy[offset..offset + n].to_vec());
                        offset += n;
                        g
                    })
                    .collect()
            }
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// Reverse pass from a single-element loss. Gradients accumulate into
    /// every reachable leaf that requires them; call [`Tensor::zero_grad`]
    /// between independent passes.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Contract(
                "backward() on a tensor that does not depend on any parameter".into(),
            ));
        }

        // Post-order DFS; reversed it visits every node after all its consumers.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((t, child)) = stack.pop() {
            let inputs = t.node().map(|n| n.inputs.as_slice()).unwrap_or(&[]);
            if child < inputs.len() {
                let next = inputs[child].clone();
                stack.push((t, child + 1));
                if next.requires_grad() && visited.insert(next.id()) {
                    stack.push((next, 0));
                }
            } else {
                order.push(t);
            }
        }

        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            match t.node() {
                None => t.accumulate_grad(&g),
                Some(node) => {
                    let input_grads = node.op.backward(t, &node.inputs, &g);
                    for (input, ig) in node.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        match grads.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                            None => {
                                grads.insert(input.id(), ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
