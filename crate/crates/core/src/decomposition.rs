//! Lossless expert partitions of dense MLP and attention weights.
//!
//! An MLP `y = φ₂(SiLU(x·A₁)·A₂)` splits into `n` experts by taking column
//! slices of `A₁` and the matching row slices of `A₂`: each expert computes
//! `SiLU(x·A₁[:, s])·A₂[s, :]` and the partial outputs are summed before
//! `φ₂`, which reproduces the dense result because SiLU acts element-wise on
//! the hidden units. Attention splits the same way, one head per expert.
//!
//! Slices are stored stacked (`[n, d, d_e]`, `[n, d_e, d]`) so that all
//! experts run as one batched product.

use crate::error::{config_err, shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Activation applied after the second MLP layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SecondActivation {
    #[default]
    Identity,
    Silu,
}

impl SecondActivation {
    pub fn apply<T: Scalar>(self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            SecondActivation::Identity => x.clone(),
            SecondActivation::Silu => x.silu(),
        }
    }
}

/// Dense two-layer MLP, the reference the experts must reproduce.
#[derive(Debug, Clone)]
pub struct DenseMlp<T: Scalar> {
    /// `[d, D_e]`
    pub a1: Tensor<T>,
    /// `[D_e, d]`
    pub a2: Tensor<T>,
    /// `[D_e]`
    pub b1: Option<Tensor<T>>,
    /// `[d]`
    pub b2: Option<Tensor<T>>,
}

impl<T: Scalar> DenseMlp<T> {
    pub fn new(a1: Tensor<T>, a2: Tensor<T>) -> Self {
        Self {
            a1,
            a2,
            b1: None,
            b2: None,
        }
    }

    /// `φ₂(SiLU(x·A₁ + b₁)·A₂ + b₂)` for `x: [rows, d]`.
    pub fn forward(&self, x: &Tensor<T>, act: SecondActivation) -> Result<Tensor<T>> {
        let mut h = x.matmul(&self.a1)?;
        if let Some(b1) = &self.b1 {
            h = h.add_bias(b1)?;
        }
        let mut y = h.silu().matmul(&self.a2)?;
        if let Some(b2) = &self.b2 {
            y = y.add_bias(b2)?;
        }
        Ok(act.apply(&y))
    }
}

pub fn dense_mlp_forward<T: Scalar>(
    x: &Tensor<T>,
    a1: &Tensor<T>,
    a2: &Tensor<T>,
    act: SecondActivation,
) -> Result<Tensor<T>> {
    DenseMlp::new(a1.clone(), a2.clone()).forward(x, act)
}

#[derive(Debug, Clone)]
pub struct MlpExpertGroup<T: Scalar> {
    /// `[n, d, d_e]`, column slices of the first layer.
    pub a_in: Tensor<T>,
    /// `[n, d_e, d]`, row slices of the second layer.
    pub a_out: Tensor<T>,
    /// `[n, d_e]`, the first-layer bias split like the columns.
    pub b_in: Option<Tensor<T>>,
    /// `[d]`, shared by all experts and added once.
    pub b_out: Option<Tensor<T>>,
}

impl<T: Scalar> MlpExpertGroup<T> {
    pub fn n(&self) -> usize {
        self.a_in.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.a_in.shape()[1]
    }

    pub fn d_e(&self) -> usize {
        self.a_in.shape()[2]
    }
}

fn split_width(op: &'static str, width: usize, n: usize) -> Result<usize> {
    if n == 0 || !width.is_multiple_of(n) {
        return Err(config_err(format!("{op}: width {width} is not divisible by {n} experts")));
    }
    Ok(width / n)
}

/// `[d, n·w] -> [n, d, w]`: expert `i` owns columns `[i·w, (i+1)·w)`.
fn split_columns<T: Scalar>(m: &Tensor<T>, n: usize, op: &'static str) -> Result<Tensor<T>> {
    if m.ndim() != 2 {
        return Err(shape_err(op, m.shape(), &[]));
    }
    let (d, width) = (m.shape()[0], m.shape()[1]);
    let w = split_width(op, width, n)?;
    m.reshape(&[d, n, w])?.permute(&[1, 0, 2])
}

fn join_columns<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d, w) = (m.shape()[0], m.shape()[1], m.shape()[2]);
    m.permute(&[1, 0, 2])?.reshape(&[d, n * w])
}

/// `[n·w, d] -> [n, w, d]`: expert `i` owns rows `[i·w, (i+1)·w)`.
fn split_rows<T: Scalar>(m: &Tensor<T>, n: usize, op: &'static str) -> Result<Tensor<T>> {
    if m.ndim() != 2 {
        return Err(shape_err(op, m.shape(), &[]));
    }
    let (height, d) = (m.shape()[0], m.shape()[1]);
    let w = split_width(op, height, n)?;
    m.reshape(&[n, w, d])
}

fn join_rows<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, w, d) = (m.shape()[0], m.shape()[1], m.shape()[2]);
    m.reshape(&[n * w, d])
}

pub fn partition_mlp<T: Scalar>(a1: &Tensor<T>, a2: &Tensor<T>, n: usize) -> Result<MlpExpertGroup<T>> {
    partition_dense_mlp(&DenseMlp::new(a1.clone(), a2.clone()), n)
}

pub fn partition_dense_mlp<T: Scalar>(mlp: &DenseMlp<T>, n: usize) -> Result<MlpExpertGroup<T>> {
    let (a1, a2) = (&mlp.a1, &mlp.a2);
    if a1.ndim() != 2 || a2.ndim() != 2 || a1.shape()[1] != a2.shape()[0] || a1.shape()[0] != a2.shape()[1] {
        return Err(shape_err("partition_mlp", a1.shape(), a2.shape()));
    }
    let a_in = split_columns(a1, n, "partition_mlp")?;
    let a_out = split_rows(a2, n, "partition_mlp")?;
    let d_e = a_in.shape()[2];
    let b_in = match &mlp.b1 {
        Some(b) => Some(b.reshape(&[n, d_e])?),
        None => None,
    };
    Ok(MlpExpertGroup {
        a_in,
        a_out,
        b_in,
        b_out: mlp.b2.clone(),
    })
}

pub fn reconstruct_mlp<T: Scalar>(g: &MlpExpertGroup<T>) -> Result<DenseMlp<T>> {
    let b1 = match &g.b_in {
        Some(b) => Some(b.reshape(&[b.numel()])?),
        None => None,
    };
    Ok(DenseMlp {
        a1: join_columns(&g.a_in)?,
        a2: join_rows(&g.a_out)?,
        b1,
        b2: g.b_out.clone(),
    })
}

/// Sum of all expert partial outputs, then `φ₂`. With every expert active
/// this equals [`dense_mlp_forward`] on the reconstructed weights.
pub fn expert_union_mlp_forward<T: Scalar>(
    x: &Tensor<T>,
    g: &MlpExpertGroup<T>,
    act: SecondActivation,
) -> Result<Tensor<T>> {
    expert_union_mlp_forward_ordered(x, g, act, &(0..g.n()).collect::<Vec<_>>())
}

/// [`expert_union_mlp_forward`] accumulating experts in the given order.
pub fn expert_union_mlp_forward_ordered<T: Scalar>(
    x: &Tensor<T>,
    g: &MlpExpertGroup<T>,
    act: SecondActivation,
    order: &[usize],
) -> Result<Tensor<T>> {
    if x.ndim() != 2 || x.shape()[1] != g.d() {
        return Err(shape_err("expert_union_mlp_forward", x.shape(), g.a_in.shape()));
    }
    let (l, d, n) = (x.shape()[0], g.d(), order.len());
    let x3 = x.reshape(&[1, l, d])?;
    let a_in = g.a_in.index_select(0, order)?;
    let mut h = x3.matmul_batched(&a_in)?;
    if let Some(b) = &g.b_in {
        let rows: Vec<usize> = order.iter().flat_map(|&i| std::iter::repeat_n(i, l)).collect();
        let expanded = b.index_select(0, &rows)?.reshape(&[n, l, g.d_e()])?;
        h = h.add(&expanded)?;
    }
    let parts = h.silu().matmul_batched(&g.a_out.index_select(0, order)?)?;
    let idx: Vec<usize> = (0..n).flat_map(|_| 0..l).collect();
    let mut y = Tensor::zeros(&[l, d]).index_add(0, &idx, &parts.reshape(&[n * l, d])?)?;
    if let Some(b) = &g.b_out {
        y = y.add_bias(b)?;
    }
    Ok(act.apply(&y))
}

#[derive(Debug, Clone)]
pub struct AttnExpertGroup<T: Scalar> {
    /// `[n, d, d_h]`
    pub w_q: Tensor<T>,
    /// `[n, d, d_h]`
    pub w_k: Tensor<T>,
    /// `[n, d, d_h]`
    pub w_v: Tensor<T>,
    /// `[n, d_h, d]`
    pub w_o: Tensor<T>,
}

impl<T: Scalar> AttnExpertGroup<T> {
    pub fn n(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.w_q.shape()[1]
    }

    pub fn d_h(&self) -> usize {
        self.w_q.shape()[2]
    }
}

/// Dense multi-head projections: `w_q, w_k, w_v: [d, n·d_h]`, `w_o: [n·d_h, d]`.
#[derive(Debug, Clone)]
pub struct DenseAttention<T: Scalar> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
}

pub fn partition_attention<T: Scalar>(
    wq: &Tensor<T>,
    wk: &Tensor<T>,
    wv: &Tensor<T>,
    wo: &Tensor<T>,
    n: usize,
) -> Result<AttnExpertGroup<T>> {
    if wq.shape() != wk.shape() || wq.shape() != wv.shape() || wo.ndim() != 2 {
        return Err(shape_err("partition_attention", wq.shape(), wk.shape()));
    }
    if wq.ndim() != 2 || wo.shape()[0] != wq.shape()[1] || wo.shape()[1] != wq.shape()[0] {
        return Err(shape_err("partition_attention", wq.shape(), wo.shape()));
    }
    Ok(AttnExpertGroup {
        w_q: split_columns(wq, n, "partition_attention")?,
        w_k: split_columns(wk, n, "partition_attention")?,
        w_v: split_columns(wv, n, "partition_attention")?,
        w_o: split_rows(wo, n, "partition_attention")?,
    })
}

pub fn reconstruct_attention<T: Scalar>(g: &AttnExpertGroup<T>) -> Result<DenseAttention<T>> {
    Ok(DenseAttention {
        w_q: join_columns(&g.w_q)?,
        w_k: join_columns(&g.w_k)?,
        w_v: join_columns(&g.w_v)?,
        w_o: join_rows(&g.w_o)?,
    })
}
