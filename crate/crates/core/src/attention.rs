//! Selective multi-head attention.
//!
//! Each head is an expert. Routed tokens are gathered once, projected per
//! expert with segmented products, attended within their `(sample, expert)`
//! unit and projected back, and the result is scatter-added onto the
//! residual stream.
//!
//! Because routed token lists are sorted, the causal mask restricted to the
//! tokens of a unit is always the leading lower-triangular block, so one
//! `tril(l_a)` pattern serves every unit.

use crate::decomposition::{AttnExpertGroup, DenseAttention};
use crate::error::{config_err, shape_err, Error, Result};
use crate::routing::{self, DataRoutingPlan, Dispatch, GateParams, RouteConfig, Routed};
use crate::tensor::{Scalar, Tensor};

/// Rotary embedding split: the first `d_qc` (`d_kc`) features of a query
/// (key) pass through unchanged, the remaining `d_qr` (`d_kr`) are rotated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopeConfig {
    pub d_qc: usize,
    pub d_qr: usize,
    pub d_kc: usize,
    pub d_kr: usize,
    pub theta_base: f64,
}

impl RopeConfig {
    /// About half of every head rotated (the rotated width rounded up to
    /// even), base 10000.
    pub fn half(d_h: usize) -> Self {
        let r = (d_h / 2 + 1) & !1;
        let r = r.min(d_h & !1);
        Self {
            d_qc: d_h - r,
            d_qr: r,
            d_kc: d_h - r,
            d_kr: r,
            theta_base: 10000.0,
        }
    }

    pub fn with_constant(d_h: usize, d_qc: usize, d_kc: usize) -> Self {
        Self {
            d_qc,
            d_qr: d_h.saturating_sub(d_qc),
            d_kc,
            d_kr: d_h.saturating_sub(d_kc),
            theta_base: 10000.0,
        }
    }

    pub fn validate(&self, d_h: usize) -> Result<()> {
        if self.d_qc + self.d_qr != d_h || self.d_kc + self.d_kr != d_h {
            return Err(config_err(format!("rope split {self:?} does not cover head width {d_h}")));
        }
        if !self.d_qr.is_multiple_of(2) || !self.d_kr.is_multiple_of(2) {
            return Err(config_err(format!(
                "rotated widths must be even, got d_qr = {} and d_kr = {}",
                self.d_qr, self.d_kr
            )));
        }
        if self.theta_base.is_nan() || self.theta_base <= 0.0 {
            return Err(config_err("rope theta base must be positive"));
        }
        Ok(())
    }
}

/// Rotates every last-axis vector of `x` (width `d_r`, even) by its position.
pub fn apply_rope<T: Scalar>(x: &Tensor<T>, positions: &[usize], theta_base: f64) -> Result<Tensor<T>> {
    x.rope(positions, 0, theta_base)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AttentionMask {
    /// `true` marks a real token, one entry per token of the `[b, l]` batch.
    pub padding: Option<Vec<bool>>,
    pub causal: bool,
}

impl AttentionMask {
    pub fn causal() -> Self {
        Self {
            padding: None,
            causal: true,
        }
    }
}

/// Lower-triangular `l × l` causal mask, row-major, `true` = visible.
pub fn causal_mask(l: usize) -> Vec<bool> {
    (0..l * l).map(|t| t % l <= t / l).collect()
}

/// The causal mask shared by every expert's `l_a` selected tokens.
pub fn shared_causal_submask(l_a: usize) -> Vec<bool> {
    causal_mask(l_a)
}

/// `mask[rows][:, cols]` of a row-major square mask of side `l`.
pub fn index_mask(mask: &[bool], l: usize, rows: &[usize], cols: &[usize]) -> Vec<bool> {
    rows.iter()
        .flat_map(|&r| cols.iter().map(move |&c| mask[r * l + c]))
        .collect()
}

/// Per-expert padding masks at the expert's selected token positions; empty
/// for experts that receive no patches.
pub fn select_padding_mask(mask: &[bool], plan: &DataRoutingPlan, l_p: usize) -> Result<Vec<Vec<bool>>> {
    if mask.len() != plan.m * l_p {
        return Err(shape_err("select_padding_mask", &[mask.len()], &[plan.m, l_p]));
    }
    Ok(plan
        .id
        .iter()
        .map(|patches| {
            patches
                .iter()
                .flat_map(|&j| mask[j * l_p..(j + 1) * l_p].iter().copied())
                .collect()
        })
        .collect())
}

/// `softmax(q·kᵀ/√d_h)·v` per unit for `q, k, v: [U, L, d_h]`. Keys with
/// `key_keep[u·L + j] == false` and, when `causal`, keys after the query get
/// zero weight; a query with no visible key outputs zeros.
pub fn scaled_dot_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    causal: bool,
    key_keep: Option<&[bool]>,
) -> Result<Tensor<T>> {
    if q.ndim() != 3 || q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(shape_err("scaled_dot_attention", q.shape(), k.shape()));
    }
    let (units, len, d_h) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    if key_keep.is_some_and(|m| m.len() != units * len) {
        return Err(shape_err("scaled_dot_attention", q.shape(), &[key_keep.map_or(0, <[bool]>::len)]));
    }
    let scores = q
        .matmul_batched(&k.transpose_last2()?)?
        .scale(T::of(1.0 / (d_h as f64).sqrt()));
    let weights = if causal || key_keep.is_some() {
        let tril = shared_causal_submask(len);
        let keep: Vec<bool> = (0..units * len * len)
            .map(|t| {
                let (u, a, b) = (t / (len * len), (t / len) % len, t % len);
                (!causal || tril[a * len + b]) && key_keep.is_none_or(|m| m[u * len + b])
            })
            .collect();
        scores.softmax_masked(2, &keep)?
    } else {
        scores.softmax(2)?
    };
    weights.matmul_batched(v)
}

/// How a routed block's expert work is laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecStrategy {
    /// One gather, product and scatter per expert.
    Serial,
    /// One gather and scatter for the block, segmented expert products.
    #[default]
    Batched,
    /// As `Batched`, with bias additions folded into the products.
    Fused,
}

impl std::str::FromStr for ExecStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "serial" => Ok(ExecStrategy::Serial),
            "batched" => Ok(ExecStrategy::Batched),
            "fused" => Ok(ExecStrategy::Fused),
            other => Err(config_err(format!("unknown strategy `{other}`"))),
        }
    }
}

impl std::fmt::Display for ExecStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExecStrategy::Serial => "serial",
            ExecStrategy::Batched => "batched",
            ExecStrategy::Fused => "fused",
        })
    }
}

#[derive(Debug, Clone)]
pub struct SmhaParams<T: Scalar> {
    pub experts: AttnExpertGroup<T>,
    pub gate: GateParams<T>,
    pub rope: RopeConfig,
    /// Rotate by position inside the expert's selection instead of the
    /// original token position.
    pub compact_positions: bool,
    pub gate_scale_outputs: bool,
}

pub struct SmhaOutput<T: Scalar> {
    pub u: Tensor<T>,
    pub routed: Routed<T>,
}

/// `u = h + Σ_experts scatter(o_i)` for `h: [b, l, d]`, routed on `h`.
pub fn smha_forward<T: Scalar>(
    h: &Tensor<T>,
    p: &SmhaParams<T>,
    mask: &AttentionMask,
    cfg: &RouteConfig,
) -> Result<SmhaOutput<T>> {
    let routed = routing::route(h, &p.gate, cfg)?;
    let u = attend_routed(h, h, p, mask, &routed, ExecStrategy::Batched)?;
    Ok(SmhaOutput { u, routed })
}

fn expert_slice<T: Scalar>(w: &Tensor<T>, i: usize) -> Result<Tensor<T>> {
    let (rows, cols) = (w.shape()[1], w.shape()[2]);
    w.index_select(0, &[i])?.reshape(&[rows, cols])
}

/// Attention of the routed tokens of `input: [b, l, d]`, scatter-added onto
/// `residual` (same shape).
pub fn attend_routed<T: Scalar>(
    input: &Tensor<T>,
    residual: &Tensor<T>,
    p: &SmhaParams<T>,
    mask: &AttentionMask,
    routed: &Routed<T>,
    strategy: ExecStrategy,
) -> Result<Tensor<T>> {
    if input.ndim() != 3 || input.shape() != residual.shape() || input.shape()[2] != p.experts.d() {
        return Err(shape_err("smha_forward", input.shape(), residual.shape()));
    }
    let (b, l, d) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if let Some(pad) = &mask.padding {
        if pad.len() != b * l {
            return Err(shape_err("smha_forward", &[b, l], &[pad.len()]));
        }
    }
    p.rope.validate(p.experts.d_h())?;
    let x_flat = input.reshape(&[b * l, d])?;
    let mut out = residual.reshape(&[b * l, d])?;
    let gates = if p.gate_scale_outputs { routed.scaling_gates() } else { None };
    match strategy {
        ExecStrategy::Serial => {
            for i in 0..p.experts.n() {
                let part = routed.dispatch.restrict(|u| u.expert == i);
                if part.units.is_empty() {
                    continue;
                }
                let rows = part.gather(&x_flat)?;
                let proj = |w: &Tensor<T>| rows.matmul(&expert_slice(w, i)?);
                let (q, k, v) = (proj(&p.experts.w_q)?, proj(&p.experts.w_k)?, proj(&p.experts.w_v)?);
                let o = attend_units(&part, q, k, v, p, mask)?.matmul(&expert_slice(&p.experts.w_o, i)?)?;
                out = part.scatter_add(&out, &scale_by_gates(o, &part, gates.as_ref())?)?;
            }
        }
        ExecStrategy::Batched | ExecStrategy::Fused => {
            let dispatch = &routed.dispatch;
            let segs = dispatch.segments();
            let rows = dispatch.gather(&x_flat)?;
            let q = rows.matmul_segmented(&p.experts.w_q, &segs)?;
            let k = rows.matmul_segmented(&p.experts.w_k, &segs)?;
            let v = rows.matmul_segmented(&p.experts.w_v, &segs)?;
            let o = attend_units(dispatch, q, k, v, p, mask)?.matmul_segmented(&p.experts.w_o, &segs)?;
            out = dispatch.scatter_add(&out, &scale_by_gates(o, dispatch, gates.as_ref())?)?;
        }
    }
    out.reshape(&[b, l, d])
}

fn scale_by_gates<T: Scalar>(o: Tensor<T>, dispatch: &Dispatch, gates: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    match gates {
        Some(g) if !dispatch.gate_index.is_empty() => o.scale_rows(&g.index_select(0, &dispatch.gate_index)?),
        _ => Ok(o),
    }
}

/// RoPE plus per-unit attention for dispatched `q, k, v: [R, d_h]`.
fn attend_units<T: Scalar>(
    dispatch: &Dispatch,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    p: &SmhaParams<T>,
    mask: &AttentionMask,
) -> Result<Tensor<T>> {
    let d_h = q.shape()[1];
    let positions = if p.compact_positions {
        dispatch.compacted_positions()
    } else {
        dispatch.positions()
    };
    let q = q.rope(&positions, p.rope.d_qc, p.rope.theta_base)?;
    let k = k.rope(&positions, p.rope.d_kc, p.rope.theta_base)?;
    let key_keep: Option<Vec<bool>> = mask
        .padding
        .as_ref()
        .map(|pad| dispatch.rows.iter().map(|&r| pad[r]).collect());

    // Consecutive units of equal length attend in one batched call.
    let mut chunks: Vec<(usize, usize, usize)> = Vec::new();
    let mut start = 0;
    for u in &dispatch.units {
        match chunks.last_mut() {
            Some((_, len, count)) if *len == u.len => *count += 1,
            _ => chunks.push((start, u.len, 1)),
        }
        start += u.len;
    }
    let mut outputs = Vec::with_capacity(chunks.len());
    for &(row0, len, count) in &chunks {
        let rows = len * count;
        let take = |t: &Tensor<T>| -> Result<Tensor<T>> {
            let part = if chunks.len() == 1 {
                t.clone()
            } else {
                t.index_select(0, &(row0..row0 + rows).collect::<Vec<_>>())?
            };
            part.reshape(&[count, len, d_h])
        };
        let keep = key_keep.as_ref().map(|m| &m[row0..row0 + rows]);
        let o = scaled_dot_attention(&take(&q)?, &take(&k)?, &take(&v)?, mask.causal, keep)?;
        outputs.push(o.reshape(&[rows, d_h])?);
    }
    if outputs.len() == 1 {
        Ok(outputs.pop().expect("one chunk"))
    } else {
        Tensor::concat(&outputs)
    }
}

/// Dense multi-head attention output (without residual) for `x: [b, l, d]`,
/// heads of width `d_h`, rotary embedding at positions `0..l`.
pub fn dense_attention<T: Scalar>(
    x: &Tensor<T>,
    w: &DenseAttention<T>,
    d_h: usize,
    rope: &RopeConfig,
    mask: &AttentionMask,
) -> Result<Tensor<T>> {
    if x.ndim() != 3 {
        return Err(shape_err("dense_attention", x.shape(), w.w_q.shape()));
    }
    let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let width = w.w_q.shape()[1];
    if d_h == 0 || !width.is_multiple_of(d_h) {
        return Err(config_err(format!("projection width {width} is not a multiple of head width {d_h}")));
    }
    rope.validate(d_h)?;
    let heads = width / d_h;
    let x_flat = x.reshape(&[b * l, d])?;
    let split = |m: &Tensor<T>| -> Result<Tensor<T>> {
        x_flat
            .matmul(m)?
            .reshape(&[b, l, heads, d_h])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * heads, l, d_h])
    };
    let positions: Vec<usize> = (0..b * heads).flat_map(|_| 0..l).collect();
    let q = split(&w.w_q)?.rope(&positions, rope.d_qc, rope.theta_base)?;
    let k = split(&w.w_k)?.rope(&positions, rope.d_kc, rope.theta_base)?;
    let v = split(&w.w_v)?;
    let key_keep: Option<Vec<bool>> = mask.padding.as_ref().map(|pad| {
        (0..b * heads * l)
            .map(|t| pad[(t / (heads * l)) * l + t % l])
            .collect()
    });
    let o = scaled_dot_attention(&q, &k, &v, mask.causal, key_keep.as_deref())?;
    o.reshape(&[b, heads, l, d_h])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b * l, width])?
        .matmul(&w.w_o)?
        .reshape(&[b, l, d])
}
