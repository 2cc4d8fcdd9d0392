//! Union of MLP experts.
//!
//! Routed tokens run through `SiLU(x·A_in[i] + b_in[i])·A_out[i]` for their
//! expert `i` as one segmented product pair, and the partial outputs are
//! scatter-added onto the residual stream. With every expert active the
//! block reproduces the dense MLP plus residual.

use crate::attention::ExecStrategy;
use crate::decomposition::{MlpExpertGroup, SecondActivation};
use crate::error::{shape_err, Result};
use crate::routing::{self, Dispatch, GateParams, RouteConfig, Routed};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct UomeParams<T: Scalar> {
    pub experts: MlpExpertGroup<T>,
    pub gate: GateParams<T>,
    pub act: SecondActivation,
    pub gate_scale_outputs: bool,
}

pub struct UomeOutput<T: Scalar> {
    pub h: Tensor<T>,
    pub routed: Routed<T>,
}

/// `h = u + φ₂(Σ_experts scatter(y_i))` for `u: [b, l, d]`, routed on `u`.
pub fn uome_forward<T: Scalar>(u: &Tensor<T>, p: &UomeParams<T>, cfg: &RouteConfig) -> Result<UomeOutput<T>> {
    let routed = routing::route(u, &p.gate, cfg)?;
    let h = mlp_routed(u, u, p, &routed, ExecStrategy::Batched)?;
    Ok(UomeOutput { h, routed })
}

fn expert_slice<T: Scalar>(w: &Tensor<T>, i: usize) -> Result<Tensor<T>> {
    let (rows, cols) = (w.shape()[1], w.shape()[2]);
    w.index_select(0, &[i])?.reshape(&[rows, cols])
}

/// Expert MLP of the routed tokens of `input: [b, l, d]`, aggregated onto
/// `residual` (same shape).
pub fn mlp_routed<T: Scalar>(
    input: &Tensor<T>,
    residual: &Tensor<T>,
    p: &UomeParams<T>,
    routed: &Routed<T>,
    strategy: ExecStrategy,
) -> Result<Tensor<T>> {
    if input.ndim() != 3 || input.shape() != residual.shape() || input.shape()[2] != p.experts.d() {
        return Err(shape_err("uome_forward", input.shape(), residual.shape()));
    }
    let (b, l, d) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let x_flat = input.reshape(&[b * l, d])?;
    let res_flat = residual.reshape(&[b * l, d])?;
    let identity = p.act == SecondActivation::Identity;
    let mut acc = if identity { res_flat.clone() } else { Tensor::zeros(&[b * l, d]) };
    let gates = if p.gate_scale_outputs { routed.scaling_gates() } else { None };
    let g = &p.experts;
    match strategy {
        ExecStrategy::Serial => {
            for i in 0..g.n() {
                let part = routed.dispatch.restrict(|u| u.expert == i);
                if part.units.is_empty() {
                    continue;
                }
                let rows = part.gather(&x_flat)?;
                let mut hidden = rows.matmul(&expert_slice(&g.a_in, i)?)?;
                if let Some(b_in) = &g.b_in {
                    hidden = hidden.add_bias(&b_in.index_select(0, &[i])?.reshape(&[g.d_e()])?)?;
                }
                let y = hidden.silu().matmul(&expert_slice(&g.a_out, i)?)?;
                acc = part.scatter_add(&acc, &scale_by_gates(y, &part, gates.as_ref())?)?;
            }
        }
        ExecStrategy::Batched | ExecStrategy::Fused => {
            let dispatch = &routed.dispatch;
            let segs = dispatch.segments();
            let rows = dispatch.gather(&x_flat)?;
            let bias_rows = match &g.b_in {
                Some(b_in) => Some(b_in.index_select(0, &dispatch.row_experts())?),
                None => None,
            };
            let hidden = match (strategy, bias_rows) {
                (ExecStrategy::Fused, Some(bias)) => Tensor::fused_multiply_accumulate_segmented(&bias, &rows, &g.a_in, &segs)?,
                (_, Some(bias)) => rows.matmul_segmented(&g.a_in, &segs)?.add(&bias)?,
                (_, None) => rows.matmul_segmented(&g.a_in, &segs)?,
            };
            let y = hidden.silu().matmul_segmented(&g.a_out, &segs)?;
            acc = dispatch.scatter_add(&acc, &scale_by_gates(y, dispatch, gates.as_ref())?)?;
        }
    }
    if let Some(b_out) = &g.b_out {
        acc = acc.add_bias(b_out)?;
    }
    let out = if identity { acc } else { res_flat.add(&acc.silu())? };
    out.reshape(&[b, l, d])
}

fn scale_by_gates<T: Scalar>(y: Tensor<T>, dispatch: &Dispatch, gates: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    match gates {
        Some(g) if !dispatch.gate_index.is_empty() => y.scale_rows(&g.index_select(0, &dispatch.gate_index)?),
        _ => Ok(y),
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::decomposition::{partition_dense_mlp, reconstruct_mlp, DenseMlp};
    use crate::gradcheck::{self, Probe};
    use crate::rng::Rng;
    use crate::routing::{DataGate, ExpertGate, SelectionMode};

    fn params(rng: &mut Rng, d: usize, n: usize, d_e: usize, l: usize, biases: bool) -> UomeParams<f64> {
        let s = 1.0 / (d as f64).sqrt();
        UomeParams {
            experts: MlpExpertGroup {
                a_in: rng.normal_tensor(&[n, d, d_e], s),
                a_out: rng.normal_tensor(&[n, d_e, d], s),
                b_in: biases.then(|| rng.normal_tensor(&[n, d_e], 0.5)),
                b_out: biases.then(|| rng.normal_tensor(&[d], 0.5)),
            },
            gate: GateParams {
                data: Some(DataGate {
                    w_pool: rng.normal_tensor(&[d, d], s),
                    w_out: rng.normal_tensor(&[d, n], s),
                }),
                expert: Some(ExpertGate {
                    w: rng.normal_tensor(&[l * d, n], 0.1),
                    pooled: false,
                }),
            },
            act: SecondActivation::Identity,
            gate_scale_outputs: false,
        }
    }

    fn cfg(mode: SelectionMode, n: usize, k: usize) -> RouteConfig {
        RouteConfig {
            mode,
            n,
            k,
            k_combined_data: 1,
            l_p: 2,
        }
    }

    #[test]
    fn full_mode_equals_dense_mlp_plus_residual() {
        for n in [1, 2, 4, 8] {
            for act in [SecondActivation::Identity, SecondActivation::Silu] {
                let mut rng = Rng::new(20 + n as u64);
                let (b, l, d) = (2, 8, 6);
                let mut p = params(&mut rng, d, n, 3, l, true);
                p.act = act;
                let u: Tensor<f64> = rng.normal_tensor(&[b, l, d], 1.0);
                let out = uome_forward(&u, &p, &cfg(SelectionMode::Full, n, n)).unwrap();
                let dense = reconstruct_mlp(&p.experts).unwrap();
                let oracle = dense.forward(&u.reshape(&[b * l, d]).unwrap(), act).unwrap();
                let delta = out.h.sub(&u).unwrap().reshape(&[b * l, d]).unwrap();
                assert!(delta.max_abs_diff(&oracle) <= 1e-12, "n = {n}, {act:?}");
            }
        }
    }

    #[test]
    fn partitioned_dense_weights_reproduce_dense_block() {
        let mut rng = Rng::new(27);
        let dense = DenseMlp {
            a1: rng.normal_tensor::<f64>(&[4, 8], 0.5),
            a2: rng.normal_tensor(&[8, 4], 0.5),
            b1: None,
            b2: None,
        };
        let mut p = params(&mut rng, 4, 4, 2, 4, false);
        p.experts = partition_dense_mlp(&dense, 4).unwrap();
        let u: Tensor<f64> = rng.normal_tensor(&[1, 4, 4], 1.0);
        let out = uome_forward(&u, &p, &cfg(SelectionMode::Full, 4, 4)).unwrap();
        let oracle = dense.forward(&u.reshape(&[4, 4]).unwrap(), SecondActivation::Identity).unwrap();
        assert!(out.h.sub(&u).unwrap().reshape(&[4, 4]).unwrap().max_abs_diff(&oracle) <= 1e-12);
    }

    #[test]
    fn zero_output_layer_is_pure_residual() {
        let mut rng = Rng::new(21);
        let mut p = params(&mut rng, 4, 2, 3, 8, false);
        p.experts.a_out = Tensor::zeros(&[2, 3, 4]);
        let u: Tensor<f64> = rng.normal_tensor(&[2, 8, 4], 1.0);
        for mode in [SelectionMode::Full, SelectionMode::Data, SelectionMode::Expert, SelectionMode::Combined] {
            assert!(uome_forward(&u, &p, &cfg(mode, 2, 1)).unwrap().h.bit_eq(&u));
        }
    }

    #[test]
    fn degenerate_top_k_matches_full_mode() {
        let mut rng = Rng::new(22);
        let n = 4;
        let p = params(&mut rng, 6, n, 3, 8, true);
        let u: Tensor<f64> = rng.normal_tensor(&[3, 8, 6], 1.0);
        let full = uome_forward(&u, &p, &cfg(SelectionMode::Full, n, n)).unwrap().h;
        let expert = uome_forward(&u, &p, &cfg(SelectionMode::Expert, n, n)).unwrap().h;
        assert!(expert.bit_eq(&full));
        let data = uome_forward(&u, &p, &cfg(SelectionMode::Data, n, n)).unwrap();
        assert!(data.routed.data_plans.iter().all(|plan| plan.c == plan.m));
        assert!(data.h.bit_eq(&full));
    }

    #[test]
    fn unselected_experts_do_not_touch_a_sample() {
        let mut rng = Rng::new(23);
        let n = 4;
        let p = params(&mut rng, 4, n, 2, 8, false);
        let u: Tensor<f64> = rng.normal_tensor(&[4, 8, 4], 1.0);
        let c = cfg(SelectionMode::Expert, n, 2);
        let base = uome_forward(&u, &p, &c).unwrap();
        let top = base.routed.expert_plan.as_ref().unwrap().top.clone();
        for (s, chosen) in top.iter().enumerate() {
            let idle = (0..n).find(|i| !chosen.contains(i)).unwrap();
            let mut q = p.clone();
            let bump = |w: &Tensor<f64>| {
                let per = w.numel() / n;
                let data: Vec<f64> = w
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(t, v)| if t / per == idle { v + 1.0 } else { *v })
                    .collect();
                Tensor::new(data, w.shape()).unwrap()
            };
            q.experts.a_in = bump(&q.experts.a_in);
            q.experts.a_out = bump(&q.experts.a_out);
            let out = uome_forward(&u, &q, &c).unwrap();
            let span = 8 * 4;
            assert_eq!(&out.h.data()[s * span..(s + 1) * span], &base.h.data()[s * span..(s + 1) * span]);
        }
    }

    #[test]
    fn strategies_agree_in_every_mode() {
        let mut rng = Rng::new(24);
        let n = 4;
        for act in [SecondActivation::Identity, SecondActivation::Silu] {
            let mut p = params(&mut rng, 8, n, 4, 8, true);
            p.act = act;
            p.gate_scale_outputs = true;
            let u: Tensor<f64> = rng.normal_tensor(&[3, 8, 8], 1.0);
            for mode in [SelectionMode::Full, SelectionMode::Data, SelectionMode::Expert, SelectionMode::Combined] {
                let routed = routing::route(&u, &p.gate, &cfg(mode, n, 2)).unwrap();
                let run = |s| mlp_routed(&u, &u, &p, &routed, s).unwrap();
                let batched = run(ExecStrategy::Batched);
                assert!(run(ExecStrategy::Serial).max_abs_diff(&batched) <= 1e-12);
                assert!(run(ExecStrategy::Fused).max_abs_diff(&batched) <= 1e-12);
            }
        }
    }

    #[test]
    fn routed_mlp_uses_one_gather_and_one_scatter() {
        let mut rng = Rng::new(25);
        let p = params(&mut rng, 4, 4, 2, 8, true);
        let u: Tensor<f64> = rng.normal_tensor(&[2, 8, 4], 1.0);
        for mode in [SelectionMode::Data, SelectionMode::Expert, SelectionMode::Combined] {
            let routed = routing::route(&u, &p.gate, &cfg(mode, 4, 2)).unwrap();
            routing::reset_routing_passes();
            mlp_routed(&u, &u, &p, &routed, ExecStrategy::Fused).unwrap();
            let passes = routing::routing_passes();
            assert_eq!((passes.gathers, passes.scatters), (1, 1));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (b, l, d, n) = (2, 8, 4, 2);
        for (mode, seed, act) in [
            (SelectionMode::Data, 30, SecondActivation::Identity),
            (SelectionMode::Expert, 31, SecondActivation::Silu),
            (SelectionMode::Combined, 32, SecondActivation::Identity),
        ] {
            let mut rng = Rng::new(seed);
            let mut p = params(&mut rng, d, n, 3, l, true);
            p.act = act;
            p.gate_scale_outputs = true;
            let u: Tensor<f64> = rng.normal_tensor(&[b, l, d], 1.0);
            let c = cfg(mode, n, 1);
            let base = p.clone();
            let g = &base.experts;
            let tensors = vec![
                u,
                g.a_in.clone(),
                g.a_out.clone(),
                g.b_in.clone().unwrap(),
                g.b_out.clone().unwrap(),
                base.gate.data.as_ref().unwrap().w_pool.clone(),
                base.gate.data.as_ref().unwrap().w_out.clone(),
                base.gate.expert.as_ref().unwrap().w.clone(),
            ];
            let report = gradcheck::check(&tensors, 1e-4, Some(6), &mut rng, |t| {
                let mut q = base.clone();
                q.experts = MlpExpertGroup {
                    a_in: t[1].clone(),
                    a_out: t[2].clone(),
                    b_in: Some(t[3].clone()),
                    b_out: Some(t[4].clone()),
                };
                q.gate.data = Some(DataGate {
                    w_pool: t[5].clone(),
                    w_out: t[6].clone(),
                });
                q.gate.expert = Some(ExpertGate {
                    w: t[7].clone(),
                    pooled: false,
                });
                let out = uome_forward(&t[0], &q, &c)?;
                let w = Tensor::from_fn(out.h.shape(), |i| ((i * 7919) % 13) as f64 / 13.0 - 0.5);
                Ok(Probe {
                    loss: out.h.mul(&w)?.sum(),
                    route_key: out.routed.fingerprint(),
                })
            })
            .unwrap();
            assert!(report.max_rel_error <= 1e-4, "{mode}: {report:?}");
            assert!(report.checked > 0);
        }
    }

    proptest! {
        #[test]
        fn full_mode_matches_dense_mlp_on_random_draws(n_pow in 0u32..4, seed in any::<u64>(), biases in any::<bool>()) {
            let n = 1usize << n_pow;
            let mut rng = Rng::new(seed);
            let p = params(&mut rng, 6, n, 3, 4, biases);
            let u: Tensor<f64> = rng.normal_tensor(&[2, 4, 6], 1.0);
            let out = uome_forward(&u, &p, &cfg(SelectionMode::Full, n, n)).unwrap();
            let oracle = reconstruct_mlp(&p.experts).unwrap().forward(&u.reshape(&[8, 6]).unwrap(), p.act).unwrap();
            let delta = out.h.sub(&u).unwrap().reshape(&[8, 6]).unwrap();
            prop_assert!(delta.max_abs_diff(&oracle) <= 1e-12);
        }

        #[test]
        fn perturbing_an_unselected_expert_leaves_the_sample_unchanged(
            n in 2usize..5, k_seed in any::<usize>(), seed in any::<u64>(), bump in -2.0f64..2.0
        ) {
            let k = 1 + k_seed % (n - 1);
            let mut rng = Rng::new(seed);
            let p = params(&mut rng, 4, n, 2, 4, false);
            let u: Tensor<f64> = rng.normal_tensor(&[3, 4, 4], 1.0);
            let c = cfg(SelectionMode::Expert, n, k);
            let base = uome_forward(&u, &p, &c).unwrap();
            let top = base.routed.expert_plan.as_ref().unwrap().top.clone();
            for (s, chosen) in top.iter().enumerate() {
                let idle = (0..n).find(|i| !chosen.contains(i)).unwrap();
                let mut q = p.clone();
                for w in [&mut q.experts.a_in, &mut q.experts.a_out] {
                    let per = w.numel() / n;
                    let data: Vec<f64> =
                        w.data().iter().enumerate().map(|(t, v)| if t / per == idle { v + bump } else { *v }).collect();
                    *w = Tensor::new(data, w.shape()).unwrap();
                }
                let out = uome_forward(&u, &q, &c).unwrap();
                let span = 16;
                prop_assert_eq!(&out.h.data()[s * span..(s + 1) * span], &base.h.data()[s * span..(s + 1) * span]);
            }
        }
    }
}
