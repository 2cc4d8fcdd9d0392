//! Language-model loss and the sequence-wise load-balance loss.

use crate::error::{config_err, shape_err, Error, Result};
use crate::routing::{Routed, SelectionMode};
use crate::tensor::{Scalar, Tensor};

use super::BlockStats;

/// Mean negative log-likelihood and its exponential.
pub fn cross_entropy_and_perplexity<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<(Tensor<T>, f64)> {
    let loss = logits.cross_entropy(targets)?;
    let ppl = loss.item()?.as_f64().exp();
    Ok((loss, ppl))
}

/// `α Σᵢ fᵢ Pᵢ` over `gates: [t, n]`, with `fᵢ = n/(k·t) · #{rows selecting i}`
/// from the hard selections and `Pᵢ` the mean gate of expert `i`. Only `Pᵢ`
/// carries a gradient.
pub fn load_balance_loss<T: Scalar>(
    gates: &Tensor<T>,
    selections: &[Vec<usize>],
    k: usize,
    alpha: f64,
) -> Result<Tensor<T>> {
    if gates.ndim() != 2 || gates.shape()[0] != selections.len() || selections.is_empty() {
        return Err(shape_err("load_balance_loss", gates.shape(), &[selections.len()]));
    }
    let (t, n) = (gates.shape()[0], gates.shape()[1]);
    if k == 0 || k > n {
        return Err(config_err(format!("load balance: k = {k} outside 1..={n}")));
    }
    let mut counts = vec![0usize; n];
    for row in selections {
        if row.len() != k {
            return Err(Error::Contract(format!(
                "load balance: a row selects {} experts, expected {k}",
                row.len()
            )));
        }
        for &i in row {
            if i >= n {
                return Err(Error::Index {
                    op: "load_balance_loss",
                    index: i,
                    bound: n,
                });
            }
            counts[i] += 1;
        }
    }
    let scale = n as f64 / (k as f64 * t as f64);
    let f = Tensor::from_f64(&counts.iter().map(|&c| c as f64 * scale).collect::<Vec<_>>(), &[n])?;
    Ok(gates.mean_axis(0)?.mul(&f)?.sum().scale(T::of(alpha)))
}

/// Balance loss of one routed sub-block: per-sample patch loss averaged over
/// the batch for the data stage, batch-level loss for the expert stage.
pub fn routed_balance_loss<T: Scalar>(routed: &Routed<T>, k: usize, k_data: usize, alpha: f64) -> Result<Option<Tensor<T>>> {
    let mut total: Option<Tensor<T>> = None;
    let mut push = |t: Tensor<T>| -> Result<()> {
        total = Some(match total.take() {
            Some(acc) => acc.add(&t)?,
            None => t,
        });
        Ok(())
    };
    if let (Some(g), false) = (&routed.data_gates, routed.data_plans.is_empty()) {
        let b = routed.data_plans.len();
        let m = routed.data_plans[0].m;
        let k_stage = if routed.mode == SelectionMode::Combined { k_data } else { k };
        let mut sum: Option<Tensor<T>> = None;
        for (s, plan) in routed.data_plans.iter().enumerate() {
            let rows: Vec<usize> = (s * m..(s + 1) * m).collect();
            let l = load_balance_loss(&g.index_select(0, &rows)?, &plan.id_prime, k_stage, alpha)?;
            sum = Some(match sum {
                Some(acc) => acc.add(&l)?,
                None => l,
            });
        }
        push(sum.expect("non-empty batch").scale(T::of(1.0 / b as f64)))?;
    }
    if let (Some(g), Some(plan)) = (&routed.expert_gates, &routed.expert_plan) {
        push(load_balance_loss(g, &plan.top, k, alpha)?)?;
    }
    Ok(total)
}

/// Balance loss summed over every routed sub-block of the model.
pub fn model_balance_loss<T: Scalar>(
    blocks: &[BlockStats<T>],
    cfg: &super::UoeModelConfig,
) -> Result<Option<Tensor<T>>> {
    let mut total: Option<Tensor<T>> = None;
    for b in blocks {
        for (routed, k) in [(&b.attn, cfg.k_attn), (&b.mlp, cfg.k_mlp)] {
            if let Some(l) = routed_balance_loss(routed, k, cfg.k_combined_data, cfg.alpha)? {
                total = Some(match total {
                    Some(acc) => acc.add(&l)?,
                    None => l,
                });
            }
        }
    }
    Ok(total)
}

/// Entropy of the realized token load per expert, normalized by `ln n` and
/// averaged over routed sub-blocks; 1 when nothing is routed.
pub fn expert_load_entropy<T: Scalar>(blocks: &[BlockStats<T>], cfg: &super::UoeModelConfig) -> f64 {
    let mut values = Vec::new();
    for b in blocks {
        for (routed, n) in [(&b.attn, cfg.n_a), (&b.mlp, cfg.n_m)] {
            if routed.mode == SelectionMode::Full || n < 2 {
                continue;
            }
            let loads = routed.dispatch.expert_loads(n);
            let total: usize = loads.iter().sum();
            if total == 0 {
                continue;
            }
            let h: f64 = loads
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / total as f64;
                    -p * p.ln()
                })
                .sum();
            values.push(h / (n as f64).ln());
        }
    }
    if values.is_empty() {
        1.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::rng::Rng;
    use crate::routing::top_k;

    fn all_selections(n: usize, k: usize) -> Vec<Vec<usize>> {
        // every k-subset of 0..n
        let mut out = Vec::new();
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize == k {
                out.push((0..n).filter(|i| mask & (1 << i) != 0).collect());
            }
        }
        out
    }

    #[test]
    fn uniform_gates_give_alpha_for_any_tie_break() {
        for n in [1, 2, 3, 4, 8] {
            for t in [1, 2, 5, 16] {
                let gates = Tensor::<f64>::full(&[t, n], 1.0 / n as f64);
                for k in 1..=n {
                    let subsets = all_selections(n, k);
                    let mut rng = Rng::new((n * 100 + t * 10 + k) as u64);
                    for _ in 0..5 {
                        let sel: Vec<Vec<usize>> = (0..t).map(|_| subsets[rng.below(subsets.len())].clone()).collect();
                        let l = load_balance_loss(&gates, &sel, k, 0.01).unwrap().item().unwrap();
                        assert!((l - 0.01).abs() <= 1e-12, "n={n} t={t} k={k}: {l}");
                    }
                }
            }
        }
    }

    #[test]
    fn maximal_imbalance_for_two_experts() {
        let gates = Tensor::<f64>::from_f64(&[1.0, 0.0, 1.0, 0.0, 1.0, 0.0], &[3, 2]).unwrap();
        let sel = vec![vec![0]; 3];
        let l = load_balance_loss(&gates, &sel, 1, 0.01).unwrap().item().unwrap();
        assert!((l - 0.02).abs() <= 1e-12);
        assert_eq!(load_balance_loss(&gates, &sel, 1, 0.0).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn matches_direct_formula_on_random_gates() {
        let mut rng = Rng::new(9);
        let (t, n, k) = (7, 4, 2);
        let g = rng.uniform_tensor::<f64>(&[t, n], 0.0, 1.0).softmax(1).unwrap();
        let sel: Vec<Vec<usize>> = g.data().chunks(n).map(|r| top_k(r, k)).collect();
        let mut expect = 0.0;
        for i in 0..n {
            let f = n as f64 / (k * t) as f64 * sel.iter().filter(|s| s.contains(&i)).count() as f64;
            let p = (0..t).map(|r| g.data()[r * n + i]).sum::<f64>() / t as f64;
            expect += f * p;
        }
        let l = load_balance_loss(&g, &sel, k, 0.5).unwrap().item().unwrap();
        assert!((l - 0.5 * expect).abs() <= 1e-12);
        assert!(l >= 0.0);
    }

    #[test]
    fn gradient_flows_through_mean_gate_only() {
        let g = Tensor::<f64>::from_f64(&[0.7, 0.3, 0.4, 0.6], &[2, 2]).unwrap().requires_grad_();
        let sel = vec![vec![0], vec![1]];
        load_balance_loss(&g, &sel, 1, 1.0).unwrap().backward().unwrap();
        // f = [1, 1], so ∂L/∂g[t, i] = f_i / t = 0.5
        assert_eq!(g.grad().unwrap(), vec![0.5; 4]);
    }

    #[test]
    fn rejects_bad_arguments() {
        let g = Tensor::<f64>::full(&[2, 2], 0.5);
        assert!(matches!(load_balance_loss(&g, &[vec![0], vec![1]], 3, 1.0), Err(Error::Config(_))));
        assert!(load_balance_loss(&g, &[vec![0]], 1, 1.0).is_err());
        assert!(load_balance_loss(&g, &[vec![0], vec![2]], 1, 1.0).is_err());
    }

    #[test]
    fn perplexity_cases() {
        let (_, ppl) = cross_entropy_and_perplexity(&Tensor::<f64>::zeros(&[3, 256]), &[1, 2, 3]).unwrap();
        assert!((ppl - 256.0).abs() < 1e-9);
        let mut logits = vec![0.0; 2 * 5];
        logits[2] = 60.0;
        logits[5 + 4] = 60.0;
        let (_, ppl) = cross_entropy_and_perplexity(&Tensor::<f64>::from_f64(&logits, &[2, 5]).unwrap(), &[2, 4]).unwrap();
        assert!((ppl - 1.0).abs() < 1e-12);
        assert!(cross_entropy_and_perplexity(&Tensor::<f64>::zeros(&[1, 5]), &[5]).is_err());
    }

    #[test]
    fn four_token_nll_matches_manual_log_probs() {
        let mut rng = Rng::new(10);
        let logits: Tensor<f64> = rng.normal_tensor(&[4, 6], 2.0);
        let targets = [5, 0, 3, 3];
        let mut nll = 0.0;
        for (row, &t) in logits.data().chunks(6).zip(&targets) {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            nll -= (row[t].exp() / z).ln();
        }
        nll /= 4.0;
        let (loss, ppl) = cross_entropy_and_perplexity(&logits, &targets).unwrap();
        assert!((loss.item().unwrap() - nll).abs() <= 1e-12);
        assert!((ppl - nll.exp()).abs() <= 1e-10);
    }

    proptest! {
        #[test]
        fn balance_loss_is_non_negative(t in 1usize..9, n in 1usize..6, k_seed in any::<usize>(), seed in any::<u64>(), alpha in 0.0f64..1.0) {
            let k = 1 + k_seed % n;
            let mut rng = Rng::new(seed);
            let g = rng.normal_tensor::<f64>(&[t, n], 3.0).softmax(1).unwrap();
            let subsets = all_selections(n, k);
            let sel: Vec<Vec<usize>> = (0..t).map(|_| subsets[rng.below(subsets.len())].clone()).collect();
            prop_assert!(load_balance_loss(&g, &sel, k, alpha).unwrap().item().unwrap() >= 0.0);
        }

        #[test]
        fn uniform_gates_give_exactly_alpha(t in 1usize..9, n in 1usize..9, k_seed in any::<usize>(), seed in any::<u64>(), alpha in 0.0f64..1.0) {
            let k = 1 + k_seed % n;
            let mut rng = Rng::new(seed);
            let subsets = all_selections(n, k);
            let sel: Vec<Vec<usize>> = (0..t).map(|_| subsets[rng.below(subsets.len())].clone()).collect();
            let l = load_balance_loss(&Tensor::<f64>::full(&[t, n], 1.0 / n as f64), &sel, k, alpha).unwrap().item().unwrap();
            prop_assert!((l - alpha).abs() <= 1e-12);
        }
    }
}
