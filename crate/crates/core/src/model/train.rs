//! Adam training with gradient accumulation and a non-finite-loss halt.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::gradcheck::{self, GradCheckReport, Probe};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

use super::loss::{cross_entropy_and_perplexity, expert_load_entropy, model_balance_loss};
use super::{BlockStats, DenseModel, Parameters, UoeModel};

/// `b` windows of next-token prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub b: usize,
}

/// Loss of one forward pass.
pub struct Evaluation<T: Scalar> {
    /// `nll + lbal`, differentiable.
    pub loss: Tensor<T>,
    pub nll: f64,
    pub lbal: f64,
    pub load_entropy: f64,
    pub blocks: Vec<BlockStats<T>>,
}

pub trait Trainable<T: Scalar>: Parameters<T> + Clone {
    fn evaluate(&self, batch: &Batch) -> Result<Evaluation<T>>;
}

impl<T: Scalar> Trainable<T> for UoeModel<T> {
    fn evaluate(&self, batch: &Batch) -> Result<Evaluation<T>> {
        let out = self.forward(&batch.tokens, batch.b)?;
        let (nll, _) = cross_entropy_and_perplexity(&out.logits, &batch.targets)?;
        let (loss, lbal) = match model_balance_loss(&out.blocks, &self.config)? {
            Some(l) => (nll.add(&l)?, l.item()?.as_f64()),
            None => (nll.clone(), 0.0),
        };
        Ok(Evaluation {
            loss,
            nll: nll.item()?.as_f64(),
            lbal,
            load_entropy: expert_load_entropy(&out.blocks, &self.config),
            blocks: out.blocks,
        })
    }
}

impl<T: Scalar> Trainable<T> for DenseModel<T> {
    fn evaluate(&self, batch: &Batch) -> Result<Evaluation<T>> {
        let logits = self.forward(&batch.tokens, batch.b)?;
        let (nll, _) = cross_entropy_and_perplexity(&logits, &batch.targets)?;
        Ok(Evaluation {
            nll: nll.item()?.as_f64(),
            loss: nll,
            lbal: 0.0,
            load_entropy: 1.0,
            blocks: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            m: sizes.iter().map(|&s| vec![T::zero(); s]).collect(),
            v: sizes.iter().map(|&s| vec![T::zero(); s]).collect(),
            t: 0,
        }
    }

    fn update(&mut self, params: &mut [(String, &mut Tensor<T>)], grads: &[Vec<T>]) -> Result<()> {
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let corr1 = T::of(1.0 - c.beta1.powi(self.t as i32));
        let corr2 = T::of(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        for (((_, p), g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let mut data = p.data().to_vec();
            for (((w, &gi), mi), vi) in data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let m_hat = *mi / corr1;
                let v_hat = *vi / corr2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            **p = Tensor::new(data, p.shape())?;
        }
        Ok(())
    }
}

/// Model, optimizer moments, step counter and data-sampling generator.
#[derive(Debug, Clone)]
pub struct TrainState<M, T: Scalar> {
    pub model: M,
    pub adam: Adam<T>,
    pub step: u64,
    pub rng: Rng,
}

impl<T: Scalar, M: Trainable<T>> TrainState<M, T> {
    pub fn new(model: M, adam: AdamConfig, rng: Rng) -> Self {
        let sizes: Vec<usize> = model.named_parameters().iter().map(|(_, t)| t.numel()).collect();
        Self {
            model,
            adam: Adam::new(adam, &sizes),
            step: 0,
            rng,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub nll: f64,
    pub ppl: f64,
    pub lbal: f64,
    pub load_entropy: f64,
}

/// Gating summary printed when the loss stops being finite.
pub fn gating_diagnostics<T: Scalar>(blocks: &[BlockStats<T>]) -> String {
    let mut parts = Vec::new();
    for (i, b) in blocks.iter().enumerate() {
        for (name, routed) in [("attn", &b.attn), ("mlp", &b.mlp)] {
            let mut line = format!("block{i}.{name} mode={}", routed.mode);
            for (label, g) in [("data", &routed.data_gates), ("expert", &routed.expert_gates)] {
                if let Some(g) = g {
                    let v = g.to_f64_vec();
                    let finite = v.iter().filter(|x| x.is_finite()).count();
                    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    line.push_str(&format!(" {label}_gates[finite {finite}/{} min {lo:.3e} max {hi:.3e}]", v.len()));
                }
            }
            let loads = routed.dispatch.expert_loads(routed.dispatch.units.iter().map(|u| u.expert + 1).max().unwrap_or(0));
            line.push_str(&format!(" loads={loads:?}"));
            parts.push(line);
        }
    }
    if parts.is_empty() {
        "no routed blocks".into()
    } else {
        parts.join("; ")
    }
}

/// Hash of the routing decisions of every block.
pub fn route_key<T: Scalar>(blocks: &[BlockStats<T>]) -> u64 {
    let mut h = DefaultHasher::new();
    for b in blocks {
        b.attn.fingerprint().hash(&mut h);
        b.mlp.fingerprint().hash(&mut h);
    }
    h.finish()
}

/// Finite-difference check of the training loss (`nll + lbal`) against
/// every parameter of `model`, skipping coordinates that flip a routing
/// decision.
pub fn model_gradcheck<M: Trainable<f64>>(
    model: &M,
    batch: &Batch,
    h: f64,
    max_coords: Option<usize>,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    let params: Vec<Tensor<f64>> = model.named_parameters().into_iter().map(|(_, t)| t).collect();
    gradcheck::check(&params, h, max_coords, rng, |p| {
        let mut m = model.clone();
        for ((_, slot), t) in m.slots_mut().into_iter().zip(p) {
            *slot = t.clone();
        }
        let eval = m.evaluate(batch)?;
        Ok(Probe {
            route_key: route_key(&eval.blocks),
            loss: eval.loss,
        })
    })
}

/// One optimizer update on the mean loss over `micro` batches.
pub fn train_step<T: Scalar, M: Trainable<T>>(state: &mut TrainState<M, T>, micro: &[Batch]) -> Result<StepMetrics> {
    if micro.is_empty() {
        return Err(Error::Contract("train_step needs at least one batch".into()));
    }
    for (_, t) in state.model.slots_mut() {
        *t = t.detach().requires_grad_();
    }
    let leaves: Vec<Tensor<T>> = state.model.named_parameters().into_iter().map(|(_, t)| t).collect();
    let mut grads: Vec<Vec<T>> = leaves.iter().map(|t| vec![T::zero(); t.numel()]).collect();
    let share = T::of(1.0 / micro.len() as f64);
    let (mut nll, mut lbal, mut entropy) = (0.0, 0.0, 0.0);
    for batch in micro {
        let eval = state.model.evaluate(batch)?;
        if !eval.loss.all_finite() {
            return Err(Error::NonFinite {
                step: state.step,
                diagnostics: gating_diagnostics(&eval.blocks),
            });
        }
        eval.loss.scale(share).backward()?;
        for (acc, leaf) in grads.iter_mut().zip(&leaves) {
            if let Some(g) = leaf.grad() {
                acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
            }
            leaf.zero_grad();
        }
        nll += eval.nll;
        lbal += eval.lbal;
        entropy += eval.load_entropy;
    }
    let mut slots = state.model.slots_mut();
    state.adam.update(&mut slots, &grads)?;
    for (_, t) in slots {
        *t = t.detach();
    }
    state.step += 1;
    let k = micro.len() as f64;
    Ok(StepMetrics {
        step: state.step,
        nll: nll / k,
        ppl: (nll / k).exp(),
        lbal: lbal / k,
        load_entropy: entropy / k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::RopeConfig;
    use crate::model::UoeModelConfig;
    use crate::routing::SelectionMode;

    fn config(attn: SelectionMode, mlp: SelectionMode) -> UoeModelConfig {
        UoeModelConfig {
            layers: 1,
            d: 16,
            n_a: 2,
            d_h: 8,
            n_m: 2,
            d_e: 16,
            l_p: 4,
            k_attn: 1,
            k_mlp: 1,
            attn_mode: attn,
            mlp_mode: mlp,
            vocab_size: 64,
            max_len: 16,
            rope: RopeConfig::half(8),
            gate_hidden: 16,
            ..UoeModelConfig::default()
        }
    }

    fn pattern_batch(rng: &mut Rng, b: usize, l: usize) -> Batch {
        let text: Vec<usize> = (0..4096).map(|i| (i * 7) % 64).collect();
        let mut tokens = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..b {
            let start = rng.below(text.len() - l - 1);
            tokens.extend_from_slice(&text[start..start + l]);
            targets.extend_from_slice(&text[start + 1..start + l + 1]);
        }
        Batch { tokens, targets, b }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let c = config(SelectionMode::Data, SelectionMode::Expert);
        let model = UoeModel::<f64>::new(&c).unwrap();
        let before = model.named_parameters();
        let mut state = TrainState::new(model, AdamConfig { lr: 0.0, ..Default::default() }, Rng::new(1));
        let mut rng = Rng::new(2);
        for _ in 0..3 {
            train_step(&mut state, &[pattern_batch(&mut rng, 2, 16)]).unwrap();
        }
        for ((_, a), (_, b)) in before.iter().zip(state.model.named_parameters()) {
            assert!(a.bit_eq(&b));
        }
        assert_eq!(state.step, 3);
    }

    #[test]
    fn memorizes_a_repeated_pattern() {
        let c = config(SelectionMode::Data, SelectionMode::Expert);
        let mut state = TrainState::new(
            UoeModel::<f64>::new(&c).unwrap(),
            AdamConfig { lr: 1e-2, ..Default::default() },
            Rng::new(3),
        );
        let mut rng = Rng::new(4);
        let mut history = Vec::new();
        for _ in 0..200 {
            history.push(train_step(&mut state, &[pattern_batch(&mut rng, 4, 16)]).unwrap());
        }
        assert!(history.last().unwrap().ppl < 2.0, "{:?}", history.last());
        let smooth = |w: &[StepMetrics]| w.iter().map(|m| m.nll).sum::<f64>() / w.len() as f64;
        let windows: Vec<f64> = history.chunks(20).map(smooth).collect();
        assert!(windows.windows(2).filter(|w| w[1] > w[0]).count() <= 2, "{windows:?}");
        assert!(windows.last() < windows.first());
    }

    #[test]
    fn accumulation_matches_single_batch() {
        let c = config(SelectionMode::Data, SelectionMode::Full);
        let model = UoeModel::<f64>::new(&c).unwrap();
        let mut rng = Rng::new(5);
        let (a, b) = (pattern_batch(&mut rng, 2, 16), pattern_batch(&mut rng, 2, 16));
        let joined = Batch {
            tokens: [a.tokens.clone(), b.tokens.clone()].concat(),
            targets: [a.targets.clone(), b.targets.clone()].concat(),
            b: 4,
        };
        let mut single = TrainState::new(model.clone(), AdamConfig::default(), Rng::new(0));
        let mut accum = TrainState::new(model, AdamConfig::default(), Rng::new(0));
        for _ in 0..3 {
            train_step(&mut single, std::slice::from_ref(&joined)).unwrap();
            train_step(&mut accum, &[a.clone(), b.clone()]).unwrap();
        }
        for ((name, x), (_, y)) in single.model.named_parameters().iter().zip(accum.model.named_parameters()) {
            assert!(x.max_abs_diff(&y) <= 1e-10, "{name}");
        }
    }

    #[test]
    fn non_finite_loss_halts_with_gating_dump() {
        let c = config(SelectionMode::Data, SelectionMode::Expert);
        let mut model = UoeModel::<f64>::new(&c).unwrap();
        let mut data = model.head.data().to_vec();
        data[0] = f64::NAN;
        model.head = Tensor::new(data, model.head.shape()).unwrap();
        let mut state = TrainState::new(model, AdamConfig::default(), Rng::new(0));
        let err = train_step(&mut state, &[pattern_batch(&mut Rng::new(6), 2, 16)]).unwrap_err();
        match err {
            Error::NonFinite { step, diagnostics } => {
                assert_eq!(step, 0);
                assert!(diagnostics.contains("block0.attn mode=data"), "{diagnostics}");
                assert!(diagnostics.contains("data_gates"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(state.step, 0);
    }

    #[test]
    fn full_activation_tracks_dense_training() {
        let c = config(SelectionMode::Data, SelectionMode::Expert);
        let c = UoeModelConfig {
            k_attn: c.n_a,
            k_mlp: c.n_m,
            ..c
        };
        let model = UoeModel::<f64>::new(&c).unwrap();
        let dense = DenseModel::from_uoe(&model).unwrap();
        let mut u = TrainState::new(model, AdamConfig { lr: 3e-3, ..Default::default() }, Rng::new(0));
        let mut d = TrainState::new(dense, AdamConfig { lr: 3e-3, ..Default::default() }, Rng::new(0));
        let mut rng = Rng::new(7);
        for _ in 0..20 {
            let batch = pattern_batch(&mut rng, 2, 16);
            let mu = train_step(&mut u, std::slice::from_ref(&batch)).unwrap();
            let md = train_step(&mut d, &[batch]).unwrap();
            assert!((mu.ppl - md.ppl).abs() <= 1e-6, "{mu:?} vs {md:?}");
        }
    }

    #[test]
    fn whole_model_gradients_match_differences() {
        for (attn, mlp) in [
            (SelectionMode::Data, SelectionMode::Expert),
            (SelectionMode::Combined, SelectionMode::Full),
        ] {
            let c = UoeModelConfig {
                d: 8,
                d_h: 4,
                d_e: 8,
                gate_hidden: 8,
                vocab_size: 16,
                rope: RopeConfig::half(4),
                ..config(attn, mlp)
            };
            let model = UoeModel::<f64>::new(&c).unwrap();
            let mut rng = Rng::new(5);
            let tokens: Vec<usize> = (0..32).map(|_| rng.below(16)).collect();
            let targets: Vec<usize> = (0..32).map(|_| rng.below(16)).collect();
            let batch = Batch { tokens, targets, b: 2 };
            let r = model_gradcheck(&model, &batch, 1e-4, Some(8), &mut rng).unwrap();
            assert!(r.checked > 0 && r.max_rel_error <= 1e-4, "{attn}/{mlp}: {r:?}");
        }
    }
}
