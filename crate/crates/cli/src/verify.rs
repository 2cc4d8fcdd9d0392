//! Self-checks of the library invariants, grouped into named suites.
//!
//! Every check prints one verdict line. A fault can be injected into the
//! weight partition used by the losslessness suite to confirm that the
//! suite notices it.

use std::fmt;
use std::str::FromStr;

use anyhow::{anyhow, bail, Result};
use uoe_core::attention::{
    causal_mask, dense_attention, index_mask, shared_causal_submask, smha_forward, AttentionMask, ExecStrategy,
    RopeConfig, SmhaParams,
};
use uoe_core::decomposition::{
    dense_mlp_forward, expert_union_mlp_forward, expert_union_mlp_forward_ordered, partition_attention,
    partition_dense_mlp, reconstruct_attention, reconstruct_mlp, AttnExpertGroup, DenseAttention, DenseMlp,
    MlpExpertGroup, SecondActivation,
};
use uoe_core::flops::{count_dense, count_uoe, BlockLoads};
use uoe_core::gradcheck::{self, Probe};
use uoe_core::mlp_experts::{uome_forward, UomeParams};
use uoe_core::model::checkpoint::{decode, encode, restore, state_arrays};
use uoe_core::model::loss::load_balance_loss;
use uoe_core::model::train::{model_gradcheck, train_step, AdamConfig, Batch, StepMetrics, TrainState};
use uoe_core::model::{block_forward, dense_block_forward, DenseModel, Parameters, UoeModel, UoeModelConfig};
use uoe_core::routing::{
    self, plan_data_selection_among, plan_expert_selection_values, gather_patches,
    scatter_add_patches, gather_samples, scatter_add_samples, DataRoutingPlan, ExpertRoutingPlan, GateParams, RouteConfig, SelectionMode,
};
use uoe_core::tensor::counters;
use uoe_core::{Rng, Scalar, Tensor};

use crate::config::{ConfigBuilder, RunConfig};
use crate::corpus::Corpus;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Expert slices taken one column to the right of their true position.
    PartitionOffByOne,
}

impl FromStr for Fault {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "partition-off-by-one" => Ok(Fault::PartitionOffByOne),
            other => bail!("unknown fault `{other}` (known: partition-off-by-one)"),
        }
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("partition-off-by-one")
    }
}

#[derive(Debug, Clone, Default)]
pub struct Options {
    /// Run only the suite with this name.
    pub filter: Option<String>,
    pub seed: u64,
    pub fault: Option<Fault>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub suite: &'static str,
    pub check: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    pub fn name(&self) -> String {
        format!("{}/{}", self.suite, self.check)
    }

    pub fn line(&self) -> String {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        format!("{tag} {}  {}", self.name(), self.detail)
    }
}

struct Outcome {
    passed: bool,
    detail: String,
}

fn within(value: f64, tol: f64, what: &str) -> Outcome {
    Outcome {
        passed: value <= tol,
        detail: format!("{what} {value:.3e} (tol {tol:.0e})"),
    }
}

fn holds(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

struct Ctx {
    seed: u64,
    fault: Option<Fault>,
}

impl Ctx {
    fn rng(&self, label: &str) -> Rng {
        Rng::new(self.seed).fork(label)
    }
}

type Check = fn(&Ctx) -> Result<Outcome>;

pub struct Suite {
    pub name: &'static str,
    pub about: &'static str,
    checks: &'static [(&'static str, Check)],
}

impl Suite {
    pub fn check_names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.checks.iter().map(|(n, _)| *n)
    }
}

pub const SUITES: &[Suite] = &[
    Suite {
        name: "tensor",
        about: "precision agreement, adjoint pair, op gradients, determinism",
        checks: &[
            ("f32_f64_agreement", tensor_precision),
            ("index_adjoint_pair", tensor_adjoint),
            ("op_gradients", tensor_gradients),
            ("determinism", tensor_determinism),
        ],
    },
    Suite {
        name: "losslessness",
        about: "expert unions equal the dense blocks they were cut from",
        checks: &[
            ("mlp_union", lossless_mlp_union),
            ("partition_round_trip", lossless_round_trip),
            ("expert_order", lossless_order),
            ("attention_full_mode", lossless_attention),
            ("mlp_full_mode", lossless_mlp_block),
            ("block_full_mode", lossless_block),
            ("model_full_mode", lossless_model),
        ],
    },
    Suite {
        name: "adjoint",
        about: "routed gather/scatter against explicit sums",
        checks: &[
            ("patch_routing", adjoint_patches),
            ("sample_routing", adjoint_samples),
            ("dispatch", adjoint_dispatch),
        ],
    },
    Suite {
        name: "mask",
        about: "double-indexed causal mask is the shared lower triangle",
        checks: &[("causal_submatrix", mask_submatrix)],
    },
    Suite {
        name: "routing",
        about: "planner semantics, capacity, equivariance, single pass",
        checks: &[
            ("brute_force", routing_brute_force),
            ("capacity_bound", routing_capacity),
            ("stage1_argmax", routing_argmax),
            ("permutation_equivariance", routing_permutation),
            ("single_pass", routing_single_pass),
        ],
    },
    Suite {
        name: "attention",
        about: "softmax rows, rotary shift invariance, gradients",
        checks: &[
            ("softmax_rows", attention_softmax_rows),
            ("rope_relative_shift", attention_rope_shift),
            ("gradients", attention_gradients),
        ],
    },
    Suite {
        name: "mlp",
        about: "data mode at full capacity, unselected experts, gradients",
        checks: &[
            ("data_mode_all_patches", mlp_all_patches),
            ("unselected_expert", mlp_unselected_expert),
            ("gradients", mlp_gradients),
        ],
    },
    Suite {
        name: "load_balance",
        about: "closed forms of the balance loss",
        checks: &[
            ("uniform_gates", balance_uniform),
            ("maximal_imbalance", balance_imbalance),
            ("non_negative", balance_non_negative),
            ("gradient_through_mean_gate", balance_gradient),
        ],
    },
    Suite {
        name: "gradient",
        about: "whole-model gradients in every routing mode",
        checks: &[("micro_model", gradient_micro_model)],
    },
    Suite {
        name: "training",
        about: "memorization trend and trajectory determinism",
        checks: &[
            ("memorization", training_memorization),
            ("determinism", training_determinism),
        ],
    },
    Suite {
        name: "flops",
        about: "analytic counts against the instrumented counter",
        checks: &[
            ("instrumented_counter", flops_instrumented),
            ("full_activation_overhead", flops_overhead),
            ("monotone_in_activation", flops_monotone),
        ],
    },
    Suite {
        name: "checkpoint",
        about: "byte-identical state round trip",
        checks: &[("round_trip", checkpoint_round_trip)],
    },
    Suite {
        name: "strategies",
        about: "serial, batched and fused execution agree",
        checks: &[("agreement", strategies_agree)],
    },
    Suite {
        name: "cli",
        about: "training output is deterministic with a fixed header",
        checks: &[("train_determinism", cli_determinism)],
    },
];

/// Runs the selected suites, reporting each verdict through `emit` as soon
/// as it is known.
pub fn run(opts: &Options, mut emit: impl FnMut(&Verdict)) -> Result<Vec<Verdict>> {
    let suites: Vec<&Suite> = match &opts.filter {
        Some(name) => {
            let s = SUITES.iter().find(|s| s.name == name).ok_or_else(|| {
                let names: Vec<&str> = SUITES.iter().map(|s| s.name).collect();
                anyhow!("unknown suite `{name}` (known: {})", names.join(", "))
            })?;
            vec![s]
        }
        None => SUITES.iter().collect(),
    };
    let ctx = Ctx {
        seed: opts.seed,
        fault: opts.fault,
    };
    let mut verdicts = Vec::new();
    for suite in suites {
        for &(check, f) in suite.checks {
            let outcome = f(&ctx).unwrap_or_else(|e| holds(false, format!("error: {e:#}")));
            let v = Verdict {
                suite: suite.name,
                check,
                passed: outcome.passed,
                detail: outcome.detail,
            };
            emit(&v);
            verdicts.push(v);
        }
    }
    Ok(verdicts)
}

// ---- shared helpers ----

fn max_abs<T: Scalar>(t: &Tensor<T>) -> f64 {
    t.to_f64_vec().iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Largest deviation relative to the largest reference magnitude.
fn relative_deviation<T: Scalar>(got: &Tensor<T>, reference: &Tensor<T>) -> f64 {
    got.max_abs_diff(reference) / max_abs(reference).max(f64::MIN_POSITIVE)
}

fn roll_columns<T: Scalar>(w: &Tensor<T>) -> Result<Tensor<T>> {
    let cols = w.shape()[1];
    let idx: Vec<usize> = (1..cols).chain(0..1).collect();
    Ok(w.index_select(1, &idx)?)
}

fn partition_mlp_checked<T: Scalar>(ctx: &Ctx, mlp: &DenseMlp<T>, n: usize) -> Result<MlpExpertGroup<T>> {
    let mut source = mlp.clone();
    if ctx.fault == Some(Fault::PartitionOffByOne) {
        source.a1 = roll_columns(&source.a1)?;
    }
    Ok(partition_dense_mlp(&source, n)?)
}

fn partition_attention_checked<T: Scalar>(ctx: &Ctx, w: &DenseAttention<T>, n: usize) -> Result<AttnExpertGroup<T>> {
    let w_q = if ctx.fault == Some(Fault::PartitionOffByOne) {
        roll_columns(&w.w_q)?
    } else {
        w.w_q.clone()
    };
    Ok(partition_attention(&w_q, &w.w_k, &w.w_v, &w.w_o, n)?)
}

fn random_dense_mlp<T: Scalar>(rng: &mut Rng, d: usize, hidden: usize, bias: bool) -> DenseMlp<T> {
    let mut m = DenseMlp::new(
        rng.normal_tensor(&[d, hidden], 1.0 / (d as f64).sqrt()),
        rng.normal_tensor(&[hidden, d], 1.0 / (hidden as f64).sqrt()),
    );
    if bias {
        m.b1 = Some(rng.normal_tensor(&[hidden], 0.1));
        m.b2 = Some(rng.normal_tensor(&[d], 0.1));
    }
    m
}

fn random_dense_attention<T: Scalar>(rng: &mut Rng, d: usize, width: usize) -> DenseAttention<T> {
    let s = 1.0 / (d as f64).sqrt();
    DenseAttention {
        w_q: rng.normal_tensor(&[d, width], s),
        w_k: rng.normal_tensor(&[d, width], s),
        w_v: rng.normal_tensor(&[d, width], s),
        w_o: rng.normal_tensor(&[width, d], 1.0 / (width as f64).sqrt()),
    }
}

fn full_route(n: usize, l_p: usize) -> RouteConfig {
    RouteConfig {
        mode: SelectionMode::Full,
        n,
        k: n,
        k_combined_data: 1,
        l_p,
    }
}

fn micro_config(attn: SelectionMode, mlp: SelectionMode, seed: u64) -> UoeModelConfig {
    UoeModelConfig {
        layers: 2,
        d: 8,
        n_a: 2,
        d_h: 4,
        n_m: 2,
        d_e: 8,
        l_p: 4,
        k_attn: 1,
        k_mlp: 1,
        attn_mode: attn,
        mlp_mode: mlp,
        vocab_size: 16,
        max_len: 16,
        rope: RopeConfig::half(4),
        gate_hidden: 8,
        seed,
        ..UoeModelConfig::default()
    }
}

fn random_batch(rng: &mut Rng, b: usize, l: usize, vocab: usize) -> Batch {
    Batch {
        tokens: (0..b * l).map(|_| rng.below(vocab)).collect(),
        targets: (0..b * l).map(|_| rng.below(vocab)).collect(),
        b,
    }
}

const MODE_PAIRS: [(SelectionMode, SelectionMode); 5] = [
    (SelectionMode::Full, SelectionMode::Full),
    (SelectionMode::Data, SelectionMode::Expert),
    (SelectionMode::Expert, SelectionMode::Data),
    (SelectionMode::Combined, SelectionMode::Combined),
    (SelectionMode::Data, SelectionMode::Data),
];

/// Independent top-k: `i` ranks `r` when exactly `r` entries beat it (larger,
/// or equal at a lower index).
fn rank_top_k(values: &[f64], k: usize) -> Vec<usize> {
    let rank = |i: usize| {
        (0..values.len())
            .filter(|&j| values[j] > values[i] || (values[j] == values[i] && j < i))
            .count()
    };
    let mut out: Vec<(usize, usize)> = (0..values.len()).map(|i| (rank(i), i)).filter(|&(r, _)| r < k).collect();
    out.sort_unstable();
    out.into_iter().map(|(_, i)| i).collect()
}

// ---- tensor ----

fn precision_ops<T: Scalar>(p: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    Ok(vec![
        p[0].matmul(&p[1])?,
        p[0].softmax(1)?,
        p[0].layer_norm(&p[2], &p[3], 1e-5)?,
        p[0].silu(),
        p[0].rope(&[0, 3, 1, 7, 2], 2, 10000.0)?,
        p[0].cross_entropy(&[0, 5, 2, 7, 1])?,
        p[0].index_add(0, &[4, 0, 4], &p[4])?,
        p[0].matmul_segmented(&p[5], &[(1, 2), (0, 3)])?,
    ])
}

fn tensor_precision(ctx: &Ctx) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let mut rng = ctx.rng(&format!("tensor.precision.{trial}"));
        let shapes: [&[usize]; 6] = [&[5, 8], &[8, 6], &[8], &[8], &[3, 8], &[2, 8, 4]];
        let p64: Vec<Tensor<f64>> = shapes.iter().map(|s| rng.uniform_tensor(s, -1.0, 1.0)).collect();
        let p32: Vec<Tensor<f32>> = p64.iter().map(Tensor::cast).collect();
        for (a, b) in precision_ops(&p64)?.iter().zip(precision_ops(&p32)?) {
            for (x, y) in a.data().iter().zip(b.data()) {
                worst = worst.max((x - *y as f64).abs() / x.abs().max(1.0));
            }
        }
    }
    Ok(within(worst, 1e-4, "max relative f32/f64 gap"))
}

fn tensor_adjoint(ctx: &Ctx) -> Result<Outcome> {
    let mut rng = ctx.rng("tensor.adjoint");
    let dyadic = |rng: &mut Rng| (rng.below(17) as f64 - 8.0) / 4.0;
    for _ in 0..200 {
        let rows = 1 + rng.below(6);
        let idx: Vec<usize> = (0..rng.below(10)).map(|_| rng.below(rows)).collect();
        let x = Tensor::<f64>::from_fn(&[rows, 3], |_| dyadic(&mut rng));
        let y = Tensor::<f64>::from_fn(&[idx.len(), 3], |_| dyadic(&mut rng));
        let gathered = x.index_select(0, &idx)?;
        let scattered = Tensor::zeros(&[rows, 3]).index_add(0, &idx, &y)?;
        let lhs: f64 = gathered.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(scattered.data()).map(|(a, b)| a * b).sum();
        if lhs != rhs {
            return Ok(holds(false, format!("<select(x), y> = {lhs} but <x, add(y)> = {rhs} for {idx:?}")));
        }
    }
    Ok(holds(true, "200 exact inner-product identities"))
}

type OpCase = (&'static str, &'static [&'static [usize]], fn(&[Tensor<f64>]) -> uoe_core::Result<Tensor<f64>>);

const OP_CASES: &[OpCase] = &[
    ("matmul", &[&[3, 4], &[4, 2]], |p| p[0].matmul(&p[1])),
    ("matmul_batched", &[&[2, 3, 4], &[2, 4, 2]], |p| p[0].matmul_batched(&p[1])),
    ("matmul_segmented", &[&[5, 3], &[2, 3, 2]], |p| p[0].matmul_segmented(&p[1], &[(1, 3), (0, 2)])),
    ("fma_segmented", &[&[5, 2], &[5, 3], &[2, 3, 2]], |p| {
        Tensor::fused_multiply_accumulate_segmented(&p[0], &p[1], &p[2], &[(1, 3), (0, 2)])
    }),
    ("matmul_grouped", &[&[3, 2, 4], &[2, 4, 3]], |p| p[0].matmul_grouped(&p[1], &[1, 0, 1])),
    ("fma_batched", &[&[2, 3, 2], &[2, 3, 4], &[2, 4, 2]], |p| {
        Tensor::fused_multiply_accumulate(&p[0], &p[1], &p[2])
    }),
    ("fma_grouped", &[&[3, 2, 3], &[3, 2, 4], &[2, 4, 3]], |p| {
        Tensor::fused_multiply_accumulate_grouped(&p[0], &p[1], &p[2], &[0, 1, 1])
    }),
    ("add", &[&[3, 4], &[3, 4]], |p| p[0].add(&p[1])),
    ("sub", &[&[3, 4], &[3, 4]], |p| p[0].sub(&p[1])),
    ("mul", &[&[3, 4], &[3, 4]], |p| p[0].mul(&p[1])),
    ("scale", &[&[3, 4]], |p| Ok(p[0].scale(-1.7))),
    ("add_bias", &[&[3, 4], &[4]], |p| p[0].add_bias(&p[1])),
    ("scale_rows", &[&[3, 4], &[3]], |p| p[0].scale_rows(&p[1])),
    ("softmax", &[&[3, 5]], |p| p[0].softmax(1)),
    ("softmax_masked", &[&[2, 3]], |p| p[0].softmax_masked(1, &[true, false, true, true, true, false])),
    ("silu", &[&[3, 4]], |p| Ok(p[0].silu())),
    ("layer_norm", &[&[3, 5], &[5], &[5]], |p| p[0].layer_norm(&p[1], &p[2], 1e-5)),
    ("rope", &[&[3, 6]], |p| p[0].rope(&[0, 5, 2], 2, 10000.0)),
    ("cross_entropy", &[&[3, 5]], |p| p[0].cross_entropy(&[4, 0, 2])),
    ("index_select", &[&[4, 3]], |p| p[0].index_select(0, &[3, 1, 1, 0])),
    ("index_add", &[&[4, 3], &[3, 3]], |p| p[0].index_add(0, &[2, 0, 2], &p[1])),
    ("mean_axis", &[&[2, 3, 4]], |p| p[0].mean_axis(1)),
    ("sum_axis", &[&[2, 3, 4]], |p| p[0].sum_axis(2)),
    ("sum", &[&[2, 3]], |p| Ok(p[0].silu().sum())),
    ("reshape", &[&[2, 6]], |p| p[0].reshape(&[3, 4])?.softmax(1)),
    ("permute", &[&[2, 3, 4]], |p| Ok(p[0].permute(&[2, 0, 1])?.silu())),
    ("transpose_last2", &[&[2, 3, 4]], |p| Ok(p[0].transpose_last2()?.silu())),
    ("concat", &[&[2, 3], &[1, 3]], |p| Tensor::concat(&[p[0].clone(), p[1].silu()])?.softmax(1)),
];

fn tensor_gradients(ctx: &Ctx) -> Result<Outcome> {
    let mut worst: (f64, &str) = (0.0, "");
    for &(name, shapes, build) in OP_CASES {
        for seed in 0..100u64 {
            let mut rng = ctx.rng(&format!("tensor.grad.{name}.{seed}"));
            let params: Vec<Tensor<f64>> = shapes.iter().map(|s| rng.uniform_tensor(s, -1.0, 1.0)).collect();
            let wseed = rng.next_u64();
            let report = gradcheck::check(&params, 1e-4, None, &mut rng, |p| {
                let y = build(p)?;
                let w: Tensor<f64> = Rng::new(wseed).normal_tensor(y.shape(), 1.0);
                Ok(Probe::smooth(y.mul(&w)?.sum()))
            })?;
            if report.max_rel_error > worst.0 {
                worst = (report.max_rel_error, name);
            }
        }
    }
    let mut o = within(worst.0, 1e-4, "max relative gradient error");
    o.detail.push_str(&format!(" over {} ops x 100 seeds (worst {})", OP_CASES.len(), worst.1));
    Ok(o)
}

fn forward_backward(cfg: &UoeModelConfig, batch: &Batch) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut model = UoeModel::<f64>::new(cfg)?;
    for (_, t) in model.slots_mut() {
        *t = t.detach().requires_grad_();
    }
    let out = model.forward(&batch.tokens, batch.b)?;
    out.logits.cross_entropy(&batch.targets)?.backward()?;
    let grads = model.named_parameters().iter().map(|(_, t)| t.grad_or_zeros()).collect();
    Ok((out.logits.to_f64_vec(), grads))
}

fn tensor_determinism(ctx: &Ctx) -> Result<Outcome> {
    let cfg = micro_config(SelectionMode::Data, SelectionMode::Expert, ctx.seed);
    let batch = random_batch(&mut ctx.rng("tensor.determinism"), 2, 16, 16);
    let a = forward_backward(&cfg, &batch)?;
    let b = forward_backward(&cfg, &batch)?;
    let same = a.0.iter().zip(&b.0).all(|(x, y)| x.to_bits() == y.to_bits())
        && a.1.iter().flatten().zip(b.1.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits());
    Ok(holds(same, "repeated forward/backward is bit-identical"))
}

// ---- losslessness ----

fn lossless_mlp_union(ctx: &Ctx) -> Result<Outcome> {
    let (mut w64, mut w32): (f64, f64) = (0.0, 0.0);
    for n in [1, 2, 4, 8] {
        let mut rng = ctx.rng(&format!("lossless.mlp.{n}"));
        let mlp = random_dense_mlp::<f64>(&mut rng, 8, 32, false);
        let x: Tensor<f64> = rng.normal_tensor(&[6, 8], 1.0);
        for act in [SecondActivation::Identity, SecondActivation::Silu] {
            let dense = dense_mlp_forward(&x, &mlp.a1, &mlp.a2, act)?;
            let union = expert_union_mlp_forward(&x, &partition_mlp_checked(ctx, &mlp, n)?, act)?;
            w64 = w64.max(union.max_abs_diff(&dense));
            let m32 = DenseMlp::new(mlp.a1.cast::<f32>(), mlp.a2.cast::<f32>());
            let x32 = x.cast::<f32>();
            let dense32 = dense_mlp_forward(&x32, &m32.a1, &m32.a2, act)?;
            let union32 = expert_union_mlp_forward(&x32, &partition_mlp_checked(ctx, &m32, n)?, act)?;
            w32 = w32.max(relative_deviation(&union32, &dense32));
        }
    }
    Ok(holds(
        w64 <= 1e-12 && w32 <= 1e-5,
        format!("n in 1,2,4,8: f64 max abs {w64:.3e} (tol 1e-12), f32 relative {w32:.3e} (tol 1e-5)"),
    ))
}

fn lossless_round_trip(ctx: &Ctx) -> Result<Outcome> {
    for n in [1, 2, 4, 8] {
        let mut rng = ctx.rng(&format!("lossless.round_trip.{n}"));
        let mlp = random_dense_mlp::<f64>(&mut rng, 8, 16, true);
        let back = reconstruct_mlp(&partition_mlp_checked(ctx, &mlp, n)?)?;
        let attn = random_dense_attention::<f64>(&mut rng, 8, 16);
        let back_attn = reconstruct_attention(&partition_attention_checked(ctx, &attn, n)?)?;
        let same = back.a1.bit_eq(&mlp.a1)
            && back.a2.bit_eq(&mlp.a2)
            && back.b1.as_ref().zip(mlp.b1.as_ref()).is_some_and(|(a, b)| a.bit_eq(b))
            && back_attn.w_q.bit_eq(&attn.w_q)
            && back_attn.w_k.bit_eq(&attn.w_k)
            && back_attn.w_v.bit_eq(&attn.w_v)
            && back_attn.w_o.bit_eq(&attn.w_o);
        if !same {
            return Ok(holds(false, format!("reconstruction differs from the source at n = {n}")));
        }
    }
    Ok(holds(true, "MLP and attention partitions reconstruct bit-identically, n in 1,2,4,8"))
}

fn lossless_order(ctx: &Ctx) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for n in [2, 4, 8] {
        let mut rng = ctx.rng(&format!("lossless.order.{n}"));
        let mlp = random_dense_mlp::<f64>(&mut rng, 8, 32, true);
        let g = partition_mlp_checked(ctx, &mlp, n)?;
        let x: Tensor<f64> = rng.normal_tensor(&[5, 8], 1.0);
        let natural = expert_union_mlp_forward(&x, &g, SecondActivation::Identity)?;
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..5 {
            for i in (1..n).rev() {
                order.swap(i, rng.below(i + 1));
            }
            let other = expert_union_mlp_forward_ordered(&x, &g, SecondActivation::Identity, &order)?;
            worst = worst.max(other.max_abs_diff(&natural));
        }
    }
    Ok(within(worst, 1e-12, "max change under expert reordering"))
}

fn lossless_attention(ctx: &Ctx) -> Result<Outcome> {
    let (b, l, d, width) = (2, 8, 16, 16);
    let mut worst: f64 = 0.0;
    for n in [1, 2, 4, 8] {
        let mut rng = ctx.rng(&format!("lossless.attention.{n}"));
        let dense = random_dense_attention::<f64>(&mut rng, d, width);
        let d_h = width / n;
        let rope = RopeConfig::half(d_h);
        let p = SmhaParams {
            experts: partition_attention_checked(ctx, &dense, n)?,
            gate: GateParams::default(),
            rope,
            compact_positions: false,
            gate_scale_outputs: false,
        };
        let h: Tensor<f64> = rng.normal_tensor(&[b, l, d], 1.0);
        let mask = AttentionMask::causal();
        let out = smha_forward(&h, &p, &mask, &full_route(n, 4))?.u.sub(&h)?;
        let reference = dense_attention(&h, &dense, d_h, &rope, &mask)?;
        worst = worst.max(out.max_abs_diff(&reference));
    }
    Ok(within(worst, 1e-12, "n_a in 1,2,4,8: max abs diff to dense MHA"))
}

fn lossless_mlp_block(ctx: &Ctx) -> Result<Outcome> {
    let (b, l, d) = (2, 8, 8);
    let mut worst: f64 = 0.0;
    for n in [1, 2, 4, 8] {
        let mut rng = ctx.rng(&format!("lossless.mlp_block.{n}"));
        let dense = random_dense_mlp::<f64>(&mut rng, d, 32, true);
        let u: Tensor<f64> = rng.normal_tensor(&[b, l, d], 1.0);
        for act in [SecondActivation::Identity, SecondActivation::Silu] {
            let p = UomeParams {
                experts: partition_mlp_checked(ctx, &dense, n)?,
                gate: GateParams::default(),
                act,
                gate_scale_outputs: false,
            };
            let h = uome_forward(&u, &p, &full_route(n, 4))?.h;
            let flat = u.reshape(&[b * l, d])?;
            let reference = flat.add(&dense.forward(&flat, act)?)?.reshape(&[b, l, d])?;
            worst = worst.max(h.max_abs_diff(&reference));
        }
    }
    Ok(within(worst, 1e-12, "n_m in 1,2,4,8: max abs diff to dense MLP + residual"))
}

/// `model` with every expert group re-cut from its reconstructed dense
/// weights.
fn repartitioned(ctx: &Ctx, model: &UoeModel<f64>, dense: &DenseModel<f64>) -> Result<UoeModel<f64>> {
    let mut m = model.clone();
    for (block, reference) in m.blocks.iter_mut().zip(&dense.blocks) {
        block.attn.experts = partition_attention_checked(ctx, &reference.attn, model.config.n_a)?;
        block.mlp.experts = partition_mlp_checked(ctx, &reference.mlp, model.config.n_m)?;
    }
    Ok(m)
}

fn lossless_block(ctx: &Ctx) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for n_a in [1, 2, 4, 8] {
        for n_m in [1, 2, 4, 8] {
            let cfg = UoeModelConfig {
                layers: 1,
                d: 16,
                n_a,
                d_h: 16 / n_a,
                n_m,
                d_e: 64 / n_m,
                l_p: 4,
                max_len: 8,
                rope: RopeConfig::half(16 / n_a),
                mlp_second_activation: if (n_a + n_m) % 2 == 0 {
                    SecondActivation::Identity
                } else {
                    SecondActivation::Silu
                },
                seed: ctx.seed ^ (n_a * 16 + n_m) as u64,
                ..UoeModelConfig::default()
            }
            .fully_activated();
            let model = UoeModel::<f64>::new(&cfg)?;
            let dense = DenseModel::from_uoe(&model)?;
            let model = repartitioned(ctx, &model, &dense)?;
            let x: Tensor<f64> = ctx.rng(&format!("lossless.block.{n_a}.{n_m}")).normal_tensor(&[2, 8, 16], 1.0);
            let mask = cfg.mask();
            let (y, _) = block_forward(&x, &model.blocks[0], &cfg, &mask)?;
            let reference = dense_block_forward(&x, &dense.blocks[0], &cfg, &mask)?;
            worst = worst.max(y.max_abs_diff(&reference));
        }
    }
    Ok(within(worst, 1e-12, "(n_a, n_m) in {1,2,4,8}^2: max abs diff to dense pre-norm block"))
}

fn lossless_model(ctx: &Ctx) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for layers in 1..=4 {
        let cfg = UoeModelConfig {
            layers,
            d: 16,
            n_a: 4,
            d_h: 4,
            n_m: 4,
            d_e: 16,
            l_p: 4,
            vocab_size: 32,
            max_len: 16,
            rope: RopeConfig::half(4),
            seed: ctx.seed + layers as u64,
            ..UoeModelConfig::default()
        }
        .fully_activated();
        let model = UoeModel::<f64>::new(&cfg)?;
        let dense = DenseModel::from_uoe(&model)?;
        let model = repartitioned(ctx, &model, &dense)?;
        let batch = random_batch(&mut ctx.rng(&format!("lossless.model.{layers}")), 2, 16, 32);
        let got = model.forward(&batch.tokens, 2)?.logits;
        worst = worst.max(got.max_abs_diff(&dense.forward(&batch.tokens, 2)?));
    }
    Ok(within(worst, 1e-10, "layers 1..4: max abs logit diff to dense model"))
}

// ---- adjoint ----

fn grid_gates(rng: &mut Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| [0.1, 0.2, 0.3, 0.4][rng.below(4)]).collect()
}

fn adjoint_patches(_ctx: &Ctx) -> Result<Outcome> {
    let (l_p, d) = (2, 2);
    let per = l_p * d;
    let mut cases = 0usize;
    for n in 1..=3usize {
        for m in 1..=6usize {
            let x = Tensor::<f64>::from_fn(&[m, l_p, d], |i| i as f64);
            let base = Tensor::<f64>::from_fn(&[m, l_p, d], |i| (i % 5) as f64);
            for c in 1..=m {
                let subsets = subsets_of_size(m, c);
                let mut pick = vec![0usize; n];
                loop {
                    let plan = DataRoutingPlan {
                        n,
                        m,
                        k: n,
                        g: vec![1.0 / n as f64; n * m],
                        id_prime: vec![Vec::new(); m],
                        c,
                        id: pick.iter().map(|&s| subsets[s].clone()).collect(),
                        active: (0..n).collect(),
                    };
                    let gathered = gather_patches(&x, &plan)?;
                    let y = Tensor::<f64>::from_fn(gathered.shape(), |i| ((i * 7) % 11) as f64 - 5.0);
                    let out = scatter_add_patches(&base, &y, &plan)?;
                    let mut expect = base.data().to_vec();
                    for (i, ids) in plan.id.iter().enumerate() {
                        for (slot, &j) in ids.iter().enumerate() {
                            let at = (i * c + slot) * per;
                            if gathered.data()[at..at + per] != x.data()[j * per..(j + 1) * per] {
                                return Ok(holds(false, format!("gather mismatch n={n} m={m} c={c}")));
                            }
                            for e in 0..per {
                                expect[j * per + e] += y.data()[at + e];
                            }
                        }
                    }
                    if out.data() != expect.as_slice() {
                        return Ok(holds(false, format!("scatter mismatch n={n} m={m} c={c}")));
                    }
                    cases += 1;
                    if !advance(&mut pick, subsets.len()) {
                        break;
                    }
                }
            }
        }
    }
    Ok(holds(
        true,
        format!("all {cases} per-expert patch index sets with m <= 6, n <= 3 match the explicit double sum exactly"),
    ))
}

fn subsets_of_size(m: usize, c: usize) -> Vec<Vec<usize>> {
    (0u32..1 << m)
        .filter(|mask| mask.count_ones() as usize == c)
        .map(|mask| (0..m).filter(|j| mask >> j & 1 == 1).collect())
        .collect()
}

/// Odometer step over `digits` in base `radix`; false once every combination was visited.
fn advance(digits: &mut [usize], radix: usize) -> bool {
    let Some(pos) = digits.iter().position(|&s| s + 1 < radix) else {
        return false;
    };
    digits[pos] += 1;
    digits[..pos].iter_mut().for_each(|s| *s = 0);
    true
}

fn adjoint_samples(_ctx: &Ctx) -> Result<Outcome> {
    let (l, d) = (3, 2);
    let per = l * d;
    let mut cases = 0usize;
    for n in 1..=3usize {
        for b in 1..=5usize {
            let x = Tensor::<f64>::from_fn(&[b, l, d], |i| i as f64);
            for k in 1..=n {
                let subsets = subsets_of_size(n, k);
                let mut pick = vec![0usize; b];
                loop {
                    let top: Vec<Vec<usize>> = pick.iter().map(|&s| subsets[s].clone()).collect();
                    let assignments = (0..n).map(|e| (0..b).filter(|&s| top[s].contains(&e)).collect()).collect();
                    let plan = ExpertRoutingPlan { n, k, g: vec![1.0 / n as f64; b * n], top, assignments };
                    let gathered = gather_samples(&x, &plan)?;
                    let y = Tensor::<f64>::from_fn(gathered.shape(), |i| ((i * 3) % 7) as f64);
                    let out = scatter_add_samples(&Tensor::zeros(&[b, l, d]), &y, &plan)?;
                    let mut expect = vec![0.0; b * per];
                    let mut slot = 0;
                    for samples in &plan.assignments {
                        for &s in samples {
                            if gathered.data()[slot * per..(slot + 1) * per] != x.data()[s * per..(s + 1) * per] {
                                return Ok(holds(false, format!("gather mismatch n={n} b={b} k={k}")));
                            }
                            for e in 0..per {
                                expect[s * per + e] += y.data()[slot * per + e];
                            }
                            slot += 1;
                        }
                    }
                    if out.data() != expect.as_slice() {
                        return Ok(holds(false, format!("scatter mismatch n={n} b={b} k={k}")));
                    }
                    cases += 1;
                    if !advance(&mut pick, subsets.len()) {
                        break;
                    }
                }
            }
        }
    }
    Ok(holds(
        true,
        format!("all {cases} per-sample expert sets with n <= 3, b <= 5 match the explicit sums exactly"),
    ))
}

fn adjoint_dispatch(ctx: &Ctx) -> Result<Outcome> {
    for (mode, n, k) in [
        (SelectionMode::Data, 3, 2),
        (SelectionMode::Expert, 3, 2),
        (SelectionMode::Combined, 3, 2),
        (SelectionMode::Full, 3, 3),
    ] {
        let cfg = UoeModelConfig {
            layers: 1,
            d: 6,
            n_a: n,
            d_h: 2,
            n_m: n,
            d_e: 4,
            l_p: 2,
            k_attn: k,
            k_mlp: k,
            attn_mode: mode,
            max_len: 8,
            rope: RopeConfig::half(2),
            gate_hidden: 4,
            seed: ctx.seed,
            ..UoeModelConfig::default()
        };
        let model = UoeModel::<f64>::new(&cfg)?;
        let x: Tensor<f64> = ctx.rng("adjoint.dispatch").normal_tensor(&[3, 8, 6], 1.0);
        let routed = routing::route(&x, &model.blocks[0].attn.gate, &cfg.attn_route())?;
        let dsp = &routed.dispatch;
        let flat = Tensor::<f64>::from_fn(&[24, 6], |i| i as f64);
        let rows = dsp.gather(&flat)?;
        let y = Tensor::<f64>::from_fn(rows.shape(), |i| (i % 13) as f64);
        let out = dsp.scatter_add(&Tensor::zeros(&[24, 6]), &y)?;
        let mut expect = vec![0.0; 24 * 6];
        for (t, &r) in dsp.rows.iter().enumerate() {
            if rows.data()[t * 6..(t + 1) * 6] != flat.data()[r * 6..(r + 1) * 6] {
                return Ok(holds(false, format!("{mode}: dispatch row {t} gathered the wrong token")));
            }
            for e in 0..6 {
                expect[r * 6 + e] += y.data()[t * 6 + e];
            }
        }
        let total: usize = dsp.units.iter().map(|u| u.len).sum();
        if out.data() != expect.as_slice() || total != dsp.rows.len() {
            return Ok(holds(false, format!("{mode}: dispatch scatter differs from the explicit sum")));
        }
    }
    Ok(holds(true, "token dispatch in all modes matches explicit gather and sum"))
}

// ---- mask ----

fn mask_submatrix(ctx: &Ctx) -> Result<Outcome> {
    let mut rng = ctx.rng("mask");
    let mut sets = 0;
    for l in [8usize, 32, 128] {
        let full = causal_mask(l);
        for _ in 0..100 {
            let mut idx: Vec<usize> = (0..l).filter(|_| rng.below(2) == 1).collect();
            if idx.is_empty() {
                idx.push(rng.below(l));
            }
            let l_a = idx.len();
            let sub = index_mask(&full, l, &idx, &idx);
            let tril: Vec<bool> = (0..l_a * l_a).map(|t| t % l_a <= t / l_a).collect();
            if sub != tril || shared_causal_submask(l_a) != tril {
                return Ok(holds(false, format!("l = {l}, index set {idx:?}")));
            }
            sets += 1;
        }
    }
    Ok(holds(true, format!("{sets} sorted index sets over l in 8,32,128 give tril(l_a) exactly")))
}

// ---- routing ----

fn routing_brute_force(ctx: &Ctx) -> Result<Outcome> {
    let mut rng = ctx.rng("routing.brute");
    let mut cases = 0;
    for n in 1..=3 {
        for m in 1..=5 {
            for k in 1..=n {
                for _ in 0..50 {
                    let g = grid_gates(&mut rng, n * m);
                    let plan = plan_data_selection_among(&g, n, m, k, &(0..n).collect::<Vec<_>>())?;
                    let stage1: Vec<Vec<usize>> = (0..m)
                        .map(|j| rank_top_k(&(0..n).map(|i| g[i * m + j]).collect::<Vec<_>>(), k))
                        .collect();
                    let mut counts = vec![0; n];
                    stage1.iter().flatten().for_each(|&i| counts[i] += 1);
                    let c = *counts.iter().max().unwrap_or(&0);
                    let id: Vec<Vec<usize>> = (0..n)
                        .map(|i| {
                            let mut r = rank_top_k(&g[i * m..(i + 1) * m], c);
                            r.sort_unstable();
                            r
                        })
                        .collect();
                    if plan.id_prime != stage1 || plan.c != c || plan.id != id {
                        return Ok(holds(false, format!("data plan differs: n={n} m={m} k={k} g={g:?}")));
                    }
                    let b = m;
                    let eg = grid_gates(&mut rng, b * n);
                    let ep = plan_expert_selection_values(&eg, b, n, k)?;
                    let top: Vec<Vec<usize>> = (0..b).map(|s| rank_top_k(&eg[s * n..(s + 1) * n], k)).collect();
                    if ep.top != top {
                        return Ok(holds(false, format!("expert plan differs: n={n} b={b} k={k} g={eg:?}")));
                    }
                    cases += 1;
                }
            }
        }
    }
    Ok(holds(true, format!("{cases} grid-valued instances match the rank oracle")))
}

/// Positive gates whose per-patch columns sum to one, like a softmax over
/// experts.
fn column_normalized(rng: &mut Rng, n: usize, m: usize) -> Vec<f64> {
    let mut g: Vec<f64> = (0..n * m).map(|_| 0.01 + rng.uniform()).collect();
    for j in 0..m {
        let total: f64 = (0..n).map(|i| g[i * m + j]).sum();
        (0..n).for_each(|i| g[i * m + j] /= total);
    }
    g
}

fn routing_capacity(ctx: &Ctx) -> Result<Outcome> {
    let mut rng = ctx.rng("routing.capacity");
    for _ in 0..500 {
        let (n, m) = (1 + rng.below(8), 1 + rng.below(12));
        let k = 1 + rng.below(n);
        let g = column_normalized(&mut rng, n, m);
        let plan = plan_data_selection_among(&g, n, m, k, &(0..n).collect::<Vec<_>>())?;
        if plan.c < (m * k).div_ceil(n) || plan.c > m || plan.check_invariants().is_err() {
            return Ok(holds(false, format!("c = {} for n={n} m={m} k={k}", plan.c)));
        }
    }
    Ok(holds(true, "ceil(m*k/n) <= c <= m over 500 random gatings"))
}

fn routing_argmax(ctx: &Ctx) -> Result<Outcome> {
    let mut rng = ctx.rng("routing.argmax");
    for _ in 0..500 {
        let (n, m) = (1 + rng.below(6), 1 + rng.below(10));
        let k = 1 + rng.below(n);
        let g: Vec<f64> = (0..n * m).map(|_| rng.uniform()).collect();
        let plan = plan_data_selection_among(&g, n, m, k, &(0..n).collect::<Vec<_>>())?;
        for j in 0..m {
            let best = rank_top_k(&(0..n).map(|i| g[i * m + j]).collect::<Vec<_>>(), 1)[0];
            if !plan.id_prime[j].contains(&best) {
                return Ok(holds(false, format!("patch {j} missing from its argmax expert's stage-1 picks")));
            }
        }
    }
    Ok(holds(true, "every patch is a stage-1 pick of its argmax expert"))
}

fn routing_permutation(ctx: &Ctx) -> Result<Outcome> {
    let mut rng = ctx.rng("routing.permutation");
    for _ in 0..300 {
        let (n, m) = (1 + rng.below(5), 1 + rng.below(8));
        let k = 1 + rng.below(n);
        let g: Vec<f64> = (0..n * m).map(|_| rng.uniform()).collect();
        let mut perm: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            perm.swap(i, rng.below(i + 1));
        }
        // column j of the permuted matrix is column perm[j] of the original
        let gp: Vec<f64> = (0..n * m).map(|t| g[(t / m) * m + perm[t % m]]).collect();
        let all: Vec<usize> = (0..n).collect();
        let a = plan_data_selection_among(&g, n, m, k, &all)?;
        let b = plan_data_selection_among(&gp, n, m, k, &all)?;
        let rows_ok = (0..m).all(|j| b.id_prime[j] == a.id_prime[perm[j]]);
        let ids_ok = (0..n).all(|i| {
            let mut mapped: Vec<usize> = b.id[i].iter().map(|&j| perm[j]).collect();
            mapped.sort_unstable();
            mapped == a.id[i]
        });
        if !(rows_ok && ids_ok && a.c == b.c) {
            return Ok(holds(false, format!("n={n} m={m} k={k} perm={perm:?}")));
        }
    }
    Ok(holds(true, "300 patch permutations permute stage-1 rows and expert lists, c unchanged"))
}

fn routing_single_pass(ctx: &Ctx) -> Result<Outcome> {
    for (attn, mlp) in MODE_PAIRS {
        for strategy in [ExecStrategy::Batched, ExecStrategy::Fused] {
            let cfg = UoeModelConfig {
                strategy,
                ..micro_config(attn, mlp, ctx.seed)
            };
            let model = UoeModel::<f64>::new(&cfg)?;
            let batch = random_batch(&mut ctx.rng("routing.single_pass"), 2, 16, 16);
            routing::reset_routing_passes();
            model.forward(&batch.tokens, 2)?;
            let p = routing::routing_passes();
            let expect = 2 * cfg.layers as u64;
            if p.gathers != expect || p.scatters != expect {
                return Ok(holds(
                    false,
                    format!("{attn}/{mlp} {strategy}: {} gathers, {} scatters for {expect} routed blocks", p.gathers, p.scatters),
                ));
            }
        }
    }
    Ok(holds(true, "one gather and one scatter per routed block per forward"))
}

// ---- attention ----

fn attention_softmax_rows(ctx: &Ctx) -> Result<Outcome> {
    let mut rng = ctx.rng("attention.softmax");
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (r, c) = (1 + rng.below(6), 1 + rng.below(9));
        let x: Tensor<f64> = rng.normal_tensor(&[r, c], 3.0);
        let keep: Vec<bool> = (0..r * c).map(|t| t % c == 0 || rng.below(3) > 0).collect();
        let s = x.softmax_masked(1, &keep)?;
        for i in 0..r {
            let row = &s.data()[i * c..(i + 1) * c];
            let total: f64 = row.iter().sum();
            worst = worst.max((total - 1.0).abs());
            if row.iter().enumerate().any(|(j, &v)| v < 0.0 || (!keep[i * c + j] && v != 0.0)) {
                return Ok(holds(false, "masked key received weight or a weight is negative"));
            }
        }
    }
    Ok(within(worst, 1e-6, "max |row sum - 1|"))
}

fn attention_rope_shift(ctx: &Ctx) -> Result<Outcome> {
    let mut rng = ctx.rng("attention.rope");
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let d_h = 2 * (1 + rng.below(8));
        let q: Tensor<f64> = rng.normal_tensor(&[1, d_h], 1.0);
        let k: Tensor<f64> = rng.normal_tensor(&[1, d_h], 1.0);
        let (p, p2, s) = (rng.below(64), rng.below(64), rng.below(64));
        let logit = |a: usize, b: usize| -> Result<f64> {
            let qa = q.rope(&[a], 0, 10000.0)?;
            let kb = k.rope(&[b], 0, 10000.0)?;
            Ok(qa.data().iter().zip(kb.data()).map(|(x, y)| x * y).sum())
        };
        worst = worst.max((logit(p, p2)? - logit(p + s, p2 + s)?).abs());
    }
    Ok(within(worst, 1e-12, "max logit change under a common position shift"))
}

fn sub_block_gradcheck(ctx: &Ctx, attn: SelectionMode, mlp: SelectionMode, label: &str) -> Result<Outcome> {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for trial in 0..3u64 {
        let cfg = UoeModelConfig {
            layers: 1,
            gate_scale_outputs: true,
            ..micro_config(attn, mlp, ctx.seed + trial)
        };
        let model = UoeModel::<f64>::new(&cfg)?;
        let mut rng = ctx.rng(&format!("{label}.{trial}"));
        let batch = random_batch(&mut rng, 2, 16, 16);
        let r = model_gradcheck(&model, &batch, 1e-4, None, &mut rng)?;
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
    }
    let mut o = within(worst, 1e-4, "max relative gradient error");
    o.detail.push_str(&format!(" over {checked} coordinates, gate scaling on"));
    Ok(o)
}

fn attention_gradients(ctx: &Ctx) -> Result<Outcome> {
    sub_block_gradcheck(ctx, SelectionMode::Data, SelectionMode::Full, "attention.grad")
}

// ---- mlp ----

fn mlp_all_patches(ctx: &Ctx) -> Result<Outcome> {
    let cfg = UoeModelConfig {
        layers: 1,
        mlp_mode: SelectionMode::Data,
        k_mlp: 4,
        seed: ctx.seed,
        ..UoeModelConfig::default()
    };
    let model = UoeModel::<f64>::new(&cfg)?;
    let u: Tensor<f64> = ctx.rng("mlp.all_patches").normal_tensor(&[2, cfg.max_len, cfg.d], 1.0);
    let p = &model.blocks[0].mlp;
    let data = uome_forward(&u, p, &cfg.mlp_route())?;
    let full = uome_forward(&u, p, &full_route(cfg.n_m, cfg.l_p))?;
    let all = data.routed.data_plans.iter().all(|plan| plan.c == plan.m);
    Ok(holds(all && data.h.bit_eq(&full.h), "data selection with c = m is bit-identical to full mode"))
}

fn mlp_unselected_expert(ctx: &Ctx) -> Result<Outcome> {
    let cfg = UoeModelConfig {
        layers: 1,
        mlp_mode: SelectionMode::Expert,
        k_mlp: 1,
        seed: ctx.seed,
        ..UoeModelConfig::default()
    };
    let model = UoeModel::<f64>::new(&cfg)?;
    let (b, l, d) = (4, cfg.max_len, cfg.d);
    let u: Tensor<f64> = ctx.rng("mlp.unselected").normal_tensor(&[b, l, d], 1.0);
    let p = model.blocks[0].mlp.clone();
    let base = uome_forward(&u, &p, &cfg.mlp_route())?;
    let plan = base.routed.expert_plan.clone().ok_or_else(|| anyhow!("expert mode produced no plan"))?;
    let mut probes = 0;
    for s in 0..b {
        for i in (0..cfg.n_m).filter(|i| !plan.top[s].contains(i)) {
            let mut q = p.clone();
            let mut a_out = q.experts.a_out.data().to_vec();
            let per = q.experts.a_out.numel() / cfg.n_m;
            a_out[i * per..(i + 1) * per].iter_mut().for_each(|v| *v += 1.0);
            q.experts.a_out = Tensor::new(a_out, q.experts.a_out.shape())?;
            let y = uome_forward(&u, &q, &cfg.mlp_route())?.h;
            let rows = |t: &Tensor<f64>| t.data()[s * l * d..(s + 1) * l * d].to_vec();
            let same = rows(&y).iter().zip(rows(&base.h)).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Ok(holds(false, format!("sample {s} changed when unselected expert {i} was perturbed")));
            }
            probes += 1;
        }
    }
    Ok(holds(true, format!("{probes} unselected-expert perturbations left their samples bit-unchanged")))
}

fn mlp_gradients(ctx: &Ctx) -> Result<Outcome> {
    sub_block_gradcheck(ctx, SelectionMode::Full, SelectionMode::Expert, "mlp.grad")
}

// ---- load balance ----

fn balance_uniform(_ctx: &Ctx) -> Result<Outcome> {
    let alpha = 0.01;
    let mut worst: f64 = 0.0;
    for n in [2, 4, 8] {
        for l in [8, 64] {
            let g = Tensor::<f64>::full(&[l, n], 1.0 / n as f64);
            for k in 1..=n {
                let sel: Vec<Vec<usize>> = (0..l).map(|_| routing::top_k(&vec![1.0 / n as f64; n], k)).collect();
                let v = load_balance_loss(&g, &sel, k, alpha)?.item()?;
                worst = worst.max((v - alpha).abs());
            }
        }
    }
    Ok(within(worst, 1e-12, "max |L_bal - alpha| under uniform gates"))
}

fn balance_imbalance(_ctx: &Ctx) -> Result<Outcome> {
    let alpha = 0.01;
    let mut worst: f64 = 0.0;
    for t in [1, 8, 64] {
        let g = Tensor::<f64>::from_fn(&[t, 2], |i| if i % 2 == 0 { 1.0 } else { 0.0 });
        let sel = vec![vec![0]; t];
        worst = worst.max((load_balance_loss(&g, &sel, 1, alpha)?.item()? - 2.0 * alpha).abs());
    }
    Ok(within(worst, 1e-12, "n=2, k=1 all-on-one-expert: |L_bal - 2 alpha|"))
}

fn balance_non_negative(ctx: &Ctx) -> Result<Outcome> {
    let mut rng = ctx.rng("balance.nonneg");
    let mut lowest = f64::INFINITY;
    for _ in 0..300 {
        let (t, n) = (1 + rng.below(16), 1 + rng.below(8));
        let k = 1 + rng.below(n);
        let g = rng.uniform_tensor::<f64>(&[t, n], -3.0, 3.0).softmax(1)?;
        let sel: Vec<Vec<usize>> = (0..t).map(|r| routing::top_k(&g.data()[r * n..(r + 1) * n], k)).collect();
        lowest = lowest.min(load_balance_loss(&g, &sel, k, 0.01)?.item()?);
    }
    Ok(holds(lowest >= 0.0, format!("minimum over 300 random gatings {lowest:.3e}")))
}

fn balance_gradient(ctx: &Ctx) -> Result<Outcome> {
    let mut rng = ctx.rng("balance.gradient");
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (t, n) = (1 + rng.below(10), 2 + rng.below(6));
        let k = 1 + rng.below(n);
        let alpha = 0.05;
        let g = rng.uniform_tensor::<f64>(&[t, n], 0.0, 1.0).requires_grad_();
        let sel: Vec<Vec<usize>> = (0..t).map(|r| routing::top_k(&g.data()[r * n..(r + 1) * n], k)).collect();
        load_balance_loss(&g, &sel, k, alpha)?.backward()?;
        let mut counts = vec![0.0; n];
        sel.iter().flatten().for_each(|&i| counts[i] += 1.0);
        let grad = g.grad_or_zeros();
        for (idx, v) in grad.iter().enumerate() {
            let f = counts[idx % n] * n as f64 / (k * t) as f64;
            worst = worst.max((v - alpha * f / t as f64).abs());
        }
    }
    Ok(within(worst, 1e-15, "max |dL/dg - alpha f_i / t|"))
}

// ---- gradient ----

fn gradient_micro_model(ctx: &Ctx) -> Result<Outcome> {
    let mut worst = 0.0f64;
    let (mut checked, mut skipped) = (0, 0);
    for (attn, mlp) in MODE_PAIRS {
        for trial in 0..2u64 {
            let model = UoeModel::<f64>::new(&micro_config(attn, mlp, ctx.seed * 131 + trial))?;
            let mut rng = ctx.rng(&format!("gradient.{attn}.{mlp}.{trial}"));
            let batch = random_batch(&mut rng, 2, 16, 16);
            let r = model_gradcheck(&model, &batch, 1e-4, Some(24), &mut rng)?;
            worst = worst.max(r.max_rel_error);
            checked += r.checked;
            skipped += r.skipped;
        }
    }
    let mut o = within(worst, 1e-4, "max relative gradient error");
    o.detail.push_str(&format!(", 2-layer d=8 l=16, all modes, {checked} checked / {skipped} on route boundaries"));
    Ok(o)
}

// ---- training ----

fn pattern_batch(rng: &mut Rng, b: usize, l: usize) -> Batch {
    let text: Vec<usize> = (0..4096).map(|i| (i * 7) % 16).collect();
    let (mut tokens, mut targets) = (Vec::new(), Vec::new());
    for _ in 0..b {
        let s = rng.below(text.len() - l - 1);
        tokens.extend_from_slice(&text[s..s + l]);
        targets.extend_from_slice(&text[s + 1..s + l + 1]);
    }
    Batch { tokens, targets, b }
}

fn training_memorization(ctx: &Ctx) -> Result<Outcome> {
    let cfg = UoeModelConfig {
        layers: 1,
        d: 16,
        d_h: 8,
        d_e: 16,
        rope: RopeConfig::half(8),
        gate_hidden: 16,
        ..micro_config(SelectionMode::Data, SelectionMode::Expert, ctx.seed)
    };
    let mut state = TrainState::new(
        UoeModel::<f64>::new(&cfg)?,
        AdamConfig {
            lr: 1e-2,
            ..Default::default()
        },
        Rng::new(ctx.seed),
    );
    let mut rng = ctx.rng("training.memorization");
    let mut history: Vec<StepMetrics> = Vec::new();
    for _ in 0..200 {
        history.push(train_step(&mut state, &[pattern_batch(&mut rng, 4, 16)])?);
    }
    let windows: Vec<f64> = history
        .chunks(20)
        .map(|w| w.iter().map(|m| m.nll).sum::<f64>() / w.len() as f64)
        .collect();
    let rises = windows.windows(2).filter(|w| w[1] > w[0]).count();
    let last = history.last().map_or(f64::NAN, |m| m.ppl);
    Ok(holds(
        rises <= 2 && windows.last() < windows.first() && last < 2.0,
        format!("window-20 mean NLL {:.3} -> {:.3}, {rises} rises, final ppl {last:.3}", windows[0], windows[windows.len() - 1]),
    ))
}

fn short_run(cfg: &UoeModelConfig, seed: u64) -> Result<(Vec<StepMetrics>, Vec<u8>)> {
    let mut state = TrainState::new(UoeModel::<f64>::new(cfg)?, AdamConfig::default(), Rng::new(seed));
    let mut rng = Rng::new(seed).fork("data");
    let mut metrics = Vec::new();
    for _ in 0..5 {
        metrics.push(train_step(&mut state, &[random_batch(&mut rng, 2, 16, 16)])?);
    }
    Ok((metrics, encode(&state_arrays(&state))))
}

fn training_determinism(ctx: &Ctx) -> Result<Outcome> {
    let cfg = micro_config(SelectionMode::Combined, SelectionMode::Expert, ctx.seed);
    let a = short_run(&cfg, ctx.seed)?;
    let b = short_run(&cfg, ctx.seed)?;
    Ok(holds(a == b, "two 5-step runs give identical metrics and state bytes"))
}

// ---- flops ----

fn flops_instrumented(ctx: &Ctx) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for (attn, mlp) in MODE_PAIRS {
        for l in [16, 64, 128] {
            let cfg = UoeModelConfig {
                d: 16,
                n_a: 4,
                d_h: 4,
                n_m: 4,
                d_e: 16,
                k_attn: 2,
                k_mlp: 2,
                attn_mode: attn,
                mlp_mode: mlp,
                vocab_size: 32,
                max_len: l,
                rope: RopeConfig::half(4),
                gate_hidden: 16,
                seed: ctx.seed,
                ..UoeModelConfig::default()
            };
            let model = UoeModel::<f64>::new(&cfg)?;
            let batch = random_batch(&mut ctx.rng("flops.instrumented"), 2, l, 32);
            counters::reset_flops();
            let out = model.forward(&batch.tokens, 2)?;
            let measured = counters::flops() as f64;
            let loads: Vec<BlockLoads> = out.blocks.iter().map(BlockLoads::from_stats).collect();
            let analytic = count_uoe(&cfg, 2, l, Some(&loads)).total() as f64;
            worst = worst.max((analytic - measured).abs() / measured);
            counters::reset_flops();
            DenseModel::from_uoe(&model)?.forward(&batch.tokens, 2)?;
            let dense_measured = counters::flops() as f64;
            worst = worst.max((count_dense(&cfg, 2, l).total() as f64 - dense_measured).abs() / dense_measured);
        }
    }
    Ok(within(worst, 0.01, "max relative gap analytic vs instrumented (l <= 128)"))
}

fn flops_overhead(ctx: &Ctx) -> Result<Outcome> {
    let _ = ctx;
    for (n, l) in [(1, 16), (4, 64), (8, 256)] {
        let cfg = UoeModelConfig {
            n_a: n,
            d_h: 64 / n,
            n_m: n,
            d_e: 256 / n,
            max_len: l,
            rope: RopeConfig::half(64 / n),
            ..UoeModelConfig::default()
        }
        .fully_activated();
        let uoe = count_uoe(&cfg, 2, l, None);
        let dense = count_dense(&cfg, 2, l);
        if uoe.total() - dense.total() != uoe.overhead() {
            return Ok(holds(false, format!("n={n} l={l}: {} - {} != {}", uoe.total(), dense.total(), uoe.overhead())));
        }
    }
    Ok(holds(true, "full-activation count minus dense count equals the gating + routing overhead"))
}

fn monotone_config(mode: SelectionMode, k: usize, k_combined_data: usize) -> UoeModelConfig {
    UoeModelConfig {
        n_a: 8,
        d_h: 8,
        n_m: 8,
        d_e: 32,
        k_attn: k,
        k_mlp: k,
        k_combined_data,
        attn_mode: mode,
        mlp_mode: mode,
        max_len: 256,
        rope: RopeConfig::half(8),
        ..UoeModelConfig::default()
    }
}

fn flops_monotone(_ctx: &Ctx) -> Result<Outcome> {
    // Data and expert modes: k alone sets c/m or k/n. Combined mode: k sets
    // k/n with every active expert taking every patch, and k_combined_data
    // sets c/m at a fixed k.
    let mut sweeps: Vec<(String, Vec<UoeModelConfig>)> = Vec::new();
    for mode in [SelectionMode::Data, SelectionMode::Expert] {
        sweeps.push((format!("{mode} in k"), (1..=8).map(|k| monotone_config(mode, k, 1)).collect()));
    }
    sweeps.push((
        "combined in k/n".into(),
        (1..=8).map(|k| monotone_config(SelectionMode::Combined, k, k)).collect(),
    ));
    sweeps.push((
        "combined in c/m".into(),
        (1..=6).map(|kd| monotone_config(SelectionMode::Combined, 6, kd)).collect(),
    ));
    for (name, configs) in &sweeps {
        let mut last = 0.0;
        for cfg in configs {
            let ratio = count_uoe(cfg, 4, 256, None).ratio;
            if ratio < last {
                return Ok(holds(false, format!("{name}: ratio fell from {last} to {ratio}")));
            }
            last = ratio;
        }
    }
    Ok(holds(true, "ratio non-decreasing in k/n and in c/m, each with the other held fixed"))
}

// ---- checkpoint ----

fn checkpoint_round_trip(ctx: &Ctx) -> Result<Outcome> {
    let cfg = micro_config(SelectionMode::Data, SelectionMode::Expert, ctx.seed);
    let mut state = TrainState::new(UoeModel::<f64>::new(&cfg)?, AdamConfig::default(), Rng::new(ctx.seed));
    let mut rng = ctx.rng("checkpoint");
    for _ in 0..3 {
        train_step(&mut state, &[random_batch(&mut rng, 2, 16, 16)])?;
    }
    let bytes = encode(&state_arrays(&state));
    let template = TrainState::new(
        UoeModel::<f64>::new(&UoeModelConfig {
            seed: ctx.seed + 1,
            ..cfg.clone()
        })?,
        AdamConfig::default(),
        Rng::new(0),
    );
    let mut restored = restore(&decode(&bytes)?, template)?;
    let again = encode(&state_arrays(&restored));
    let batch = random_batch(&mut rng, 2, 16, 16);
    let m1 = train_step(&mut state, std::slice::from_ref(&batch))?;
    let m2 = train_step(&mut restored, &[batch])?;
    Ok(holds(
        bytes == again && m1 == m2,
        format!("{} bytes re-encode identically and the next step replays exactly", bytes.len()),
    ))
}

// ---- strategies ----

fn strategies_agree(ctx: &Ctx) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for (attn, mlp) in MODE_PAIRS {
        for gate_scale in [false, true] {
            let base = UoeModelConfig {
                gate_scale_outputs: gate_scale,
                mlp_second_activation: SecondActivation::Silu,
                ..micro_config(attn, mlp, ctx.seed)
            };
            let batch = random_batch(&mut ctx.rng("strategies"), 3, 16, 16);
            let reference = UoeModel::<f64>::new(&base)?.forward(&batch.tokens, 3)?.logits;
            for strategy in [ExecStrategy::Serial, ExecStrategy::Fused] {
                let cfg = UoeModelConfig { strategy, ..base.clone() };
                let logits = UoeModel::<f64>::new(&cfg)?.forward(&batch.tokens, 3)?.logits;
                worst = worst.max(logits.max_abs_diff(&reference));
            }
        }
    }
    Ok(within(worst, 1e-12, "max abs logit diff of serial and fused to batched"))
}

// ---- cli ----

pub fn tiny_run_config(seed: u64) -> Result<RunConfig> {
    let mut b = ConfigBuilder::new();
    b.apply_text(
        "layers = 1\nd = 16\nn_a = 2\nd_h = 8\nn_m = 2\nd_e = 16\nl_p = 4\nk_attn = 1\nk_mlp = 1\n\
         max_len = 16\ngate_hidden = 8\nsteps = 4\nlog_every = 2\nbatch_size = 2\neval_windows = 2\n",
    )?;
    b.set("seed", &seed.to_string())?;
    b.build()
}

fn cli_determinism(ctx: &Ctx) -> Result<Outcome> {
    let cfg = tiny_run_config(ctx.seed)?;
    let text = "a whale of a tale, told twice over. ".repeat(20);
    let corpus = Corpus::from_bytes(text.into_bytes(), cfg.model.max_len, 0.1)?;
    let root = std::env::temp_dir().join(format!("uoe-verify-{}-{}", std::process::id(), ctx.seed));
    let mut outputs = Vec::new();
    for run in 0..2 {
        let dir = root.join(run.to_string());
        let report = crate::train::train(&cfg, &corpus, Some(&dir), false)?;
        let csv = std::fs::read(report.metrics_path.as_ref().expect("metrics written"))?;
        let ckpt = std::fs::read(report.checkpoint_path.as_ref().expect("checkpoint written"))?;
        outputs.push((csv, ckpt));
    }
    let _ = std::fs::remove_dir_all(&root);
    let header_ok = outputs[0].0.starts_with(format!("{}\n", crate::train::CSV_HEADER).as_bytes());
    Ok(holds(
        outputs[0] == outputs[1] && header_ok,
        "two seeded runs write identical CSV and checkpoint bytes",
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_are_unique_and_filter_selects_one() {
        let mut names: Vec<&str> = SUITES.iter().map(|s| s.name).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), SUITES.len());
        let opts = Options {
            filter: Some("mask".into()),
            ..Options::default()
        };
        let v = run(&opts, |_| {}).unwrap();
        assert_eq!(v.len(), 1);
        assert!(v.iter().all(|v| v.suite == "mask" && v.passed));
        assert!(run(&Options { filter: Some("nope".into()), ..Options::default() }, |_| {}).is_err());
    }

    #[test]
    fn injected_partition_fault_fails_losslessness() {
        let opts = Options {
            filter: Some("losslessness".into()),
            fault: Some(Fault::PartitionOffByOne),
            ..Options::default()
        };
        let v = run(&opts, |_| {}).unwrap();
        assert!(v.iter().any(|v| !v.passed));
        assert!(run(&Options { filter: Some("losslessness".into()), ..Options::default() }, |_| {})
            .unwrap()
            .iter()
            .all(|v| v.passed));
    }

    #[test]
    fn fault_names_parse() {
        assert_eq!("partition-off-by-one".parse::<Fault>().unwrap(), Fault::PartitionOffByOne);
        assert!("other".parse::<Fault>().is_err());
    }
}
