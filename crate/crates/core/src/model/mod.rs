//! UoE transformer language model and its dense reference.
//!
//! A block is `x ↦ UoME(LN₂(·)) ∘ SMHA(LN₁(x))` where each routed sub-block
//! reads the normalized stream and scatter-adds onto the raw one. Token
//! embedding and output head are dense.

pub mod checkpoint;
pub mod loss;
pub mod train;

use crate::attention::{self, AttentionMask, ExecStrategy, RopeConfig, SmhaParams};
use crate::decomposition::{
    reconstruct_attention, reconstruct_mlp, AttnExpertGroup, DenseAttention, DenseMlp, MlpExpertGroup,
    SecondActivation,
};
use crate::error::{config_err, Error, Result};
use crate::mlp_experts::{self, UomeParams};
use crate::rng::Rng;
use crate::routing::{self, DataGate, ExpertGate, GateParams, RouteConfig, Routed, SelectionMode};
use crate::tensor::{DType, Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct UoeModelConfig {
    pub layers: usize,
    pub d: usize,
    pub n_a: usize,
    pub d_h: usize,
    pub n_m: usize,
    pub d_e: usize,
    pub l_p: usize,
    pub k_attn: usize,
    pub k_mlp: usize,
    /// Data-stage top-k among the active experts in combined mode.
    pub k_combined_data: usize,
    pub attn_mode: SelectionMode,
    pub mlp_mode: SelectionMode,
    pub vocab_size: usize,
    pub max_len: usize,
    pub alpha: f64,
    pub rope: RopeConfig,
    pub seed: u64,
    pub dtype: DType,
    /// Hidden width of the patch gate.
    pub gate_hidden: usize,
    pub gate_scale_outputs: bool,
    pub pooled_expert_gate: bool,
    pub mlp_second_activation: SecondActivation,
    pub mlp_bias: bool,
    pub pre_norm: bool,
    pub compact_positions: bool,
    pub causal: bool,
    pub strategy: ExecStrategy,
}

impl Default for UoeModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d: 64,
            n_a: 4,
            d_h: 16,
            n_m: 4,
            d_e: 64,
            l_p: 8,
            k_attn: 2,
            k_mlp: 2,
            k_combined_data: 1,
            attn_mode: SelectionMode::Data,
            mlp_mode: SelectionMode::Expert,
            vocab_size: 256,
            max_len: 64,
            alpha: 0.01,
            rope: RopeConfig::half(16),
            seed: 0,
            dtype: DType::F64,
            gate_hidden: 64,
            gate_scale_outputs: false,
            pooled_expert_gate: false,
            mlp_second_activation: SecondActivation::Identity,
            mlp_bias: false,
            pre_norm: true,
            compact_positions: false,
            causal: true,
            strategy: ExecStrategy::Batched,
        }
    }
}

impl UoeModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("d", self.d),
            ("n_a", self.n_a),
            ("d_h", self.d_h),
            ("n_m", self.n_m),
            ("d_e", self.d_e),
            ("l_p", self.l_p),
            ("k_attn", self.k_attn),
            ("k_mlp", self.k_mlp),
            ("k_combined_data", self.k_combined_data),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("gate_hidden", self.gate_hidden),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(config_err(format!("{name} must be at least 1")));
        }
        if !self.max_len.is_multiple_of(self.l_p) {
            return Err(config_err(format!(
                "max_len {} is not divisible by patch length {}",
                self.max_len, self.l_p
            )));
        }
        for (name, k, n) in [("k_attn", self.k_attn, self.n_a), ("k_mlp", self.k_mlp, self.n_m)] {
            if k > n {
                return Err(config_err(format!("{name} = {k} exceeds the {n} experts of its block")));
            }
        }
        for (mode, k) in [(self.attn_mode, self.k_attn), (self.mlp_mode, self.k_mlp)] {
            if mode == SelectionMode::Combined && self.k_combined_data > k {
                return Err(config_err(format!(
                    "k_combined_data = {} exceeds the {k} active experts per sample",
                    self.k_combined_data
                )));
            }
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(config_err(format!("alpha must be finite and non-negative, got {}", self.alpha)));
        }
        self.rope.validate(self.d_h)
    }

    pub fn attn_route(&self) -> RouteConfig {
        RouteConfig {
            mode: self.attn_mode,
            n: self.n_a,
            k: self.k_attn,
            k_combined_data: self.k_combined_data,
            l_p: self.l_p,
        }
    }

    pub fn mlp_route(&self) -> RouteConfig {
        RouteConfig {
            mode: self.mlp_mode,
            n: self.n_m,
            k: self.k_mlp,
            k_combined_data: self.k_combined_data,
            l_p: self.l_p,
        }
    }

    pub fn mask(&self) -> AttentionMask {
        AttentionMask {
            padding: None,
            causal: self.causal,
        }
    }

    /// The same model with every expert active in both sub-blocks.
    pub fn fully_activated(&self) -> Self {
        Self {
            attn_mode: SelectionMode::Full,
            mlp_mode: SelectionMode::Full,
            k_attn: self.n_a,
            k_mlp: self.n_m,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[d]),
            beta: Tensor::zeros(&[d]),
        }
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gamma, &self.beta, LN_EPS)
    }
}

fn maybe_norm<T: Scalar>(ln: &Option<LayerNormParams<T>>, x: &Tensor<T>) -> Result<Tensor<T>> {
    match ln {
        Some(p) => p.apply(x),
        None => Ok(x.clone()),
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams<T: Scalar> {
    pub ln1: Option<LayerNormParams<T>>,
    pub attn: SmhaParams<T>,
    pub ln2: Option<LayerNormParams<T>>,
    pub mlp: UomeParams<T>,
}

/// Routing decisions of one block.
#[derive(Debug, Clone)]
pub struct BlockStats<T: Scalar> {
    pub attn: Routed<T>,
    pub mlp: Routed<T>,
}

pub struct ModelOutput<T: Scalar> {
    /// `[b·l, vocab]`
    pub logits: Tensor<T>,
    pub blocks: Vec<BlockStats<T>>,
}

/// One UoE block on `x: [b, l, d]`.
pub fn block_forward<T: Scalar>(
    x: &Tensor<T>,
    block: &BlockParams<T>,
    cfg: &UoeModelConfig,
    mask: &AttentionMask,
) -> Result<(Tensor<T>, BlockStats<T>)> {
    let a = maybe_norm(&block.ln1, x)?;
    let attn = routing::route(&a, &block.attn.gate, &cfg.attn_route())?;
    let u = attention::attend_routed(&a, x, &block.attn, mask, &attn, cfg.strategy)?;
    let m = maybe_norm(&block.ln2, &u)?;
    let mlp = routing::route(&m, &block.mlp.gate, &cfg.mlp_route())?;
    let y = mlp_experts::mlp_routed(&m, &u, &block.mlp, &mlp, cfg.strategy)?;
    Ok((y, BlockStats { attn, mlp }))
}

fn gate_params<T: Scalar>(
    rng: &Rng,
    prefix: &str,
    mode: SelectionMode,
    cfg: &UoeModelConfig,
    n: usize,
) -> GateParams<T> {
    let data = mode.uses_data_gate().then(|| DataGate {
        w_pool: rng
            .fork(&format!("{prefix}.gate.w_pool"))
            .normal_tensor(&[cfg.d, cfg.gate_hidden], 1.0 / (cfg.d as f64).sqrt()),
        w_out: rng
            .fork(&format!("{prefix}.gate.w_out"))
            .normal_tensor(&[cfg.gate_hidden, n], 1.0 / (cfg.gate_hidden as f64).sqrt()),
    });
    let expert = mode.uses_expert_gate().then(|| {
        let fan_in = if cfg.pooled_expert_gate { cfg.d } else { cfg.max_len * cfg.d };
        ExpertGate {
            w: rng
                .fork(&format!("{prefix}.gate.w_expert"))
                .normal_tensor(&[fan_in, n], 1.0 / (fan_in as f64).sqrt()),
            pooled: cfg.pooled_expert_gate,
        }
    });
    GateParams { data, expert }
}

#[derive(Debug, Clone)]
pub struct UoeModel<T: Scalar> {
    pub config: UoeModelConfig,
    /// `[vocab, d]`
    pub embed: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub ln_f: Option<LayerNormParams<T>>,
    /// `[d, vocab]`
    pub head: Tensor<T>,
}

impl<T: Scalar> UoeModel<T> {
    /// Seeded initialization; every parameter draws from its own named
    /// stream.
    pub fn new(config: &UoeModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let rng = Rng::new(c.seed);
        let draw = |name: &str, shape: &[usize], fan_in: usize| -> Tensor<T> {
            rng.fork(name).normal_tensor(shape, 1.0 / (fan_in as f64).sqrt())
        };
        let ln = |on: bool| on.then(|| LayerNormParams::identity(c.d));
        let blocks = (0..c.layers)
            .map(|i| {
                let p = format!("block{i}");
                BlockParams {
                    ln1: ln(c.pre_norm),
                    attn: SmhaParams {
                        experts: AttnExpertGroup {
                            w_q: draw(&format!("{p}.attn.w_q"), &[c.n_a, c.d, c.d_h], c.d),
                            w_k: draw(&format!("{p}.attn.w_k"), &[c.n_a, c.d, c.d_h], c.d),
                            w_v: draw(&format!("{p}.attn.w_v"), &[c.n_a, c.d, c.d_h], c.d),
                            w_o: draw(&format!("{p}.attn.w_o"), &[c.n_a, c.d_h, c.d], c.n_a * c.d_h),
                        },
                        gate: gate_params(&rng, &format!("{p}.attn"), c.attn_mode, c, c.n_a),
                        rope: c.rope,
                        compact_positions: c.compact_positions,
                        gate_scale_outputs: c.gate_scale_outputs,
                    },
                    ln2: ln(c.pre_norm),
                    mlp: UomeParams {
                        experts: MlpExpertGroup {
                            a_in: draw(&format!("{p}.mlp.a_in"), &[c.n_m, c.d, c.d_e], c.d),
                            a_out: draw(&format!("{p}.mlp.a_out"), &[c.n_m, c.d_e, c.d], c.n_m * c.d_e),
                            b_in: c.mlp_bias.then(|| Tensor::zeros(&[c.n_m, c.d_e])),
                            b_out: c.mlp_bias.then(|| Tensor::zeros(&[c.d])),
                        },
                        gate: gate_params(&rng, &format!("{p}.mlp"), c.mlp_mode, c, c.n_m),
                        act: c.mlp_second_activation,
                        gate_scale_outputs: c.gate_scale_outputs,
                    },
                }
            })
            .collect();
        Ok(Self {
            config: c.clone(),
            embed: rng.fork("embed").normal_tensor(&[c.vocab_size, c.d], 1.0),
            blocks,
            ln_f: ln(c.pre_norm),
            head: draw("head", &[c.d, c.vocab_size], c.d),
        })
    }

    /// Logits for `tokens` (`b` windows of `max_len` tokens, row-major).
    pub fn forward(&self, tokens: &[usize], b: usize) -> Result<ModelOutput<T>> {
        let c = &self.config;
        let l = check_tokens(tokens, b, c)?;
        let mut x = self.embed.index_select(0, tokens)?.reshape(&[b, l, c.d])?;
        let mask = c.mask();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, stats) = block_forward(&x, block, c, &mask)?;
            x = y;
            blocks.push(stats);
        }
        let logits = maybe_norm(&self.ln_f, &x.reshape(&[b * l, c.d])?)?.matmul(&self.head)?;
        Ok(ModelOutput { logits, blocks })
    }
}

fn check_tokens(tokens: &[usize], b: usize, c: &UoeModelConfig) -> Result<usize> {
    if b == 0 || tokens.len() != b * c.max_len {
        return Err(config_err(format!(
            "expected {b} windows of {} tokens, got {} tokens",
            c.max_len,
            tokens.len()
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= c.vocab_size) {
        return Err(Error::Index {
            op: "embed",
            index: t,
            bound: c.vocab_size,
        });
    }
    Ok(c.max_len)
}

#[derive(Debug, Clone)]
pub struct DenseBlock<T: Scalar> {
    pub ln1: Option<LayerNormParams<T>>,
    pub attn: DenseAttention<T>,
    pub ln2: Option<LayerNormParams<T>>,
    pub mlp: DenseMlp<T>,
}

/// Pre-norm transformer with unpartitioned weights.
#[derive(Debug, Clone)]
pub struct DenseModel<T: Scalar> {
    pub config: UoeModelConfig,
    pub embed: Tensor<T>,
    pub blocks: Vec<DenseBlock<T>>,
    pub ln_f: Option<LayerNormParams<T>>,
    pub head: Tensor<T>,
}

/// `x + MHA(LN₁(x))`, then `+ φ₂(MLP(LN₂(·)))`.
pub fn dense_block_forward<T: Scalar>(
    x: &Tensor<T>,
    block: &DenseBlock<T>,
    cfg: &UoeModelConfig,
    mask: &AttentionMask,
) -> Result<Tensor<T>> {
    let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let a = maybe_norm(&block.ln1, x)?;
    let u = x.add(&attention::dense_attention(&a, &block.attn, cfg.d_h, &cfg.rope, mask)?)?;
    let m = maybe_norm(&block.ln2, &u)?.reshape(&[b * l, d])?;
    let mlp = block.mlp.forward(&m, SecondActivation::Identity)?;
    let y = match cfg.mlp_second_activation {
        SecondActivation::Identity => u.reshape(&[b * l, d])?.add(&mlp)?,
        SecondActivation::Silu => u.reshape(&[b * l, d])?.add(&mlp.silu())?,
    };
    y.reshape(&[b, l, d])
}

impl<T: Scalar> DenseModel<T> {
    /// Reassembles the dense weights the experts of `m` were sliced from.
    pub fn from_uoe(m: &UoeModel<T>) -> Result<Self> {
        let blocks = m
            .blocks
            .iter()
            .map(|b| {
                Ok(DenseBlock {
                    ln1: b.ln1.clone(),
                    attn: reconstruct_attention(&b.attn.experts)?,
                    ln2: b.ln2.clone(),
                    mlp: reconstruct_mlp(&b.mlp.experts)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: m.config.clone(),
            embed: m.embed.clone(),
            blocks,
            ln_f: m.ln_f.clone(),
            head: m.head.clone(),
        })
    }

    pub fn forward(&self, tokens: &[usize], b: usize) -> Result<Tensor<T>> {
        let c = &self.config;
        let l = check_tokens(tokens, b, c)?;
        let mut x = self.embed.index_select(0, tokens)?.reshape(&[b, l, c.d])?;
        let mask = c.mask();
        for block in &self.blocks {
            x = dense_block_forward(&x, block, c, &mask)?;
        }
        maybe_norm(&self.ln_f, &x.reshape(&[b * l, c.d])?)?.matmul(&self.head)
    }
}

/// Ordered, named access to every trainable tensor.
pub trait Parameters<T: Scalar> {
    fn slots_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;

    fn named_parameters(&self) -> Vec<(String, Tensor<T>)>
    where
        Self: Clone,
    {
        let mut copy = self.clone();
        copy.slots_mut().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    fn num_parameters(&self) -> usize
    where
        Self: Clone,
    {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }
}

fn push_ln<'a, T: Scalar>(out: &mut Vec<(String, &'a mut Tensor<T>)>, name: &str, ln: &'a mut Option<LayerNormParams<T>>) {
    if let Some(p) = ln {
        out.push((format!("{name}.gamma"), &mut p.gamma));
        out.push((format!("{name}.beta"), &mut p.beta));
    }
}

fn push_gate<'a, T: Scalar>(out: &mut Vec<(String, &'a mut Tensor<T>)>, name: &str, g: &'a mut GateParams<T>) {
    if let Some(dg) = &mut g.data {
        out.push((format!("{name}.gate.w_pool"), &mut dg.w_pool));
        out.push((format!("{name}.gate.w_out"), &mut dg.w_out));
    }
    if let Some(eg) = &mut g.expert {
        out.push((format!("{name}.gate.w_expert"), &mut eg.w));
    }
}

impl<T: Scalar> Parameters<T> for UoeModel<T> {
    fn slots_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("block{i}");
            push_ln(&mut out, &format!("{p}.ln1"), &mut b.ln1);
            let e = &mut b.attn.experts;
            out.push((format!("{p}.attn.w_q"), &mut e.w_q));
            out.push((format!("{p}.attn.w_k"), &mut e.w_k));
            out.push((format!("{p}.attn.w_v"), &mut e.w_v));
            out.push((format!("{p}.attn.w_o"), &mut e.w_o));
            push_gate(&mut out, &format!("{p}.attn"), &mut b.attn.gate);
            push_ln(&mut out, &format!("{p}.ln2"), &mut b.ln2);
            let e = &mut b.mlp.experts;
            out.push((format!("{p}.mlp.a_in"), &mut e.a_in));
            out.push((format!("{p}.mlp.a_out"), &mut e.a_out));
            if let Some(t) = &mut e.b_in {
                out.push((format!("{p}.mlp.b_in"), t));
            }
            if let Some(t) = &mut e.b_out {
                out.push((format!("{p}.mlp.b_out"), t));
            }
            push_gate(&mut out, &format!("{p}.mlp"), &mut b.mlp.gate);
        }
        push_ln(&mut out, "ln_f", &mut self.ln_f);
        out.push(("head".to_string(), &mut self.head));
        out
    }
}

impl<T: Scalar> Parameters<T> for DenseModel<T> {
    fn slots_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("block{i}");
            push_ln(&mut out, &format!("{p}.ln1"), &mut b.ln1);
            out.push((format!("{p}.attn.w_q"), &mut b.attn.w_q));
            out.push((format!("{p}.attn.w_k"), &mut b.attn.w_k));
            out.push((format!("{p}.attn.w_v"), &mut b.attn.w_v));
            out.push((format!("{p}.attn.w_o"), &mut b.attn.w_o));
            push_ln(&mut out, &format!("{p}.ln2"), &mut b.ln2);
            out.push((format!("{p}.mlp.a1"), &mut b.mlp.a1));
            out.push((format!("{p}.mlp.a2"), &mut b.mlp.a2));
            if let Some(t) = &mut b.mlp.b1 {
                out.push((format!("{p}.mlp.b1"), t));
            }
            if let Some(t) = &mut b.mlp.b2 {
                out.push((format!("{p}.mlp.b2"), t));
            }
        }
        push_ln(&mut out, "ln_f", &mut self.ln_f);
        out.push(("head".to_string(), &mut self.head));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(attn: SelectionMode, mlp: SelectionMode) -> UoeModelConfig {
        UoeModelConfig {
            layers: 2,
            d: 8,
            n_a: 2,
            d_h: 4,
            n_m: 2,
            d_e: 4,
            l_p: 4,
            k_attn: 1,
            k_mlp: 1,
            attn_mode: attn,
            mlp_mode: mlp,
            vocab_size: 16,
            max_len: 16,
            rope: RopeConfig::half(4),
            gate_hidden: 8,
            ..UoeModelConfig::default()
        }
    }

    fn tokens(seed: u64, b: usize, l: usize, v: usize) -> Vec<usize> {
        let mut rng = Rng::new(seed);
        (0..b * l).map(|_| rng.below(v)).collect()
    }

    #[test]
    fn config_validation() {
        assert!(UoeModelConfig::default().validate().is_ok());
        let bad = [
            UoeModelConfig { max_len: 60, ..Default::default() },
            UoeModelConfig { k_attn: 5, ..Default::default() },
            UoeModelConfig { n_m: 0, ..Default::default() },
            UoeModelConfig { alpha: f64::NAN, ..Default::default() },
            UoeModelConfig { rope: RopeConfig::with_constant(16, 3, 8), ..Default::default() },
            UoeModelConfig {
                attn_mode: SelectionMode::Combined,
                k_attn: 1,
                k_combined_data: 2,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn initialization_is_seeded_and_named() {
        let c = small(SelectionMode::Data, SelectionMode::Expert);
        let a = UoeModel::<f64>::new(&c).unwrap();
        let b = UoeModel::<f64>::new(&c).unwrap();
        for ((na, ta), (nb, tb)) in a.named_parameters().iter().zip(b.named_parameters()) {
            assert_eq!(na, &nb);
            assert!(ta.bit_eq(&tb));
        }
        let other = UoeModel::<f64>::new(&UoeModelConfig { seed: 1, ..c }).unwrap();
        assert!(!other.embed.bit_eq(&a.embed));
        let names: Vec<String> = a.named_parameters().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"block1.attn.gate.w_pool".to_string()));
        assert!(names.contains(&"block0.mlp.gate.w_expert".to_string()));
        assert!(!names.contains(&"block0.attn.gate.w_expert".to_string()));
    }

    #[test]
    fn full_activation_block_equals_dense_block() {
        for act in [SecondActivation::Identity, SecondActivation::Silu] {
            let mut c = small(SelectionMode::Full, SelectionMode::Full).fully_activated();
            c.mlp_second_activation = act;
            let m = UoeModel::<f64>::new(&c).unwrap();
            let dense = DenseModel::from_uoe(&m).unwrap();
            let x: Tensor<f64> = Rng::new(3).normal_tensor(&[2, 16, 8], 1.0);
            let (y, _) = block_forward(&x, &m.blocks[0], &c, &c.mask()).unwrap();
            let oracle = dense_block_forward(&x, &dense.blocks[0], &c, &c.mask()).unwrap();
            assert!(y.max_abs_diff(&oracle) <= 1e-10);
        }
    }

    #[test]
    fn full_activation_model_equals_dense_model() {
        for layers in 1..=4 {
            let c = UoeModelConfig {
                layers,
                ..small(SelectionMode::Full, SelectionMode::Full).fully_activated()
            };
            let m = UoeModel::<f64>::new(&c).unwrap();
            let t = tokens(layers as u64, 2, 16, 16);
            let out = m.forward(&t, 2).unwrap().logits;
            let oracle = DenseModel::from_uoe(&m).unwrap().forward(&t, 2).unwrap();
            assert!(out.max_abs_diff(&oracle) <= 1e-10, "layers = {layers}");
        }
    }

    #[test]
    fn zero_projections_make_blocks_identity() {
        let c = small(SelectionMode::Data, SelectionMode::Expert);
        let mut m = UoeModel::<f64>::new(&c).unwrap();
        for b in &mut m.blocks {
            b.attn.experts.w_o = Tensor::zeros(b.attn.experts.w_o.shape());
            b.mlp.experts.a_out = Tensor::zeros(b.mlp.experts.a_out.shape());
        }
        let x: Tensor<f64> = Rng::new(4).normal_tensor(&[2, 16, 8], 1.0);
        let (y, _) = block_forward(&x, &m.blocks[0], &c, &c.mask()).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn data_mode_stats_hold_n_times_c_patches() {
        let c = small(SelectionMode::Data, SelectionMode::Data);
        let m = UoeModel::<f64>::new(&c).unwrap();
        let out = m.forward(&tokens(5, 3, 16, 16), 3).unwrap();
        for stats in &out.blocks {
            for routed in [&stats.attn, &stats.mlp] {
                for plan in &routed.data_plans {
                    let held: usize = plan.id.iter().map(Vec::len).sum();
                    assert_eq!(held, plan.n * plan.c);
                }
            }
        }
    }

    #[test]
    fn forward_rejects_bad_tokens() {
        let m = UoeModel::<f64>::new(&small(SelectionMode::Data, SelectionMode::Expert)).unwrap();
        assert!(m.forward(&[0; 15], 1).is_err());
        let mut t = vec![0; 16];
        t[3] = 16;
        assert!(matches!(m.forward(&t, 1), Err(Error::Index { .. })));
    }
}
