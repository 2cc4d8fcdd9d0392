//! Analytic operation counts for the UoE model and its dense reference.
//!
//! Convention, shared with the runtime counter in
//! [`crate::tensor::counters`]: a multiply-add is 2 operations, softmax,
//! layer norm and cross-entropy cost 5 per element, a scatter-add 1 per
//! element; element-wise arithmetic, copies, gathers and rotary embedding are
//! free. Counts cover the forward pass from embedding lookup to logits.

use crate::model::{BlockStats, UoeModelConfig};
use crate::routing::{Routed, SelectionMode};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FlopsReport {
    pub attn_proj: u64,
    pub attn_scores: u64,
    pub mlp: u64,
    pub gating: u64,
    /// Scatter-adds of routed outputs.
    pub routing: u64,
    pub norm: u64,
    pub embed_head: u64,
    /// Against the dense reference of the same configuration.
    pub ratio: f64,
}

impl FlopsReport {
    pub const CSV_HEADER: &'static str = "label,attn_proj,attn_scores,mlp,gating,routing,norm,embed_head,total,ratio";

    pub fn total(&self) -> u64 {
        self.components().iter().map(|(_, v)| v).sum()
    }

    pub fn components(&self) -> [(&'static str, u64); 7] {
        [
            ("attn_proj", self.attn_proj),
            ("attn_scores", self.attn_scores),
            ("mlp", self.mlp),
            ("gating", self.gating),
            ("routing", self.routing),
            ("norm", self.norm),
            ("embed_head", self.embed_head),
        ]
    }

    /// Gating plus routing, the cost the dense model does not pay.
    pub fn overhead(&self) -> u64 {
        self.gating + self.routing
    }

    pub fn csv_row(&self, label: &str) -> String {
        let parts: Vec<String> = self.components().iter().map(|(_, v)| v.to_string()).collect();
        format!("{label},{},{},{:.6}", parts.join(","), self.total(), self.ratio)
    }
}

/// `2·tokens·d·D_e` per weight matrix of a two-layer MLP of hidden width `D_e`.
pub fn dense_mlp_flops(d: usize, hidden: usize, tokens: usize) -> u64 {
    (2 * 2 * tokens * d * hidden) as u64
}

fn norm_flops(cfg: &UoeModelConfig, b: usize, l: usize, layers: usize) -> u64 {
    if cfg.pre_norm {
        (5 * b * l * cfg.d * (2 * layers + 1)) as u64
    } else {
        0
    }
}

fn embed_head_flops(cfg: &UoeModelConfig, b: usize, l: usize) -> u64 {
    (2 * b * l * cfg.d * cfg.vocab_size) as u64
}

/// Dense pre-norm transformer on `b` windows of `l` tokens.
pub fn count_dense(cfg: &UoeModelConfig, b: usize, l: usize) -> FlopsReport {
    let (tokens, d, layers) = (b * l, cfg.d, cfg.layers);
    let width = cfg.n_a * cfg.d_h;
    let per_layer_proj = 2 * tokens * d * 3 * width + 2 * tokens * width * d;
    let per_layer_scores = b * cfg.n_a * l * l * (4 * cfg.d_h + 5);
    FlopsReport {
        attn_proj: (layers * per_layer_proj) as u64,
        attn_scores: (layers * per_layer_scores) as u64,
        mlp: layers as u64 * dense_mlp_flops(d, cfg.n_m * cfg.d_e, tokens),
        gating: 0,
        routing: 0,
        norm: norm_flops(cfg, b, l, layers),
        embed_head: embed_head_flops(cfg, b, l),
        ratio: 1.0,
    }
}

/// Unit lengths (tokens per `(sample, expert)` pair) of each routed
/// sub-block of one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLoads {
    pub attn_units: Vec<usize>,
    pub mlp_units: Vec<usize>,
}

impl BlockLoads {
    pub fn from_stats<T: Scalar>(stats: &BlockStats<T>) -> Self {
        let lens = |r: &Routed<T>| r.dispatch.units.iter().map(|u| u.len).collect();
        Self {
            attn_units: lens(&stats.attn),
            mlp_units: lens(&stats.mlp),
        }
    }
}

/// Unit lengths under perfectly balanced routing.
pub fn balanced_units(mode: SelectionMode, n: usize, k: usize, k_data: usize, l_p: usize, b: usize, l: usize) -> Vec<usize> {
    let m = l / l_p;
    let (units, len) = match mode {
        SelectionMode::Full => (n, l),
        SelectionMode::Expert => (k, l),
        SelectionMode::Data => (n, (k * m).div_ceil(n) * l_p),
        SelectionMode::Combined => (k, (k_data * m).div_ceil(k) * l_p),
    };
    vec![len; b * units]
}

fn gate_flops(mode: SelectionMode, cfg: &UoeModelConfig, n: usize, b: usize, l: usize) -> u64 {
    let mut total = 0;
    if mode.uses_data_gate() {
        let patches = b * (l / cfg.l_p);
        total += 2 * patches * cfg.d * cfg.gate_hidden + 2 * patches * cfg.gate_hidden * n + 5 * patches * n;
    }
    if mode.uses_expert_gate() {
        let fan_in = if cfg.pooled_expert_gate { cfg.d } else { l * cfg.d };
        total += 2 * b * fan_in * n + 5 * b * n;
    }
    total as u64
}

/// UoE model on `b` windows of `l` tokens, with the realized per-layer
/// loads when given and balanced loads otherwise.
pub fn count_uoe(cfg: &UoeModelConfig, b: usize, l: usize, realized: Option<&[BlockLoads]>) -> FlopsReport {
    let d = cfg.d;
    let mut r = FlopsReport {
        norm: norm_flops(cfg, b, l, cfg.layers),
        embed_head: embed_head_flops(cfg, b, l),
        ..Default::default()
    };
    for layer in 0..cfg.layers {
        let loads = match realized {
            Some(all) => all[layer].clone(),
            None => BlockLoads {
                attn_units: balanced_units(cfg.attn_mode, cfg.n_a, cfg.k_attn, cfg.k_combined_data, cfg.l_p, b, l),
                mlp_units: balanced_units(cfg.mlp_mode, cfg.n_m, cfg.k_mlp, cfg.k_combined_data, cfg.l_p, b, l),
            },
        };
        let attn_rows: usize = loads.attn_units.iter().sum();
        let mlp_rows: usize = loads.mlp_units.iter().sum();
        r.attn_proj += (8 * attn_rows * d * cfg.d_h) as u64;
        r.attn_scores += loads.attn_units.iter().map(|&u| (u * u * (4 * cfg.d_h + 5)) as u64).sum::<u64>();
        r.mlp += (4 * mlp_rows * d * cfg.d_e) as u64;
        r.routing += ((attn_rows + mlp_rows) * d) as u64;
        r.gating += gate_flops(cfg.attn_mode, cfg, cfg.n_a, b, l) + gate_flops(cfg.mlp_mode, cfg, cfg.n_m, b, l);
    }
    r.ratio = r.total() as f64 / count_dense(cfg, b, l).total() as f64;
    r
}
