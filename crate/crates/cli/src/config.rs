//! `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment. Command-line `--set key=value`
//! overrides are applied after the file, in order. Unknown keys are errors.

use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use uoe_core::attention::{ExecStrategy, RopeConfig};
use uoe_core::decomposition::SecondActivation;
use uoe_core::model::UoeModelConfig;
use uoe_core::routing::SelectionMode;
use uoe_core::DType;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Uoe,
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: UoeModelConfig,
    pub model_kind: ModelKind,
    pub steps: usize,
    pub batch_size: usize,
    pub micro_batches: usize,
    pub lr: f64,
    pub log_every: usize,
    /// Held-out windows evaluated at each log step; 0 means all.
    pub eval_windows: usize,
    pub holdout_fraction: f64,
    pub ablate_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: UoeModelConfig::default(),
            model_kind: ModelKind::Uoe,
            steps: 2000,
            batch_size: 8,
            micro_batches: 1,
            lr: 3e-4,
            log_every: 100,
            eval_windows: 0,
            holdout_fraction: 0.1,
            ablate_steps: 500,
        }
    }
}

/// Every accepted key with a short description, in documentation order.
pub const KEYS: &[(&str, &str)] = &[
    ("layers", "number of transformer blocks"),
    ("d", "model width"),
    ("n_a", "attention experts (heads)"),
    ("d_h", "head width"),
    ("n_m", "MLP experts"),
    ("d_e", "hidden width per MLP expert"),
    ("l_p", "patch length for data selection"),
    ("k_attn", "top-k of the attention router"),
    ("k_mlp", "top-k of the MLP router"),
    ("k_combined_data", "data-stage top-k among active experts in combined mode"),
    ("attn_mode", "full | data | expert | combined"),
    ("mlp_mode", "full | data | expert | combined"),
    ("vocab_size", "vocabulary size (256 for bytes)"),
    ("max_len", "window length l"),
    ("alpha", "balance factor of the load-balance loss"),
    ("rope_d_qc", "unrotated query features per head (default half)"),
    ("rope_d_kc", "unrotated key features per head (default half)"),
    ("rope_theta", "rotary frequency base"),
    ("seed", "seed for initialization and data order"),
    ("dtype", "f32 | f64"),
    ("gate_hidden", "hidden width of the patch gate"),
    ("gate_scale_outputs", "scale expert outputs by their gate values"),
    ("pooled_expert_gate", "expert gate reads the sequence mean instead of the flattened sample"),
    ("mlp_second_activation", "identity | silu"),
    ("mlp_bias", "MLP biases"),
    ("pre_norm", "layer norm before each sub-block"),
    ("compact_positions", "rotary positions inside the routed selection"),
    ("causal", "causal attention mask"),
    ("strategy", "serial | batched | fused"),
    ("model_kind", "uoe | dense (dense reference rebuilt from the UoE initialization)"),
    ("steps", "training steps"),
    ("batch_size", "windows per micro-batch"),
    ("micro_batches", "micro-batches accumulated per step"),
    ("lr", "Adam learning rate"),
    ("log_every", "steps between CSV rows"),
    ("eval_windows", "held-out windows per evaluation, 0 = all"),
    ("holdout_fraction", "fraction of windows held out"),
    ("ablate_steps", "training steps per ablation cell"),
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("invalid value `{value}` for `{key}`: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => bail!("invalid value `{value}` for `{key}`: expected true or false"),
    }
}

#[derive(Debug, Default)]
struct RopeOverrides {
    d_qc: Option<usize>,
    d_kc: Option<usize>,
    theta: Option<f64>,
}

/// Accumulates settings, then resolves derived fields once.
#[derive(Debug, Default)]
pub struct ConfigBuilder {
    config: RunConfig,
    rope: RopeOverrides,
}

impl ConfigBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_config(config: RunConfig) -> Self {
        Self {
            config,
            rope: RopeOverrides::default(),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let c = &mut self.config;
        let m = &mut c.model;
        match key {
            "layers" => m.layers = parse(key, value)?,
            "d" => m.d = parse(key, value)?,
            "n_a" => m.n_a = parse(key, value)?,
            "d_h" => m.d_h = parse(key, value)?,
            "n_m" => m.n_m = parse(key, value)?,
            "d_e" => m.d_e = parse(key, value)?,
            "l_p" => m.l_p = parse(key, value)?,
            "k_attn" => m.k_attn = parse(key, value)?,
            "k_mlp" => m.k_mlp = parse(key, value)?,
            "k_combined_data" => m.k_combined_data = parse(key, value)?,
            "attn_mode" => m.attn_mode = parse::<SelectionMode>(key, value)?,
            "mlp_mode" => m.mlp_mode = parse::<SelectionMode>(key, value)?,
            "vocab_size" => m.vocab_size = parse(key, value)?,
            "max_len" => m.max_len = parse(key, value)?,
            "alpha" => m.alpha = parse(key, value)?,
            "rope_d_qc" => self.rope.d_qc = Some(parse(key, value)?),
            "rope_d_kc" => self.rope.d_kc = Some(parse(key, value)?),
            "rope_theta" => self.rope.theta = Some(parse(key, value)?),
            "seed" => m.seed = parse(key, value)?,
            "dtype" => {
                m.dtype = match value {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => bail!("invalid value `{value}` for `dtype`: expected f32 or f64"),
                }
            }
            "gate_hidden" => m.gate_hidden = parse(key, value)?,
            "gate_scale_outputs" => m.gate_scale_outputs = parse_bool(key, value)?,
            "pooled_expert_gate" => m.pooled_expert_gate = parse_bool(key, value)?,
            "mlp_second_activation" => {
                m.mlp_second_activation = match value {
                    "identity" => SecondActivation::Identity,
                    "silu" => SecondActivation::Silu,
                    _ => bail!("invalid value `{value}` for `mlp_second_activation`: expected identity or silu"),
                }
            }
            "mlp_bias" => m.mlp_bias = parse_bool(key, value)?,
            "pre_norm" => m.pre_norm = parse_bool(key, value)?,
            "compact_positions" => m.compact_positions = parse_bool(key, value)?,
            "causal" => m.causal = parse_bool(key, value)?,
            "strategy" => m.strategy = parse::<ExecStrategy>(key, value)?,
            "model_kind" => {
                c.model_kind = match value {
                    "uoe" => ModelKind::Uoe,
                    "dense" => ModelKind::Dense,
                    _ => bail!("invalid value `{value}` for `model_kind`: expected uoe or dense"),
                }
            }
            "steps" => c.steps = parse(key, value)?,
            "batch_size" => c.batch_size = parse(key, value)?,
            "micro_batches" => c.micro_batches = parse(key, value)?,
            "lr" => c.lr = parse(key, value)?,
            "log_every" => c.log_every = parse(key, value)?,
            "eval_windows" => c.eval_windows = parse(key, value)?,
            "holdout_fraction" => c.holdout_fraction = parse(key, value)?,
            "ablate_steps" => c.ablate_steps = parse(key, value)?,
            _ => bail!("unknown configuration key `{key}`"),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{pair}` is not of the form key=value"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`, got `{raw}`", no + 1))?;
            self.set(k.trim(), v.trim()).with_context(|| format!("line {}", no + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn build(self) -> Result<RunConfig> {
        let mut c = self.config;
        let d_h = c.model.d_h;
        let half = RopeConfig::half(d_h);
        let rope = RopeConfig::with_constant(d_h, self.rope.d_qc.unwrap_or(half.d_qc), self.rope.d_kc.unwrap_or(half.d_kc));
        c.model.rope = RopeConfig {
            theta_base: self.rope.theta.unwrap_or(half.theta_base),
            ..rope
        };
        c.validate()?;
        Ok(c)
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for (name, v) in [
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("micro_batches", self.micro_batches),
            ("log_every", self.log_every),
            ("ablate_steps", self.ablate_steps),
        ] {
            if v == 0 {
                bail!("{name} must be at least 1");
            }
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            bail!("lr must be finite and non-negative");
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            bail!("holdout_fraction must lie strictly between 0 and 1");
        }
        if self.model.vocab_size < 256 {
            bail!("byte-level training needs vocab_size >= 256");
        }
        Ok(())
    }

    /// File, then overrides, then validation.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut b = ConfigBuilder::new();
        if let Some(p) = path {
            b.apply_file(p)?;
        }
        for o in overrides {
            b.set_pair(o)?;
        }
        b.build()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let mut b = ConfigBuilder::new();
        b.apply_text("# model\nd = 32\nd_h = 8 # per head\n\nattn_mode = expert\nrope_d_qc = 2\nsteps=10\n")
            .unwrap();
        b.set_pair("steps=20").unwrap();
        let c = b.build().unwrap();
        assert_eq!(c.model.d, 32);
        assert_eq!(c.model.attn_mode, SelectionMode::Expert);
        assert_eq!(c.steps, 20);
        assert_eq!((c.model.rope.d_qc, c.model.rope.d_qr, c.model.rope.d_kc), (2, 6, 4));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut b = ConfigBuilder::new();
        let err = b.apply_text("d = 8\nwidth = 3\n").unwrap_err();
        assert!(format!("{err:#}").contains("unknown configuration key `width`"));
        assert!(ConfigBuilder::new().apply_text("d 8").is_err());
        assert!(ConfigBuilder::new().set("dtype", "f16").is_err());
        assert!(ConfigBuilder::new().set("causal", "maybe").is_err());
        assert!(ConfigBuilder::new().set_pair("steps").is_err());
    }

    #[test]
    fn validation_runs_on_build() {
        let mut b = ConfigBuilder::new();
        b.set("max_len", "60").unwrap();
        assert!(b.build().is_err());
        let mut b = ConfigBuilder::new();
        b.set("steps", "0").unwrap();
        assert!(b.build().is_err());
    }

    #[test]
    fn every_documented_key_is_accepted() {
        let sample = |k: &str| match k {
            "attn_mode" | "mlp_mode" => "data",
            "dtype" => "f64",
            "mlp_second_activation" => "silu",
            "strategy" => "fused",
            "model_kind" => "dense",
            "alpha" | "lr" | "holdout_fraction" | "rope_theta" => "0.5",
            k if ["gate_scale_outputs", "pooled_expert_gate", "mlp_bias", "pre_norm", "compact_positions", "causal"].contains(&k) => "true",
            _ => "2",
        };
        for (k, _) in KEYS {
            ConfigBuilder::new().set(k, sample(k)).unwrap();
        }
    }
}
