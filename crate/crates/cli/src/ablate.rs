//! Expert-count by activation-ratio grid of short training runs.

use std::fmt::Write as _;

use anyhow::{bail, Result};
use uoe_core::attention::RopeConfig;

use crate::config::{ModelKind, RunConfig};
use crate::corpus::Corpus;
use crate::train::train;

pub const CSV_HEADER: &str = "n,r,k_attn,k_mlp,steps,final_ppl,flops_ratio,dense_ppl";
pub const DEFAULT_NS: [usize; 3] = [2, 4, 8];
pub const DEFAULT_RS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct AblateRow {
    pub n: usize,
    pub r: f64,
    pub k_attn: usize,
    pub k_mlp: usize,
    pub steps: usize,
    pub final_ppl: f64,
    pub flops_ratio: f64,
    /// Dense reference rebuilt from the same initialization.
    pub dense_ppl: f64,
}

/// `clamp(round(r·n), 1, n)`.
pub fn k_for_ratio(r: f64, n: usize) -> usize {
    ((r * n as f64).round() as usize).clamp(1, n)
}

/// `base` with `n` experts in both sub-blocks at the same dense widths.
pub fn cell_config(base: &RunConfig, n: usize, r: f64) -> Result<RunConfig> {
    let m = &base.model;
    let (attn_width, mlp_width) = (m.n_a * m.d_h, m.n_m * m.d_e);
    if n == 0 || attn_width % n != 0 || mlp_width % n != 0 {
        bail!("{n} experts do not divide the attention width {attn_width} and MLP width {mlp_width}");
    }
    let mut c = base.clone();
    c.steps = base.ablate_steps;
    c.log_every = base.ablate_steps;
    let k = k_for_ratio(r, n);
    c.model.n_a = n;
    c.model.n_m = n;
    c.model.d_h = attn_width / n;
    c.model.d_e = mlp_width / n;
    c.model.k_attn = k;
    c.model.k_mlp = k;
    c.model.k_combined_data = m.k_combined_data.min(k);
    c.model.rope = RopeConfig {
        theta_base: m.rope.theta_base,
        ..RopeConfig::half(c.model.d_h)
    };
    c.validate()?;
    Ok(c)
}

pub fn ablate(base: &RunConfig, corpus: &Corpus, ns: &[usize], rs: &[f64], verbose: bool) -> Result<Vec<AblateRow>> {
    let mut rows = Vec::with_capacity(ns.len() * rs.len());
    for &n in ns {
        let mut dense_cfg = cell_config(base, n, 1.0)?;
        dense_cfg.model_kind = ModelKind::Dense;
        let dense_ppl = train(&dense_cfg, corpus, None, false)?.final_ppl();
        for &r in rs {
            let mut c = cell_config(base, n, r)?;
            c.model_kind = ModelKind::Uoe;
            let report = train(&c, corpus, None, false)?;
            let row = AblateRow {
                n,
                r,
                k_attn: c.model.k_attn,
                k_mlp: c.model.k_mlp,
                steps: c.steps,
                final_ppl: report.final_ppl(),
                flops_ratio: report.rows.last().map_or(f64::NAN, |r| r.flops_ratio),
                dense_ppl,
            };
            if verbose {
                eprintln!(
                    "n {n}  r {r:.2}  k {}  ppl {:.4}  dense {:.4}  flops {:.3}",
                    row.k_attn, row.final_ppl, row.dense_ppl, row.flops_ratio
                );
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn render_csv(rows: &[AblateRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.10},{:.6},{:.10}",
            r.n, r.r, r.k_attn, r.k_mlp, r.steps, r.final_ppl, r.flops_ratio, r.dense_ppl
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ConfigBuilder;

    #[test]
    fn k_rounding() {
        assert_eq!(k_for_ratio(0.25, 2), 1);
        assert_eq!(k_for_ratio(0.75, 2), 2);
        assert_eq!(k_for_ratio(0.25, 4), 1);
        assert_eq!(k_for_ratio(0.75, 8), 6);
        assert_eq!(k_for_ratio(0.01, 8), 1);
        assert_eq!(k_for_ratio(1.0, 8), 8);
    }

    #[test]
    fn cells_keep_dense_widths() {
        let base = RunConfig::default();
        let c = cell_config(&base, 8, 0.5).unwrap();
        assert_eq!(c.model.n_a * c.model.d_h, base.model.n_a * base.model.d_h);
        assert_eq!(c.model.n_m * c.model.d_e, base.model.n_m * base.model.d_e);
        assert_eq!(c.model.k_attn, 4);
        assert!(cell_config(&base, 3, 0.5).is_err());
    }

    #[test]
    fn grid_has_one_row_per_cell_and_full_rows_match_dense() {
        let mut b = ConfigBuilder::new();
        b.apply_text(
            "layers = 1\nd = 16\nn_a = 2\nd_h = 8\nn_m = 2\nd_e = 16\nl_p = 4\nmax_len = 16\n\
             gate_hidden = 8\nablate_steps = 4\nbatch_size = 2\neval_windows = 2\n",
        )
        .unwrap();
        let base = b.build().unwrap();
        let text = "it was the best of times, it was the worst of times. ".repeat(20);
        let corpus = Corpus::from_bytes(text.into_bytes(), 16, 0.1).unwrap();
        let rows = ablate(&base, &corpus, &[1, 2], &[0.5, 1.0], false).unwrap();
        assert_eq!(rows.len(), 4);
        for r in rows.iter().filter(|r| r.r == 1.0) {
            assert!((r.final_ppl - r.dense_ppl).abs() <= 1e-6, "{r:?}");
        }
        assert_eq!(render_csv(&rows).lines().count(), 5);
    }
}
