//! Analytic FLOPs tables for a configuration over window lengths.

use std::fmt::Write as _;

use uoe_core::flops::{count_dense, count_uoe, FlopsReport};
use uoe_core::model::UoeModelConfig;

/// One dense and one balanced-load UoE row per window length.
pub fn render_csv(cfg: &UoeModelConfig, b: usize, lengths: &[usize]) -> String {
    let mut out = String::from(FlopsReport::CSV_HEADER);
    out.push('\n');
    for &l in lengths {
        let _ = writeln!(out, "{}", count_dense(cfg, b, l).csv_row(&format!("dense_l{l}")));
        let _ = writeln!(out, "{}", count_uoe(cfg, b, l, None).csv_row(&format!("uoe_l{l}")));
    }
    out
}
