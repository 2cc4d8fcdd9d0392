//! Byte-level language-model training runs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use uoe_core::flops::{count_dense, count_uoe, BlockLoads};
use uoe_core::model::checkpoint::save_checkpoint;
use uoe_core::model::train::{train_step, AdamConfig, Trainable, TrainState};
use uoe_core::model::{DenseModel, UoeModel, UoeModelConfig};
use uoe_core::{DType, Rng, Scalar};

use crate::config::{ModelKind, RunConfig};
use crate::corpus::Corpus;

pub const CSV_HEADER: &str = "step,nll,ppl,lbal,expert_load_entropy,flops_ratio";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.uoe";

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    /// Held-out mean negative log-likelihood.
    pub nll: f64,
    pub ppl: f64,
    /// Mean training balance loss since the previous row.
    pub lbal: f64,
    pub load_entropy: f64,
    pub flops_ratio: f64,
}

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.10},{:.10},{:.10},{:.10},{:.6}",
            self.step, self.nll, self.ppl, self.lbal, self.load_entropy, self.flops_ratio
        )
    }
}

pub fn render_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv());
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub rows: Vec<LogRow>,
    pub unigram_ppl: f64,
    pub seconds: f64,
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
}

impl TrainReport {
    pub fn final_ppl(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.ppl)
    }
}

struct HeldOut {
    nll: f64,
    load_entropy: f64,
    flops_ratio: f64,
}

fn evaluate<T: Scalar, M: Trainable<T>>(model: &M, cfg: &UoeModelConfig, corpus: &Corpus, run: &RunConfig) -> Result<HeldOut> {
    let batches = corpus.eval_batches(run.batch_size, run.eval_windows);
    let (mut nll, mut entropy, mut windows) = (0.0, 0.0, 0usize);
    let (mut uoe, mut dense) = (0u64, 0u64);
    for batch in &batches {
        let e = model.evaluate(batch)?;
        nll += e.nll * batch.b as f64;
        entropy += e.load_entropy * batch.b as f64;
        windows += batch.b;
        dense += count_dense(cfg, batch.b, cfg.max_len).total();
        uoe += if e.blocks.is_empty() {
            count_dense(cfg, batch.b, cfg.max_len).total()
        } else {
            let loads: Vec<BlockLoads> = e.blocks.iter().map(BlockLoads::from_stats).collect();
            count_uoe(cfg, batch.b, cfg.max_len, Some(&loads)).total()
        };
    }
    Ok(HeldOut {
        nll: nll / windows as f64,
        load_entropy: entropy / windows as f64,
        flops_ratio: uoe as f64 / dense as f64,
    })
}

fn run<T: Scalar, M: Trainable<T>>(model: M, run: &RunConfig, corpus: &Corpus, out: Option<&Path>, verbose: bool) -> Result<TrainReport> {
    let cfg = &run.model;
    let adam = AdamConfig {
        lr: run.lr,
        ..AdamConfig::default()
    };
    let mut state = TrainState::new(model, adam, Rng::new(cfg.seed).fork("data"));
    let start = Instant::now();
    let mut rows = Vec::new();
    let (mut lbal_sum, mut lbal_steps) = (0.0, 0usize);
    for step in 1..=run.steps {
        let micro: Vec<_> = (0..run.micro_batches)
            .map(|_| corpus.sample_batch(&mut state.rng, run.batch_size))
            .collect();
        let m = train_step(&mut state, &micro)?;
        lbal_sum += m.lbal;
        lbal_steps += 1;
        if step % run.log_every == 0 || step == run.steps {
            let h = evaluate(&state.model, cfg, corpus, run)?;
            let row = LogRow {
                step: step as u64,
                nll: h.nll,
                ppl: h.nll.exp(),
                lbal: lbal_sum / lbal_steps as f64,
                load_entropy: h.load_entropy,
                flops_ratio: h.flops_ratio,
            };
            if verbose {
                eprintln!(
                    "step {:>5}  nll {:.4}  ppl {:.3}  lbal {:.5}  entropy {:.3}  flops {:.3}  ({:.1}s)",
                    row.step,
                    row.nll,
                    row.ppl,
                    row.lbal,
                    row.load_entropy,
                    row.flops_ratio,
                    start.elapsed().as_secs_f64()
                );
            }
            rows.push(row);
            lbal_sum = 0.0;
            lbal_steps = 0;
        }
    }
    let mut report = TrainReport {
        rows,
        unigram_ppl: corpus.unigram_perplexity(run.eval_windows),
        seconds: start.elapsed().as_secs_f64(),
        metrics_path: None,
        checkpoint_path: None,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let metrics = dir.join(METRICS_FILE);
        std::fs::write(&metrics, render_csv(&report.rows))?;
        let ckpt = dir.join(CHECKPOINT_FILE);
        save_checkpoint(&state, &ckpt)?;
        report.metrics_path = Some(metrics);
        report.checkpoint_path = Some(ckpt);
    }
    Ok(report)
}

fn run_typed<T: Scalar>(cfg: &RunConfig, corpus: &Corpus, out: Option<&Path>, verbose: bool) -> Result<TrainReport> {
    let model = UoeModel::<T>::new(&cfg.model)?;
    match cfg.model_kind {
        ModelKind::Uoe => run(model, cfg, corpus, out, verbose),
        ModelKind::Dense => run(DenseModel::from_uoe(&model)?, cfg, corpus, out, verbose),
    }
}

/// Trains per `cfg`; with `out`, writes the metrics CSV and final
/// checkpoint there.
pub fn train(cfg: &RunConfig, corpus: &Corpus, out: Option<&Path>, verbose: bool) -> Result<TrainReport> {
    match cfg.model.dtype {
        DType::F32 => run_typed::<f32>(cfg, corpus, out, verbose),
        DType::F64 => run_typed::<f64>(cfg, corpus, out, verbose),
    }
}
