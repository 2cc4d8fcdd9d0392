//! Serial, batched and fused execution of one routed block, timed over a
//! grid of widths, expert counts and sequence lengths.

use std::fmt::Write as _;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use uoe_core::attention::{ExecStrategy, RopeConfig};
use uoe_core::model::{block_forward, UoeModel, UoeModelConfig};
use uoe_core::routing::SelectionMode;
use uoe_core::tensor::counters;
use uoe_core::{DType, Rng, Scalar, Tensor};

pub const CSV_HEADER: &str = "strategy,d,n,l,mean_ms,p50_ms,peak_bytes_estimate";
pub const STRATEGIES: [ExecStrategy; 3] = [ExecStrategy::Serial, ExecStrategy::Batched, ExecStrategy::Fused];
pub const DEFAULT_GRID: &str = "d=64;n=4;l=128,256,512;b=4";
pub const WARMUP: usize = 5;
pub const ITERATIONS: usize = 20;
/// Largest f64 deviation from the batched output tolerated before timing.
pub const EQUIVALENCE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub d: Vec<usize>,
    pub n: Vec<usize>,
    pub l: Vec<usize>,
    pub b: usize,
    pub l_p: usize,
    /// Experts per token; `None` means `n / 2`.
    pub k: Option<usize>,
    pub seed: u64,
    pub warmup: usize,
    pub iterations: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        DEFAULT_GRID.parse().expect("default grid parses")
    }
}

impl std::str::FromStr for GridSpec {
    type Err = anyhow::Error;

    /// `key=v1,v2;key=v` with keys `d n l` (lists) and `b l_p k seed warmup
    /// iters` (single values).
    fn from_str(s: &str) -> Result<Self> {
        let mut g = GridSpec {
            d: vec![64],
            n: vec![4],
            l: vec![128, 256, 512],
            b: 4,
            l_p: 8,
            k: None,
            seed: 0,
            warmup: WARMUP,
            iterations: ITERATIONS,
        };
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| anyhow!("grid entry `{part}` is not key=value"))?;
            let list = || -> Result<Vec<usize>> {
                value
                    .split(',')
                    .map(|v| v.trim().parse().with_context(|| format!("bad value `{v}` for `{key}`")))
                    .collect()
            };
            let one = || -> Result<usize> { value.trim().parse().with_context(|| format!("bad value `{value}` for `{key}`")) };
            match key.trim() {
                "d" => g.d = list()?,
                "n" => g.n = list()?,
                "l" => g.l = list()?,
                "b" => g.b = one()?,
                "l_p" => g.l_p = one()?,
                "k" => g.k = Some(one()?),
                "seed" => g.seed = one()? as u64,
                "warmup" => g.warmup = one()?,
                "iters" => g.iterations = one()?,
                other => bail!("unknown grid key `{other}`"),
            }
        }
        if g.d.is_empty() || g.n.is_empty() || g.l.is_empty() || g.b == 0 || g.iterations == 0 {
            bail!("grid `{s}` has an empty axis");
        }
        Ok(g)
    }
}

impl GridSpec {
    pub fn points(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for &d in &self.d {
            for &n in &self.n {
                for &l in &self.l {
                    out.push((d, n, l));
                }
            }
        }
        out
    }

    /// Data-selected attention and expert-selected MLP with `k` of `n`
    /// experts, heads of width `d / n` and a 4·d MLP.
    pub fn block_config(&self, d: usize, n: usize, l: usize) -> Result<UoeModelConfig> {
        if n == 0 || !d.is_multiple_of(n) {
            bail!("n = {n} does not divide d = {d}");
        }
        let d_h = d / n;
        let cfg = UoeModelConfig {
            layers: 1,
            d,
            n_a: n,
            d_h,
            n_m: n,
            d_e: 4 * d / n,
            l_p: self.l_p,
            k_attn: self.k.unwrap_or((n / 2).max(1)),
            k_mlp: self.k.unwrap_or((n / 2).max(1)),
            attn_mode: SelectionMode::Data,
            mlp_mode: SelectionMode::Expert,
            max_len: l,
            gate_hidden: d,
            pooled_expert_gate: true,
            rope: RopeConfig::half(d_h),
            seed: self.seed,
            ..UoeModelConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Worker threads: the requested count capped by `UOE_THREADS`, or the
/// variable alone when nothing is requested. At least 1.
pub fn thread_count(requested: Option<usize>) -> usize {
    let cap = std::env::var("UOE_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok());
    match (requested, cap) {
        (Some(r), Some(c)) => r.min(c),
        (Some(r), None) => r,
        (None, Some(c)) => c,
        (None, None) => 1,
    }
    .max(1)
}

/// One block forward with the batch split across up to `threads` workers.
/// Routing is per sample, so the result does not depend on the split.
pub fn run_block<T: Scalar>(
    model: &UoeModel<T>,
    x: &Tensor<T>,
    strategy: ExecStrategy,
    threads: usize,
) -> Result<Tensor<T>> {
    let cfg = UoeModelConfig {
        strategy,
        ..model.config.clone()
    };
    let block = &model.blocks[0];
    let mask = cfg.mask();
    let b = x.shape()[0];
    let shards = threads.min(b).max(1);
    if shards == 1 {
        return Ok(block_forward(x, block, &cfg, &mask)?.0);
    }
    let per = b.div_ceil(shards);
    let parts: Vec<Vec<usize>> = (0..b).collect::<Vec<_>>().chunks(per).map(<[usize]>::to_vec).collect();
    let outputs: Vec<Result<Tensor<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = parts
            .iter()
            .map(|idx| {
                let (cfg, mask) = (&cfg, &mask);
                s.spawn(move || -> Result<Tensor<T>> {
                    let xs = x.index_select(0, idx)?;
                    Ok(block_forward(&xs, block, cfg, mask)?.0)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("bench worker panicked")).collect()
    });
    Ok(Tensor::concat(&outputs.into_iter().collect::<Result<Vec<_>>>()?)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub strategy: ExecStrategy,
    pub d: usize,
    pub n: usize,
    pub l: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub peak_bytes: i64,
}

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{:.4},{:.4},{}",
            self.strategy, self.d, self.n, self.l, self.mean_ms, self.p50_ms, self.peak_bytes
        )
    }
}

pub fn render_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv());
    }
    out
}

/// Largest deviation of the serial and fused outputs from the batched one,
/// in f64.
pub fn strategy_deviation(grid: &GridSpec, d: usize, n: usize, l: usize, threads: usize) -> Result<f64> {
    let cfg = grid.block_config(d, n, l)?;
    let model = UoeModel::<f64>::new(&cfg)?;
    let x = Rng::new(grid.seed).fork("bench.x").normal_tensor::<f64>(&[grid.b, l, d], 1.0);
    let batched = run_block(&model, &x, ExecStrategy::Batched, threads)?;
    let mut worst: f64 = 0.0;
    for s in [ExecStrategy::Serial, ExecStrategy::Fused] {
        worst = worst.max(run_block(&model, &x, s, threads)?.max_abs_diff(&batched));
    }
    Ok(worst)
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// f32 timings of every strategy at one grid point. Iterations rotate
/// through the strategies so drift in machine load is shared evenly.
pub fn time_point(grid: &GridSpec, d: usize, n: usize, l: usize, threads: usize) -> Result<Vec<BenchRow>> {
    let cfg = UoeModelConfig {
        dtype: DType::F32,
        ..grid.block_config(d, n, l)?
    };
    let model = UoeModel::<f32>::new(&cfg)?;
    let x = Rng::new(grid.seed).fork("bench.x").normal_tensor::<f32>(&[grid.b, l, d], 1.0);
    let mut peaks = Vec::with_capacity(STRATEGIES.len());
    for strategy in STRATEGIES {
        let live = counters::live_bytes();
        counters::reset_peak_bytes();
        drop(run_block(&model, &x, strategy, threads)?);
        peaks.push(counters::peak_bytes() - live);
    }
    for _ in 0..grid.warmup {
        for strategy in STRATEGIES {
            run_block(&model, &x, strategy, threads)?;
        }
    }
    let mut times = vec![Vec::with_capacity(grid.iterations); STRATEGIES.len()];
    for _ in 0..grid.iterations {
        for (slot, strategy) in STRATEGIES.into_iter().enumerate() {
            let t = Instant::now();
            let y = run_block(&model, &x, strategy, threads)?;
            times[slot].push(t.elapsed().as_secs_f64() * 1e3);
            drop(y);
        }
    }
    Ok(STRATEGIES
        .into_iter()
        .zip(times)
        .zip(peaks)
        .map(|((strategy, mut t), peak)| {
            let mean = t.iter().sum::<f64>() / t.len() as f64;
            t.sort_by(f64::total_cmp);
            BenchRow {
                strategy,
                d,
                n,
                l,
                mean_ms: mean,
                p50_ms: median(&t),
                peak_bytes: peak,
            }
        })
        .collect())
}

/// Checks strategy agreement at every grid point, then times them.
pub fn bench(grid: &GridSpec, threads: usize, verbose: bool) -> Result<Vec<BenchRow>> {
    let points = grid.points();
    for &(d, n, l) in &points {
        let dev = strategy_deviation(grid, d, n, l, threads)?;
        if dev.is_nan() || dev > EQUIVALENCE_TOL {
            bail!("strategies disagree at d={d} n={n} l={l}: max abs diff {dev:e}");
        }
    }
    let mut rows = Vec::new();
    for &(d, n, l) in &points {
        let point = time_point(grid, d, n, l, threads)?;
        if verbose {
            for r in &point {
                eprintln!(
                    "{:<8} d {d:>4}  n {n:>2}  l {l:>5}  mean {:>9.3} ms  p50 {:>9.3} ms  peak {} B",
                    r.strategy.to_string(),
                    r.mean_ms,
                    r.p50_ms,
                    r.peak_bytes
                );
            }
        }
        rows.extend(point);
    }
    Ok(rows)
}
