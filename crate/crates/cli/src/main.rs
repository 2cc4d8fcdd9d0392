use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use uoe_cli::bench::{self, GridSpec, DEFAULT_GRID};
use uoe_cli::config::RunConfig;
use uoe_cli::corpus::Corpus;
use uoe_cli::verify::{self, Fault, Options};
use uoe_cli::{ablate, flops, train};

/// Bundled public-domain text used when `--corpus` is omitted.
const DEFAULT_CORPUS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/data/moby_dick.txt");

#[derive(Parser)]
#[command(name = "uoe", version, about = "Union-of-Experts transformer: checks, training, FLOPs and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the invariant suites and print one verdict per check.
    Verify {
        /// Run only the named suite.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Deliberately break a component to confirm the suites catch it.
        #[arg(long, value_name = "FAULT")]
        inject_fault: Option<Fault>,
        /// List suites and their checks instead of running them.
        #[arg(long)]
        list: bool,
    },
    /// Train a byte-level language model and write metrics and a checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Directory for metrics.csv and checkpoint.uoe.
        #[arg(long)]
        out: PathBuf,
    },
    /// Time serial, batched and fused execution over a size grid.
    Bench {
        /// `d=..;n=..;l=..` with optional `b l_p k seed warmup iters`.
        #[arg(long, default_value = DEFAULT_GRID)]
        grid: GridSpec,
        /// CSV destination; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads, capped by UOE_THREADS.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Train over an expert-count by activation-ratio grid.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// CSV destination; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = ablate::DEFAULT_NS)]
        ns: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = ablate::DEFAULT_RS)]
        rs: Vec<f64>,
    },
    /// Analytic FLOPs of the configured model, dense and routed.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Window lengths; defaults to the configured max_len.
        #[arg(long, value_delimiter = ',')]
        l: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        b: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Byte corpus; the bundled text when omitted.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Override one configuration key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    quiet: bool,
}

impl RunArgs {
    fn load(&self) -> Result<(RunConfig, Corpus)> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        let cfg = RunConfig::load(self.config.as_deref(), &overrides)?;
        let path = self.corpus.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_CORPUS));
        let corpus = Corpus::load(&path, cfg.model.max_len, cfg.holdout_fraction)?;
        Ok((cfg, corpus))
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => Ok(std::io::stdout().write_all(text.as_bytes())?),
    }
}

fn cmd_verify(filter: Option<String>, seed: u64, fault: Option<Fault>, list: bool) -> Result<ExitCode> {
    if list {
        for s in verify::SUITES {
            println!("{:<14} {}", s.name, s.about);
            for c in s.check_names() {
                println!("  {}/{c}", s.name);
            }
        }
        return Ok(ExitCode::SUCCESS);
    }
    let opts = Options { filter, seed, fault };
    let verdicts = verify::run(&opts, |v| println!("{}", v.line()))?;
    let failed: Vec<_> = verdicts.iter().filter(|v| !v.passed).collect();
    match failed.first() {
        None => {
            println!("all {} checks passed", verdicts.len());
            Ok(ExitCode::SUCCESS)
        }
        Some(first) => {
            eprintln!("{} of {} checks failed; first failure: {}", failed.len(), verdicts.len(), first.name());
            Ok(ExitCode::FAILURE)
        }
    }
}

fn cmd_train(run: &RunArgs, out: &Path) -> Result<ExitCode> {
    let (cfg, corpus) = run.load()?;
    let report = train::train(&cfg, &corpus, Some(out), !run.quiet)?;
    eprintln!(
        "final ppl {:.4}  unigram baseline {:.4}  {:.1}s  -> {}",
        report.final_ppl(),
        report.unigram_ppl,
        report.seconds,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify {
            filter,
            seed,
            inject_fault,
            list,
        } => cmd_verify(filter, seed, inject_fault, list),
        Command::Train { run, out } => cmd_train(&run, &out),
        Command::Bench { grid, out, threads } => bench::bench(&grid, bench::thread_count(threads), true)
            .and_then(|rows| write_or_print(out.as_deref(), &bench::render_csv(&rows)))
            .map(|_| ExitCode::SUCCESS),
        Command::Ablate { run, out, ns, rs } => run
            .load()
            .and_then(|(cfg, corpus)| ablate::ablate(&cfg, &corpus, &ns, &rs, !run.quiet))
            .and_then(|rows| write_or_print(out.as_deref(), &ablate::render_csv(&rows)))
            .map(|_| ExitCode::SUCCESS),
        Command::Flops {
            config,
            overrides,
            l,
            b,
            out,
        } => RunConfig::load(config.as_deref(), &overrides)
            .and_then(|cfg| {
                let lengths = if l.is_empty() { vec![cfg.model.max_len] } else { l };
                write_or_print(out.as_deref(), &flops::render_csv(&cfg.model, b, &lengths))
            })
            .map(|_| ExitCode::SUCCESS),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}
