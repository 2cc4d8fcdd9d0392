//! Byte corpus cut into next-token windows.

use std::path::Path;

use anyhow::{bail, Context, Result};
use uoe_core::model::train::Batch;
use uoe_core::Rng;

#[derive(Debug, Clone)]
pub struct Corpus {
    pub bytes: Vec<u8>,
    pub window: usize,
    /// Start offsets of training windows.
    pub train: Vec<usize>,
    /// Start offsets of held-out windows, all after the training ones.
    pub held_out: Vec<usize>,
}

impl Corpus {
    pub fn load(path: &Path, window: usize, holdout_fraction: f64) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading corpus {}", path.display()))?;
        Self::from_bytes(bytes, window, holdout_fraction)
    }

    /// Windows of `window` inputs start every `window` bytes; each needs one
    /// extra byte for its last target.
    pub fn from_bytes(bytes: Vec<u8>, window: usize, holdout_fraction: f64) -> Result<Self> {
        if window == 0 || bytes.len() < window + 1 {
            bail!("corpus of {} bytes is too short for windows of {window}", bytes.len());
        }
        let count = (bytes.len() - 1) / window;
        let held = ((count as f64 * holdout_fraction).ceil() as usize).clamp(1, count.saturating_sub(1).max(1));
        if count < 2 {
            bail!("corpus yields {count} windows; need at least 2 for a held-out split");
        }
        let starts: Vec<usize> = (0..count).map(|i| i * window).collect();
        let (train, held_out) = starts.split_at(count - held);
        Ok(Self {
            bytes,
            window,
            train: train.to_vec(),
            held_out: held_out.to_vec(),
        })
    }

    fn batch_of(&self, starts: &[usize]) -> Batch {
        let l = self.window;
        let mut tokens = Vec::with_capacity(starts.len() * l);
        let mut targets = Vec::with_capacity(starts.len() * l);
        for &s in starts {
            tokens.extend(self.bytes[s..s + l].iter().map(|&b| b as usize));
            targets.extend(self.bytes[s + 1..s + l + 1].iter().map(|&b| b as usize));
        }
        Batch {
            tokens,
            targets,
            b: starts.len(),
        }
    }

    pub fn sample_batch(&self, rng: &mut Rng, b: usize) -> Batch {
        let starts: Vec<usize> = (0..b).map(|_| self.train[rng.below(self.train.len())]).collect();
        self.batch_of(&starts)
    }

    /// The first `limit` held-out windows (all when `limit` is 0) in batches
    /// of at most `b`.
    pub fn eval_batches(&self, b: usize, limit: usize) -> Vec<Batch> {
        let take = if limit == 0 { self.held_out.len() } else { limit.min(self.held_out.len()) };
        self.held_out[..take].chunks(b.max(1)).map(|c| self.batch_of(c)).collect()
    }

    /// Held-out perplexity of an add-one smoothed byte unigram fitted on the
    /// training region, over the same targets as [`Corpus::eval_batches`].
    pub fn unigram_perplexity(&self, limit: usize) -> f64 {
        let train_end = self.held_out[0];
        let mut counts = [1.0f64; 256];
        for &b in &self.bytes[..train_end] {
            counts[b as usize] += 1.0;
        }
        let total: f64 = counts.iter().sum();
        let mut nll = 0.0;
        let mut n = 0usize;
        for batch in self.eval_batches(64, limit) {
            for &t in &batch.targets {
                nll -= (counts[t] / total).ln();
                n += 1;
            }
        }
        (nll / n as f64).exp()
    }
}
