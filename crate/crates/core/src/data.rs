//! Byte-level corpus ingestion and deterministic batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Byte-level vocabulary: every byte value is its own token id.
pub const BYTE_VOCAB: usize = 256;

/// Reads `path` and cuts it into non-overlapping windows of `seq_len + 1`
/// tokens. The trailing partial window is dropped.
pub fn ingest_corpus(path: impl AsRef<Path>, seq_len: usize) -> Result<Vec<Vec<usize>>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Corpus(format!("cannot read {}: {e}", path.display())))?;
    ingest_bytes(&bytes, seq_len)
}

pub fn ingest_bytes(bytes: &[u8], seq_len: usize) -> Result<Vec<Vec<usize>>> {
    if seq_len == 0 {
        return Err(Error::InvalidArgument("seq_len must be positive".into()));
    }
    if bytes.is_empty() {
        return Err(Error::Corpus("corpus is empty".into()));
    }
    let window = seq_len + 1;
    if bytes.len() < window {
        return Err(Error::Corpus(format!(
            "corpus has {} bytes, shorter than one window of {window}",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(window)
        .map(|w| w.iter().map(|&b| usize::from(b)).collect())
        .collect())
}

/// Splits windows into `(train, eval)`, holding out the last
/// `ceil(eval_fraction * n)` windows. At least one window stays in train.
pub fn train_eval_split(windows: Vec<Vec<usize>>, eval_fraction: f64) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    if !(0.0..1.0).contains(&eval_fraction) {
        return Err(Error::InvalidArgument(format!("eval_fraction {eval_fraction} outside [0, 1)")));
    }
    let n = windows.len();
    let n_eval = ((eval_fraction * n as f64).ceil() as usize).min(n.saturating_sub(1));
    let mut train = windows;
    let eval = train.split_off(n - n_eval);
    Ok((train, eval))
}

/// Endless stream of window indices, reshuffled each epoch from `seed`.
#[derive(Clone, Debug)]
pub struct Batcher {
    n: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl Batcher {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Corpus("no training windows".into()));
        }
        let mut b = Self { n, seed, epoch: 0, order: Vec::new(), cursor: 0 };
        b.shuffle();
        Ok(b)
    }

    fn shuffle(&mut self) {
        self.order = (0..self.n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch);
        self.order.shuffle(&mut rng);
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Next `size` indices, wrapping into a freshly shuffled epoch as needed.
    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.n {
                self.epoch += 1;
                self.cursor = 0;
                self.shuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}
