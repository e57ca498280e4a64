//! Byte-level corpus with a contiguous validation tail.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, CliResult};

/// Token id used for padding; never produced by [`tokenize`].
pub const PAD_ID: usize = 256;

pub type Batch = Vec<(Vec<usize>, Vec<usize>)>;

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub bytes: Vec<u8>,
    /// Start of the validation tail.
    pub split: usize,
    pub seed: u64,
}

pub fn tokenize(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// Inverse of [`tokenize`]; padding and out-of-range ids are dropped.
pub fn detokenize(tokens: &[usize]) -> Vec<u8> {
    tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
}

pub fn ingest(path: &Path, split_frac: f64, seed: u64) -> CliResult<Corpus> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Other(format!("cannot read corpus {}: {e}", path.display())))?;
    Corpus::from_bytes(bytes, split_frac, seed)
}

impl Corpus {
    pub fn from_bytes(bytes: Vec<u8>, split_frac: f64, seed: u64) -> CliResult<Self> {
        if bytes.is_empty() {
            return Err(CliError::Other("corpus is empty".into()));
        }
        if !(split_frac > 0.0 && split_frac < 1.0) {
            return Err(CliError::Config(format!("split_frac {split_frac} must lie in (0, 1)")));
        }
        let val = ((bytes.len() as f64 * split_frac).round() as usize).clamp(1, bytes.len() - 1);
        Ok(Self {
            split: bytes.len() - val,
            bytes,
            seed,
        })
    }

    pub fn train(&self) -> &[u8] {
        &self.bytes[..self.split]
    }

    pub fn validation(&self) -> &[u8] {
        &self.bytes[self.split..]
    }

    /// Training batch for optimizer step `step`: `batch` windows of
    /// `seq_len + 1` bytes at offsets drawn from a stream keyed by
    /// `(seed, step)`, so any step can be regenerated without replaying
    /// earlier ones.
    pub fn train_batch(&self, step: u64, batch: usize, seq_len: usize) -> CliResult<Batch> {
        let train = self.train();
        if train.len() < seq_len + 1 {
            return Err(CliError::Other(format!(
                "training split has {} bytes; need at least seq_len + 1 = {}",
                train.len(),
                seq_len + 1
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step);
        let max_start = train.len() - seq_len - 1;
        Ok((0..batch)
            .map(|_| {
                let s = rng.random_range(0..=max_start);
                window(&train[s..s + seq_len + 1])
            })
            .collect())
    }

    /// Up to `count` consecutive validation windows, each at most `seq_len`
    /// inputs long. Falls back to the training split when the tail is too
    /// short for a single pair.
    pub fn eval_windows(&self, count: usize, seq_len: usize) -> Batch {
        let src = if self.validation().len() >= 2 { self.validation() } else { self.train() };
        let mut out = Vec::new();
        let mut start = 0;
        while out.len() < count && start + 1 < src.len() {
            let end = (start + seq_len + 1).min(src.len());
            out.push(window(&src[start..end]));
            start += seq_len;
        }
        out
    }
}

fn window(chunk: &[u8]) -> (Vec<usize>, Vec<usize>) {
    let toks = tokenize(chunk);
    (toks[..toks.len() - 1].to_vec(), toks[1..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thousand_bytes_split() {
        let c = Corpus::from_bytes(vec![7; 1000], 0.1, 0).unwrap();
        assert_eq!((c.train().len(), c.validation().len()), (900, 100));
    }

    #[test]
    fn byte_round_trip() {
        let all: Vec<u8> = (0..=255).collect();
        assert_eq!(detokenize(&tokenize(&all)), all);
        assert_eq!(detokenize(&[104, PAD_ID, 105]), b"hi");
    }

    #[test]
    fn batches_are_keyed_by_step() {
        let c = Corpus::from_bytes((0..=255).cycle().take(2000).collect(), 0.1, 3).unwrap();
        assert_eq!(c.train_batch(5, 2, 8).unwrap(), c.train_batch(5, 2, 8).unwrap());
        assert_ne!(c.train_batch(5, 2, 8).unwrap(), c.train_batch(6, 2, 8).unwrap());
        let (x, y) = &c.train_batch(0, 1, 8).unwrap()[0];
        assert_eq!(&x[1..], &y[..7]);
    }

    #[test]
    fn empty_and_short() {
        assert!(Corpus::from_bytes(Vec::new(), 0.1, 0).is_err());
        let c = Corpus::from_bytes(vec![1; 10], 0.5, 0).unwrap();
        assert!(c.train_batch(0, 1, 8).is_err());
    }
}
