//! Byte-level corpus with a held-out tail.

use rand::Rng;

use super::{Result, TrainError};

#[derive(Debug, Clone)]
pub struct Corpus {
    bytes: Vec<u8>,
    split: usize,
}

impl Corpus {
    /// Keeps the last `holdout_frac` of the bytes for evaluation.
    pub fn from_bytes(bytes: Vec<u8>, holdout_frac: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&holdout_frac) || holdout_frac.is_nan() {
            return Err(TrainError::Config(format!("holdout fraction {holdout_frac} outside [0, 1)")));
        }
        if bytes.is_empty() {
            return Err(TrainError::Data("corpus is empty".into()));
        }
        let held = (bytes.len() as f64 * holdout_frac).round() as usize;
        Ok(Self {
            split: bytes.len() - held,
            bytes,
        })
    }

    pub fn train(&self) -> &[u8] {
        &self.bytes[..self.split]
    }

    pub fn eval(&self) -> &[u8] {
        &self.bytes[self.split..]
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// Largest byte value, which the vocabulary must cover.
    pub fn max_token(&self) -> usize {
        self.bytes.iter().copied().max().unwrap_or(0) as usize
    }

    /// `count` random training windows of `len` bytes.
    pub fn sample_batch(&self, rng: &mut impl Rng, count: usize, len: usize) -> Result<Vec<Vec<usize>>> {
        let train = self.train();
        if train.len() < len {
            return Err(TrainError::Data(format!(
                "training split has {} bytes, sequences need {len}",
                train.len()
            )));
        }
        let last_start = train.len() - len;
        Ok((0..count)
            .map(|_| {
                let s = rng.random_range(0..=last_start);
                tokens(&train[s..s + len])
            })
            .collect())
    }

    /// Up to `count` consecutive non-overlapping windows from the held-out
    /// split.
    pub fn eval_windows(&self, count: usize, len: usize) -> Result<Vec<Vec<usize>>> {
        let windows: Vec<Vec<usize>> = self.eval().chunks_exact(len).take(count).map(tokens).collect();
        if windows.is_empty() {
            return Err(TrainError::Data(format!(
                "held-out split has {} bytes, sequences need {len}",
                self.eval().len()
            )));
        }
        Ok(windows)
    }
}

pub fn tokens(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}
