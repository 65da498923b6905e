use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerMode {
    /// Exactly half labeled, half unlabeled per batch. An epoch ends when the
    /// labeled pool is exhausted; each epoch draws a fresh unlabeled subset.
    HalfAndHalf,
    /// Labeled pool only.
    LabeledOnly,
}

/// Pool indices of one batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    /// Shorter than requested because a pool ran out.
    pub partial: bool,
}

impl BatchPlan {
    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Epoch-wise sampling without replacement. The order of every epoch is a
/// pure function of `(seed, stream, epoch)`.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    pub labeled_len: usize,
    pub unlabeled_len: usize,
    pub batch_size: usize,
    pub mode: SamplerMode,
    pub drop_last: bool,
    pub seed: u64,
    /// Separates independent consumers of the same seed (e.g. training stages).
    pub stream: u64,
}

impl BatchSampler {
    pub fn new(
        labeled_len: usize,
        unlabeled_len: usize,
        batch_size: usize,
        mode: SamplerMode,
        seed: u64,
        stream: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if mode == SamplerMode::HalfAndHalf && batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "half-labeled batches need an even batch size, got {batch_size}"
            )));
        }
        Ok(Self {
            labeled_len,
            unlabeled_len,
            batch_size,
            mode,
            drop_last: true,
            seed,
            stream,
        })
    }

    fn permutation(&self, len: usize, epoch: usize, pool: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..len).collect();
        let mut rng = rng::stream(self.seed, &[0x5A4D, self.stream, epoch as u64, pool]);
        idx.shuffle(&mut rng);
        idx
    }

    pub fn epoch(&self, epoch: usize) -> Vec<BatchPlan> {
        let lab = self.permutation(self.labeled_len, epoch, 0);
        match self.mode {
            SamplerMode::LabeledOnly => {
                let mut out: Vec<BatchPlan> = lab
                    .chunks(self.batch_size)
                    .map(|c| BatchPlan {
                        labeled: c.to_vec(),
                        unlabeled: Vec::new(),
                        partial: c.len() < self.batch_size,
                    })
                    .collect();
                if self.drop_last && out.last().is_some_and(|b| b.partial) {
                    out.pop();
                }
                out
            }
            SamplerMode::HalfAndHalf => {
                let unl = self.permutation(self.unlabeled_len, epoch, 1);
                let half = self.batch_size / 2;
                let full = (lab.len() / half).min(unl.len() / half);
                let mut out: Vec<BatchPlan> = (0..full)
                    .map(|b| BatchPlan {
                        labeled: lab[b * half..(b + 1) * half].to_vec(),
                        unlabeled: unl[b * half..(b + 1) * half].to_vec(),
                        partial: false,
                    })
                    .collect();
                let rest = (lab.len() - full * half).min(unl.len() - full * half);
                if !self.drop_last && rest > 0 {
                    out.push(BatchPlan {
                        labeled: lab[full * half..full * half + rest].to_vec(),
                        unlabeled: unl[full * half..full * half + rest].to_vec(),
                        partial: true,
                    });
                }
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_and_half_counts() {
        let s = BatchSampler::new(800, 4800, 128, SamplerMode::HalfAndHalf, 1, 0).unwrap();
        let batches = s.epoch(0);
        assert_eq!(batches.len(), 12);
        for b in &batches {
            assert_eq!(b.labeled.len(), 64);
            assert_eq!(b.unlabeled.len(), 64);
        }
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.labeled.clone()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 12 * 64, "no repeats within an epoch");
    }

    #[test]
    fn epochs_are_reproducible_and_distinct() {
        let s = BatchSampler::new(100, 300, 20, SamplerMode::HalfAndHalf, 9, 2).unwrap();
        assert_eq!(s.epoch(0), s.epoch(0));
        assert_eq!(s.epoch(1), s.epoch(1));
        assert_ne!(s.epoch(0), s.epoch(1));
    }

    #[test]
    fn labeled_only_batches() {
        let s = BatchSampler::new(300, 1000, 128, SamplerMode::LabeledOnly, 1, 0).unwrap();
        let batches = s.epoch(3);
        assert_eq!(batches.len(), 2);
        assert!(batches.iter().all(|b| b.unlabeled.is_empty() && b.labeled.len() == 128));
        let keep = BatchSampler {
            drop_last: false,
            ..s
        };
        let batches = keep.epoch(3);
        assert_eq!(batches.len(), 3);
        assert!(batches[2].partial);
        assert_eq!(batches[2].labeled.len(), 300 - 256);
    }

    #[test]
    fn odd_batch_is_rejected_for_mixed_sampling() {
        assert!(BatchSampler::new(10, 10, 7, SamplerMode::HalfAndHalf, 0, 0).is_err());
        assert!(BatchSampler::new(10, 10, 7, SamplerMode::LabeledOnly, 0, 0).is_ok());
    }

    #[test]
    fn short_final_batch_when_not_dropping() {
        let s = BatchSampler {
            drop_last: false,
            ..BatchSampler::new(70, 500, 20, SamplerMode::HalfAndHalf, 0, 0).unwrap()
        };
        let b = s.epoch(0);
        assert_eq!(b.len(), 7);
        assert!(b.iter().all(|b| !b.partial));
        let s = BatchSampler {
            drop_last: false,
            ..BatchSampler::new(75, 500, 20, SamplerMode::HalfAndHalf, 0, 0).unwrap()
        };
        let b = s.epoch(0);
        assert_eq!(b.last().unwrap().labeled.len(), 5);
        assert_eq!(b.last().unwrap().unlabeled.len(), 5);
    }
}
