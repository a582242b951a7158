use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Sample indices and the shared view count of one minibatch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub items: Vec<usize>,
    pub views: usize,
}

/// Endless stream of minibatches: each draws one length uniformly from
/// `view_range` and `batch_size` samples with replacement.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    samples: usize,
    batch_size: usize,
    view_range: (usize, usize),
}

impl BatchSampler {
    /// `view_counts[n]` is the number of stored views of sample `n`.
    pub fn new(view_counts: &[usize], batch_size: usize, view_range: (usize, usize), rng: ChaCha8Rng) -> Result<Self> {
        let (lo, hi) = view_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("view range [{lo}, {hi}] is invalid")));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if view_counts.is_empty() {
            return Err(Error::Data("no training samples".into()));
        }
        if let Some((n, &c)) = view_counts.iter().enumerate().find(|(_, &c)| c < hi) {
            return Err(Error::Data(format!(
                "sample {n} has {c} views but minibatches may request up to {hi}"
            )));
        }
        Ok(BatchSampler {
            rng,
            samples: view_counts.len(),
            batch_size,
            view_range,
        })
    }

    pub fn next_batch(&mut self) -> Batch {
        let views = self.rng.gen_range(self.view_range.0..=self.view_range.1);
        let items = (0..self.batch_size)
            .map(|_| self.rng.gen_range(0..self.samples))
            .collect();
        Batch { items, views }
    }

    /// Discard `n` batches, replaying the stream after a resume.
    pub fn skip(&mut self, n: u64) {
        for _ in 0..n {
            self.next_batch();
        }
    }
}

/// The first `count` minibatches of a seeded stream.
pub fn make_batches(
    view_counts: &[usize],
    batch_size: usize,
    view_range: (usize, usize),
    rng: ChaCha8Rng,
    count: usize,
) -> Result<Vec<Batch>> {
    let mut s = BatchSampler::new(view_counts, batch_size, view_range, rng)?;
    Ok((0..count).map(|_| s.next_batch()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn single_view_range() {
        let b = make_batches(&[3; 5], 4, (1, 1), ChaCha8Rng::seed_from_u64(1), 50).unwrap();
        assert!(b.iter().all(|b| b.views == 1 && b.items.len() == 4));
    }

    #[test]
    fn lengths_are_uniform() {
        let b = make_batches(&[5; 10], 2, (1, 5), ChaCha8Rng::seed_from_u64(2), 1000).unwrap();
        for len in 1..=5 {
            let f = b.iter().filter(|b| b.views == len).count() as f64 / 1000.0;
            assert!((f - 0.2).abs() <= 0.05, "length {len}: {f}");
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let a = make_batches(&[5; 10], 3, (1, 5), ChaCha8Rng::seed_from_u64(3), 20).unwrap();
        let b = make_batches(&[5; 10], 3, (1, 5), ChaCha8Rng::seed_from_u64(3), 20).unwrap();
        assert_eq!(a, b);
        let mut s = BatchSampler::new(&[5; 10], 3, (1, 5), ChaCha8Rng::seed_from_u64(3)).unwrap();
        s.skip(7);
        assert_eq!(s.next_batch(), a[7]);
    }

    #[test]
    fn short_samples_rejected() {
        assert!(BatchSampler::new(&[5, 2], 1, (1, 3), ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(BatchSampler::new(&[5], 1, (0, 3), ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(BatchSampler::new(&[5], 1, (4, 3), ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
