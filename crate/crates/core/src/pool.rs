//! History buffer of generated images, bucketed by class condition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{Image, TissueClass};

#[derive(Debug, Clone)]
pub struct ConditionalImagePool {
    capacity: usize,
    buckets: Vec<Vec<Image>>,
    rng: ChaCha8Rng,
    seed: u64,
    swaps: u64,
    full_queries: u64,
}

/// Everything needed to restore a pool exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolSnapshot {
    pub capacity: usize,
    pub seed: u64,
    pub word_pos: u128,
    pub swaps: u64,
    pub full_queries: u64,
    pub buckets: Vec<Vec<Image>>,
}

impl ConditionalImagePool {
    pub fn new(capacity: usize, seed: u64) -> Self {
        ConditionalImagePool {
            capacity,
            buckets: vec![Vec::new(); TissueClass::COUNT],
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            swaps: 0,
            full_queries: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bucket(&self, class: TissueClass) -> &[Image] {
        &self.buckets[class.index()]
    }

    pub fn bucket_len(&self, class: TissueClass) -> usize {
        self.buckets[class.index()].len()
    }

    /// Fraction of at-capacity queries answered from history.
    pub fn swap_rate(&self) -> Option<f64> {
        (self.full_queries > 0).then(|| self.swaps as f64 / self.full_queries as f64)
    }

    /// Returns one image per fresh item, in order. Below capacity the fresh
    /// image is stored and returned; at capacity it is returned unchanged
    /// with probability 1/2, otherwise a uniformly chosen stored image of the
    /// same class is returned and replaced by the fresh one.
    pub fn query(&mut self, fresh: &[(Image, TissueClass)]) -> Vec<Image> {
        let mut out = Vec::with_capacity(fresh.len());
        for (img, class) in fresh {
            let bucket = &mut self.buckets[class.index()];
            if bucket.len() < self.capacity {
                bucket.push(img.clone());
                out.push(img.clone());
                continue;
            }
            self.full_queries += 1;
            if self.rng.gen::<f64>() < 0.5 {
                out.push(img.clone());
            } else {
                let k = self.rng.gen_range(0..bucket.len());
                out.push(std::mem::replace(&mut bucket[k], img.clone()));
                self.swaps += 1;
            }
        }
        out
    }

    pub fn snapshot(&self) -> PoolSnapshot {
        PoolSnapshot {
            capacity: self.capacity,
            seed: self.seed,
            word_pos: self.rng.get_word_pos(),
            swaps: self.swaps,
            full_queries: self.full_queries,
            buckets: self.buckets.clone(),
        }
    }

    pub fn restore(s: PoolSnapshot) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        rng.set_word_pos(s.word_pos);
        let mut buckets = s.buckets;
        buckets.resize(TissueClass::COUNT, Vec::new());
        ConditionalImagePool {
            capacity: s.capacity,
            buckets,
            rng,
            seed: s.seed,
            swaps: s.swaps,
            full_queries: s.full_queries,
        }
    }
}
