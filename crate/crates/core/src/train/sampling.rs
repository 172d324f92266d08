use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, Result};

/// Replicates every class to the size of the largest one.
///
/// A class with `n` samples contributes `max / n` full copies plus
/// `max % n` of its samples picked by a seeded shuffle; the combined list
/// is then shuffled with the same seed.
pub fn oversample_indices(labels: &[usize], seed: u64) -> Result<Vec<usize>> {
    if labels.is_empty() {
        return Err(contract_err!("cannot oversample an empty label list"));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let max = by_class.values().map(Vec::len).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(max * by_class.len());
    for members in by_class.values() {
        for _ in 0..max / members.len() {
            out.extend_from_slice(members);
        }
        let mut extra = members.clone();
        extra.shuffle(&mut rng);
        out.extend_from_slice(&extra[..max % members.len()]);
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Endless stream of mini-batch indices, reshuffled every epoch.
#[derive(Debug, Clone)]
pub struct Sampler {
    labels: Vec<usize>,
    oversample: bool,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    pub fn new(labels: &[usize], oversample: bool, seed: u64) -> Result<Self> {
        if labels.is_empty() {
            return Err(contract_err!("cannot sample from an empty dataset"));
        }
        let mut s = Self {
            labels: labels.to_vec(),
            oversample,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.refill()?;
        Ok(s)
    }

    fn refill(&mut self) -> Result<()> {
        let epoch_seed = self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(self.epoch);
        self.order = if self.oversample {
            oversample_indices(&self.labels, epoch_seed)?
        } else {
            let mut order: Vec<usize> = (0..self.labels.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
            order
        };
        self.epoch += 1;
        self.pos = 0;
        Ok(())
    }

    pub fn next_batch(&mut self, size: usize) -> Result<Vec<usize>> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.pos == self.order.len() {
                self.refill()?;
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        Ok(batch)
    }
}
