use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::LabelSet;
use crate::error::{Error, Result};

/// Largest allowed ratio between the most and least sampled class.
pub const MAX_CLASS_RATIO: f64 = 5.0;

/// Endless cycle over one group's clips, reshuffled on every wrap.
#[derive(Debug, Clone)]
struct Cycle {
    order: Vec<usize>,
    pos: usize,
}

impl Cycle {
    fn peek(&self) -> usize {
        self.order[self.pos]
    }

    fn advance(&mut self, rng: &mut ChaCha8Rng) {
        self.pos += 1;
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
    }
}

/// Class-balanced mini-batch stream over clip indices of a [`LabelSet`].
///
/// Every class (plus one group of untagged clips, if any) gets a target
/// share proportional to `min(5 * min_count, count)`. Slots go to the group
/// furthest behind its share, unless taking it would push the running
/// per-class counts past [`MAX_CLASS_RATIO`].
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    tags: Vec<Vec<bool>>,
    batch_size: usize,
    groups: Vec<Cycle>,
    shares: Vec<f64>,
    assigned: Vec<u64>,
    class_counts: Vec<u64>,
    slots: u64,
    rng: ChaCha8Rng,
}

pub fn balanced_batch_sampler(
    labels: &LabelSet,
    batch_size: usize,
    seed: u64,
) -> Result<BalancedSampler> {
    BalancedSampler::new(labels, batch_size, seed)
}

impl BalancedSampler {
    pub fn new(labels: &LabelSet, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Argument("batch size must be positive".into()));
        }
        let k = labels.classes();
        if labels.is_empty() || k == 0 {
            return Err(Error::Config(
                "cannot sample from an empty label set".into(),
            ));
        }
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); k + 1];
        for (i, tags) in labels.tags().iter().enumerate() {
            let mut any = false;
            for (c, _) in tags.iter().enumerate().filter(|(_, &t)| t) {
                members[c].push(i);
                any = true;
            }
            if !any {
                members[k].push(i);
            }
        }
        if let Some(c) = members[..k].iter().position(Vec::is_empty) {
            return Err(Error::Config(format!("class {c} has no clips")));
        }
        if members[k].is_empty() {
            members.pop();
        }
        let min_count = members[..k].iter().map(Vec::len).min().unwrap_or(1);
        let cap = MAX_CLASS_RATIO * min_count as f64;
        let raw: Vec<f64> = members.iter().map(|m| (m.len() as f64).min(cap)).collect();
        let total: f64 = raw.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = members
            .into_iter()
            .map(|mut order| {
                order.shuffle(&mut rng);
                Cycle { order, pos: 0 }
            })
            .collect::<Vec<_>>();
        Ok(Self {
            tags: labels.tags().to_vec(),
            batch_size,
            assigned: vec![0; groups.len()],
            shares: raw.iter().map(|r| r / total).collect(),
            groups,
            class_counts: vec![0; k],
            slots: 0,
            rng,
        })
    }

    /// Target fraction of slots per group (classes first, then untagged).
    pub fn shares(&self) -> &[f64] {
        &self.shares
    }

    /// Tag counts of every clip emitted so far.
    pub fn class_counts(&self) -> &[u64] {
        &self.class_counts
    }

    fn ratio_ok_after(&self, clip: usize) -> bool {
        let counts = self
            .class_counts
            .iter()
            .zip(&self.tags[clip])
            .map(|(&c, &t)| c + t as u64);
        let (mut lo, mut hi) = (u64::MAX, 0);
        for c in counts {
            lo = lo.min(c);
            hi = hi.max(c);
        }
        lo == 0 || hi as f64 <= MAX_CLASS_RATIO * lo as f64
    }

    fn pick_group(&self) -> usize {
        let target = (self.slots + 1) as f64;
        let mut order: Vec<usize> = (0..self.groups.len()).collect();
        let deficit = |g: usize| self.shares[g] * target - self.assigned[g] as f64;
        order.sort_by(|&a, &b| deficit(b).total_cmp(&deficit(a)).then(a.cmp(&b)));
        if let Some(&g) = order
            .iter()
            .find(|&&g| self.ratio_ok_after(self.groups[g].peek()))
        {
            return g;
        }
        // Nothing keeps the ratio; feed the rarest class.
        let k = self.class_counts.len();
        (0..k)
            .min_by_key(|&c| (self.class_counts[c], c))
            .unwrap_or(0)
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let g = self.pick_group();
            let clip = self.groups[g].peek();
            self.groups[g].advance(&mut self.rng);
            self.assigned[g] += 1;
            self.slots += 1;
            for (c, &t) in self.class_counts.iter_mut().zip(&self.tags[clip]) {
                *c += t as u64;
            }
            batch.push(clip);
        }
        batch
    }
}

impl Iterator for BalancedSampler {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn imbalanced(a: usize, b: usize) -> LabelSet {
        let mut entries = Vec::new();
        for i in 0..a {
            entries.push((format!("a{i}"), vec![true, false]));
        }
        for i in 0..b {
            entries.push((format!("b{i}"), vec![false, true]));
        }
        LabelSet::new(entries).unwrap()
    }

    fn tally(labels: &LabelSet, batches: &[Vec<usize>]) -> Vec<usize> {
        let mut counts = vec![0; labels.classes()];
        for &i in batches.iter().flatten() {
            for (c, &t) in counts.iter_mut().zip(&labels.tags()[i]) {
                *c += t as usize;
            }
        }
        counts
    }

    #[test]
    fn heavy_imbalance_is_capped() {
        let labels = imbalanced(1000, 10);
        for batch in [8, 32, 64] {
            let s = balanced_batch_sampler(&labels, batch, 3).unwrap();
            let batches: Vec<_> = s.take(100).collect();
            let counts = tally(&labels, &batches);
            let ratio = *counts.iter().max().unwrap() as f64 / *counts.iter().min().unwrap() as f64;
            assert!(ratio <= 5.0, "batch {batch}: {counts:?}");
            assert!(ratio > 4.0, "balancing should not overshoot: {counts:?}");
        }
    }

    #[test]
    fn balanced_input_stays_balanced() {
        let labels = imbalanced(50, 50);
        let batches: Vec<_> = balanced_batch_sampler(&labels, 16, 1)
            .unwrap()
            .take(100)
            .collect();
        let counts = tally(&labels, &batches);
        assert_eq!(counts[0], counts[1]);
    }

    #[test]
    fn deterministic_per_seed() {
        let labels = imbalanced(30, 7);
        let a: Vec<_> = balanced_batch_sampler(&labels, 5, 9)
            .unwrap()
            .take(20)
            .collect();
        let b: Vec<_> = balanced_batch_sampler(&labels, 5, 9)
            .unwrap()
            .take(20)
            .collect();
        let c: Vec<_> = balanced_batch_sampler(&labels, 5, 10)
            .unwrap()
            .take(20)
            .collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn empty_class_rejected() {
        let labels = LabelSet::new(vec![("x".into(), vec![true, false])]).unwrap();
        assert!(matches!(
            balanced_batch_sampler(&labels, 4, 0),
            Err(Error::Config(_))
        ));
        assert!(balanced_batch_sampler(&imbalanced(2, 2), 0, 0).is_err());
    }

    #[test]
    fn untagged_clips_are_sampled() {
        let mut entries = vec![("q".to_string(), vec![false, false])];
        entries.push(("a".into(), vec![true, false]));
        entries.push(("b".into(), vec![false, true]));
        let labels = LabelSet::new(entries).unwrap();
        let seen: Vec<usize> = balanced_batch_sampler(&labels, 3, 0)
            .unwrap()
            .take(10)
            .flatten()
            .collect();
        assert!(seen.contains(&0));
    }

    proptest! {
        #[test]
        fn every_clip_reachable_and_in_range(
            tags in prop::collection::vec(prop::collection::vec(any::<bool>(), 3), 3..30),
            seed in 0u64..50,
        ) {
            let mut entries: Vec<(String, Vec<bool>)> = tags
                .into_iter()
                .enumerate()
                .map(|(i, t)| (format!("c{i}"), t))
                .collect();
            for k in 0..3 {
                let mut t = vec![false; 3];
                t[k] = true;
                entries.push((format!("s{k}"), t));
            }
            let n = entries.len();
            let labels = LabelSet::new(entries).unwrap();
            let seen: Vec<usize> = balanced_batch_sampler(&labels, 4, seed)
                .unwrap()
                .take(400)
                .flatten()
                .collect();
            prop_assert!(seen.iter().all(|&i| i < n));
            for i in 0..n {
                prop_assert!(seen.contains(&i), "clip {} never sampled", i);
            }
        }
    }
}
