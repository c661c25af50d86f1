use rand::seq::index::sample;
use rand::Rng;

use crate::error::{MhdError, Result};
use crate::federation::topology::Graph;
use crate::nn::{checkpoint, ClientModel};

/// A foreign model received by value.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub source: usize,
    pub step: usize,
    pub model: ClientModel,
    pub wire_bytes: usize,
}

/// Rolling store of at most `capacity` foreign snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointPool {
    pub owner: usize,
    pub capacity: usize,
    pub interval: usize,
    pub entries: Vec<PoolEntry>,
}

impl CheckpointPool {
    pub fn new(owner: usize, capacity: usize, interval: usize) -> Self {
        Self { owner, capacity, interval, entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Pulls one snapshot from a uniformly chosen out-neighbor. Appends until
    /// full, then replaces a uniformly chosen entry. Returns the bytes
    /// transferred, or `None` if the owner has no out-neighbors.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        graph: &Graph,
        snapshots: &[Vec<u8>],
        step: usize,
        rng: &mut R,
    ) -> Result<Option<usize>> {
        if self.interval == 0 || !step.is_multiple_of(self.interval) {
            return Err(MhdError::Input(format!(
                "pool update at step {step} is off the {}-step cadence",
                self.interval
            )));
        }
        let neighbors = graph.out_neighbors(self.owner);
        if neighbors.is_empty() || self.capacity == 0 {
            return Ok(None);
        }
        let source = neighbors[rng.random_range(0..neighbors.len())];
        let bytes = &snapshots[source];
        let entry = PoolEntry { source, step, model: checkpoint::decode(bytes)?, wire_bytes: bytes.len() };
        if self.entries.len() < self.capacity {
            self.entries.push(entry);
        } else {
            let slot = rng.random_range(0..self.entries.len());
            self.entries[slot] = entry;
        }
        Ok(Some(bytes.len()))
    }

    /// Up to `delta` distinct entries, uniformly without replacement.
    pub fn sample_teachers<R: Rng + ?Sized>(&self, delta: usize, rng: &mut R) -> Vec<&PoolEntry> {
        let n = delta.min(self.entries.len());
        if n == 0 {
            return Vec::new();
        }
        sample(rng, self.entries.len(), n).into_iter().map(|i| &self.entries[i]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::topology::{TopologyKind, TopologySpec};
    use crate::nn::Architecture;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn snapshots(k: usize) -> Vec<Vec<u8>> {
        let arch = Architecture { input_dim: 2, hidden: vec![], embedding_dim: 2, num_classes: 2, num_aux_heads: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        (0..k).map(|i| checkpoint::encode(&ClientModel::init(&arch, i, &mut rng).unwrap())).collect()
    }

    #[test]
    fn capacity_one_holds_latest_snapshot() {
        let g = TopologySpec::of(TopologyKind::Complete).build(3, 0, 0).unwrap();
        let snaps = snapshots(3);
        let mut pool = CheckpointPool::new(0, 1, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for step in [5, 10, 15, 20] {
            pool.update(&g, &snaps, step, &mut rng).unwrap();
            assert_eq!(pool.len(), 1);
            assert_eq!(pool.entries[0].step, step);
        }
    }

    #[test]
    fn complete_graph_pool_never_holds_owner() {
        let g = TopologySpec::of(TopologyKind::Complete).build(8, 0, 0).unwrap();
        let snaps = snapshots(8);
        let mut pool = CheckpointPool::new(3, 8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for step in 1..200 {
            pool.update(&g, &snaps, step, &mut rng).unwrap();
        }
        assert_eq!(pool.len(), 8);
        assert!(pool.entries.iter().all(|e| e.source != 3 && e.model.client_id == e.source));
    }

    #[test]
    fn islands_pool_only_holds_partner() {
        let g = TopologySpec::islands(2).build(4, 0, 0).unwrap();
        let snaps = snapshots(4);
        let mut pool = CheckpointPool::new(2, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for step in 1..30 {
            pool.update(&g, &snaps, step, &mut rng).unwrap();
        }
        assert!(pool.entries.iter().all(|e| e.source == 3));
    }

    #[test]
    fn isolated_owner_keeps_empty_pool() {
        let g = TopologySpec::of(TopologyKind::Chain).build(3, 0, 0).unwrap();
        let mut pool = CheckpointPool::new(2, 4, 1);
        let r = pool.update(&g, &snapshots(3), 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(r, None);
        assert!(pool.is_empty());
    }

    #[test]
    fn off_cadence_update_is_rejected() {
        let g = TopologySpec::of(TopologyKind::Complete).build(2, 0, 0).unwrap();
        let mut pool = CheckpointPool::new(0, 1, 5);
        assert!(pool.update(&g, &snapshots(2), 7, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn teacher_sampling_sizes_and_uniformity() {
        let g = TopologySpec::of(TopologyKind::Complete).build(5, 0, 0).unwrap();
        let snaps = snapshots(5);
        let mut pool = CheckpointPool::new(0, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(pool.sample_teachers(2, &mut rng).is_empty());
        for step in 1..=4 {
            pool.update(&g, &snaps, step, &mut rng).unwrap();
        }
        let all = pool.sample_teachers(4, &mut rng);
        let mut steps: Vec<usize> = all.iter().map(|e| e.step).collect();
        steps.sort_unstable();
        assert_eq!(steps, vec![1, 2, 3, 4]);
        assert_eq!(pool.sample_teachers(10, &mut rng).len(), 4);

        let draws = 40_000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            let e = pool.sample_teachers(1, &mut rng)[0];
            counts[e.step - 1] += 1;
        }
        let expected = draws as f64 / 4.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 3 degrees of freedom, p = 0.001.
        assert!(chi2 < 16.27, "chi2 = {chi2}");
    }
}
