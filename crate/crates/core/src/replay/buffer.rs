use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sum_tree::{SumTree, PRIORITY_FLOOR};
use crate::agents::Batch;
use crate::envs::Transition;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Offline,
    Online,
}

/// How fine-tuning minibatches are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    /// Proportional to density-ratio priorities.
    Balanced,
    /// Uniform over offline and online data together.
    Uniform,
    /// Uniform over online data only.
    OnlineOnly,
}

impl SamplingStrategy {
    pub const ALL: [SamplingStrategy; 3] = [SamplingStrategy::Balanced, SamplingStrategy::Uniform, SamplingStrategy::OnlineOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            SamplingStrategy::Balanced => "balanced",
            SamplingStrategy::Uniform => "uniform",
            SamplingStrategy::OnlineOnly => "online_only",
        }
    }
}

impl fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SamplingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SamplingStrategy::ALL
            .into_iter()
            .find(|v| v.as_str() == s.replace('-', "_"))
            .ok_or_else(|| Error::config("sampling_strategy", format!("unknown strategy `{s}` (balanced, uniform, online_only)")))
    }
}

/// `P₀ = (M / 1000) · ρ / (1 − ρ)`: after 1000 online inserts at `P₀`, the
/// online share of the total priority mass is exactly `ρ`.
pub fn default_priority(offline_size: usize, rho: f64) -> Result<f64> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::config("rho", "must lie strictly between 0 and 1"));
    }
    Ok(offline_size as f64 / 1000.0 * rho / (1.0 - rho))
}

#[derive(Clone, Debug)]
pub struct SampledBatch {
    pub indices: Vec<usize>,
    pub batch: Batch,
    pub offline_count: usize,
}

impl SampledBatch {
    pub fn offline_fraction(&self) -> f64 {
        self.offline_count as f64 / self.indices.len() as f64
    }
}

/// Offline and online transitions in one priority structure.
#[derive(Clone, Debug)]
pub struct PriorityBuffer {
    storage: Vec<Transition>,
    origin: Vec<Origin>,
    online_slots: Vec<usize>,
    tree: SumTree,
    p0: f64,
    capacity: usize,
    evictions: usize,
}

impl PriorityBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("buffer.capacity", "must be positive"));
        }
        Ok(PriorityBuffer {
            storage: Vec::new(),
            origin: Vec::new(),
            online_slots: Vec::new(),
            tree: SumTree::with_capacity(capacity),
            p0: 1.0,
            capacity,
            evictions: 0,
        })
    }

    /// Inserts the offline data at priority 1, then raises `p₀` to `P₀`.
    pub fn init_priorities(&mut self, offline: &[Transition], rho: f64) -> Result<()> {
        if !self.storage.is_empty() {
            return Err(Error::Contract("init_priorities needs an empty buffer".into()));
        }
        if offline.len() > self.capacity {
            return Err(Error::config("buffer.capacity", format!("{} offline transitions exceed capacity {}", offline.len(), self.capacity)));
        }
        let p0 = default_priority(offline.len(), rho)?;
        self.p0 = 1.0;
        for t in offline {
            self.storage.push(t.clone());
            self.origin.push(Origin::Offline);
            self.tree.push(self.p0);
        }
        self.p0 = p0.max(PRIORITY_FLOOR);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn online_len(&self) -> usize {
        self.online_slots.len()
    }

    pub fn offline_len(&self) -> usize {
        self.len() - self.online_len()
    }

    pub fn default_priority(&self) -> f64 {
        self.p0
    }

    pub fn total_priority(&self) -> f64 {
        self.tree.total()
    }

    pub fn priority(&self, index: usize) -> f64 {
        self.tree.get(index)
    }

    pub fn origin(&self, index: usize) -> Origin {
        self.origin[index]
    }

    pub fn get(&self, index: usize) -> &Transition {
        &self.storage[index]
    }

    pub fn evictions(&self) -> usize {
        self.evictions
    }

    /// Share of total priority mass held by online entries.
    pub fn online_mass(&self) -> f64 {
        let online: f64 = self.online_slots.iter().fold(0.0, |acc, &i| acc + self.tree.get(i));
        online / self.tree.total()
    }

    /// Stores an online transition at the current `p₀`. A full buffer evicts
    /// its lowest-priority offline entry (or lowest online entry once no
    /// offline data remains) and reuses the slot.
    pub fn insert_online(&mut self, t: Transition) -> usize {
        if self.storage.len() < self.capacity {
            self.storage.push(t);
            self.origin.push(Origin::Online);
            let i = self.tree.push(self.p0);
            self.online_slots.push(i);
            return i;
        }
        let leaves = self.tree.leaves();
        let pick = |want: Origin| {
            (0..leaves.len())
                .filter(|&i| self.origin[i] == want)
                .min_by(|&a, &b| leaves[a].total_cmp(&leaves[b]))
        };
        let slot = pick(Origin::Offline).or_else(|| pick(Origin::Online)).expect("full buffer has entries");
        if self.origin[slot] == Origin::Offline {
            self.online_slots.push(slot);
        }
        self.storage[slot] = t;
        self.origin[slot] = Origin::Online;
        self.tree.set(slot, self.p0);
        self.evictions += 1;
        slot
    }

    pub fn sample<R: Rng + ?Sized>(&self, size: usize, strategy: SamplingStrategy, rng: &mut R) -> Result<SampledBatch> {
        if self.is_empty() || size == 0 {
            return Err(Error::Contract("sampling needs a nonempty buffer and batch".into()));
        }
        let indices: Vec<usize> = match strategy {
            SamplingStrategy::Balanced => (0..size).map(|_| self.tree.sample(rng)).collect(),
            SamplingStrategy::Uniform => (0..size).map(|_| rng.random_range(0..self.len())).collect(),
            SamplingStrategy::OnlineOnly => {
                if self.online_slots.is_empty() {
                    return Err(Error::Contract("online-only sampling before any online data".into()));
                }
                (0..size)
                    .map(|_| self.online_slots[rng.random_range(0..self.online_slots.len())])
                    .collect()
            }
        };
        self.gather(indices)
    }

    /// Uniform draw restricted to offline entries (density-ratio denominator).
    pub fn sample_offline<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<SampledBatch> {
        let offline = self.offline_len();
        if offline == 0 {
            return Err(Error::Contract("no offline data left".into()));
        }
        let indices = if self.evictions == 0 {
            // Offline data occupy the first slots until something is evicted.
            (0..size).map(|_| rng.random_range(0..offline)).collect()
        } else {
            let slots: Vec<usize> = (0..self.len()).filter(|&i| self.origin[i] == Origin::Offline).collect();
            (0..size).map(|_| slots[rng.random_range(0..slots.len())]).collect()
        };
        self.gather(indices)
    }

    fn gather(&self, indices: Vec<usize>) -> Result<SampledBatch> {
        let batch = Batch::from_transitions(indices.iter().map(|&i| &self.storage[i]))?;
        let offline_count = indices.iter().filter(|&&i| self.origin[i] == Origin::Offline).count();
        Ok(SampledBatch {
            indices,
            batch,
            offline_count,
        })
    }

    /// Writes new priorities for sampled leaves, then `p₀ ← max(p₀, max w̃)`.
    pub fn update_priorities(&mut self, indices: &[usize], priorities: &[f64]) -> Result<()> {
        if indices.len() != priorities.len() {
            return Err(Error::DimensionMismatch {
                context: "update_priorities",
                expected: indices.len(),
                got: priorities.len(),
            });
        }
        let mut top = self.p0;
        for (&i, &p) in indices.iter().zip(priorities) {
            if i >= self.len() {
                return Err(Error::Contract(format!("priority index {i} beyond buffer length {}", self.len())));
            }
            if !(p.is_finite() && p >= 0.0) {
                return Err(Error::Divergence(format!("priority {p} for leaf {i}")));
            }
            self.tree.set(i, p);
            top = top.max(p);
        }
        self.p0 = top;
        Ok(())
    }

    pub fn rebuild(&mut self) {
        self.tree.rebuild();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(x: f64) -> Transition {
        Transition {
            state: vec![x],
            action: vec![0.0],
            reward: x,
            next_state: vec![x],
            done: false,
        }
    }

    #[test]
    fn default_priority_formula() {
        assert_eq!(default_priority(1_000_000, 0.5).unwrap(), 1000.0);
        assert!((default_priority(1_000_000, 0.75).unwrap() - 3000.0).abs() < 1e-9);
        assert!(default_priority(10, 1.0).is_err());
    }

    #[test]
    fn fresh_buffer_samples_offline_uniformly() {
        let offline: Vec<Transition> = (0..8).map(|i| tr(i as f64)).collect();
        let mut buf = PriorityBuffer::new(16).unwrap();
        buf.init_priorities(&offline, 0.5).unwrap();
        assert!(buf.tree.leaves().iter().all(|&p| p == 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = buf.sample(80_000, SamplingStrategy::Balanced, &mut rng).unwrap();
        let mut counts = [0usize; 8];
        for &i in &s.indices {
            counts[i] += 1;
        }
        let e = 10_000.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 18.48, "chi-square {chi2}");
    }

    #[test]
    fn online_inserts_reach_rho_mass() {
        let m = 100_000;
        let offline: Vec<Transition> = (0..m).map(|i| tr(i as f64)).collect();
        let mut buf = PriorityBuffer::new(m + 1000).unwrap();
        buf.init_priorities(&offline, 0.5).unwrap();
        assert_eq!(buf.default_priority(), 100.0);
        let before = buf.total_priority();
        buf.insert_online(tr(-1.0));
        assert!((buf.total_priority() - before - 100.0).abs() < 1e-9);
        for _ in 1..1000 {
            buf.insert_online(tr(-1.0));
        }
        assert!((buf.online_mass() - 0.5).abs() < 1e-9, "{}", buf.online_mass());
    }

    #[test]
    fn updates_raise_default_priority_and_move_the_root() {
        let offline: Vec<Transition> = (0..4).map(|i| tr(i as f64)).collect();
        let mut buf = PriorityBuffer::new(8).unwrap();
        buf.init_priorities(&offline, 0.5).unwrap();
        buf.update_priorities(&[2], &[2.5]).unwrap();
        assert_eq!(buf.total_priority(), 5.5);
        buf.p0 = 1000.0;
        buf.update_priorities(&[0, 1], &[5000.0, 3.0]).unwrap();
        assert_eq!(buf.default_priority(), 5000.0);
        buf.update_priorities(&[0], &[1.0]).unwrap();
        assert_eq!(buf.default_priority(), 5000.0);
        buf.update_priorities(&[3], &[0.0]).unwrap();
        assert_eq!(buf.priority(3), PRIORITY_FLOOR);
        assert!(buf.update_priorities(&[3], &[f64::NAN]).is_err());
    }

    #[test]
    fn full_buffer_evicts_lowest_offline_entry() {
        let offline: Vec<Transition> = (0..4).map(|i| tr(i as f64)).collect();
        let mut buf = PriorityBuffer::new(4).unwrap();
        buf.init_priorities(&offline, 0.5).unwrap();
        buf.update_priorities(&[0, 1, 2, 3], &[3.0, 0.5, 2.0, 4.0]).unwrap();
        let slot = buf.insert_online(tr(9.0));
        assert_eq!(slot, 1);
        assert_eq!(buf.origin(1), Origin::Online);
        assert_eq!(buf.get(1).reward, 9.0);
        assert_eq!(buf.online_len(), 1);
        assert_eq!(buf.offline_len(), 3);
        let o = buf.sample_offline(100, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(o.indices.iter().all(|&i| i != 1));
    }

    #[test]
    fn strategies_respect_origin() {
        let offline: Vec<Transition> = (0..50).map(|i| tr(i as f64)).collect();
        let mut buf = PriorityBuffer::new(100).unwrap();
        buf.init_priorities(&offline, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(buf.sample(4, SamplingStrategy::OnlineOnly, &mut rng).is_err());
        for _ in 0..5 {
            buf.insert_online(tr(-1.0));
        }
        let s = buf.sample(64, SamplingStrategy::OnlineOnly, &mut rng).unwrap();
        assert_eq!(s.offline_count, 0);
        let s = buf.sample(2000, SamplingStrategy::Uniform, &mut rng).unwrap();
        let frac = s.offline_fraction();
        assert!((frac - 50.0 / 55.0).abs() < 0.03, "{frac}");
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in SamplingStrategy::ALL {
            assert_eq!(s.as_str().parse::<SamplingStrategy>().unwrap(), s);
        }
        assert_eq!("online-only".parse::<SamplingStrategy>().unwrap(), SamplingStrategy::OnlineOnly);
        assert!("greedy".parse::<SamplingStrategy>().is_err());
    }

    #[test]
    fn unit_ratios_reduce_balanced_to_uniform() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        // M = 1000 and rho = 0.5 give P0 = 1, so every leaf starts equal.
        let mut buf = PriorityBuffer::new(2000).unwrap();
        let offline: Vec<_> = (0..1000).map(|i| tr(i as f64)).collect();
        buf.init_priorities(&offline, 0.5).unwrap();
        assert_eq!(buf.default_priority(), 1.0);
        for i in 0..1000 {
            buf.insert_online(tr(-(i as f64)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [[0.0f64; 2]; 2];
        for _ in 0..200 {
            let b = buf.sample(100, SamplingStrategy::Balanced, &mut rng).unwrap();
            buf.update_priorities(&b.indices, &vec![1.0; b.indices.len()]).unwrap();
            counts[0][0] += b.offline_count as f64;
            counts[0][1] += (100 - b.offline_count) as f64;
            let u = buf.sample(100, SamplingStrategy::Uniform, &mut rng).unwrap();
            counts[1][0] += u.offline_count as f64;
            counts[1][1] += (100 - u.offline_count) as f64;
        }
        assert_eq!(buf.default_priority(), 1.0);
        let total: f64 = counts.iter().flatten().sum();
        let mut stat = 0.0;
        for r in 0..2 {
            for c in 0..2 {
                let expected = (counts[r][0] + counts[r][1]) * (counts[0][c] + counts[1][c]) / total;
                stat += (counts[r][c] - expected).powi(2) / expected;
            }
        }
        let p = 1.0 - ChiSquared::new(1.0).unwrap().cdf(stat);
        assert!(p > 0.01, "chi-square {stat}, p = {p}");
    }
}
