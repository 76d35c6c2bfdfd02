use rand::Rng;
use serde::{Deserialize, Serialize};

/// Smallest priority a leaf may hold.
pub const PRIORITY_FLOOR: f64 = 1e-8;

/// Array-backed binary tree of leaf priorities; each internal node stores the
/// sum of its two children. Unused leaves hold zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SumTree {
    leaves: usize,
    len: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn with_capacity(capacity: usize) -> Self {
        let leaves = capacity.max(1).next_power_of_two();
        SumTree {
            leaves,
            len: 0,
            nodes: vec![0.0; 2 * leaves],
        }
    }

    pub fn capacity(&self) -> usize {
        self.leaves
    }

    /// Number of leaves ever written (indices `0..len` are live).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, index: usize) -> f64 {
        self.nodes[self.leaves + index]
    }

    /// Sets a leaf (floored at [`PRIORITY_FLOOR`]) and recomputes its ancestors
    /// from their children, so rounding never accumulates along a path.
    pub fn set(&mut self, index: usize, priority: f64) {
        assert!(index < self.leaves, "leaf {index} out of range");
        assert!(!priority.is_nan(), "NaN priority");
        let mut node = self.leaves + index;
        self.nodes[node] = priority.max(PRIORITY_FLOOR);
        self.len = self.len.max(index + 1);
        while node > 1 {
            node /= 2;
            self.nodes[node] = self.nodes[2 * node] + self.nodes[2 * node + 1];
        }
    }

    pub fn push(&mut self, priority: f64) -> usize {
        assert!(self.len < self.leaves, "sum tree is full");
        let i = self.len;
        self.set(i, priority);
        i
    }

    /// Recomputes every internal node bottom-up.
    pub fn rebuild(&mut self) {
        for node in (1..self.leaves).rev() {
            self.nodes[node] = self.nodes[2 * node] + self.nodes[2 * node + 1];
        }
    }

    /// Leaf whose cumulative interval contains `mass ∈ [0, total)`.
    pub fn find(&self, mass: f64) -> usize {
        let mut mass = mass.max(0.0);
        let mut node = 1;
        while node < self.leaves {
            let left = self.nodes[2 * node];
            if mass < left || self.nodes[2 * node + 1] <= 0.0 {
                node *= 2;
            } else {
                mass -= left;
                node = 2 * node + 1;
            }
        }
        let leaf = node - self.leaves;
        // Rounding can walk past the last live leaf; fall back to it.
        if leaf >= self.len {
            self.len - 1
        } else {
            leaf
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        assert!(!self.is_empty(), "sampling from an empty tree");
        self.find(rng.random::<f64>() * self.total())
    }

    pub fn leaves(&self) -> &[f64] {
        &self.nodes[self.leaves..self.leaves + self.len]
    }
}
