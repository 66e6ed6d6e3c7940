//! Count-min sketch over 64-bit keys.

use serde::{Deserialize, Serialize};

use crate::hashing::{hash_bytes, mix64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountMinSketch {
    rows: usize,
    cols: usize,
    seed: u64,
    table: Vec<u64>,
}

impl CountMinSketch {
    /// # Panics
    /// If `rows` or `cols` is zero.
    pub fn new(rows: usize, cols: usize, seed: u64) -> Self {
        assert!(
            rows > 0 && cols > 0,
            "count-min sketch needs rows, cols > 0"
        );
        Self {
            rows,
            cols,
            seed,
            table: vec![0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    fn cell(&self, row: usize, key: u64) -> usize {
        let h = hash_bytes(self.seed, row as u64, &mix64(key).to_le_bytes());
        row * self.cols + (h % self.cols as u64) as usize
    }

    pub fn insert(&mut self, key: u64) {
        self.add(key, 1);
    }

    pub fn add(&mut self, key: u64, n: u64) {
        for r in 0..self.rows {
            let c = self.cell(r, key);
            self.table[c] += n;
        }
    }

    /// Minimum over the hashed cells; never below the true count.
    pub fn count(&self, key: u64) -> u64 {
        (0..self.rows)
            .map(|r| self.table[self.cell(r, key)])
            .min()
            .unwrap_or(0)
    }

    /// Total number of insertions (every row sums to it).
    pub fn total(&self) -> u64 {
        self.table[..self.cols].iter().sum()
    }
}
