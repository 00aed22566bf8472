//! SplitMix64 (Steele, Lea & Flood), the single seeded source of randomness.
//!
//! State update `s += 0x9E3779B97F4A7C15`, output mixed by
//! `z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9; z = (z ^ (z >> 27)) * 0x94D049BB133111EB;
//! z ^ (z >> 31)`. Uniform doubles take the top 53 bits: `(x >> 11) * 2^-53`.

use crate::linalg::Matrix;
use crate::padic::{Grid, LatticeFunction};

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn lattice_function(&mut self, grid: Grid, lo: f64, hi: f64) -> LatticeFunction {
        let values = (0..grid.cell_count()).map(|_| self.uniform(lo, hi)).collect();
        LatticeFunction::new(grid, values).expect("finite uniform samples")
    }

    /// Row-major `size x size` table with entries uniform in `[lo, hi)`.
    pub fn table(&mut self, size: usize, lo: f64, hi: f64) -> Matrix {
        Matrix::from_fn(size, |_, _| self.uniform(lo, hi))
    }

    /// Symmetric table; the upper triangle is drawn row by row and mirrored.
    pub fn symmetric_table(&mut self, size: usize, lo: f64, hi: f64) -> Matrix {
        let mut m = Matrix::zeros(size);
        for i in 0..size {
            for j in i..size {
                let v = self.uniform(lo, hi);
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        m
    }
}
