//! Truncated p-adic lattice.
//!
//! The domain is the ball of radius `p^M` in each coordinate of `Q_p^n`,
//! partitioned into balls of radius `p^-m`. A cell is identified by one
//! residue per axis in `[0, p^(M+m))`; its representative coordinate is
//! `residue * p^-M`. Subtraction of representatives is subtraction of
//! residues modulo `p^(M+m)`, so kernel arguments carry no rounding.
//!
//! Haar measure is normalised so that `Z_p^n` has measure one, giving each
//! cell the measure `p^(-m n)`.

use crate::error::{Error, Result};

/// Default upper bound on `cell_count`.
pub const DEFAULT_MAX_CELLS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    p: u64,
    dim: usize,
    outer: u32,
    inner: u32,
    cells_per_axis: u64,
    cell_count: usize,
    cell_measure: f64,
}

impl Grid {
    pub fn new(p: u64, dim: usize, outer: u32, inner: u32) -> Result<Self> {
        build_grid(p, dim, outer, inner, DEFAULT_MAX_CELLS)
    }

    pub fn p(&self) -> u64 {
        self.p
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Outer level `M`: the domain is the ball of radius `p^M`.
    pub fn outer_level(&self) -> u32 {
        self.outer
    }

    /// Inner level `m`: cells are balls of radius `p^-m`.
    pub fn inner_level(&self) -> u32 {
        self.inner
    }

    pub fn cells_per_axis(&self) -> u64 {
        self.cells_per_axis
    }

    pub fn cell_count(&self) -> usize {
        self.cell_count
    }

    pub fn cell_measure(&self) -> f64 {
        self.cell_measure
    }

    /// `p^(M n)`.
    pub fn total_measure(&self) -> f64 {
        self.cell_count as f64 * self.cell_measure
    }

    pub fn check_index(&self, index: usize) -> Result<()> {
        if index < self.cell_count {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                index,
                len: self.cell_count,
            })
        }
    }

    /// Per-axis residues of a cell, axis 0 most significant.
    pub fn coords(&self, index: usize) -> Result<CellCoords> {
        self.check_index(index)?;
        let mut residues = vec![0u64; self.dim];
        let mut rest = index as u64;
        for slot in residues.iter_mut().rev() {
            *slot = rest % self.cells_per_axis;
            rest /= self.cells_per_axis;
        }
        Ok(CellCoords { residues })
    }

    /// Inverse of [`Grid::coords`].
    pub fn index(&self, coords: &CellCoords) -> Result<usize> {
        if coords.residues.len() != self.dim {
            return Err(Error::GridMismatch);
        }
        let mut index = 0u64;
        for &r in &coords.residues {
            if r >= self.cells_per_axis {
                return Err(Error::InvalidGrid(format!(
                    "residue {r} outside [0, {})",
                    self.cells_per_axis
                )));
            }
            index = index * self.cells_per_axis + r;
        }
        Ok(index as usize)
    }

    /// Residue-wise `a + b` modulo `p^(M+m)`.
    pub fn add(&self, a: &CellCoords, b: &CellCoords) -> CellCoords {
        let q = self.cells_per_axis;
        CellCoords {
            residues: a
                .residues
                .iter()
                .zip(&b.residues)
                .map(|(&x, &y)| ((x as u128 + y as u128) % q as u128) as u64)
                .collect(),
        }
    }

    /// Residue-wise `a - b` modulo `p^(M+m)`.
    pub fn sub(&self, a: &CellCoords, b: &CellCoords) -> CellCoords {
        let q = self.cells_per_axis;
        CellCoords {
            residues: a
                .residues
                .iter()
                .zip(&b.residues)
                .map(|(&x, &y)| (x + q - y) % q)
                .collect(),
        }
    }

    /// Multiplication by the p-adic scalar `p^l` (norm `p^-l`).
    pub fn scale_by_p_power(&self, c: &CellCoords, l: u32) -> CellCoords {
        let q = self.cells_per_axis as u128;
        let factor = mod_pow(self.p as u128, l, q);
        CellCoords {
            residues: c
                .residues
                .iter()
                .map(|&r| ((r as u128 * factor) % q) as u64)
                .collect(),
        }
    }

    /// Representative coordinate value of each axis.
    pub fn representative(&self, c: &CellCoords) -> Vec<f64> {
        let scale = (self.p as f64).powi(-(self.outer as i32));
        c.residues.iter().map(|&r| r as f64 * scale).collect()
    }
}

fn mod_pow(base: u128, exp: u32, modulus: u128) -> u128 {
    let mut acc = 1 % modulus;
    let mut b = base % modulus;
    let mut e = exp;
    while e > 0 {
        if e & 1 == 1 {
            acc = acc * b % modulus;
        }
        b = b * b % modulus;
        e >>= 1;
    }
    acc
}

fn is_prime(p: u64) -> bool {
    if p < 2 {
        return false;
    }
    let mut d = 2u64;
    while d * d <= p {
        if p % d == 0 {
            return false;
        }
        d += 1;
    }
    true
}

/// Build the grid for prime `p`, dimension `dim`, outer level `M` and inner
/// level `m`, refusing grids with more than `max_cells` cells.
pub fn build_grid(p: u64, dim: usize, outer: u32, inner: u32, max_cells: usize) -> Result<Grid> {
    if !is_prime(p) {
        return Err(Error::NonPrimeP(p));
    }
    if dim == 0 {
        return Err(Error::InvalidGrid("dimension must be at least 1".into()));
    }
    let too_large = |cells: u128| Error::GridTooLarge {
        cells,
        limit: max_cells,
    };
    let levels = outer + inner;
    let per_axis = (p as u128)
        .checked_pow(levels)
        .filter(|&v| v <= u64::MAX as u128)
        .ok_or(too_large(u128::MAX))?;
    let cells = u32::try_from(dim)
        .ok()
        .and_then(|d| per_axis.checked_pow(d))
        .ok_or(too_large(u128::MAX))?;
    if cells > max_cells as u128 {
        return Err(too_large(cells));
    }
    let exponent = -((inner as i64) * dim as i64);
    Ok(Grid {
        p,
        dim,
        outer,
        inner,
        cells_per_axis: per_axis as u64,
        cell_count: cells as usize,
        cell_measure: (p as f64).powi(exponent as i32),
    })
}

/// One residue per axis; the coset representative is `residue * p^-M`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CellCoords {
    pub residues: Vec<u64>,
}

/// Exact p-adic difference `x_i - y_j` of two cell representatives.
pub fn cell_diff(grid: &Grid, i: usize, j: usize) -> Result<CellCoords> {
    let a = grid.coords(i)?;
    let b = grid.coords(j)?;
    Ok(grid.sub(&a, &b))
}

/// p-adic valuation of a nonzero integer.
pub fn valuation(mut r: u64, p: u64) -> u32 {
    debug_assert!(r != 0);
    let mut v = 0;
    while r % p == 0 {
        r /= p;
        v += 1;
    }
    v
}

/// Max-norm of a representative; the zero coset has norm 0.
pub fn cell_norm(grid: &Grid, c: &CellCoords) -> f64 {
    let p = grid.p as f64;
    c.residues
        .iter()
        .filter(|&&r| r != 0)
        .map(|&r| p.powi(grid.outer as i32 - valuation(r, grid.p) as i32))
        .fold(0.0, f64::max)
}

/// A locally constant function: one value per cell in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeFunction {
    grid: Grid,
    values: Vec<f64>,
}

impl LatticeFunction {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.cell_count {
            return Err(Error::LengthMismatch {
                expected: grid.cell_count,
                got: values.len(),
            });
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(bad));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.cell_count],
        }
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    /// `value` on one cell, zero elsewhere.
    pub fn indicator(grid: Grid, cell: usize, value: f64) -> Result<Self> {
        grid.check_index(cell)?;
        let mut f = Self::zeros(grid);
        f.values[cell] = value;
        Ok(f)
    }

    pub(crate) fn from_vec_unchecked(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.cell_count);
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_grid(&self, other: &LatticeFunction) -> Result<()> {
        if self.grid == other.grid {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_vec_unchecked(self.grid, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &LatticeFunction, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.same_grid(other)?;
        Ok(Self::from_vec_unchecked(
            self.grid,
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    /// `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &LatticeFunction, b: f64) -> Result<Self> {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `sup_i |f_i - g_i|`.
    pub fn max_abs_diff(&self, other: &LatticeFunction) -> Result<f64> {
        self.same_grid(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// `∫ |f|`.
    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum::<f64>() * self.grid.cell_measure
    }

    /// `(∫ f^2)^(1/2)`.
    pub fn l2_norm(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() * self.grid.cell_measure).sqrt()
    }
}

/// `∫ f` against Haar measure on the truncated domain.
pub fn integrate(grid: &Grid, f: &LatticeFunction) -> Result<f64> {
    if f.grid != *grid {
        return Err(Error::GridMismatch);
    }
    Ok(f.values.iter().sum::<f64>() * grid.cell_measure)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn u4() -> Grid {
        Grid::new(2, 1, 1, 1).unwrap()
    }

    #[test]
    fn grid_sizes() {
        for &(p, n, outer, inner, count, measure, total) in &[
            (2u64, 1usize, 1u32, 1u32, 4usize, 0.5, 2.0),
            (3, 1, 0, 1, 3, 1.0 / 3.0, 1.0),
            (2, 2, 1, 1, 16, 0.25, 4.0),
        ] {
            let g = Grid::new(p, n, outer, inner).unwrap();
            assert_eq!(g.cell_count(), count);
            assert!((g.cell_measure() - measure).abs() < 1e-15);
            assert!((g.total_measure() - total).abs() < 1e-12);
            assert_eq!(g.cells_per_axis(), p.pow(outer + inner));
        }
    }

    #[test]
    fn grid_errors() {
        assert_eq!(Grid::new(4, 1, 1, 1), Err(Error::NonPrimeP(4)));
        assert_eq!(Grid::new(1, 1, 1, 1), Err(Error::NonPrimeP(1)));
        assert!(matches!(
            build_grid(2, 1, 10, 10, 1000),
            Err(Error::GridTooLarge { .. })
        ));
        assert!(matches!(
            build_grid(2, 8, 40, 40, 1000),
            Err(Error::GridTooLarge { .. })
        ));
        assert!(matches!(Grid::new(2, 0, 1, 1), Err(Error::InvalidGrid(_))));
    }

    #[test]
    fn diff_examples() {
        let g = u4();
        assert_eq!(cell_diff(&g, 1, 3).unwrap().residues, vec![2]);
        assert_eq!(cell_diff(&g, 0, 1).unwrap().residues, vec![3]);
        assert_eq!(cell_diff(&g, 2, 2).unwrap().residues, vec![0]);
        assert_eq!(g.representative(&cell_diff(&g, 0, 1).unwrap()), vec![1.5]);
        assert!(matches!(
            cell_diff(&g, 0, 4),
            Err(Error::IndexOutOfRange { index: 4, len: 4 })
        ));
    }

    #[test]
    fn norm_examples() {
        let g = u4();
        let c = |r| CellCoords { residues: vec![r] };
        assert_eq!(cell_norm(&g, &c(1)), 2.0);
        assert_eq!(cell_norm(&g, &c(2)), 1.0);
        assert_eq!(cell_norm(&g, &c(3)), 2.0);
        assert_eq!(cell_norm(&g, &c(0)), 0.0);
    }

    #[test]
    fn integrate_examples() {
        let g = u4();
        let f = |v: Vec<f64>| LatticeFunction::new(g, v).unwrap();
        assert_eq!(integrate(&g, &LatticeFunction::constant(g, 1.0)).unwrap(), 2.0);
        assert_eq!(integrate(&g, &f(vec![2.0, 0.0, 0.0, 0.0])).unwrap(), 1.0);
        assert_eq!(integrate(&g, &f(vec![1.0, -1.0, 1.0, -1.0])).unwrap(), 0.0);
        let other = Grid::new(3, 1, 0, 1).unwrap();
        assert_eq!(
            integrate(&other, &f(vec![1.0; 4])),
            Err(Error::GridMismatch)
        );
    }

    #[test]
    fn lattice_function_validation() {
        let g = u4();
        assert!(matches!(
            LatticeFunction::new(g, vec![1.0; 3]),
            Err(Error::LengthMismatch { .. })
        ));
        assert_eq!(
            LatticeFunction::new(g, vec![1.0, f64::NAN, 0.0, 0.0]),
            Err(Error::NonFiniteValue(1))
        );
    }

    #[test]
    fn coords_roundtrip_multi_axis() {
        let g = Grid::new(3, 2, 1, 1).unwrap();
        for i in 0..g.cell_count() {
            assert_eq!(g.index(&g.coords(i).unwrap()).unwrap(), i);
        }
        assert_eq!(g.coords(10).unwrap().residues, vec![1, 1]);
    }

    #[test]
    fn scaling_by_p_power() {
        let g = u4();
        let c = CellCoords { residues: vec![3] };
        assert_eq!(g.scale_by_p_power(&c, 1).residues, vec![2]);
        assert_eq!(g.scale_by_p_power(&c, 2).residues, vec![0]);
        assert_eq!(g.scale_by_p_power(&c, 0), c);
    }
}
