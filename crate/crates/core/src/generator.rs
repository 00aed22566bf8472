//! Gain/loss operator of the discretised scattering equation.
//!
//! `d/dt n_i = sum_j A_ij n_j - k_i n_i` with `A_ij = K(y_j, x_i - y_j) * μ`.
//! In column-sum mode `k_j = sum_i A_ij`, summed in ascending `i`, which makes
//! the semi-discrete flow conserve mass exactly up to rounding.

use crate::error::{Error, Result};
use crate::kernel::{build_kernel_matrix, eval_kernel, KernelMatrix, KernelSpec};
use crate::linalg::Matrix;
use crate::padic::{cell_diff, cell_norm, Grid, LatticeFunction};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KMode {
    ColumnSum,
    Analytic,
}

impl std::str::FromStr for KMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "column_sum" => Ok(Self::ColumnSum),
            "analytic" => Ok(Self::Analytic),
            other => Err(format!("unknown k_mode {other:?}")),
        }
    }
}

impl std::fmt::Display for KMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ColumnSum => "column_sum",
            Self::Analytic => "analytic",
        })
    }
}

/// Rescaling level `l`: the p-adic scalar `ε = p^l`, so `|ε|_p = p^-l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
pub struct RescaleLevel(pub u32);

impl RescaleLevel {
    /// `|ε|_p = p^-l`.
    pub fn epsilon_norm(self, p: u64) -> f64 {
        (p as f64).powi(-(self.0 as i32))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    grid: Grid,
    gain: Matrix,
    loss: Vec<f64>,
    k_mode: KMode,
    rescale: Option<RescaleLevel>,
}

impl Generator {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn gain(&self) -> &Matrix {
        &self.gain
    }

    pub fn loss(&self) -> &[f64] {
        &self.loss
    }

    pub fn k_mode(&self) -> KMode {
        self.k_mode
    }

    pub fn rescale_level(&self) -> Option<RescaleLevel> {
        self.rescale
    }

    pub fn k_max(&self) -> f64 {
        self.loss.iter().copied().fold(0.0, f64::max)
    }

    /// Dense `A - diag(k)`.
    pub fn to_matrix(&self) -> Matrix {
        let mut g = self.gain.clone();
        for (i, k) in self.loss.iter().enumerate() {
            g.set(i, i, g.get(i, i) - k);
        }
        g
    }

    /// Multiply gain and loss by `c >= 0`.
    pub fn scaled(&self, c: f64) -> Generator {
        Generator {
            grid: self.grid,
            gain: self.gain.scale(c),
            loss: self.loss.iter().map(|k| c * k).collect(),
            k_mode: self.k_mode,
            rescale: self.rescale,
        }
    }

    pub(crate) fn with_gain(&self, gain: Matrix) -> Generator {
        Generator {
            grid: self.grid,
            gain,
            loss: self.loss.clone(),
            k_mode: self.k_mode,
            rescale: self.rescale,
        }
    }

    pub(crate) fn apply_raw(&self, f: &[f64]) -> Vec<f64> {
        let mut out = self.gain.mul_vec(f);
        for ((o, k), v) in out.iter_mut().zip(&self.loss).zip(f) {
            *o -= k * v;
        }
        out
    }

    pub(crate) fn apply_dual_raw(&self, phi: &[f64]) -> Vec<f64> {
        let mut out = self.gain.transpose_mul_vec(phi);
        for ((o, k), v) in out.iter_mut().zip(&self.loss).zip(phi) {
            *o -= k * v;
        }
        out
    }
}

pub fn assemble(
    kmat: &KernelMatrix,
    grid: &Grid,
    k_mode: KMode,
    analytic_k: Option<&LatticeFunction>,
) -> Result<Generator> {
    if kmat.grid() != grid {
        return Err(Error::GridMismatch);
    }
    let gain = kmat.entries().scale(grid.cell_measure());
    let loss = match (k_mode, analytic_k) {
        (KMode::ColumnSum, None) => gain.column_sums(),
        (KMode::ColumnSum, Some(_)) => {
            return Err(Error::InvalidKernel(
                "a loss function is only accepted in analytic k-mode".into(),
            ))
        }
        (KMode::Analytic, None) => return Err(Error::MissingAnalyticK),
        (KMode::Analytic, Some(k)) => {
            if k.grid() != grid {
                return Err(Error::GridMismatch);
            }
            if let Some((cell, &value)) = k.values().iter().enumerate().find(|(_, v)| **v < 0.0) {
                return Err(Error::NegativeLoss { value, cell });
            }
            k.values().to_vec()
        }
    };
    Ok(Generator {
        grid: *grid,
        gain,
        loss,
        k_mode,
        rescale: None,
    })
}

/// `F(n)_i = sum_j A_ij n_j - k_i n_i`.
pub fn apply(gen: &Generator, f: &LatticeFunction) -> Result<LatticeFunction> {
    if *f.grid() != gen.grid {
        return Err(Error::GridMismatch);
    }
    Ok(LatticeFunction::from_vec_unchecked(gen.grid, gen.apply_raw(f.values())))
}

/// Transposed action `sum_i A_ij φ_i - k_j φ_j`; vanishes at a steady dual state.
pub fn apply_dual(gen: &Generator, phi: &LatticeFunction) -> Result<LatticeFunction> {
    if *phi.grid() != gen.grid {
        return Err(Error::GridMismatch);
    }
    Ok(LatticeFunction::from_vec_unchecked(
        gen.grid,
        gen.apply_dual_raw(phi.values()),
    ))
}

/// Generator of the fast short-range system
/// `∂_t n = |ε|^-1 [ ∫ |ε|^-n K(y, (x-y)/|ε|) n(y) dy - k_ε n ]`
/// for a radial kernel; the displacement norm is multiplied by `p^l`.
pub fn rescale(spec: &KernelSpec, grid: &Grid, level: RescaleLevel) -> Result<Generator> {
    let radial = spec.as_radial().ok_or(Error::NonRadialKernel)?;
    let p = grid.p() as f64;
    let stretch = p.powi(level.0 as i32);
    let prefactor = grid.cell_measure() * p.powi((level.0 as i32) * (grid.dim() as i32 + 1));
    let n = grid.cell_count();
    let mut cache: Vec<(f64, f64)> = Vec::new();
    let gain = Matrix::try_from_fn(n, |i, j| {
        let r = cell_norm(grid, &cell_diff(grid, i, j)?) * stretch;
        if let Some(&(_, v)) = cache.iter().find(|(key, _)| *key == r) {
            return Ok(v);
        }
        let kappa = radial.value_at_norm(r)?;
        if kappa < 0.0 {
            return Err(Error::NegativeKernelValue {
                value: kappa,
                target_cell: i,
                source_cell: j,
            });
        }
        let v = prefactor * kappa;
        cache.push((r, v));
        Ok(v)
    })?;
    let loss = gain.column_sums();
    Ok(Generator {
        grid: *grid,
        gain,
        loss,
        k_mode: KMode::ColumnSum,
        rescale: Some(level),
    })
}

/// L¹ Lipschitz constant `2 ||k||_∞` of the right-hand side.
pub fn l1_lipschitz_bound(gen: &Generator) -> f64 {
    2.0 * gen.k_max()
}

/// `L₁ = max_x |ε|^-1 sum_z [K(x - εz, z) - K(x, z)] μ`, where `εz` is the
/// residue of `z` multiplied by `p^l`. Time-dependent kernels are sampled at 0.
pub fn regularity_constant(spec: &KernelSpec, grid: &Grid, level: RescaleLevel) -> Result<f64> {
    let kmat = build_kernel_matrix(spec, grid, 0.0)?;
    let n = grid.cell_count();
    let coords: Vec<_> = (0..n).map(|i| grid.coords(i)).collect::<Result<_>>()?;
    // K(source, displacement) = k_mat[source + displacement][source]
    let k_at = |source: usize, disp: usize| -> Result<f64> {
        let target = grid.index(&grid.add(&coords[source], &coords[disp]))?;
        Ok(kmat.get(target, source))
    };
    let inv_eps = 1.0 / level.epsilon_norm(grid.p());
    let mut best = f64::NEG_INFINITY;
    for x in 0..n {
        let mut sum = 0.0;
        for z in 0..n {
            let shifted = grid.sub(&coords[x], &grid.scale_by_p_power(&coords[z], level.0));
            let xs = grid.index(&shifted)?;
            sum += k_at(xs, z)? - k_at(x, z)?;
        }
        best = best.max(inv_eps * sum * grid.cell_measure());
    }
    Ok(best)
}

/// `K(x, z)` with `z` given as a cell index (its residues are the displacement).
pub fn eval_at_displacement(
    spec: &KernelSpec,
    grid: &Grid,
    source: usize,
    disp: usize,
    t: f64,
) -> Result<f64> {
    let target = grid.index(&grid.add(&grid.coords(source)?, &grid.coords(disp)?))?;
    eval_kernel(spec, grid, target, source, t)
}
