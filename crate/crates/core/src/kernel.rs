//! Scattering cross-sections and their sampling on a grid.
//!
//! Kernels use the two-argument form `K(source, displacement)`. Sampling
//! produces `k_mat[i][j] = K(y_j, x_i - y_j)`: row `i` is the target cell,
//! column `j` the source cell. The built-in steady-state constructions are
//! expressed in this form directly:
//!
//! * projection: `K(y, x - y) = c * g(y) * g(x) * N(x)` with `∫ g N = 1`.
//!   The loss rate of this kernel is `c * g`, so it is the self-consistent
//!   choice of the rate function in `g(y) k(x) N(x)`.
//! * symmetric: `K(y, x - y) = T(x, y) / N(y)` for a symmetric table `T`.
//! * detailed balance: `K(y, x - y) = S(x, y) * N(x)` for a symmetric table
//!   `S`, i.e. the two-point rate from `y` to `x` satisfies
//!   `K2(y, x) N(x) = K2(x, y) N(y)`.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::padic::{cell_diff, cell_norm, integrate, Grid, LatticeFunction};

/// Radial profile `κ(r)` of a translation-invariant kernel `K(y, z) = κ(|z|_p)`.
#[derive(Clone)]
pub enum RadialProfile {
    /// `1` for `r <= radius`, else `0`.
    Indicator { radius: f64 },
    /// `κ(r) = r`.
    Linear,
    /// `κ(r) = coefficient * r^exponent`; singular at 0 for negative exponents.
    Power { coefficient: f64, exponent: f64 },
    /// `κ(r) = coefficient * exp(-rate * r)`.
    Exponential { coefficient: f64, rate: f64 },
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for RadialProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Indicator { radius } => write!(f, "Indicator({radius})"),
            Self::Linear => write!(f, "Linear"),
            Self::Power {
                coefficient,
                exponent,
            } => write!(f, "Power({coefficient}, {exponent})"),
            Self::Exponential { coefficient, rate } => write!(f, "Exponential({coefficient}, {rate})"),
            Self::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl RadialProfile {
    pub fn eval(&self, r: f64) -> f64 {
        match self {
            Self::Indicator { radius } => {
                if r <= *radius {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Linear => r,
            Self::Power {
                coefficient,
                exponent,
            } => coefficient * r.powf(*exponent),
            Self::Exponential { coefficient, rate } => coefficient * (-rate * r).exp(),
            Self::Custom(f) => f(r),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RadialKernel {
    pub profile: RadialProfile,
    /// Value used at zero displacement. `None` evaluates the profile at 0,
    /// which must then be finite.
    pub diagonal: Option<f64>,
}

impl RadialKernel {
    /// Radial kernel with the dynamics-neutral diagonal value 0.
    pub fn new(profile: RadialProfile) -> Self {
        Self {
            profile,
            diagonal: Some(0.0),
        }
    }

    pub fn with_diagonal(mut self, diagonal: Option<f64>) -> Self {
        self.diagonal = diagonal;
        self
    }

    /// `κ(r)`, with the diagonal policy applied at `r = 0`.
    pub fn value_at_norm(&self, r: f64) -> Result<f64> {
        if r == 0.0 {
            let v = match self.diagonal {
                Some(v) => v,
                None => self.profile.eval(0.0),
            };
            if !v.is_finite() {
                return Err(Error::DiagonalSingularity);
            }
            return Ok(v);
        }
        let v = self.profile.eval(r);
        if !v.is_finite() {
            return Err(Error::InvalidKernel(format!("profile is not finite at r = {r}")));
        }
        Ok(v)
    }
}

/// Nonnegative scalar time modulation of a base kernel.
#[derive(Clone)]
pub enum Modulation {
    /// `exp(-rate t)`.
    ExpDecay { rate: f64 },
    /// `1 + amplitude * sin(frequency t)`.
    Periodic { amplitude: f64, frequency: f64 },
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for Modulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ExpDecay { rate } => write!(f, "ExpDecay({rate})"),
            Self::Periodic {
                amplitude,
                frequency,
            } => write!(f, "Periodic({amplitude}, {frequency})"),
            Self::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl Modulation {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            Self::ExpDecay { rate } => (-rate * t).exp(),
            Self::Periodic {
                amplitude,
                frequency,
            } => 1.0 + amplitude * (frequency * t).sin(),
            Self::Custom(f) => f(t),
        }
    }
}

#[derive(Debug, Clone)]
pub enum KernelSpec {
    Constant(f64),
    Radial(RadialKernel),
    Projection {
        weight: LatticeFunction,
        steady: LatticeFunction,
        scale: f64,
    },
    Symmetric {
        table: Matrix,
        steady: LatticeFunction,
    },
    DetailedBalance {
        table: Matrix,
        steady: LatticeFunction,
    },
    /// Full matrix of `K(y_j, x_i - y_j)` values.
    Table(Matrix),
    TimeDependent {
        base: Box<KernelSpec>,
        modulation: Modulation,
    },
}

fn check_nonnegative_table(table: &Matrix) -> Result<()> {
    for i in 0..table.size() {
        for j in 0..table.size() {
            let v = table.get(i, j);
            if !v.is_finite() {
                return Err(Error::InvalidKernel(format!("non-finite entry at ({i}, {j})")));
            }
            if v < 0.0 {
                return Err(Error::NegativeKernelValue {
                    value: v,
                    target_cell: i,
                    source_cell: j,
                });
            }
        }
    }
    Ok(())
}

fn check_positive(f: &LatticeFunction) -> Result<()> {
    match f.values().iter().position(|&v| v <= 0.0) {
        Some(i) => Err(Error::NonPositiveN(i)),
        None => Ok(()),
    }
}

impl KernelSpec {
    /// Projection kernel; `∫ weight * steady` must equal 1 within 1e-12.
    pub fn projection(weight: LatticeFunction, steady: LatticeFunction, scale: f64) -> Result<Self> {
        let spec = Self::Projection {
            weight,
            steady,
            scale,
        };
        spec.validate(*spec_grid(&spec).expect("projection carries a grid"))?;
        Ok(spec)
    }

    /// Projection kernel with the weight `g = 1 / ∫ N`, so `∫ g N = 1`.
    pub fn uniform_projection(steady: LatticeFunction, scale: f64) -> Result<Self> {
        let grid = *steady.grid();
        let mass = integrate(&grid, &steady)?;
        if mass <= 0.0 {
            return Err(Error::NonPositiveValue(mass));
        }
        Self::projection(LatticeFunction::constant(grid, 1.0 / mass), steady, scale)
    }

    pub fn symmetric(table: Matrix, steady: LatticeFunction) -> Result<Self> {
        let spec = Self::Symmetric { table, steady };
        spec.validate(*spec_grid(&spec).expect("symmetric carries a grid"))?;
        Ok(spec)
    }

    pub fn detailed_balance(table: Matrix, steady: LatticeFunction) -> Result<Self> {
        let spec = Self::DetailedBalance { table, steady };
        spec.validate(*spec_grid(&spec).expect("detailed balance carries a grid"))?;
        Ok(spec)
    }

    pub fn time_dependent(base: KernelSpec, modulation: Modulation) -> Self {
        Self::TimeDependent {
            base: Box::new(base),
            modulation,
        }
    }

    pub fn is_time_dependent(&self) -> bool {
        matches!(self, Self::TimeDependent { .. })
    }

    pub fn as_radial(&self) -> Option<&RadialKernel> {
        match self {
            Self::Radial(r) => Some(r),
            _ => None,
        }
    }

    /// Check the structural invariants of the variant against `grid`.
    pub fn validate(&self, grid: Grid) -> Result<()> {
        let n = grid.cell_count();
        let table_size = |t: &Matrix| {
            if t.size() == n {
                Ok(())
            } else {
                Err(Error::LengthMismatch {
                    expected: n * n,
                    got: t.size() * t.size(),
                })
            }
        };
        match self {
            Self::Constant(c) => {
                if !c.is_finite() {
                    return Err(Error::InvalidKernel("constant must be finite".into()));
                }
                if *c < 0.0 {
                    return Err(Error::NegativeKernelValue {
                        value: *c,
                        target_cell: 0,
                        source_cell: 0,
                    });
                }
                Ok(())
            }
            Self::Radial(_) => Ok(()),
            Self::Projection {
                weight,
                steady,
                scale,
            } => {
                if *weight.grid() != grid || *steady.grid() != grid {
                    return Err(Error::GridMismatch);
                }
                if !(scale.is_finite() && *scale >= 0.0) {
                    return Err(Error::InvalidKernel("projection scale must be >= 0".into()));
                }
                if weight.min() < 0.0 {
                    return Err(Error::InvalidKernel("projection weight must be >= 0".into()));
                }
                check_positive(steady)?;
                let norm = integrate(&grid, &weight.zip_map(steady, |a, b| a * b)?)?;
                if (norm - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidKernel(format!(
                        "projection weight must satisfy ∫ g N = 1, got {norm}"
                    )));
                }
                Ok(())
            }
            Self::Symmetric { table, steady } | Self::DetailedBalance { table, steady } => {
                if *steady.grid() != grid {
                    return Err(Error::GridMismatch);
                }
                table_size(table)?;
                check_nonnegative_table(table)?;
                if !table.is_symmetric() {
                    return Err(Error::InvalidKernel("table must be symmetric".into()));
                }
                check_positive(steady)
            }
            Self::Table(table) => {
                table_size(table)?;
                check_nonnegative_table(table)
            }
            Self::TimeDependent { base, .. } => {
                if base.is_time_dependent() {
                    return Err(Error::InvalidKernel("nested time dependence".into()));
                }
                base.validate(grid)
            }
        }
    }
}

fn spec_grid(spec: &KernelSpec) -> Option<&Grid> {
    match spec {
        KernelSpec::Projection { steady, .. }
        | KernelSpec::Symmetric { steady, .. }
        | KernelSpec::DetailedBalance { steady, .. } => Some(steady.grid()),
        _ => None,
    }
}

/// `K(y_j, x_i - y_j)` at time `t`.
pub fn eval_kernel(spec: &KernelSpec, grid: &Grid, i: usize, j: usize, t: f64) -> Result<f64> {
    grid.check_index(i)?;
    grid.check_index(j)?;
    let value = match spec {
        KernelSpec::Constant(c) => *c,
        KernelSpec::Radial(radial) => {
            let r = cell_norm(grid, &cell_diff(grid, i, j)?);
            radial.value_at_norm(r)?
        }
        KernelSpec::Projection {
            weight,
            steady,
            scale,
        } => scale * weight.values()[j] * weight.values()[i] * steady.values()[i],
        KernelSpec::Symmetric { table, steady } => table.get(i, j) / steady.values()[j],
        KernelSpec::DetailedBalance { table, steady } => table.get(i, j) * steady.values()[i],
        KernelSpec::Table(table) => table.get(i, j),
        KernelSpec::TimeDependent { base, modulation } => {
            if t < 0.0 {
                return Err(Error::InvalidKernel(format!("negative time {t}")));
            }
            let m = modulation.value(t);
            if m < 0.0 || !m.is_finite() {
                return Err(Error::NegativeKernelValue {
                    value: m,
                    target_cell: i,
                    source_cell: j,
                });
            }
            m * eval_kernel(base, grid, i, j, t)?
        }
    };
    if value < 0.0 {
        return Err(Error::NegativeKernelValue {
            value,
            target_cell: i,
            source_cell: j,
        });
    }
    if !value.is_finite() {
        return Err(Error::InvalidKernel(format!("non-finite value at ({i}, {j})")));
    }
    Ok(value)
}

/// Sampled kernel `k_mat[i][j] = K(y_j, x_i - y_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    grid: Grid,
    entries: Matrix,
}

impl KernelMatrix {
    pub fn from_matrix(grid: Grid, entries: Matrix) -> Result<Self> {
        KernelSpec::Table(entries.clone()).validate(grid)?;
        Ok(Self { grid, entries })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn entries(&self) -> &Matrix {
        &self.entries
    }

    pub fn get(&self, target: usize, source: usize) -> f64 {
        self.entries.get(target, source)
    }
}

pub fn build_kernel_matrix(spec: &KernelSpec, grid: &Grid, t: f64) -> Result<KernelMatrix> {
    spec.validate(*grid)?;
    let n = grid.cell_count();
    let entries = match spec {
        KernelSpec::Table(table) => table.clone(),
        KernelSpec::Radial(radial) => {
            // One evaluation per distinct norm value.
            let mut cache: Vec<(f64, f64)> = Vec::new();
            Matrix::try_from_fn(n, |i, j| {
                let r = cell_norm(grid, &cell_diff(grid, i, j)?);
                if let Some(&(_, v)) = cache.iter().find(|(key, _)| *key == r) {
                    return Ok(v);
                }
                let v = radial.value_at_norm(r)?;
                if v < 0.0 {
                    return Err(Error::NegativeKernelValue {
                        value: v,
                        target_cell: i,
                        source_cell: j,
                    });
                }
                cache.push((r, v));
                Ok(v)
            })?
        }
        _ => Matrix::try_from_fn(n, |i, j| eval_kernel(spec, grid, i, j, t))?,
    };
    Ok(KernelMatrix {
        grid: *grid,
        entries,
    })
}

/// `max_{x,y} |K2(y, x) N(x) - K2(x, y) N(y)|` where `K2(x, y) = k_mat[x][y]`.
pub fn detailed_balance_residual(kmat: &KernelMatrix, steady: &LatticeFunction) -> Result<f64> {
    if *steady.grid() != kmat.grid {
        return Err(Error::GridMismatch);
    }
    let n = steady.values();
    let mut worst = 0.0f64;
    for x in 0..n.len() {
        for y in 0..n.len() {
            let lhs = kmat.get(y, x) * n[x];
            let rhs = kmat.get(x, y) * n[y];
            worst = worst.max((lhs - rhs).abs());
        }
    }
    Ok(worst)
}

/// Read a `cell_count x cell_count` table of nonnegative entries. Row `i`,
/// column `j` is `K(y_j, x_i - y_j)`. Lines starting with `#` are skipped.
pub fn load_kernel_table(path: &Path, grid: &Grid) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
    let n = grid.cell_count();
    let mut data = Vec::with_capacity(n * n);
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Csv(e.to_string()))?;
        if record.len() != n {
            return Err(Error::Csv(format!(
                "row {row} has {} columns, expected {n}",
                record.len()
            )));
        }
        for field in record.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Csv(format!("row {row}: cannot parse {field:?}")))?;
            data.push(v);
        }
    }
    let table = Matrix::from_row_major(n, data)
        .map_err(|_| Error::Csv(format!("expected {n} rows of {n} entries")))?;
    check_nonnegative_table(&table)?;
    Ok(table)
}
