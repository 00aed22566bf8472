//! Steady states, dual steady states and the Poincaré constant.

use crate::error::{Error, Result};
use crate::generator::{apply, apply_dual, Generator, KMode};
use crate::linalg::{dot, norm_inf, symmetric_eigen, Lu, Matrix};
use crate::padic::{integrate, LatticeFunction};

/// Max-norm residual accepted for `F(N) = 0` and `F*(φ) = 0`.
pub const STEADY_RESIDUAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct SteadyPair {
    /// `N > 0` with `∫ N = 1`.
    pub steady: LatticeFunction,
    /// `φ > 0` with `∫ N φ = 1`.
    pub dual: LatticeFunction,
    pub steady_residual: f64,
    pub dual_residual: f64,
    pub k_mode: KMode,
}

impl SteadyPair {
    /// Solve both steady problems and check the residual bounds.
    pub fn solve(gen: &Generator) -> Result<Self> {
        let steady = solve_steady(gen)?;
        let dual = solve_dual_steady(gen, &steady)?;
        Self::from_parts(gen, steady, dual)
    }

    /// Pair from known states, normalised; fails if either residual exceeds
    /// [`STEADY_RESIDUAL_TOL`].
    pub fn from_parts(gen: &Generator, steady: LatticeFunction, dual: LatticeFunction) -> Result<Self> {
        let grid = *gen.grid();
        let steady = steady.scale(1.0 / integrate(&grid, &steady)?);
        let pairing = integrate(&grid, &steady.zip_map(&dual, |a, b| a * b)?)?;
        let dual = dual.scale(1.0 / pairing);
        for f in [&steady, &dual] {
            if let Some(i) = f.values().iter().position(|&v| v <= 0.0) {
                return Err(Error::NonPositiveN(i));
            }
        }
        let steady_residual = norm_inf(apply(gen, &steady)?.values());
        let dual_residual = norm_inf(apply_dual(gen, &dual)?.values());
        if steady_residual > STEADY_RESIDUAL_TOL || dual_residual > STEADY_RESIDUAL_TOL {
            return Err(Error::NonConvergence("steady state residual"));
        }
        Ok(Self {
            steady,
            dual,
            steady_residual,
            dual_residual,
            k_mode: gen.k_mode(),
        })
    }
}

/// Strong connectivity of the directed graph with an edge `j -> i` whenever
/// the off-diagonal gain `A_ij` is positive.
pub fn is_irreducible(gain: &Matrix) -> bool {
    let n = gain.size();
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for w in 0..n {
                let edge = if forward { gain.get(w, v) } else { gain.get(v, w) };
                if w != v && !seen[w] && edge > 0.0 {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    n <= 1 || (reach(true) && reach(false))
}

/// Null vector of `m` by shifted inverse iteration from the uniform start.
fn null_vector(m: &Matrix) -> Result<Vec<f64>> {
    const MAX_ITERS: usize = 50;
    let n = m.size();
    let scale = m.norm_1().max(f64::MIN_POSITIVE);
    let mut shifted = m.clone();
    let sigma = 1e-10 * scale;
    for i in 0..n {
        shifted.set(i, i, shifted.get(i, i) - sigma);
    }
    let lu = Lu::new(shifted)?;
    let mut x = vec![1.0 / n as f64; n];
    for _ in 0..MAX_ITERS {
        let mut y = lu.solve(&x);
        let norm = norm_inf(&y);
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::NonConvergence("inverse iteration"));
        }
        y.iter_mut().for_each(|v| *v /= norm);
        let residual = norm_inf(&m.mul_vec(&y));
        x = y;
        if residual <= 64.0 * f64::EPSILON * scale {
            return Ok(x);
        }
    }
    Err(Error::NonConvergence("inverse iteration"))
}

fn positive_normalised(gen: &Generator, mut v: Vec<f64>, weight: Option<&[f64]>) -> Result<LatticeFunction> {
    let total: f64 = v.iter().sum();
    if total < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    if v.iter().any(|&x| x <= 0.0) {
        return Err(Error::NoPositiveSteadyState);
    }
    let mu = gen.grid().cell_measure();
    let mass: f64 = match weight {
        None => v.iter().sum::<f64>() * mu,
        Some(w) => dot(&v, w) * mu,
    };
    v.iter_mut().for_each(|x| *x /= mass);
    LatticeFunction::new(*gen.grid(), v)
}

/// Positive solution of `k N = ∫ K(y, x - y) N(y) dy` with `∫ N = 1`.
pub fn solve_steady(gen: &Generator) -> Result<LatticeFunction> {
    if !is_irreducible(gen.gain()) {
        return Err(Error::ReducibleGenerator);
    }
    let v = null_vector(&gen.to_matrix())?;
    let n = positive_normalised(gen, v, None)?;
    if norm_inf(apply(gen, &n)?.values()) > STEADY_RESIDUAL_TOL {
        return Err(Error::NonConvergence("steady state"));
    }
    Ok(n)
}

/// Positive solution of `k φ = ∫ K(x, y - x) φ(y) dy` with `∫ N φ = 1`.
///
/// In column-sum mode constants solve the dual problem exactly and are
/// returned directly.
pub fn solve_dual_steady(gen: &Generator, steady: &LatticeFunction) -> Result<LatticeFunction> {
    let grid = *gen.grid();
    if *steady.grid() != grid {
        return Err(Error::GridMismatch);
    }
    if gen.k_mode() == KMode::ColumnSum {
        let mass = integrate(&grid, steady)?;
        return Ok(LatticeFunction::constant(grid, 1.0 / mass));
    }
    if !is_irreducible(gen.gain()) {
        return Err(Error::ReducibleGenerator);
    }
    let v = null_vector(&gen.to_matrix().transpose())?;
    let phi = positive_normalised(gen, v, Some(steady.values()))?;
    if norm_inf(apply_dual(gen, &phi)?.values()) > STEADY_RESIDUAL_TOL {
        return Err(Error::NonConvergence("dual steady state"));
    }
    Ok(phi)
}

/// Conserved functional `ρ = ∫ φ n`.
pub fn compute_rho(phi: &LatticeFunction, n: &LatticeFunction) -> Result<f64> {
    integrate(phi.grid(), &phi.zip_map(n, |a, b| a * b)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaEstimate {
    /// Largest `α` with `D(u) >= α Q(u)` on the constraint subspace;
    /// `+∞` on a single-cell grid where the subspace is trivial.
    pub alpha: f64,
    /// Minimising `u = m / N`, normalised to `Q(u) = 1`.
    pub direction: LatticeFunction,
    /// `||S v - α v||_2` of the symmetrised problem at the minimiser.
    pub residual: f64,
}

/// Poincaré constant of the entropy dissipation.
///
/// With `w_i = φ_i N_i μ`, `Q(u) = sum_i w_i u_i^2` and
/// `D(u) = sum_{i,j} A_ij μ φ_i N_j (u_i - u_j)^2`, returns the smallest value
/// of `D / Q` over `u != 0` with `sum_i w_i u_i = 0`. `D` is the Laplacian of
/// the symmetrised weights; after the substitution `v = W^{1/2} u` the
/// constraint says `v ⊥ W^{1/2} 1`, which is deflated with one Householder
/// reflection before a symmetric eigensolve.
pub fn estimate_alpha(gen: &Generator, steady: &LatticeFunction, dual: &LatticeFunction) -> Result<AlphaEstimate> {
    let grid = *gen.grid();
    steady.same_grid(dual)?;
    if *steady.grid() != grid {
        return Err(Error::GridMismatch);
    }
    for f in [steady, dual] {
        if let Some(i) = f.values().iter().position(|&v| v <= 0.0) {
            return Err(Error::NonPositiveN(i));
        }
    }
    let n = grid.cell_count();
    if n == 1 {
        return Ok(AlphaEstimate {
            alpha: f64::INFINITY,
            direction: LatticeFunction::zeros(grid),
            residual: 0.0,
        });
    }
    let mu = grid.cell_measure();
    let (nv, pv) = (steady.values(), dual.values());
    let w: Vec<f64> = (0..n).map(|i| pv[i] * nv[i] * mu).collect();
    let sqrt_w: Vec<f64> = w.iter().map(|x| x.sqrt()).collect();

    // Laplacian of s_ij = c_ij + c_ji, c_ij = A_ij μ φ_i N_j.
    let gain = gen.gain();
    let mut lap = Matrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let s = gain.get(i, j) * mu * pv[i] * nv[j] + gain.get(j, i) * mu * pv[j] * nv[i];
            lap.set(i, j, -s);
            lap.set(i, i, lap.get(i, i) + s);
        }
    }
    let sym = Matrix::from_fn(n, |i, j| lap.get(i, j) / (sqrt_w[i] * sqrt_w[j]));

    // Householder H with H e = -e_0 for e = sqrt(w) / |sqrt(w)|; e_0 > 0.
    let e_norm = dot(&sqrt_w, &sqrt_w).sqrt();
    let mut h: Vec<f64> = sqrt_w.iter().map(|x| x / e_norm).collect();
    h[0] += 1.0;
    let hh = dot(&h, &h);
    let reflect = |x: &[f64]| -> Vec<f64> {
        let c = 2.0 * dot(&h, x) / hh;
        x.iter().zip(&h).map(|(xi, hi)| xi - c * hi).collect()
    };
    // H S H = S - 2 h q^T / hh - 2 q h^T / hh + 4 (h^T q) h h^T / hh^2, q = S h.
    let q = sym.mul_vec(&h);
    let hq = dot(&h, &q);
    let reduced = Matrix::from_fn(n - 1, |a, b| {
        let (i, j) = (a + 1, b + 1);
        sym.get(i, j) - 2.0 * (h[i] * q[j] + q[i] * h[j]) / hh + 4.0 * hq * h[i] * h[j] / (hh * hh)
    });
    let reduced = Matrix::from_fn(n - 1, |a, b| 0.5 * (reduced.get(a, b) + reduced.get(b, a)));
    let (values, vectors) = symmetric_eigen(&reduced)?;
    let (best, &lambda) = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("n >= 2");
    let mut padded = vec![0.0; n];
    for a in 0..n - 1 {
        padded[a + 1] = vectors.get(a, best);
    }
    let v = reflect(&padded);
    let v_norm = dot(&v, &v).sqrt();
    let v: Vec<f64> = v.iter().map(|x| x / v_norm).collect();
    let sv = sym.mul_vec(&v);
    let residual = sv
        .iter()
        .zip(&v)
        .map(|(a, b)| (a - lambda * b).powi(2))
        .sum::<f64>()
        .sqrt();
    let u: Vec<f64> = v.iter().zip(&sqrt_w).map(|(x, s)| x / s).collect();
    Ok(AlphaEstimate {
        alpha: lambda.max(0.0),
        direction: LatticeFunction::new(grid, u)?,
        residual,
    })
}
