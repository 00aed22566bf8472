//! Entropy functionals, the relative entropy and its dissipation.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use crate::dynamics::{max_increase, Trajectory};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::kernel::KernelMatrix;
use crate::padic::{integrate, LatticeFunction};
use crate::spectral::{compute_rho, SteadyPair};

/// Convex function `H` applied to the ratio `n / N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EntropyFn {
    Linear,
    Abs,
    Square,
    /// `(u - C)_+^2`
    PosPartSq(f64),
    /// `(C - u)_+^2`
    NegPartSq(f64),
    /// `(sqrt(u^2 + δ^2) + u) / 2`, a smooth stand-in for `u_+`.
    SmoothedSign(f64),
}

impl EntropyFn {
    pub fn value(self, u: f64) -> f64 {
        match self {
            EntropyFn::Linear => u,
            EntropyFn::Abs => u.abs(),
            EntropyFn::Square => u * u,
            EntropyFn::PosPartSq(c) => (u - c).max(0.0).powi(2),
            EntropyFn::NegPartSq(c) => (c - u).max(0.0).powi(2),
            EntropyFn::SmoothedSign(d) => (u.hypot(d) + u) / 2.0,
        }
    }

    /// Derivative; for `Abs` the subgradient `sign(u)` with `0` at `u = 0`.
    pub fn derivative(self, u: f64) -> f64 {
        match self {
            EntropyFn::Linear => 1.0,
            EntropyFn::Abs => {
                if u > 0.0 {
                    1.0
                } else if u < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            EntropyFn::Square => 2.0 * u,
            EntropyFn::PosPartSq(c) => 2.0 * (u - c).max(0.0),
            EntropyFn::NegPartSq(c) => -2.0 * (c - u).max(0.0),
            EntropyFn::SmoothedSign(d) => (u / u.hypot(d) + 1.0) / 2.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EntropyFn::Linear => "linear",
            EntropyFn::Abs => "abs",
            EntropyFn::Square => "square",
            EntropyFn::PosPartSq(_) => "pos_part_sq",
            EntropyFn::NegPartSq(_) => "neg_part_sq",
            EntropyFn::SmoothedSign(_) => "smoothed_sign",
        }
    }
}

impl fmt::Display for EntropyFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EntropyFn::PosPartSq(c) | EntropyFn::NegPartSq(c) | EntropyFn::SmoothedSign(c) => {
                write!(f, "{}({c})", self.name())
            }
            _ => f.write_str(self.name()),
        }
    }
}

/// Parses `square`, `abs`, `linear`, `pos_part_sq(C)`, `neg_part_sq(C)` and
/// `smoothed_sign(δ)`.
impl FromStr for EntropyFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidKernel(format!("unknown entropy function `{s}`"));
        let (name, arg) = match s.split_once('(') {
            Some((name, rest)) => {
                let arg = rest.strip_suffix(')').ok_or_else(bad)?;
                (name.trim(), Some(arg.trim().parse::<f64>().map_err(|_| bad())?))
            }
            None => (s, None),
        };
        match (name, arg) {
            ("linear", None) => Ok(EntropyFn::Linear),
            ("abs", None) => Ok(EntropyFn::Abs),
            ("square", None) => Ok(EntropyFn::Square),
            ("pos_part_sq", Some(c)) => Ok(EntropyFn::PosPartSq(c)),
            ("neg_part_sq", Some(c)) => Ok(EntropyFn::NegPartSq(c)),
            ("smoothed_sign", Some(d)) if d > 0.0 => Ok(EntropyFn::SmoothedSign(d)),
            _ => Err(bad()),
        }
    }
}

fn check_positive(f: &LatticeFunction) -> Result<()> {
    match f.values().iter().position(|&v| !(v > 0.0)) {
        Some(i) => Err(Error::NonPositiveN(i)),
        None => Ok(()),
    }
}

fn check_inputs(phi: &LatticeFunction, steady: &LatticeFunction, n: &LatticeFunction) -> Result<()> {
    phi.same_grid(steady)?;
    steady.same_grid(n)?;
    check_positive(steady)
}

/// `sum_i φ_i N_i H(n_i / N_i) μ`.
pub fn relative_entropy(
    phi: &LatticeFunction,
    steady: &LatticeFunction,
    n: &LatticeFunction,
    h: EntropyFn,
) -> Result<f64> {
    check_inputs(phi, steady, n)?;
    let mu = n.grid().cell_measure();
    let sum: f64 = phi
        .values()
        .iter()
        .zip(steady.values())
        .zip(n.values())
        .map(|((&p, &big), &v)| p * big * h.value(v / big))
        .sum();
    Ok(sum * mu)
}

/// `sum_ij w_ij [H'(u_i)(u_j - u_i) + H(u_i) - H(u_j)]`, `u = n / N`, where
/// `w_ij = rate(i, j) φ_i N_j`.
fn dissipation(
    rate: impl Fn(usize, usize) -> f64,
    phi: &LatticeFunction,
    steady: &LatticeFunction,
    n: &LatticeFunction,
    h: EntropyFn,
) -> Result<f64> {
    check_inputs(phi, steady, n)?;
    check_positive(phi)?;
    let (p, big) = (phi.values(), steady.values());
    let u: Vec<f64> = n.values().iter().zip(big).map(|(v, b)| v / b).collect();
    let hu: Vec<f64> = u.iter().map(|&x| h.value(x)).collect();
    let mut total = 0.0;
    for i in 0..u.len() {
        let d = h.derivative(u[i]);
        let mut row = 0.0;
        for j in 0..u.len() {
            let bracket = d * (u[j] - u[i]) + hu[i] - hu[j];
            row += rate(i, j) * big[j] * bracket;
        }
        total += p[i] * row;
    }
    Ok(total)
}

/// Right-hand side of the relative entropy identity,
/// `sum_ij K_ij φ_i N_j μ^2 [H'(u_i)(u_j - u_i) + H(u_i) - H(u_j)]`.
///
/// Non-positive for convex `H` whenever `(N, φ)` is a steady pair of the
/// operator built from `kmat`.
pub fn gre_dissipation_rhs(
    kmat: &KernelMatrix,
    phi: &LatticeFunction,
    steady: &LatticeFunction,
    n: &LatticeFunction,
    h: EntropyFn,
) -> Result<f64> {
    if kmat.grid() != n.grid() {
        return Err(Error::GridMismatch);
    }
    let mu = n.grid().cell_measure();
    let k = kmat.entries();
    Ok(dissipation(|i, j| k.get(i, j), phi, steady, n, h)? * mu * mu)
}

/// [`gre_dissipation_rhs`] with the kernel taken from an assembled (possibly
/// rescaled) generator's gain.
pub fn gre_dissipation_rhs_gen(
    gen: &Generator,
    phi: &LatticeFunction,
    steady: &LatticeFunction,
    n: &LatticeFunction,
    h: EntropyFn,
) -> Result<f64> {
    if gen.grid() != n.grid() {
        return Err(Error::GridMismatch);
    }
    let mu = n.grid().cell_measure();
    let a = gen.gain();
    Ok(dissipation(|i, j| a.get(i, j), phi, steady, n, h)? * mu)
}

/// Max step increase accepted by [`entropy_production_check`] for convex `H`.
pub const MONOTONE_TOL: f64 = 1e-12;

const STENCIL: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyProductionReport {
    pub times: Vec<f64>,
    pub entropy: Vec<f64>,
    pub fd_derivative: Vec<f64>,
    pub rhs: Vec<f64>,
    pub max_abs_error: f64,
    pub identity_holds: bool,
    pub max_increase: f64,
    pub non_increasing: bool,
}

/// Weights of the first derivative at `x0` on `nodes` (Fornberg).
fn fd_weights(x0: f64, nodes: &[f64]) -> Vec<f64> {
    let n = nodes.len();
    // c[j][k]: weight of node j for derivative order k (k = 0, 1).
    let mut c = vec![[0.0f64; 2]; n];
    c[0][0] = 1.0;
    let mut c1 = 1.0;
    let mut c4 = nodes[0] - x0;
    for i in 1..n {
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = nodes[i] - x0;
        for j in 0..i {
            let c3 = nodes[i] - nodes[j];
            c2 *= c3;
            if j == i - 1 {
                c[i][1] = c1 * (c[i - 1][0] - c5 * c[i - 1][1]) / c2;
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            c[j][1] = (c4 * c[j][1] - c[j][0]) / c3;
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.into_iter().map(|w| w[1]).collect()
}

/// Compare a fourth-order finite-difference `d𝓗/dt` with the dissipation
/// formula at every sample, and check that `𝓗` does not increase.
///
/// Five-point stencils are centred in the interior and shifted at both ends.
pub fn entropy_production_check(
    gen: &Generator,
    traj: &Trajectory,
    phi: &LatticeFunction,
    steady: &LatticeFunction,
    h: EntropyFn,
    tol: f64,
) -> Result<EntropyProductionReport> {
    let len = traj.len();
    if len < STENCIL {
        return Err(Error::InsufficientSamples {
            needed: STENCIL,
            got: len,
        });
    }
    let entropy: Vec<f64> = traj
        .states
        .iter()
        .map(|n| relative_entropy(phi, steady, n, h))
        .collect::<Result<_>>()?;
    let rhs: Vec<f64> = traj
        .states
        .iter()
        .map(|n| gre_dissipation_rhs_gen(gen, phi, steady, n, h))
        .collect::<Result<_>>()?;
    let fd_derivative: Vec<f64> = (0..len)
        .map(|i| {
            let start = i.saturating_sub(STENCIL / 2).min(len - STENCIL);
            let nodes = &traj.times[start..start + STENCIL];
            fd_weights(traj.times[i], nodes)
                .iter()
                .zip(&entropy[start..start + STENCIL])
                .map(|(w, e)| w * e)
                .sum()
        })
        .collect();
    let max_abs_error = fd_derivative
        .iter()
        .zip(&rhs)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let max_increase = max_increase(&entropy);
    Ok(EntropyProductionReport {
        times: traj.times.clone(),
        identity_holds: max_abs_error <= tol,
        non_increasing: max_increase <= MONOTONE_TOL,
        entropy,
        fd_derivative,
        rhs,
        max_abs_error,
        max_increase,
    })
}

/// Least-squares slope of `-ln(value)` against `t`; a pure `e^{-αt}` series
/// gives `α`.
pub fn fit_decay_rate(times: &[f64], values: &[f64]) -> Result<f64> {
    if times.len() != values.len() {
        return Err(Error::LengthMismatch {
            expected: times.len(),
            got: values.len(),
        });
    }
    if times.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: times.len(),
        });
    }
    if let Some(&v) = values.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::NonPositiveValue(v));
    }
    let n = times.len() as f64;
    let y: Vec<f64> = values.iter().map(|v| -v.ln()).collect();
    let tm = times.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let sxx: f64 = times.iter().map(|t| (t - tm).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientSamples { needed: 2, got: 1 });
    }
    let sxy: f64 = times.iter().zip(&y).map(|(t, v)| (t - tm) * (v - ym)).sum();
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosticsRow {
    pub t: f64,
    pub mass: f64,
    pub l1: f64,
    /// `sum_i φ_i N_i (h_i / N_i)^2 μ` with `h = n - ρ N`, `ρ = ∫ φ n`.
    pub weighted_l2sq: f64,
    pub rel_entropy_square: f64,
    pub rel_entropy_abs: f64,
    pub min_n: f64,
    pub max_ratio: f64,
    pub min_ratio: f64,
}

pub const DIAGNOSTICS_HEADER: &str =
    "t,mass,l1,weighted_l2sq,rel_entropy_square,rel_entropy_abs,min_n,max_ratio,min_ratio";

/// One diagnostics row for the state `n` at time `t`.
pub fn diagnostics(t: f64, n: &LatticeFunction, pair: &SteadyPair) -> Result<DiagnosticsRow> {
    let (phi, big) = (&pair.dual, &pair.steady);
    check_inputs(phi, big, n)?;
    let grid = *n.grid();
    let rho = compute_rho(phi, n)?;
    let h = n.combine(1.0, big, -rho)?;
    let ratios: Vec<f64> = n.values().iter().zip(big.values()).map(|(a, b)| a / b).collect();
    Ok(DiagnosticsRow {
        t,
        mass: integrate(&grid, n)?,
        l1: n.l1_norm(),
        weighted_l2sq: relative_entropy(phi, big, &h, EntropyFn::Square)?,
        rel_entropy_square: relative_entropy(phi, big, n, EntropyFn::Square)?,
        rel_entropy_abs: relative_entropy(phi, big, n, EntropyFn::Abs)?,
        min_n: n.min(),
        max_ratio: ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        min_ratio: ratios.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

pub fn write_diagnostics_csv<W: Write>(rows: &[DiagnosticsRow], w: &mut W) -> io::Result<()> {
    writeln!(w, "{DIAGNOSTICS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.t,
            r.mass,
            r.l1,
            r.weighted_l2sq,
            r.rel_entropy_square,
            r.rel_entropy_abs,
            r.min_n,
            r.max_ratio,
            r.min_ratio
        )?;
    }
    Ok(())
}
