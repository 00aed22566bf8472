//! Time integration of the primal, dual and rescaled equations.

use std::borrow::Cow;
use std::io::{self, Write};

use crate::entropy::{diagnostics, DiagnosticsRow};
use crate::error::{Error, Result};
use crate::generator::{assemble, regularity_constant, rescale, Generator, KMode, RescaleLevel};
use crate::kernel::{build_kernel_matrix, KernelSpec};
use crate::linalg::Matrix;
use crate::padic::{Grid, LatticeFunction};
use crate::spectral::SteadyPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Rk4,
    ExpmOracle,
    Picard,
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "rk4" => Ok(Self::Rk4),
            "expm" | "expm_oracle" => Ok(Self::ExpmOracle),
            "picard" => Ok(Self::Picard),
            other => Err(format!("unknown integrator {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorSpec {
    pub method: Method,
    /// Step for rk4 and picard; sampling interval unit for the expm oracle.
    pub dt: f64,
    pub picard_iterations: usize,
    pub expm_tol: f64,
}

pub const DEFAULT_EXPM_TOL: f64 = 1e-16;

impl IntegratorSpec {
    pub fn rk4(dt: f64) -> Self {
        Self {
            method: Method::Rk4,
            dt,
            picard_iterations: 60,
            expm_tol: DEFAULT_EXPM_TOL,
        }
    }

    pub fn expm(dt: f64) -> Self {
        Self {
            method: Method::ExpmOracle,
            ..Self::rk4(dt)
        }
    }

    pub fn picard(dt: f64, iterations: usize) -> Self {
        Self {
            method: Method::Picard,
            picard_iterations: iterations,
            ..Self::rk4(dt)
        }
    }

    /// rk4 with `dt = min(0.01, 1 / (4 k_max))`.
    pub fn default_for(gen: &Generator) -> Self {
        Self::rk4(default_dt(gen.k_max()))
    }
}

pub fn default_dt(k_max: f64) -> f64 {
    if k_max > 0.0 {
        (0.25 / k_max).min(0.01)
    } else {
        0.01
    }
}

fn check_guard(gen: &Generator, dt: f64) -> Result<()> {
    let k_max = gen.k_max();
    if !(dt > 0.0) || dt * k_max > 1.0 + 1e-12 {
        return Err(Error::StepTooLarge { dt, k_max });
    }
    Ok(())
}

/// Right-hand side of a (possibly time-dependent) linear flow.
#[derive(Debug, Clone, Copy)]
pub enum Source<'a> {
    Fixed(&'a Generator),
    /// Kernel resampled at every stage time, assembled in column-sum mode.
    Sampled { spec: &'a KernelSpec, grid: Grid },
}

impl<'a> Source<'a> {
    pub fn grid(&self) -> Grid {
        match self {
            Source::Fixed(g) => *g.grid(),
            Source::Sampled { grid, .. } => *grid,
        }
    }

    pub fn generator_at(&self, t: f64) -> Result<Cow<'a, Generator>> {
        match *self {
            Source::Fixed(g) => Ok(Cow::Borrowed(g)),
            Source::Sampled { spec, grid } => {
                let kmat = build_kernel_matrix(spec, &grid, t)?;
                Ok(Cow::Owned(assemble(&kmat, &grid, KMode::ColumnSum, None)?))
            }
        }
    }
}

/// Right-hand side as seen by the stepper. Dual flows run in the reversed
/// clock `s = t_end - t` under the transposed operator.
enum Flow<'a> {
    Fixed(Cow<'a, Generator>),
    Sampled { spec: &'a KernelSpec, grid: Grid },
    DualSampled { spec: &'a KernelSpec, grid: Grid, t_end: f64 },
}

impl<'a> Flow<'a> {
    fn forward(source: Source<'a>) -> Self {
        match source {
            Source::Fixed(g) => Flow::Fixed(Cow::Borrowed(g)),
            Source::Sampled { spec, grid } => Flow::Sampled { spec, grid },
        }
    }

    fn dual(source: Source<'a>, t_end: f64) -> Self {
        match source {
            Source::Fixed(g) => Flow::Fixed(Cow::Owned(g.dual())),
            Source::Sampled { spec, grid } => Flow::DualSampled { spec, grid, t_end },
        }
    }

    fn generator_at(&self, s: f64) -> Result<Cow<'_, Generator>> {
        match self {
            Flow::Fixed(g) => Ok(Cow::Borrowed(g.as_ref())),
            Flow::Sampled { spec, grid } => {
                let g = Source::Sampled { spec, grid: *grid }.generator_at(s)?;
                Ok(Cow::Owned(g.into_owned()))
            }
            Flow::DualSampled { spec, grid, t_end } => {
                let g = Source::Sampled { spec, grid: *grid }.generator_at(t_end - s)?;
                Ok(Cow::Owned(g.dual()))
            }
        }
    }

    fn is_fixed(&self) -> bool {
        matches!(self, Flow::Fixed(_))
    }
}

impl Generator {
    /// Generator whose forward flow is the dual flow: gain transposed, same loss.
    pub fn dual(&self) -> Generator {
        self.with_gain(self.gain().transpose())
    }
}

fn axpy(x: &[f64], a: f64, y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(xi, yi)| xi + a * yi).collect()
}

fn rk4_raw(flow: &Flow<'_>, f: &[f64], t: f64, dt: f64) -> Result<Vec<f64>> {
    let g0 = flow.generator_at(t)?;
    check_guard(&g0, dt)?;
    let (gh, g1) = if flow.is_fixed() {
        (None, None)
    } else {
        let gh = flow.generator_at(t + 0.5 * dt)?;
        let g1 = flow.generator_at(t + dt)?;
        check_guard(&gh, dt)?;
        check_guard(&g1, dt)?;
        (Some(gh), Some(g1))
    };
    let gh: &Generator = gh.as_deref().unwrap_or(&g0);
    let g1: &Generator = g1.as_deref().unwrap_or(&g0);
    let k1 = g0.apply_raw(f);
    let k2 = gh.apply_raw(&axpy(f, 0.5 * dt, &k1));
    let k3 = gh.apply_raw(&axpy(f, 0.5 * dt, &k2));
    let k4 = g1.apply_raw(&axpy(f, dt, &k3));
    Ok(f.iter()
        .enumerate()
        .map(|(i, v)| v + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// One classical Runge-Kutta step of `df/dt = F(f)`; requires `dt * k_max <= 1`.
pub fn step_rk4(gen: &Generator, f: &LatticeFunction, dt: f64) -> Result<LatticeFunction> {
    if f.grid() != gen.grid() {
        return Err(Error::GridMismatch);
    }
    let out = rk4_raw(&Flow::Fixed(Cow::Borrowed(gen)), f.values(), 0.0, dt)?;
    Ok(LatticeFunction::from_vec_unchecked(*gen.grid(), out))
}

/// `exp(t G)` by scaling and squaring of a truncated Taylor series.
pub fn expm_matrix(gen: &Generator, t: f64, tol: f64) -> Result<Matrix> {
    const MAX_TERMS: usize = 60;
    let g = gen.to_matrix();
    let n = g.size();
    let norm = t.abs() * g.norm_1();
    let mut squarings = 0u32;
    while norm / 2f64.powi(squarings as i32) > 0.5 {
        squarings += 1;
    }
    let x = g.scale(t / 2f64.powi(squarings as i32));
    let mut sum = Matrix::identity(n);
    let mut term = Matrix::identity(n);
    let mut converged = norm == 0.0;
    for k in 1..=MAX_TERMS {
        if converged {
            break;
        }
        term = term.matmul(&x).scale(1.0 / k as f64);
        sum.add_scaled(&term, 1.0);
        converged = term.norm_1() <= tol * sum.norm_1();
    }
    if !converged {
        return Err(Error::ToleranceNotReached(tol));
    }
    for _ in 0..squarings {
        sum = sum.matmul(&sum);
    }
    Ok(sum)
}

/// `exp(t G) f`.
pub fn expm_apply(gen: &Generator, f: &LatticeFunction, t: f64, tol: f64) -> Result<LatticeFunction> {
    if f.grid() != gen.grid() {
        return Err(Error::GridMismatch);
    }
    if t < 0.0 {
        return Err(Error::UnsupportedIntegrator(format!("negative time {t}")));
    }
    let e = expm_matrix(gen, t, tol)?;
    Ok(LatticeFunction::from_vec_unchecked(*gen.grid(), e.mul_vec(f.values())))
}

/// `iters`-th Picard iterate `u_{k+1}(t) = f + ∫_0^t G u_k(s) ds`, `u_0 = f`.
///
/// Iterates are polynomials in `s`; the Picard map keeps the coefficients of
/// the previous iterate and appends `G c_k / (k + 1)`, so `u_k(t)` equals
/// `sum_{j <= k} (tG)^j f / j!`.
pub fn picard_iterate(gen: &Generator, f: &LatticeFunction, t: f64, iters: usize) -> Result<LatticeFunction> {
    if f.grid() != gen.grid() {
        return Err(Error::GridMismatch);
    }
    let out = picard_raw(gen, f.values(), t, iters);
    Ok(LatticeFunction::from_vec_unchecked(*gen.grid(), out))
}

fn picard_raw(gen: &Generator, f: &[f64], t: f64, iters: usize) -> Vec<f64> {
    let mut coeffs: Vec<Vec<f64>> = vec![f.to_vec()];
    for k in 0..iters {
        let next: Vec<f64> = gen
            .apply_raw(&coeffs[k])
            .into_iter()
            .map(|v| v / (k + 1) as f64)
            .collect();
        coeffs.push(next);
    }
    // Horner in t.
    let mut acc = coeffs.pop().expect("at least one coefficient");
    while let Some(c) = coeffs.pop() {
        acc = c.iter().zip(&acc).map(|(ci, ai)| ci + t * ai).collect();
    }
    acc
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<LatticeFunction>,
    pub diagnostics: Vec<DiagnosticsRow>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> &LatticeFunction {
        self.states.last().expect("trajectory holds the initial state")
    }

    /// Fill one diagnostics row per sample against a steady pair.
    pub fn attach_diagnostics(&mut self, pair: &SteadyPair) -> Result<()> {
        self.diagnostics = self
            .times
            .iter()
            .zip(&self.states)
            .map(|(&t, n)| diagnostics(t, n, pair))
            .collect::<Result<_>>()?;
        Ok(())
    }

    /// CSV with header `t,cell_0,...,cell_{N-1}`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let cells = self.states.first().map_or(0, |s| s.len());
        write!(w, "t")?;
        for i in 0..cells {
            write!(w, ",cell_{i}")?;
        }
        writeln!(w)?;
        for (t, s) in self.times.iter().zip(&self.states) {
            write!(w, "{t}")?;
            for v in s.values() {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Step boundaries `0 = t_0 < ... < t_K = t_end` with spacing `dt`, the last
/// step shortened to land on `t_end`.
fn step_times(dt: f64, t_end: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::StepTooLarge { dt, k_max: f64::NAN });
    }
    if !(t_end >= 0.0) || !t_end.is_finite() {
        return Err(Error::UnsupportedIntegrator(format!("invalid end time {t_end}")));
    }
    let steps = ((t_end / dt) - 1e-9).ceil().max(0.0) as usize;
    let mut times: Vec<f64> = (0..=steps).map(|k| k as f64 * dt).collect();
    if let Some(last) = times.last_mut() {
        *last = t_end;
    }
    if steps == 0 {
        times = vec![0.0];
        if t_end > 0.0 {
            times.push(t_end);
        }
    }
    Ok(times)
}

fn integrate_flow(
    flow: &Flow<'_>,
    grid: Grid,
    x0: &LatticeFunction,
    integ: &IntegratorSpec,
    t_end: f64,
    sample_every: usize,
) -> Result<Trajectory> {
    if *x0.grid() != grid {
        return Err(Error::GridMismatch);
    }
    let sample_every = sample_every.max(1);
    let grid_times = step_times(integ.dt, t_end)?;
    let steps = grid_times.len() - 1;

    let mut stepper: Box<dyn FnMut(&[f64], f64, f64) -> Result<Vec<f64>>> = match integ.method {
        Method::Rk4 => Box::new(|f: &[f64], t: f64, h: f64| rk4_raw(flow, f, t, h)),
        Method::ExpmOracle | Method::Picard if !flow.is_fixed() => {
            return Err(Error::UnsupportedIntegrator(
                "time-dependent kernels need rk4".into(),
            ))
        }
        Method::ExpmOracle => {
            let gen = flow.generator_at(0.0)?.into_owned();
            let tol = integ.expm_tol;
            let mut cache: Vec<(f64, Matrix)> = Vec::new();
            Box::new(move |f: &[f64], _t: f64, h: f64| {
                if let Some((_, e)) = cache.iter().find(|(key, _)| *key == h) {
                    return Ok(e.mul_vec(f));
                }
                let e = expm_matrix(&gen, h, tol)?;
                let out = e.mul_vec(f);
                cache.push((h, e));
                Ok(out)
            })
        }
        Method::Picard => {
            let gen = flow.generator_at(0.0)?.into_owned();
            let iters = integ.picard_iterations.max(1);
            Box::new(move |f: &[f64], _t: f64, h: f64| Ok(picard_raw(&gen, f, h, iters)))
        }
    };

    let mut times = vec![0.0];
    let mut states = vec![x0.clone()];
    let mut current = x0.values().to_vec();
    for k in 0..steps {
        let (t0, t1) = (grid_times[k], grid_times[k + 1]);
        current = stepper(&current, t0, t1 - t0)?;
        if (k + 1) % sample_every == 0 || k + 1 == steps {
            if let Some(bad) = current.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue(bad));
            }
            times.push(t1);
            states.push(LatticeFunction::from_vec_unchecked(grid, current.clone()));
        }
    }
    Ok(Trajectory {
        times,
        states,
        diagnostics: Vec::new(),
    })
}

/// Integrate the primal equation from `n0` up to `t_end`, recording every
/// `sample_every`-th step and the final state.
pub fn evolve(
    source: Source<'_>,
    n0: &LatticeFunction,
    integ: &IntegratorSpec,
    t_end: f64,
    sample_every: usize,
) -> Result<Trajectory> {
    integrate_flow(&Flow::forward(source), source.grid(), n0, integ, t_end, sample_every)
}

/// Solve the dual equation backward from `φ(t_end) = phi_end` down to
/// `t_start`; returned samples run forward in time.
pub fn evolve_dual(
    source: Source<'_>,
    phi_end: &LatticeFunction,
    integ: &IntegratorSpec,
    t_start: f64,
    t_end: f64,
    sample_every: usize,
) -> Result<Trajectory> {
    if t_start > t_end {
        return Err(Error::UnsupportedIntegrator(format!(
            "t_start {t_start} after t_end {t_end}"
        )));
    }
    let flow = Flow::dual(source, t_end);
    let reversed = integrate_flow(&flow, source.grid(), phi_end, integ, t_end - t_start, sample_every)?;
    let times = reversed.times.iter().rev().map(|s| t_end - s).collect();
    let states = reversed.states.into_iter().rev().collect();
    Ok(Trajectory {
        times,
        states,
        diagnostics: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub times: Vec<f64>,
    /// `∫ |n(t) - v(t)|` per sample.
    pub distances: Vec<f64>,
    /// Largest increase between consecutive samples (negative when strictly decreasing).
    pub max_increase: f64,
    pub non_increasing: bool,
}

pub const STABILITY_TOL: f64 = 1e-9;

/// Evolve two initial data under one generator and track their L¹ distance.
pub fn run_stability(
    gen: &Generator,
    n0: &LatticeFunction,
    v0: &LatticeFunction,
    integ: &IntegratorSpec,
    t_end: f64,
) -> Result<StabilityReport> {
    n0.same_grid(v0)?;
    let a = evolve(Source::Fixed(gen), n0, integ, t_end, 1)?;
    let b = evolve(Source::Fixed(gen), v0, integ, t_end, 1)?;
    let distances: Vec<f64> = a
        .states
        .iter()
        .zip(&b.states)
        .map(|(x, y)| x.combine(1.0, y, -1.0).map(|d| d.l1_norm()))
        .collect::<Result<_>>()?;
    let max_increase = max_increase(&distances);
    Ok(StabilityReport {
        times: a.times,
        distances,
        max_increase,
        non_increasing: max_increase <= STABILITY_TOL,
    })
}

pub(crate) fn max_increase(series: &[f64]) -> f64 {
    series
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct L2Report {
    pub times: Vec<f64>,
    /// `(sum_i n_i^2 μ)^(1/2)` per sample.
    pub l2_norms: Vec<f64>,
    /// Regularity constant `L₁` used in the bound.
    pub l1_constant: f64,
    /// `max_t ||n(t)||_2 / (e^{L₁ t} ||n0||_2)`.
    pub worst_bound_ratio: f64,
    pub bound_holds: bool,
    pub max_increase: f64,
}

pub const L2_BOUND_TOL: f64 = 1e-9;

/// Evolve under `gen` and compare the L² norm with `e^{L₁ t} ||n0||_2`.
pub fn run_l2_bound(
    gen: &Generator,
    l1_constant: f64,
    n0: &LatticeFunction,
    integ: &IntegratorSpec,
    t_end: f64,
) -> Result<L2Report> {
    let traj = evolve(Source::Fixed(gen), n0, integ, t_end, 1)?;
    let l2_norms: Vec<f64> = traj.states.iter().map(|s| s.l2_norm()).collect();
    let initial = l2_norms[0];
    let worst_bound_ratio = traj
        .times
        .iter()
        .zip(&l2_norms)
        .map(|(&t, &norm)| {
            let bound = (l1_constant * t).exp() * initial;
            if bound > 0.0 {
                norm / bound
            } else if norm == 0.0 {
                1.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max);
    let max_increase = max_increase(&l2_norms);
    Ok(L2Report {
        times: traj.times,
        l2_norms,
        l1_constant,
        worst_bound_ratio,
        bound_holds: worst_bound_ratio <= 1.0 + L2_BOUND_TOL,
        max_increase,
    })
}

/// Evolve the hyperbolically rescaled system of a radial kernel at level `l`.
pub fn run_rescaled(
    spec: &KernelSpec,
    grid: &Grid,
    level: RescaleLevel,
    n0: &LatticeFunction,
    integ: &IntegratorSpec,
    t_end: f64,
) -> Result<L2Report> {
    let gen = rescale(spec, grid, level)?;
    let l1 = regularity_constant(spec, grid, level)?;
    run_l2_bound(&gen, l1, n0, integ, t_end)
}
