//! Acceptance suite: one line per criterion, non-zero exit if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::*;
use uscatter::dynamics::{evolve, expm_apply, run_l2_bound, run_rescaled, run_stability, IntegratorSpec, Source};
use uscatter::entropy::{diagnostics, entropy_production_check, fit_decay_rate, relative_entropy, EntropyFn};
use uscatter::generator::{apply, apply_dual, regularity_constant, RescaleLevel};
use uscatter::kernel::{KernelSpec, RadialKernel, RadialProfile};
use uscatter::linalg::norm_inf;
use uscatter::padic::integrate;
use uscatter::rng::SplitMix64;
use uscatter::spectral::{estimate_alpha, SteadyPair};
use uscatter::{Grid, LatticeFunction};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn max_increase(series: &[f64]) -> f64 {
    series.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max)
}

fn default_integ(gen: &uscatter::generator::Generator) -> IntegratorSpec {
    IntegratorSpec::default_for(gen)
}

fn mass_conservation() -> Outcome {
    let start = Instant::now();
    let mut cases = vec![("u4".to_owned(), u4_generator())];
    cases.extend(random_suite(20, 101).into_iter().map(|c| (c.name, c.gen)));
    let mut rng = SplitMix64::new(1);
    let mut worst = 0.0f64;
    for (name, gen) in &cases {
        let n0 = if name == "u4" {
            LatticeFunction::new(u4(), vec![2.0, 0.0, 0.0, 0.0]).unwrap()
        } else {
            random_nonnegative(&mut rng, *gen.grid())
        };
        let m0 = integrate(gen.grid(), &n0).unwrap();
        let traj = evolve(Source::Fixed(gen), &n0, &IntegratorSpec::rk4(1e-2), 10.0, 1).unwrap();
        for s in &traj.states {
            let drift = (integrate(gen.grid(), s).unwrap() - m0).abs() / m0.abs();
            worst = worst.max(drift);
            ensure(drift <= 1e-9, || format!("{name}: relative mass drift {drift:e}"))?;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 5.0, || format!("runtime {secs:.2} s"))?;
    Ok(format!("{} systems, worst relative drift {worst:.1e}, {secs:.2} s", cases.len()))
}

fn positivity() -> Outcome {
    let suite = random_suite(20, 202);
    let mut rng = SplitMix64::new(2);
    let mut min = f64::INFINITY;
    for k in 0..100 {
        let case = &suite[k % suite.len()];
        let n0 = random_nonnegative(&mut rng, case.grid);
        let traj = evolve(Source::Fixed(&case.gen), &n0, &default_integ(&case.gen), 2.0, 1).unwrap();
        for s in &traj.states {
            min = min.min(s.min());
        }
        ensure(min >= -1e-12, || format!("{}: min {min:e}", case.name))?;
    }
    Ok(format!("100 data, min value {min:e}"))
}

fn l1_contraction() -> Outcome {
    let suite = random_suite(20, 303);
    let mut rng = SplitMix64::new(3);
    let mut worst = f64::NEG_INFINITY;
    for k in 0..100 {
        let case = &suite[k % suite.len()];
        let n0 = random_signed(&mut rng, case.grid);
        let traj = evolve(Source::Fixed(&case.gen), &n0, &default_integ(&case.gen), 2.0, 1).unwrap();
        let l1: Vec<f64> = traj.states.iter().map(|s| s.l1_norm()).collect();
        let over = l1.iter().map(|v| v - l1[0]).fold(f64::NEG_INFINITY, f64::max);
        let inc = max_increase(&l1);
        worst = worst.max(inc);
        ensure(over <= 1e-9, || format!("{}: exceeds initial by {over:e}", case.name))?;
        ensure(inc <= 1e-9, || format!("{}: step increase {inc:e}", case.name))?;
    }
    Ok(format!("100 signed data, max step increase {worst:.1e}"))
}

fn oracle_equivalence() -> Outcome {
    let mut rk4_err = 0.0f64;
    let mut picard_err = 0.0f64;
    let mut count = 0;
    let p3 = Grid::new(3, 1, 1, 1).unwrap();
    for grid in [u4(), p3] {
        for case in builtin_cases(grid, 404) {
            let n0 = SplitMix64::new(4).lattice_function(grid, 0.0, 2.0);
            let exact = expm_apply(&case.gen, &n0, 1.0, 1e-16).unwrap();
            let rk4 = evolve(Source::Fixed(&case.gen), &n0, &IntegratorSpec::rk4(1e-3), 1.0, 1000).unwrap();
            let e = rk4.last().max_abs_diff(&exact).unwrap();
            ensure(e <= 1e-7, || format!("{}: rk4 error {e:e}", case.name))?;
            let picard = evolve(Source::Fixed(&case.gen), &n0, &IntegratorSpec::picard(0.1, 60), 1.0, 10).unwrap();
            let p = picard.last().max_abs_diff(&exact).unwrap();
            ensure(p <= 1e-12, || format!("{}: picard error {p:e}", case.name))?;
            rk4_err = rk4_err.max(e);
            picard_err = picard_err.max(p);
            count += 1;
        }
    }
    Ok(format!("{count} kernels, rk4 {rk4_err:.1e}, picard {picard_err:.1e}"))
}

fn gre_identity() -> Outcome {
    let gen = u4_generator();
    let pair = SteadyPair::solve(&gen).unwrap();
    let n0 = LatticeFunction::new(u4(), vec![2.0, 0.0, 0.0, 0.0]).unwrap();
    let traj = evolve(Source::Fixed(&gen), &n0, &IntegratorSpec::rk4(1e-3), 1.0, 1).unwrap();
    let rep = entropy_production_check(&gen, &traj, &pair.dual, &pair.steady, EntropyFn::Square, 1e-5).unwrap();
    ensure(rep.identity_holds, || format!("max |fd - rhs| = {:e}", rep.max_abs_error))?;
    let at0 = rep.rhs[0];
    ensure((at0 + 12.0).abs() <= 1e-6, || format!("rhs(0) = {at0}"))?;
    let fd0 = rep.fd_derivative[0];
    ensure((fd0 + 12.0).abs() <= 1e-5, || format!("fd(0) = {fd0}"))?;
    Ok(format!(
        "max |fd - rhs| {:.1e}, rhs(0) = {at0:.9}",
        rep.max_abs_error
    ))
}

fn entropy_monotonicity() -> Outcome {
    let suite = random_suite(20, 606);
    let mut rng = SplitMix64::new(6);
    let mut worst = f64::NEG_INFINITY;
    for case in &suite {
        let pair = SteadyPair::solve(&case.gen).unwrap();
        let n0 = random_signed(&mut rng, case.grid).map(|v| 1.0 + 2.0 * v);
        let n0 = n0.zip_map(&pair.steady, |a, b| a * b).unwrap();
        let traj = evolve(Source::Fixed(&case.gen), &n0, &default_integ(&case.gen), 2.0, 1).unwrap();
        for h in [
            EntropyFn::Square,
            EntropyFn::Abs,
            EntropyFn::PosPartSq(1.0),
            EntropyFn::NegPartSq(1.0),
        ] {
            let series: Vec<f64> = traj
                .states
                .iter()
                .map(|s| relative_entropy(&pair.dual, &pair.steady, s, h).unwrap())
                .collect();
            let inc = max_increase(&series);
            worst = worst.max(inc);
            ensure(inc <= 1e-12, || format!("{} {h}: increase {inc:e}", case.name))?;
        }
    }
    Ok(format!("{} systems x 4 entropies, max step increase {worst:.1e}", suite.len()))
}

fn poincare_decay() -> Outcome {
    let gen = u4_generator();
    let pair = SteadyPair::solve(&gen).unwrap();
    let alpha = estimate_alpha(&gen, &pair.steady, &pair.dual).unwrap().alpha;
    ensure((alpha - 4.0).abs() <= 1e-6, || format!("U4 alpha = {alpha}"))?;

    let suite = random_suite(50, 707);
    let mut rng = SplitMix64::new(7);
    let mut worst = 0.0f64;
    for case in &suite {
        let pair = SteadyPair::solve(&case.gen).unwrap();
        let a = estimate_alpha(&case.gen, &pair.steady, &pair.dual).unwrap().alpha;
        ensure(a > 0.0, || format!("{}: alpha = {a}", case.name))?;
        let n0 = rng.lattice_function(case.grid, 0.0, 2.0);
        let q0 = diagnostics(0.0, &n0, &pair).unwrap().weighted_l2sq;
        for t in [0.05, 0.2, 0.5, 1.0, 2.0] {
            let nt = expm_apply(&case.gen, &n0, t, 1e-16).unwrap();
            let q = diagnostics(t, &nt, &pair).unwrap().weighted_l2sq;
            let ratio = q / ((-a * t).exp() * q0);
            worst = worst.max(ratio);
            ensure(ratio <= 1.0 + 1e-8, || format!("{} t={t}: ratio {ratio}", case.name))?;
        }
    }

    let n0 = LatticeFunction::new(u4(), vec![2.0, 0.0, 0.0, 0.0]).unwrap();
    let mut traj = evolve(Source::Fixed(&gen), &n0, &IntegratorSpec::rk4(1e-3), 2.0, 10).unwrap();
    traj.attach_diagnostics(&pair).unwrap();
    let (t, q): (Vec<f64>, Vec<f64>) = traj.diagnostics.iter().map(|r| (r.t, r.weighted_l2sq)).unzip();
    let rate = fit_decay_rate(&t, &q).unwrap();
    ensure((rate - 4.0).abs() <= 1e-3, || format!("U4 fitted rate {rate}"))?;
    Ok(format!(
        "U4 alpha {alpha:.12}, fitted {rate:.6}; 50 systems, worst ratio {worst:.10}"
    ))
}

fn maximum_principle() -> Outcome {
    let suite = random_suite(20, 808);
    let mut rng = SplitMix64::new(8);
    for case in &suite {
        let pair = SteadyPair::solve(&case.gen).unwrap();
        let factors = rng.lattice_function(case.grid, 0.3, 3.0);
        let n0 = factors.zip_map(&pair.steady, |a, b| a * b).unwrap();
        let (c0, c1) = (factors.max(), factors.min());
        let mut traj = evolve(Source::Fixed(&case.gen), &n0, &default_integ(&case.gen), 3.0, 1).unwrap();
        traj.attach_diagnostics(&pair).unwrap();
        for r in &traj.diagnostics {
            ensure(r.max_ratio <= c0 * (1.0 + 1e-9), || {
                format!("{} t={}: max ratio {} > {c0}", case.name, r.t, r.max_ratio)
            })?;
            ensure(r.min_ratio >= c1 * (1.0 - 1e-9), || {
                format!("{} t={}: min ratio {} < {c1}", case.name, r.t, r.min_ratio)
            })?;
        }
    }
    Ok(format!("{} systems, ratios stay in [C1, C0]", suite.len()))
}

fn stability() -> Outcome {
    let suite = random_suite(20, 909);
    let mut rng = SplitMix64::new(9);
    let mut worst = f64::NEG_INFINITY;
    for k in 0..50 {
        let case = &suite[k % suite.len()];
        let n0 = rng.lattice_function(case.grid, 0.0, 2.0);
        let v0 = random_signed(&mut rng, case.grid);
        let rep = run_stability(&case.gen, &n0, &v0, &default_integ(&case.gen), 2.0).unwrap();
        worst = worst.max(rep.max_increase);
        ensure(rep.non_increasing, || format!("{}: increase {:e}", case.name, rep.max_increase))?;
    }
    let gen = u4_generator();
    let n0 = LatticeFunction::new(u4(), vec![2.0, 0.0, 0.0, 0.0]).unwrap();
    let v0 = LatticeFunction::constant(u4(), 0.5);
    let rep = run_stability(&gen, &n0, &v0, &IntegratorSpec::rk4(1e-3), 2.0).unwrap();
    let rate = fit_decay_rate(&rep.times, &rep.distances).unwrap();
    ensure((rate - 2.0).abs() <= 1e-3, || format!("U4 pair rate {rate}"))?;
    Ok(format!("50 pairs, max step increase {worst:.1e}; U4 pair rate {rate:.6}"))
}

fn rescaling_bound() -> Outcome {
    let grid = Grid::new(2, 1, 2, 2).unwrap();
    let profiles = [
        RadialProfile::Indicator { radius: 1.0 },
        RadialProfile::Linear,
        RadialProfile::Exponential {
            coefficient: 1.0,
            rate: 0.5,
        },
        RadialProfile::Power {
            coefficient: 0.5,
            exponent: -1.0,
        },
    ];
    let n0 = SplitMix64::new(10).lattice_function(grid, -1.0, 1.0);
    let mut worst = f64::NEG_INFINITY;
    let mut runs = 0;
    for profile in profiles {
        let spec = KernelSpec::Radial(RadialKernel::new(profile));
        for l in 0..=2 {
            let gen = uscatter::generator::rescale(&spec, &grid, RescaleLevel(l)).unwrap();
            let rep = run_rescaled(&spec, &grid, RescaleLevel(l), &n0, &default_integ(&gen), 1.0).unwrap();
            ensure(rep.l1_constant == 0.0, || format!("{spec:?} l={l}: L1 = {}", rep.l1_constant))?;
            ensure(rep.max_increase <= 1e-9, || format!("{spec:?} l={l}: increase {:e}", rep.max_increase))?;
            worst = worst.max(rep.max_increase);
            runs += 1;
        }
    }
    let mut rng = SplitMix64::new(11);
    let n = grid.cell_count();
    let table = uscatter::linalg::Matrix::from_fn(n, |_, _| 1.0 + 0.5 * rng.uniform(-1.0, 1.0));
    let spec = KernelSpec::Table(table);
    let gen = generator(&spec, grid);
    let l1 = regularity_constant(&spec, &grid, RescaleLevel(0)).unwrap();
    let rep = run_l2_bound(&gen, l1, &n0, &default_integ(&gen), 2.0).unwrap();
    ensure(rep.bound_holds, || format!("table: ratio {}", rep.worst_bound_ratio))?;
    Ok(format!(
        "{runs} radial runs, max L2 increase {worst:.1e}; table L1 = {l1:.4}, worst ratio {:.6}",
        rep.worst_bound_ratio
    ))
}

fn steady_constructions() -> Outcome {
    let mut worst = 0.0f64;
    for grid in small_grids() {
        let mut rng = SplitMix64::new(12 + grid.cell_count() as u64);
        let target = rng.lattice_function(grid, 0.2, 2.0);
        let target = target.scale(1.0 / integrate(&grid, &target).unwrap());
        let specs = [
            ("projection", KernelSpec::uniform_projection(target.clone(), 1.3).unwrap()),
            (
                "detailed_balance",
                KernelSpec::detailed_balance(rng.symmetric_table(grid.cell_count(), 0.1, 1.0), target.clone()).unwrap(),
            ),
        ];
        for (name, spec) in specs {
            let gen = generator(&spec, grid);
            let r = norm_inf(apply(&gen, &target).unwrap().values());
            worst = worst.max(r);
            ensure(r <= 1e-12, || format!("{name} on {} cells: residual {r:e}", grid.cell_count()))?;
        }
        for case in builtin_cases(grid, 13) {
            let ones = LatticeFunction::constant(grid, 1.0);
            let r = norm_inf(apply_dual(&case.gen, &ones).unwrap().values());
            ensure(r == 0.0, || format!("{}: dual residual {r:e}", case.name))?;
        }
    }
    Ok(format!("builder residual max {worst:.1e}; constant dual exact on all built-ins"))
}

fn determinism() -> Outcome {
    let start = Instant::now();
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/u4.cfg");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut outputs = Vec::new();
    for dir in &dirs {
        let out = Command::new(env!("CARGO_BIN_EXE_uscatter"))
            .args(["check", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(dir.path())
            .output()
            .unwrap();
        ensure(out.status.code() == Some(0), || {
            format!("exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr))
        })?;
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        outputs.push((out.stdout, files));
    }
    ensure(outputs[0] == outputs[1], || "outputs differ between runs".to_owned())?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("runtime {secs:.1} s"))?;
    Ok(format!("{} files identical, exit 0, {secs:.2} s", outputs[0].1.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("mass conservation", mass_conservation),
        ("positivity", positivity),
        ("L1 contraction", l1_contraction),
        ("oracle equivalence", oracle_equivalence),
        ("GRE identity", gre_identity),
        ("entropy monotonicity", entropy_monotonicity),
        ("Poincare / decay", poincare_decay),
        ("maximum principle", maximum_principle),
        ("stability", stability),
        ("rescaling bound", rescaling_bound),
        ("steady-state constructions", steady_constructions),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} {:<28} PASS  {detail}", i + 1, name),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} {:<28} FAIL  {detail}", i + 1, name);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
