#![allow(dead_code)]

use uscatter::generator::{assemble, Generator, KMode};
use uscatter::kernel::{build_kernel_matrix, KernelSpec, RadialKernel, RadialProfile};
use uscatter::rng::SplitMix64;
use uscatter::{Grid, LatticeFunction};

pub fn u4() -> Grid {
    Grid::new(2, 1, 1, 1).unwrap()
}

pub fn generator(spec: &KernelSpec, grid: Grid) -> Generator {
    let kmat = build_kernel_matrix(spec, &grid, 0.0).unwrap();
    assemble(&kmat, &grid, KMode::ColumnSum, None).unwrap()
}

pub fn u4_generator() -> Generator {
    generator(&KernelSpec::Constant(1.0), u4())
}

/// Grids with at most 64 cells.
pub fn small_grids() -> Vec<Grid> {
    [
        (2, 1, 1, 1),
        (3, 1, 1, 1),
        (2, 1, 2, 2),
        (2, 2, 1, 1),
        (5, 1, 1, 1),
        (2, 1, 3, 2),
        (7, 1, 1, 1),
        (2, 1, 3, 3),
        (2, 3, 1, 1),
        (3, 2, 1, 0),
    ]
    .into_iter()
    .map(|(p, n, big, small)| Grid::new(p, n, big, small).unwrap())
    .collect()
}

pub struct Case {
    pub name: String,
    pub grid: Grid,
    pub spec: KernelSpec,
    pub gen: Generator,
}

impl Case {
    fn new(name: String, grid: Grid, spec: KernelSpec) -> Self {
        let gen = generator(&spec, grid);
        Self {
            name,
            grid,
            spec,
            gen,
        }
    }
}

/// Random kernels with strictly positive off-diagonal rates, cycling
/// through the small grids and four kernel families.
pub fn random_suite(count: usize, seed: u64) -> Vec<Case> {
    let grids = small_grids();
    let mut rng = SplitMix64::new(seed);
    (0..count)
        .map(|k| {
            let grid = grids[k % grids.len()];
            let n = grid.cell_count();
            let (family, spec) = match k % 4 {
                0 => ("table", KernelSpec::Table(rng.table(n, 0.05, 1.0))),
                1 => {
                    let table = rng.symmetric_table(n, 0.1, 1.0);
                    let steady = rng.lattice_function(grid, 0.2, 2.0);
                    ("detailed_balance", KernelSpec::detailed_balance(table, steady).unwrap())
                }
                2 => {
                    let steady = rng.lattice_function(grid, 0.2, 2.0);
                    let scale = rng.uniform(0.5, 2.0);
                    ("projection", KernelSpec::uniform_projection(steady, scale).unwrap())
                }
                _ => {
                    let coefficient = rng.uniform(0.5, 2.0);
                    let rate = rng.uniform(0.1, 1.0);
                    (
                        "radial_exponential",
                        KernelSpec::Radial(RadialKernel::new(RadialProfile::Exponential { coefficient, rate })),
                    )
                }
            };
            Case::new(format!("{family}#{k} on {n} cells"), grid, spec)
        })
        .collect()
}

/// One instance of every built-in kernel family on `grid`.
pub fn builtin_cases(grid: Grid, seed: u64) -> Vec<Case> {
    let mut rng = SplitMix64::new(seed);
    let n = grid.cell_count();
    let radial = |profile| KernelSpec::Radial(RadialKernel::new(profile));
    let steady = rng.lattice_function(grid, 0.5, 1.5);
    let specs = vec![
        ("constant", KernelSpec::Constant(0.7)),
        (
            "radial_indicator",
            radial(RadialProfile::Indicator {
                radius: (grid.p() as f64).powi(grid.outer_level() as i32),
            }),
        ),
        ("radial_linear", radial(RadialProfile::Linear)),
        (
            "radial_power",
            radial(RadialProfile::Power {
                coefficient: 0.5,
                exponent: -1.5,
            }),
        ),
        (
            "radial_exponential",
            radial(RadialProfile::Exponential {
                coefficient: 1.0,
                rate: 0.5,
            }),
        ),
        ("projection", KernelSpec::uniform_projection(steady.clone(), 1.5).unwrap()),
        (
            "symmetric",
            KernelSpec::symmetric(rng.symmetric_table(n, 0.2, 1.0), steady.clone()).unwrap(),
        ),
        (
            "detailed_balance",
            KernelSpec::detailed_balance(rng.symmetric_table(n, 0.2, 1.0), steady).unwrap(),
        ),
        ("table", KernelSpec::Table(rng.table(n, 0.0, 1.0))),
    ];
    specs
        .into_iter()
        .map(|(name, spec)| Case::new(format!("{name} on {n} cells"), grid, spec))
        .collect()
}

pub fn random_nonnegative(rng: &mut SplitMix64, grid: Grid) -> LatticeFunction {
    let values = (0..grid.cell_count())
        .map(|_| if rng.next_f64() < 0.3 { 0.0 } else { rng.uniform(0.0, 2.0) })
        .collect();
    LatticeFunction::new(grid, values).unwrap()
}

pub fn random_signed(rng: &mut SplitMix64, grid: Grid) -> LatticeFunction {
    rng.lattice_function(grid, -1.0, 1.0)
}
