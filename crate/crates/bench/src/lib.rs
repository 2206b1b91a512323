//! Shared fixtures for the solver benchmarks.

use qphom::fem::{build_cell_mesh, CellMesh};
use qphom::media;
use qphom::{LowRankConductivity, MesoGrid};

pub fn cell(micro: usize) -> CellMesh {
    build_cell_mesh(micro, micro, 1.0, 1.0).unwrap()
}

pub fn grid(n: usize, micro: usize) -> MesoGrid {
    MesoGrid::new(n, n, cell(micro)).unwrap()
}

/// A fixed defect realisation of the two-phase medium (contrast 100).
pub fn defect_sample(grid: &MesoGrid, p: f64, seed: u64) -> LowRankConductivity {
    media::sample_bernoulli_defect(grid.n_cells(), &grid.cell, 1.0, 100.0, p, seed)
        .unwrap()
        .k
}
