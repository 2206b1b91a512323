//! Truncated-domain (supercell) conforming FEM: glues N1×N2 copies of the
//! reference cell mesh, solves the periodic apparent corrector problems and
//! evaluates the apparent homogenised operator.

use crate::conductivity::ConductivityField;
use crate::error::{Error, Result};
use crate::fem::{self, CellMesh, MicroField};
use crate::types::{HomogenizedTensor, SymMat2};
use serde::{Deserialize, Serialize};

/// Meso decomposition of the supercell into cells, row-major cell order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MesoGrid {
    pub n1: usize,
    pub n2: usize,
    pub cell: CellMesh,
}

impl MesoGrid {
    pub fn new(n1: usize, n2: usize, cell: CellMesh) -> Result<Self> {
        if n1 < 1 || n2 < 1 {
            return Err(Error::InvalidMesh { nx: n1, ny: n2, lx: cell.lx, ly: cell.ly });
        }
        Ok(Self { n1, n2, cell })
    }

    pub fn n_cells(&self) -> usize {
        self.n1 * self.n2
    }

    pub fn cell_index(&self, ci: usize, cj: usize) -> usize {
        cj * self.n1 + ci
    }

    pub fn cell_coords(&self, i: usize) -> (usize, usize) {
        (i % self.n1, i / self.n1)
    }

    /// The glued conforming mesh of the whole supercell.
    pub fn global_mesh(&self) -> CellMesh {
        CellMesh {
            nx: self.n1 * self.cell.nx,
            ny: self.n2 * self.cell.ny,
            lx: self.n1 as f64 * self.cell.lx,
            ly: self.n2 as f64 * self.cell.ly,
        }
    }

    pub fn area(&self) -> f64 {
        self.global_mesh().area()
    }
}

/// Nodal field on the glued supercell mesh.
pub type SupercellField = MicroField;

/// Element-wise conductivity of the whole supercell, global element order.
pub fn global_conductivity(grid: &MesoGrid, k: &ConductivityField) -> Result<Vec<SymMat2>> {
    if k.n_cells() != grid.n_cells() {
        return Err(Error::ElementCountMismatch { expected: grid.n_cells(), got: k.n_cells() });
    }
    if k.n_elements() != grid.cell.element_count() {
        return Err(Error::ElementCountMismatch {
            expected: grid.cell.element_count(),
            got: k.n_elements(),
        });
    }
    let g = grid.global_mesh();
    let mut out = vec![SymMat2::iso(0.0); g.element_count()];
    for cj in 0..grid.n2 {
        for ci in 0..grid.n1 {
            let cell_k = k.eval_cell(grid.cell_index(ci, cj))?;
            for ej in 0..grid.cell.ny {
                for ei in 0..grid.cell.nx {
                    let gi = ci * grid.cell.nx + ei;
                    let gj = cj * grid.cell.ny + ej;
                    out[g.element(gi, gj)] = cell_k[grid.cell.element(ei, ej)];
                }
            }
        }
    }
    Ok(out)
}

/// Solves the two apparent corrector problems on the periodic supercell.
pub fn solve_apparent_correctors(
    grid: &MesoGrid,
    k: &ConductivityField,
    tol: f64,
) -> Result<(SupercellField, SupercellField)> {
    let gk = global_conductivity(grid, k)?;
    let mesh = grid.global_mesh();
    let w1 = fem::solve_periodic_cell(&mesh, &gk, 1, tol)?;
    let w2 = fem::solve_periodic_cell(&mesh, &gk, 2, tol)?;
    Ok((w1, w2))
}

/// (K⋆^N)_ij = |Y_N|⁻¹ ∫ (e_i + ∇w_i) · K e_j with the supplied correctors.
pub fn apparent_homogenize(
    grid: &MesoGrid,
    k: &ConductivityField,
    w: (&SupercellField, &SupercellField),
) -> Result<HomogenizedTensor> {
    let gk = global_conductivity(grid, k)?;
    let mesh = grid.global_mesh();
    let mut e = [[0.0; 2]; 2];
    for (i, wi) in [w.0, w.1].into_iter().enumerate() {
        for j in 0..2 {
            e[i][j] = fem::integrate_flux(&mesh, &gk, wi, i + 1, j + 1)?;
        }
    }
    Ok(HomogenizedTensor { e })
}

/// Cyclically shifts the meso pattern of a field by (s1, s2) cells.
pub fn shift_cells(grid: &MesoGrid, k: &ConductivityField, s1: usize, s2: usize) -> ConductivityField {
    let permute = |meso: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; meso.len()];
        for cj in 0..grid.n2 {
            for ci in 0..grid.n1 {
                let src = grid.cell_index(ci, cj);
                let dst = grid.cell_index((ci + s1) % grid.n1, (cj + s2) % grid.n2);
                out[dst] = meso[src];
            }
        }
        out
    };
    match k {
        ConductivityField::LowRank(lr) => {
            let mut out = lr.clone();
            for t in out.terms.iter_mut() {
                t.meso = permute(&t.meso);
            }
            ConductivityField::LowRank(out)
        }
        ConductivityField::Dense(d) => {
            let mut cells = d.cells.clone();
            for cj in 0..grid.n2 {
                for ci in 0..grid.n1 {
                    let src = grid.cell_index(ci, cj);
                    let dst = grid.cell_index((ci + s1) % grid.n1, (cj + s2) % grid.n2);
                    cells[dst] = d.cells[src].clone();
                }
            }
            ConductivityField::Dense(crate::conductivity::DenseConductivity { cells })
        }
    }
}
