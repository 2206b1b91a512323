//! Homogenised-tensor pipelines: single-cell periodic, supercell FEM,
//! supercell low-rank (MsLRM) and the mapped fibre medium, all with wall-time
//! cost accounting for the estimator layer.

use crate::conductivity::{ConductivityField, LowRankConductivity};
use crate::error::{Error, Result};
use crate::fem::{self, CellMesh};
use crate::media::MappingSpec;
use crate::mslrm::{greedy_solve, GreedyOptions, ModesLibrary, SolveReport};
use crate::supercell::{self, MesoGrid};
use crate::tensor::TensorField;
use crate::types::{HomogenizedTensor, SymMat2};
use std::time::Instant;

/// A homogenised tensor together with the wall time spent producing it.
#[derive(Debug, Clone, Copy)]
pub struct Costed {
    pub tensor: HomogenizedTensor,
    pub seconds: f64,
}

/// Solves the two periodic cell problems and evaluates
/// (K⋆)_ij = |Y|⁻¹ ∫ (e_i + ∇w_i) · K e_j.
pub fn periodic_homogenize(cell: &CellMesh, k: &[SymMat2], tol: f64) -> Result<HomogenizedTensor> {
    let w1 = fem::solve_periodic_cell(cell, k, 1, tol)?;
    let w2 = fem::solve_periodic_cell(cell, k, 2, tol)?;
    let mut e = [[0.0; 2]; 2];
    for (i, w) in [&w1, &w2].into_iter().enumerate() {
        for j in 0..2 {
            e[i][j] = fem::integrate_flux(cell, k, w, i + 1, j + 1)?;
        }
    }
    Ok(HomogenizedTensor { e })
}

/// Supercell FEM pipeline (estimator-facing wrapper of the conforming solver).
pub fn apparent_homogenize_fem(
    grid: &MesoGrid,
    k: &ConductivityField,
    tol: f64,
) -> Result<Costed> {
    let t0 = Instant::now();
    k.check_spd()?;
    let w = supercell::solve_apparent_correctors(grid, k, tol)?;
    let tensor = supercell::apparent_homogenize(grid, k, (&w.0, &w.1))?;
    Ok(Costed { tensor, seconds: t0.elapsed().as_secs_f64() })
}

/// Cell-wise flux quadrature of tensor-format correctors:
/// (K⋆^N)_ij = |Y_N|⁻¹ Σ_cells ∫ (e_i + ∇w_i) · K e_j.
pub fn flux_from_tensor_correctors(
    grid: &MesoGrid,
    k: &LowRankConductivity,
    w: (&TensorField, &TensorField),
) -> Result<HomogenizedTensor> {
    let mut e = [[0.0; 2]; 2];
    let ni = grid.n_cells();
    for c in 0..ni {
        let kc = k.eval_cell(c)?;
        for (i, wt) in [w.0, w.1].into_iter().enumerate() {
            let wc = wt.eval_cell(c);
            for j in 0..2 {
                // integrate_flux is |Y|-normalised; equal cells → average
                e[i][j] += fem::integrate_flux(&grid.cell, &kc, &wc, i + 1, j + 1)?;
            }
        }
    }
    for row in e.iter_mut() {
        for v in row.iter_mut() {
            *v /= ni as f64;
        }
    }
    Ok(HomogenizedTensor { e })
}

/// Result of the MsLRM pipeline: tensor, per-axis solve reports and the
/// updated modes library.
#[derive(Debug)]
pub struct MslrmResult {
    pub tensor: HomogenizedTensor,
    pub seconds: f64,
    pub reports: [SolveReport; 2],
    pub library: ModesLibrary,
}

/// Supercell MsLRM pipeline: greedy low-rank correctors for both axes with a
/// shared recycled library, then the same quadrature as the FEM variant.
pub fn apparent_homogenize_mslrm(
    grid: &MesoGrid,
    k: &LowRankConductivity,
    eps: f64,
    library: ModesLibrary,
    opts: &GreedyOptions,
) -> Result<MslrmResult> {
    let t0 = Instant::now();
    let (w1, rep1, library) = greedy_solve(grid, k, 1, eps, library, opts)?;
    let (w2, rep2, library) = greedy_solve(grid, k, 2, eps, library, opts)?;
    let tensor = flux_from_tensor_correctors(grid, k, (&w1, &w2))?;
    Ok(MslrmResult {
        tensor,
        seconds: t0.elapsed().as_secs_f64(),
        reports: [rep1, rep2],
        library,
    })
}

/// Per-element pullback direction field E_i = ∇φᵀ e_i on the global mesh.
fn pullback_directions(
    grid: &MesoGrid,
    mapping: &MappingSpec,
    dir: usize,
) -> Vec<[f64; 2]> {
    let g = grid.global_mesh();
    let mut out = vec![[0.0, 0.0]; g.element_count()];
    for gj in 0..g.ny {
        for gi in 0..g.nx {
            let ci = gi / grid.cell.nx;
            let li = gi % grid.cell.nx;
            let y1 = (li as f64 + 0.5) * grid.cell.hx();
            let slope = mapping.dphi1(ci, y1);
            // ∇φ = diag(φ₁₁, 1) → ∇φᵀ e₁ = (φ₁₁, 0), ∇φᵀ e₂ = (0, 1)
            out[g.element(gi, gj)] = if dir == 1 { [slope, 0.0] } else { [0.0, 1.0] };
        }
    }
    out
}

const GAUSS_2: [f64; 2] = [0.211324865405187118, 0.788675134594812882];

/// Assembles the periodic rhs −∫ ∇v · K E with a per-element direction E.
fn periodic_rhs_with_directions(
    mesh: &CellMesh,
    k: &[SymMat2],
    e: &[[f64; 2]],
) -> Vec<f64> {
    let mut f = vec![0.0; mesh.periodic_dof_count()];
    let (hx, hy) = (mesh.hx(), mesh.hy());
    let w = hx * hy / 4.0;
    for j in 0..mesh.ny {
        for i in 0..mesh.nx {
            let el = mesh.element(i, j);
            let ke = k[el].mul_vec(e[el]);
            let dofs = [
                mesh.periodic_dof(i, j),
                mesh.periodic_dof(i + 1, j),
                mesh.periodic_dof(i + 1, j + 1),
                mesh.periodic_dof(i, j + 1),
            ];
            for &xi in &GAUSS_2 {
                for &eta in &GAUSS_2 {
                    let g = [
                        [-(1.0 - eta) / hx, -(1.0 - xi) / hy],
                        [(1.0 - eta) / hx, -xi / hy],
                        [eta / hx, xi / hy],
                        [-eta / hx, (1.0 - xi) / hy],
                    ];
                    for a in 0..4 {
                        f[dofs[a]] -= w * (g[a][0] * ke[0] + g[a][1] * ke[1]);
                    }
                }
            }
        }
    }
    f
}

/// |Y|⁻¹ ∫ (E_i + ∇w) · K E_j with per-element directions.
fn flux_with_directions(
    mesh: &CellMesh,
    k: &[SymMat2],
    w: &[f64],
    ei: &[[f64; 2]],
    ej: &[[f64; 2]],
) -> f64 {
    let (hx, hy) = (mesh.hx(), mesh.hy());
    let wq = hx * hy / 4.0;
    let mut acc = 0.0;
    for j in 0..mesh.ny {
        for i in 0..mesh.nx {
            let el = mesh.element(i, j);
            let kej = k[el].mul_vec(ej[el]);
            let nodes = mesh.element_nodes(i, j);
            for &xi in &GAUSS_2 {
                for &eta in &GAUSS_2 {
                    let g = [
                        [-(1.0 - eta) / hx, -(1.0 - xi) / hy],
                        [(1.0 - eta) / hx, -xi / hy],
                        [eta / hx, xi / hy],
                        [-eta / hx, (1.0 - xi) / hy],
                    ];
                    let mut grad = [0.0, 0.0];
                    for a in 0..4 {
                        grad[0] += w[nodes[a]] * g[a][0];
                        grad[1] += w[nodes[a]] * g[a][1];
                    }
                    acc += wq
                        * ((ei[el][0] + grad[0]) * kej[0] + (ei[el][1] + grad[1]) * kej[1]);
                }
            }
        }
    }
    acc / mesh.area()
}

/// Mapped-medium apparent operator, solved entirely on the reference
/// periodic supercell: corrector problems with rhs ∇φᵀe_i, then
/// (K⋆^N)_ij = (|Y_N|⁻¹∫det∇φ)⁻¹ · |Y_N|⁻¹ ∫ (∇φᵀe_i + ∇w̃_i) · K̃ ∇φᵀe_j.
pub fn apparent_homogenize_mapped(
    grid: &MesoGrid,
    k_tilde: &LowRankConductivity,
    mapping: &MappingSpec,
    tol: f64,
) -> Result<Costed> {
    let t0 = Instant::now();
    if mapping.n1 != grid.n1 || mapping.n2 != grid.n2 {
        return Err(Error::InvalidParameter("mapping grid does not match meso grid".into()));
    }
    let kf: ConductivityField = ConductivityField::LowRank(k_tilde.clone());
    kf.check_spd()?;
    let gk = supercell::global_conductivity(grid, &kf)?;
    let mesh = grid.global_mesh();
    let dirs = [pullback_directions(grid, mapping, 1), pullback_directions(grid, mapping, 2)];
    // mean determinant |Y_N|⁻¹ ∫ det ∇φ (det is elementwise φ₁₁)
    let mut det_mean = 0.0;
    for gi in 0..mesh.nx {
        let ci = gi / grid.cell.nx;
        let y1 = ((gi % grid.cell.nx) as f64 + 0.5) * grid.cell.hx();
        det_mean += mapping.dphi1(ci, y1);
    }
    det_mean /= mesh.nx as f64;
    assert!(det_mean > 0.0, "deformation must be orientation preserving");

    let a = fem::assemble_periodic_stiffness(&mesh, &gk)?;
    let mut w = Vec::with_capacity(2);
    for d in &dirs {
        let b = periodic_rhs_with_directions(&mesh, &gk, d);
        let opts = crate::sparse::CgOptions { tol, deflate_constant: true, ..Default::default() };
        let (x, _) = crate::sparse::cg_csr(&a, &b, opts)?;
        w.push(fem::expand_periodic(&mesh, &x));
    }
    let mut e = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            e[i][j] = flux_with_directions(&mesh, &gk, &w[i], &dirs[i], &dirs[j]) / det_mean;
        }
    }
    Ok(Costed { tensor: HomogenizedTensor { e }, seconds: t0.elapsed().as_secs_f64() })
}

/// Exact effective tensor of the deformed fibre medium, which is a laminate
/// in the physical domain: harmonic mean across the layers, arithmetic mean
/// along them, weighted by realised layer widths.
pub fn mapped_laminate_oracle(mapping: &MappingSpec, k1: f64, k2: f64) -> HomogenizedTensor {
    let mut total = 0.0;
    let mut harm = 0.0;
    let mut arith = 0.0;
    let mut push = |width: f64, k: f64| {
        total += width;
        harm += width / k;
        arith += width * k;
    };
    for ci in 0..mapping.n1 {
        push(mapping.gaps[ci] / 2.0, k1);
        push(mapping.delta_f, k2);
        push(mapping.gaps[ci + 1] / 2.0, k1);
    }
    HomogenizedTensor::diag(total / harm, arith / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::build_cell_mesh;
    use crate::media;

    fn laminate(cell: &CellMesh, k1: f64, k2: f64) -> Vec<SymMat2> {
        let mut k = Vec::with_capacity(cell.element_count());
        for j in 0..cell.ny {
            for i in 0..cell.nx {
                let _ = j;
                let x = (i as f64 + 0.5) * cell.hx();
                k.push(SymMat2::iso(if x < cell.lx / 2.0 { k1 } else { k2 }));
            }
        }
        k
    }

    fn checkerboard(cell: &CellMesh, k1: f64, k2: f64) -> Vec<SymMat2> {
        let mut k = Vec::with_capacity(cell.element_count());
        for j in 0..cell.ny {
            for i in 0..cell.nx {
                let left = i < cell.nx / 2;
                let bottom = j < cell.ny / 2;
                k.push(SymMat2::iso(if left == bottom { k1 } else { k2 }));
            }
        }
        k
    }

    #[test]
    fn constant_is_identityish() {
        let cell = build_cell_mesh(6, 6, 1.0, 1.0).unwrap();
        let t = periodic_homogenize(&cell, &vec![SymMat2::iso(3.0); 36], 1e-11).unwrap();
        assert!(t.sub(&HomogenizedTensor::iso(3.0)).frobenius_norm() < 1e-10);
    }

    #[test]
    fn laminate_matches_analytic() {
        let cell = build_cell_mesh(20, 4, 1.0, 1.0).unwrap();
        let t = periodic_homogenize(&cell, &laminate(&cell, 1.0, 100.0), 1e-12).unwrap();
        let exact = HomogenizedTensor::diag(200.0 / 101.0, 50.5);
        assert!(t.sub(&exact).frobenius_norm() < 1e-6 * exact.frobenius_norm());
    }

    #[test]
    fn checkerboard_duality_under_refinement() {
        // the exact effective tensor is √(k1k2)·Id by duality; the conforming
        // corrector overestimates it and converges slowly (corner
        // singularity), so assert symmetry, bracketing and monotone descent
        let mut vals = Vec::new();
        for n in [10usize, 20, 40] {
            let cell = build_cell_mesh(n, n, 1.0, 1.0).unwrap();
            let t = periodic_homogenize(&cell, &checkerboard(&cell, 1.0, 100.0), 1e-11).unwrap();
            // 90° rotation symmetry of the board
            assert!((t.get(1, 1) - t.get(2, 2)).abs() < 1e-8 * t.get(1, 1));
            assert!(t.get(1, 2).abs() < 1e-8 * t.get(1, 1));
            // between the duality value and the arithmetic mean
            assert!(t.get(1, 1) > 10.0 && t.get(1, 1) < 50.5);
            vals.push(t.get(1, 1));
        }
        assert!(vals[0] > vals[1] && vals[1] > vals[2], "not monotone: {vals:?}");
    }

    #[test]
    fn fem_wrapper_reduces_to_periodic_at_n1() {
        let cell = build_cell_mesh(8, 8, 1.0, 1.0).unwrap();
        let grid = MesoGrid::new(1, 1, cell).unwrap();
        let kcell = laminate(&cell, 1.0, 100.0);
        let mut lr = LowRankConductivity::new(1, cell.element_count());
        lr.push_term(vec![1.0], kcell.clone()).unwrap();
        let t = apparent_homogenize_fem(&grid, &lr.clone().into(), 1e-12).unwrap();
        let tp = periodic_homogenize(&cell, &kcell, 1e-12).unwrap();
        assert!(t.tensor.sub(&tp).frobenius_norm() < 1e-10 * tp.frobenius_norm());
        assert!(t.seconds >= 0.0);
    }

    #[test]
    fn mslrm_matches_periodic_on_rank_one_medium() {
        let cell = build_cell_mesh(8, 2, 1.0, 1.0).unwrap();
        let grid = MesoGrid::new(2, 2, cell).unwrap();
        let kcell = laminate(&cell, 1.0, 100.0);
        let mut lr = LowRankConductivity::new(4, cell.element_count());
        lr.push_term(vec![1.0; 4], kcell.clone()).unwrap();
        let r = apparent_homogenize_mslrm(
            &grid,
            &lr,
            1e-9,
            ModesLibrary::new(),
            &GreedyOptions::default(),
        )
        .unwrap();
        let tp = periodic_homogenize(&cell, &kcell, 1e-12).unwrap();
        assert!(
            r.tensor.sub(&tp).frobenius_norm() < 1e-8 * tp.frobenius_norm(),
            "mslrm {:?} vs periodic {:?}",
            r.tensor,
            tp
        );
    }

    #[test]
    fn mapped_identity_reduces_to_reference() {
        let cell = build_cell_mesh(8, 4, 1.0, 1.0).unwrap();
        let grid = MesoGrid::new(3, 1, cell).unwrap();
        // gaps all equal to 1−δ → slopes 1 → identity deformation
        let (kt, m) =
            media::sample_mapped_fibres(3, 1, &cell, 1.0, 100.0, 0.5, 0.5, 0.5, 5).unwrap();
        let t = apparent_homogenize_mapped(&grid, &kt, &m, 1e-12).unwrap();
        // reference periodic fibre medium
        let (strip, _) = media::vertical_strip_indicator(&cell, 0.5).unwrap();
        let kref: Vec<SymMat2> = strip
            .iter()
            .map(|&s| SymMat2::iso(if s { 100.0 } else { 1.0 }))
            .collect();
        let tp = periodic_homogenize(&cell, &kref, 1e-12).unwrap();
        assert!(
            t.tensor.sub(&tp).frobenius_norm() < 1e-8 * tp.frobenius_norm(),
            "mapped {:?} vs reference {:?}",
            t.tensor,
            tp
        );
    }

    #[test]
    fn mapped_matches_physical_laminate_oracle() {
        let cell = build_cell_mesh(8, 2, 1.0, 1.0).unwrap();
        let grid = MesoGrid::new(5, 1, cell).unwrap();
        let (kt, m) =
            media::sample_mapped_fibres(5, 1, &cell, 1.0, 100.0, 0.5, 0.1, 2.0, 99).unwrap();
        let t = apparent_homogenize_mapped(&grid, &kt, &m, 1e-12).unwrap();
        let oracle = mapped_laminate_oracle(&m, 1.0, 100.0);
        let rel = t.tensor.sub(&oracle).frobenius_norm() / oracle.frobenius_norm();
        assert!(rel < 0.02, "relative error {rel}: {:?} vs {:?}", t.tensor, oracle);
    }
}
