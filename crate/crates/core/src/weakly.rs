//! Defect-type weakly stochastic surrogates: periodic, one-defect and
//! two-defect contribution tensors for a reference material and its
//! complementary counterpart, closed-form control-variate expectations, and
//! the 3×3 optimal control-coefficient system.

use crate::conductivity::{ConductivityField, LowRankConductivity};
use crate::error::{Error, Result};
use crate::estimators::{empirical_cov, sample_stats, ScalarQoI};
use crate::homogenize::{apparent_homogenize_fem, apparent_homogenize_mslrm};
use crate::mslrm::{GreedyOptions, ModesLibrary};
use crate::supercell::MesoGrid;
use crate::types::{HomogenizedTensor, SymMat2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Which supercell solver computes the contribution tensors.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContributionSolver {
    Fem { tol: f64 },
    Mslrm { eps: f64 },
}

/// Two-defect contributions are indexed by the wrapped relative displacement,
/// collapsed under the horizontal/vertical mirror symmetries of the periodic
/// grid: only the relative placement of the pair matters.
pub fn canonical_displacement(n1: usize, n2: usize, dx: usize, dy: usize) -> (usize, usize) {
    let dx = dx % n1;
    let dy = dy % n2;
    (dx.min(n1 - dx), dy.min(n2 - dy))
}

/// Contribution tensors of the defect expansion for one supercell size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefectContributions {
    pub n1: usize,
    pub n2: usize,
    /// apparent operator of the defect-free reference
    pub k_sharp: HomogenizedTensor,
    /// single-defect increment over the reference
    pub k1: HomogenizedTensor,
    /// pair interaction increments keyed by canonical displacement
    pub k2: BTreeMap<(usize, usize), HomogenizedTensor>,
    /// complementary material (every defect present) counterparts
    pub comp_sharp: HomogenizedTensor,
    pub comp_k1: HomogenizedTensor,
    pub comp_k2: BTreeMap<(usize, usize), HomogenizedTensor>,
}

impl DefectContributions {
    pub fn n_cells(&self) -> usize {
        self.n1 * self.n2
    }

    fn displacement(&self, a: usize, b: usize) -> (usize, usize) {
        let (ax, ay) = (a % self.n1, a / self.n1);
        let (bx, by) = (b % self.n1, b / self.n1);
        canonical_displacement(
            self.n1,
            self.n2,
            (bx + self.n1 - ax) % self.n1,
            (by + self.n2 - ay) % self.n2,
        )
    }

    fn pair(&self, map: &BTreeMap<(usize, usize), HomogenizedTensor>, a: usize, b: usize) -> HomogenizedTensor {
        map[&self.displacement(a, b)]
    }
}

/// Bernoulli defect indicator over the meso cells.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefectSample {
    pub b: Vec<bool>,
    pub eps_def: f64,
}

pub fn sample_defects(n_cells: usize, eps_def: f64, seed: u64) -> Result<DefectSample> {
    if !(0.0..=1.0).contains(&eps_def) {
        return Err(Error::InvalidParameter(format!("defect probability {eps_def} not in [0,1]")));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    Ok(DefectSample {
        b: (0..n_cells).map(|_| rng.gen_bool(eps_def)).collect(),
        eps_def,
    })
}

/// Conductivity with the given defect cells flipped: reference material plus
/// `k_def` on the listed cells, or (complementary) the fully defected
/// material minus `k_def` on the listed cells.
fn field_with_defects(
    grid: &MesoGrid,
    k_sharp: &[SymMat2],
    k_def: &[SymMat2],
    defect_cells: &[usize],
    complementary: bool,
) -> Result<LowRankConductivity> {
    let n_cells = grid.n_cells();
    let ne = k_sharp.len();
    let mut k = LowRankConductivity::new(n_cells, ne);
    let base: Vec<SymMat2> = if complementary {
        k_sharp.iter().zip(k_def).map(|(&a, &b)| a + b).collect()
    } else {
        k_sharp.to_vec()
    };
    k.push_term(vec![1.0; n_cells], base)?;
    if !defect_cells.is_empty() {
        let sign = if complementary { -1.0 } else { 1.0 };
        let mut meso = vec![0.0; n_cells];
        for &c in defect_cells {
            meso[c] = sign;
        }
        k.push_term(meso, k_def.to_vec())?;
    }
    Ok(k)
}

fn solve_config(
    grid: &MesoGrid,
    k: LowRankConductivity,
    solver: ContributionSolver,
    library: &mut ModesLibrary,
) -> Result<HomogenizedTensor> {
    match solver {
        ContributionSolver::Fem { tol } => {
            Ok(apparent_homogenize_fem(grid, &ConductivityField::LowRank(k), tol)?.tensor)
        }
        ContributionSolver::Mslrm { eps } => {
            let opts = GreedyOptions::default();
            let res = apparent_homogenize_mslrm(grid, &k, eps, std::mem::take(library), &opts)?;
            *library = res.library;
            Ok(res.tensor)
        }
    }
}

/// Solves the supercell problems for the defect-free reference, a single
/// defect, and every canonical two-defect placement, for both the reference
/// and the complementary material. `k_sharp` and `k_def` are one-cell
/// element patterns; the defect adds `k_def` on its cell.
pub fn compute_contributions(
    grid: &MesoGrid,
    k_sharp: &[SymMat2],
    k_def: &[SymMat2],
    solver: ContributionSolver,
) -> Result<DefectContributions> {
    let ne = grid.cell.element_count();
    if k_sharp.len() != ne || k_def.len() != ne {
        return Err(Error::InvalidParameter(format!(
            "cell patterns must have {ne} elements"
        )));
    }
    let (n1, n2) = (grid.n1, grid.n2);
    let mut library = ModesLibrary::new();
    let mut side = |complementary: bool| -> Result<(
        HomogenizedTensor,
        HomogenizedTensor,
        BTreeMap<(usize, usize), HomogenizedTensor>,
    )> {
        let sharp = solve_config(
            grid,
            field_with_defects(grid, k_sharp, k_def, &[], complementary)?,
            solver,
            &mut library,
        )?;
        let one = solve_config(
            grid,
            field_with_defects(grid, k_sharp, k_def, &[0], complementary)?,
            solver,
            &mut library,
        )?;
        let k1 = one.sub(&sharp);
        let mut k2 = BTreeMap::new();
        for c in 1..grid.n_cells() {
            let d = canonical_displacement(n1, n2, c % n1, c / n1);
            if k2.contains_key(&d) {
                continue;
            }
            let pair = solve_config(
                grid,
                field_with_defects(grid, k_sharp, k_def, &[0, c], complementary)?,
                solver,
                &mut library,
            )?;
            k2.insert(d, pair.sub(&sharp).sub(&k1).sub(&k1));
        }
        Ok((sharp, k1, k2))
    };
    let (k_sharp_star, k1, k2) = side(false)?;
    let (comp_sharp, comp_k1, comp_k2) = side(true)?;
    Ok(DefectContributions {
        n1,
        n2,
        k_sharp: k_sharp_star,
        k1,
        k2,
        comp_sharp,
        comp_k1,
        comp_k2,
    })
}

/// First-order surrogate Z₁ = K♯⋆ + Σ_i B_i K₁⋆^N.
pub fn z1_eval(contrib: &DefectContributions, sample: &DefectSample) -> HomogenizedTensor {
    let count = sample.b.iter().filter(|&&x| x).count() as f64;
    contrib.k_sharp.add(&contrib.k1.scale(count))
}

/// E[Z₁] = K♯⋆ + ε N² K₁⋆^N.
pub fn z1_expectation(contrib: &DefectContributions, eps_def: f64) -> HomogenizedTensor {
    contrib
        .k_sharp
        .add(&contrib.k1.scale(eps_def * contrib.n_cells() as f64))
}

fn pair_sum(
    contrib: &DefectContributions,
    map: &BTreeMap<(usize, usize), HomogenizedTensor>,
    active: &[usize],
) -> HomogenizedTensor {
    let mut acc = HomogenizedTensor::default();
    for (p, &a) in active.iter().enumerate() {
        for &b in &active[p + 1..] {
            acc = acc.add(&contrib.pair(map, a, b));
        }
    }
    acc
}

/// Second-order pair term Z₂ = ½ Σ_{i≠j} B_i B_j K₂⋆ (one term per unordered
/// defect pair, indexed by relative displacement).
pub fn z2_eval(contrib: &DefectContributions, sample: &DefectSample) -> HomogenizedTensor {
    let active: Vec<usize> =
        sample.b.iter().enumerate().filter(|(_, &x)| x).map(|(i, _)| i).collect();
    pair_sum(contrib, &contrib.k2, &active)
}

/// Complementary pair term Ž₂ with (1−B_i)(1−B_j) weights.
pub fn z2_comp_eval(contrib: &DefectContributions, sample: &DefectSample) -> HomogenizedTensor {
    let vacant: Vec<usize> =
        sample.b.iter().enumerate().filter(|(_, &x)| !x).map(|(i, _)| i).collect();
    pair_sum(contrib, &contrib.comp_k2, &vacant)
}

fn all_pair_sum(
    contrib: &DefectContributions,
    map: &BTreeMap<(usize, usize), HomogenizedTensor>,
) -> HomogenizedTensor {
    // Σ over all N² cells i of Σ_{j≠i}, halved: each cell sees every nonzero
    // displacement exactly once.
    let mut acc = HomogenizedTensor::default();
    for c in 1..contrib.n_cells() {
        let d = canonical_displacement(contrib.n1, contrib.n2, c % contrib.n1, c / contrib.n1);
        acc = acc.add(&map[&d]);
    }
    acc.scale(contrib.n_cells() as f64 / 2.0)
}

/// E[Z₂] = ε² · ½ Σ_{i≠j} K₂⋆^{d(i,j)}.
pub fn z2_expectation(contrib: &DefectContributions, eps_def: f64) -> HomogenizedTensor {
    all_pair_sum(contrib, &contrib.k2).scale(eps_def * eps_def)
}

/// E[Ž₂] = (1−ε)² · ½ Σ_{i≠j} Ǩ₂⋆^{d(i,j)}.
pub fn z2_comp_expectation(contrib: &DefectContributions, eps_def: f64) -> HomogenizedTensor {
    all_pair_sum(contrib, &contrib.comp_k2).scale((1.0 - eps_def) * (1.0 - eps_def))
}

/// Optimal control coefficients for X = Q − ρ₁(Z₁−EZ₁) − ρ₂(Z₂−EZ₂) −
/// ρ̌₂(Ž₂−EŽ₂), solved from the pilot 3×3 covariance system. Returns
/// (ρ₁, ρ₂, ρ̌₂, degenerate): a singular Gram matrix falls back to the
/// first-order coefficient alone and sets the flag.
pub fn solve_control_coefficients(
    q: &[f64],
    z1: &[f64],
    z2: &[f64],
    z2c: &[f64],
) -> Result<(f64, f64, f64, bool)> {
    let m = q.len();
    if z1.len() != m || z2.len() != m || z2c.len() != m {
        return Err(Error::InvalidParameter("pilot sample lengths differ".into()));
    }
    if m < 2 {
        return Err(Error::SampleTooSmall(m));
    }
    let zs = [z1, z2, z2c];
    let mut g = nalgebra::Matrix3::<f64>::zeros();
    let mut rhs = nalgebra::Vector3::<f64>::zeros();
    for i in 0..3 {
        rhs[i] = empirical_cov(q, zs[i])?;
        for j in 0..3 {
            g[(i, j)] = empirical_cov(zs[i], zs[j])?;
        }
    }
    // symmetric PSD sanity check on the covariance Gram
    let sym = nalgebra::SymmetricEigen::new(g);
    let scale = sym.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if sym.eigenvalues.iter().any(|&l| l < -1e-10 * scale.max(1.0)) {
        return Err(Error::InvalidParameter("covariance Gram not positive semidefinite".into()));
    }
    let well_conditioned =
        scale > 0.0 && sym.eigenvalues.iter().all(|&l| l > 1e-12 * scale);
    if well_conditioned {
        if let Some(sol) = g.lu().solve(&rhs) {
            return Ok((sol[0], sol[1], sol[2], false));
        }
    }
    // degenerate pilot (e.g. ε ∈ {0,1}): first-order coefficient only
    let (_, var_z1) = sample_stats(z1)?;
    if var_z1 <= 0.0 {
        return Err(Error::ZeroVarianceControl);
    }
    Ok((empirical_cov(q, z1)? / var_z1, 0.0, 0.0, true))
}

/// Scalar controlled variables of a pilot/campaign record.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ControlledSample {
    pub q: f64,
    /// first-order controlled value X₁
    pub x1: f64,
    /// second-order controlled value X₂
    pub x2: f64,
}

/// Builds the controlled scalars for one defect realisation given the
/// coefficients and the chosen scalar functional.
#[allow(clippy::too_many_arguments)]
pub fn controlled_sample(
    contrib: &DefectContributions,
    sample: &DefectSample,
    q: &HomogenizedTensor,
    qoi: ScalarQoI,
    rho1: f64,
    rho2: f64,
    rho2c: f64,
) -> ControlledSample {
    let eps = sample.eps_def;
    let qv = qoi.eval(q);
    let z1 = qoi.eval(&z1_eval(contrib, sample)) - qoi.eval(&z1_expectation(contrib, eps));
    let z2 = qoi.eval(&z2_eval(contrib, sample)) - qoi.eval(&z2_expectation(contrib, eps));
    let z2c =
        qoi.eval(&z2_comp_eval(contrib, sample)) - qoi.eval(&z2_comp_expectation(contrib, eps));
    let x1 = qv - rho1 * z1;
    ControlledSample { q: qv, x1, x2: x1 - rho2 * z2 - rho2c * z2c }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::build_cell_mesh;
    use crate::media;
    use crate::types::derive_seed;
    use rand_distr::Distribution;

    fn defect_patterns(cell: &crate::fem::CellMesh) -> (Vec<SymMat2>, Vec<SymMat2>) {
        let (ind, _) = media::centered_square_indicator(cell, media::EQUAL_FRACTION_SIDE * cell.lx)
            .unwrap();
        let sharp = vec![SymMat2::iso(1.0); cell.element_count()];
        let def: Vec<SymMat2> =
            ind.iter().map(|&x| SymMat2::iso(if x { 9.0 } else { 0.0 })).collect();
        (sharp, def)
    }

    fn synthetic_contrib() -> DefectContributions {
        let t = |v: f64| HomogenizedTensor::iso(v);
        let mut k2 = BTreeMap::new();
        let mut comp_k2 = BTreeMap::new();
        for (d, v) in [((1, 0), 0.2), ((0, 1), -0.1), ((1, 1), 0.05)] {
            k2.insert(d, t(v));
            comp_k2.insert(d, t(0.5 * v));
        }
        DefectContributions {
            n1: 2,
            n2: 2,
            k_sharp: t(2.0),
            k1: t(0.3),
            k2,
            comp_sharp: t(5.0),
            comp_k1: t(-0.4),
            comp_k2,
        }
    }

    #[test]
    fn zero_defect_pattern_collapses() {
        let cell = build_cell_mesh(8, 8, 1.0, 1.0).unwrap();
        let grid = MesoGrid::new(2, 2, cell.clone()).unwrap();
        let sharp = vec![SymMat2::iso(3.0); cell.element_count()];
        let zero = vec![SymMat2::ZERO; cell.element_count()];
        let c = compute_contributions(
            &grid,
            &sharp,
            &zero,
            ContributionSolver::Fem { tol: 1e-11 },
        )
        .unwrap();
        assert!(c.k1.frobenius_norm() < 1e-8, "k1 {:?}", c.k1);
        for k2 in c.k2.values() {
            assert!(k2.frobenius_norm() < 1e-8);
        }
        assert!(c.k_sharp.sub(&HomogenizedTensor::iso(3.0)).frobenius_norm() < 1e-8);
    }

    #[test]
    fn pair_reconstruction_matches_direct_supercell() {
        let cell = build_cell_mesh(8, 8, 1.0, 1.0).unwrap();
        let grid = MesoGrid::new(2, 2, cell.clone()).unwrap();
        let (sharp, def) = defect_patterns(&cell);
        let c = compute_contributions(
            &grid,
            &sharp,
            &def,
            ContributionSolver::Fem { tol: 1e-11 },
        )
        .unwrap();
        // exactly defects {0, 3}: reconstruction K♯ + 2K₁ + K₂^{d(0,3)}
        let k = field_with_defects(&grid, &sharp, &def, &[0, 3], false).unwrap();
        let direct =
            apparent_homogenize_fem(&grid, &ConductivityField::LowRank(k), 1e-11)
                .unwrap()
                .tensor;
        let sample = DefectSample { b: vec![true, false, false, true], eps_def: 0.5 };
        let recon = z1_eval(&c, &sample).add(&z2_eval(&c, &sample));
        assert!(
            direct.sub(&recon).frobenius_norm() < 1e-7,
            "direct {direct:?} vs reconstructed {recon:?}"
        );
    }

    #[test]
    fn mirrored_pairs_have_equal_contributions() {
        let cell = build_cell_mesh(6, 6, 1.0, 1.0).unwrap();
        let grid = MesoGrid::new(3, 1, cell.clone()).unwrap();
        let (sharp, def) = defect_patterns(&cell);
        // displacements (1,0) and (2,0) wrap to the same canonical key; the
        // underlying supercell operators agree by periodicity
        let ka = field_with_defects(&grid, &sharp, &def, &[0, 1], false).unwrap();
        let kb = field_with_defects(&grid, &sharp, &def, &[0, 2], false).unwrap();
        let ta = apparent_homogenize_fem(&grid, &ConductivityField::LowRank(ka), 1e-11)
            .unwrap()
            .tensor;
        let tb = apparent_homogenize_fem(&grid, &ConductivityField::LowRank(kb), 1e-11)
            .unwrap()
            .tensor;
        assert!(ta.sub(&tb).frobenius_norm() < 1e-8);
        assert_eq!(
            canonical_displacement(3, 1, 1, 0),
            canonical_displacement(3, 1, 2, 0)
        );
    }

    #[test]
    fn z1_sampled_mean_matches_expectation() {
        let c = synthetic_contrib();
        let eps = 0.3;
        let m = 10_000;
        let vals: Vec<f64> = (0..m)
            .map(|k| {
                let s = sample_defects(4, eps, derive_seed(5, k)).unwrap();
                z1_eval(&c, &s).get(1, 1)
            })
            .collect();
        let (mean, var) = sample_stats(&vals).unwrap();
        let expect = z1_expectation(&c, eps).get(1, 1);
        let se = (var / m as f64).sqrt();
        assert!((mean - expect).abs() < 4.0 * se, "mean {mean} vs {expect}");
        // extremes
        let s0 = DefectSample { b: vec![false; 4], eps_def: eps };
        assert_eq!(z1_eval(&c, &s0), c.k_sharp);
        let s1 = DefectSample { b: vec![true; 4], eps_def: eps };
        assert!(z1_eval(&c, &s1).sub(&c.k_sharp.add(&c.k1.scale(4.0))).frobenius_norm() < 1e-14);
    }

    #[test]
    fn z2_pair_cases_and_expectation() {
        let c = synthetic_contrib();
        // no pair → zero
        let s = DefectSample { b: vec![true, false, false, false], eps_def: 0.2 };
        assert_eq!(z2_eval(&c, &s).frobenius_norm(), 0.0);
        // exactly cells {0, 1}: displacement (1,0)
        let s = DefectSample { b: vec![true, true, false, false], eps_def: 0.2 };
        assert!(z2_eval(&c, &s).sub(&c.k2[&(1, 0)]).frobenius_norm() < 1e-14);
        // sampled mean vs expectation
        let eps = 0.4;
        let m = 10_000;
        let vals: Vec<f64> = (0..m)
            .map(|k| {
                let s = sample_defects(4, eps, derive_seed(9, k)).unwrap();
                z2_eval(&c, &s).get(1, 1)
            })
            .collect();
        let (mean, var) = sample_stats(&vals).unwrap();
        let expect = z2_expectation(&c, eps).get(1, 1);
        let se = (var / m as f64).sqrt();
        assert!((mean - expect).abs() < 4.0 * se, "mean {mean} vs {expect}");
        // complementary variant
        let vals: Vec<f64> = (0..m)
            .map(|k| {
                let s = sample_defects(4, eps, derive_seed(11, k)).unwrap();
                z2_comp_eval(&c, &s).get(1, 1)
            })
            .collect();
        let (mean, var) = sample_stats(&vals).unwrap();
        let expect = z2_comp_expectation(&c, eps).get(1, 1);
        let se = (var / m as f64).sqrt();
        assert!((mean - expect).abs() < 4.0 * se, "comp mean {mean} vs {expect}");
    }

    #[test]
    fn control_coefficients_identity_case() {
        let q: Vec<f64> = (0..200).map(|k| (k as f64 * 0.7).sin()).collect();
        let z2: Vec<f64> = (0..200).map(|k| (k as f64 * 1.3).cos()).collect();
        let z2c: Vec<f64> = (0..200).map(|k| (k as f64 * 2.1).sin().powi(2)).collect();
        let (r1, _, _, warn) = solve_control_coefficients(&q, &q, &z2, &z2c).unwrap();
        assert!((r1 - 1.0).abs() < 1e-6, "rho1 {r1}");
        assert!(!warn);
    }

    #[test]
    fn control_coefficients_recover_gaussian_regression() {
        use rand::SeedableRng;
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let m = 100_000;
        let (a1, a2, a3) = (0.8, -0.3, 0.5);
        let mut q = Vec::with_capacity(m);
        let (mut z1, mut z2, mut z2c) = (Vec::new(), Vec::new(), Vec::new());
        let n = rand_distr::StandardNormal;
        for _ in 0..m {
            let (x1, x2, x3): (f64, f64, f64) =
                (n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng));
            let noise: f64 = n.sample(&mut rng);
            z1.push(x1);
            z2.push(x2);
            z2c.push(x3);
            q.push(a1 * x1 + a2 * x2 + a3 * x3 + 0.2 * noise);
        }
        let (r1, r2, r3, warn) = solve_control_coefficients(&q, &z1, &z2, &z2c).unwrap();
        assert!(!warn);
        assert!((r1 - a1).abs() < 0.05 * a1.abs(), "rho1 {r1}");
        assert!((r2 - a2).abs() < 0.05 * a2.abs(), "rho2 {r2}");
        assert!((r3 - a3).abs() < 0.05 * a3.abs(), "rho2c {r3}");
    }

    #[test]
    fn singular_gram_falls_back_to_first_order() {
        let q: Vec<f64> = (0..100).map(|k| (k as f64 * 0.3).sin()).collect();
        let z1: Vec<f64> = q.iter().map(|x| 2.0 * x + 1.0).collect();
        let z2 = vec![0.0; 100]; // degenerate: no pair ever occurs
        let (r1, r2, r3, warn) = solve_control_coefficients(&q, &z1, &z2, &z2).unwrap();
        assert!(warn);
        assert!((r1 - 0.5).abs() < 1e-9, "rho1 {r1}");
        assert_eq!((r2, r3), (0.0, 0.0));
    }

    #[test]
    fn controlled_sample_is_centred_shift() {
        let c = synthetic_contrib();
        let s = sample_defects(4, 0.5, 3).unwrap();
        let q = HomogenizedTensor::iso(2.4);
        let cs = controlled_sample(&c, &s, &q, ScalarQoI::Entry11, 0.0, 0.0, 0.0);
        assert_eq!(cs.q, 2.4);
        assert_eq!(cs.x1, cs.q);
        assert_eq!(cs.x2, cs.q);
    }
}
