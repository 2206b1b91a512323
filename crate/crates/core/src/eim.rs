//! Empirical interpolation of a sampled conductivity into separated form
//! Σ_j α_j ⊗ q_j with greedy worst-error point selection.

use crate::conductivity::{DenseConductivity, LowRankConductivity};
use crate::error::{Error, Result};
use crate::types::SymMat2;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Separated interpolant of a scalar (isotropic) conductivity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EimModel {
    pub n_cells: usize,
    pub n_elements: usize,
    /// meso coefficients α_j over cells, one per mode
    pub alphas: Vec<Vec<f64>>,
    /// micro basis q_j over the element grid
    pub modes: Vec<Vec<f64>>,
    /// selected interpolation points (cell, element)
    pub points: Vec<(usize, usize)>,
    /// sup residual at termination
    pub achieved: f64,
    /// sup residual history, one entry per completed iteration
    pub sup_history: Vec<f64>,
    /// a-priori Lebesgue-constant bound 2ⁿ − 1, diagnostic only
    pub lebesgue_bound: f64,
}

impl EimModel {
    pub fn rank(&self) -> usize {
        self.modes.len()
    }

    /// q_j(y_p) matrix; lower triangular with unit diagonal by construction.
    pub fn point_matrix(&self) -> Vec<Vec<f64>> {
        self.points
            .iter()
            .map(|&(_, y)| self.modes.iter().map(|q| q[y]).collect())
            .collect()
    }
}

fn scalar_cells(k: &DenseConductivity) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(k.cells.len());
    for c in &k.cells {
        let mut v = Vec::with_capacity(c.len());
        for m in c {
            if m.xy != 0.0 || (m.xx - m.yy).abs() > 1e-14 * m.xx.abs().max(1.0) {
                return Err(Error::InvalidParameter(
                    "empirical interpolation expects isotropic conductivities".into(),
                ));
            }
            v.push(m.xx);
        }
        out.push(v);
    }
    Ok(out)
}

/// Greedy empirical interpolation: while the sup residual over all cells and
/// elements exceeds δ, pick the worst point, normalise the residual slice
/// through it as the next mode, and deflate.
pub fn eim_interpolate(k: &DenseConductivity, delta: f64, cap: usize) -> Result<EimModel> {
    if delta <= 0.0 {
        return Err(Error::InvalidParameter(format!("tolerance {delta} must be positive")));
    }
    let values = scalar_cells(k)?;
    let n_cells = values.len();
    let n_elements = values.first().map_or(0, |c| c.len());
    if n_cells == 0 || n_elements == 0 {
        return Err(Error::InvalidParameter("empty conductivity sample".into()));
    }
    if values.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite conductivity sample".into()));
    }
    let mut residual = values.clone();
    let mut modes: Vec<Vec<f64>> = Vec::new();
    let mut points: Vec<(usize, usize)> = Vec::new();
    let mut sup_history = Vec::new();
    let sup_of = |r: &[Vec<f64>]| -> (f64, usize, usize) {
        let mut best = (0.0, 0usize, 0usize);
        for (i, c) in r.iter().enumerate() {
            for (y, &v) in c.iter().enumerate() {
                // ties broken by lowest (cell, element) via strict inequality
                if v.abs() > best.0 {
                    best = (v.abs(), i, y);
                }
            }
        }
        best
    };
    let (mut sup, mut i_n, mut y_n) = sup_of(&residual);
    while sup > delta {
        if modes.len() >= cap {
            return Err(Error::EimRankCap { cap, sup_error: sup, tol: delta });
        }
        let pivot = residual[i_n][y_n];
        assert!(pivot != 0.0, "zero pivot with unmet criterion");
        let q: Vec<f64> = residual[i_n].iter().map(|v| v / pivot).collect();
        // deflate: R ← R − R(·, y_n) ⊗ q
        for c in residual.iter_mut() {
            let factor = c[y_n];
            if factor != 0.0 {
                for (r, qv) in c.iter_mut().zip(&q) {
                    *r -= factor * qv;
                }
            }
        }
        modes.push(q);
        points.push((i_n, y_n));
        let next = sup_of(&residual);
        sup = next.0;
        i_n = next.1;
        y_n = next.2;
        sup_history.push(sup);
    }
    // meso coefficients by forward substitution of the unit-lower-triangular
    // point system Σ_j α_j(i) q_j(y_p) = K(i, y_p)
    let n = modes.len();
    let mut alphas = vec![vec![0.0; n_cells]; n];
    for i in 0..n_cells {
        for p in 0..n {
            let (_, yp) = points[p];
            let mut v = values[i][yp];
            for j in 0..p {
                v -= alphas[j][i] * modes[j][yp];
            }
            alphas[p][i] = v;
        }
    }
    Ok(EimModel {
        n_cells,
        n_elements,
        alphas,
        modes,
        points,
        achieved: sup,
        sup_history,
        lebesgue_bound: (2.0f64).powi(n as i32) - 1.0,
    })
}

/// Σ_j α_j(cell) · q_j, as an isotropic element field.
pub fn eim_evaluate(model: &EimModel, cell: usize) -> Result<Vec<SymMat2>> {
    if cell >= model.n_cells {
        return Err(Error::CellOutOfRange(cell, model.n_cells));
    }
    let mut v = vec![0.0; model.n_elements];
    for (alpha, q) in model.alphas.iter().zip(&model.modes) {
        let a = alpha[cell];
        if a != 0.0 {
            for (o, qv) in v.iter_mut().zip(q) {
                *o += a * qv;
            }
        }
    }
    Ok(v.into_iter().map(SymMat2::iso).collect())
}

/// Clamps elementwise eigenvalues below `floor` up to `floor`, keeping the
/// interpolant admissible for the corrector solvers.
pub fn spd_repair(field: &mut [SymMat2], floor: f64) {
    assert!(floor > 0.0, "repair floor must be positive");
    for m in field.iter_mut() {
        if m.min_eigenvalue() < floor {
            *m = m.clamp_eigenvalues(floor);
        }
    }
}

/// The interpolant as a separated conductivity; cells whose evaluation
/// undershoots `floor` get grouped correction terms appended so the result
/// stays in separated form and SPD.
pub fn to_low_rank_repaired(model: &EimModel, floor: f64) -> Result<LowRankConductivity> {
    let mut k = LowRankConductivity::new(model.n_cells, model.n_elements);
    for (alpha, q) in model.alphas.iter().zip(&model.modes) {
        k.push_term(alpha.clone(), q.iter().map(|&v| SymMat2::iso(v)).collect())?;
    }
    // group identical per-cell corrections
    let mut groups: HashMap<Vec<u64>, (Vec<SymMat2>, Vec<f64>)> = HashMap::new();
    for i in 0..model.n_cells {
        let raw = eim_evaluate(model, i)?;
        let mut fixed = raw.clone();
        spd_repair(&mut fixed, floor);
        let corr: Vec<SymMat2> = fixed
            .iter()
            .zip(&raw)
            .map(|(f, r)| SymMat2 { xx: f.xx - r.xx, xy: f.xy - r.xy, yy: f.yy - r.yy })
            .collect();
        if corr.iter().all(|m| m.xx == 0.0 && m.xy == 0.0 && m.yy == 0.0) {
            continue;
        }
        let key: Vec<u64> = corr
            .iter()
            .flat_map(|m| [m.xx.to_bits(), m.xy.to_bits(), m.yy.to_bits()])
            .collect();
        let entry = groups
            .entry(key)
            .or_insert_with(|| (corr, vec![0.0; model.n_cells]));
        entry.1[i] = 1.0;
    }
    for (_, (corr, meso)) in groups {
        k.push_term(meso, corr)?;
    }
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::build_cell_mesh;
    use crate::media;

    fn dense_of(k: &LowRankConductivity) -> DenseConductivity {
        DenseConductivity {
            cells: (0..k.n_cells).map(|i| k.eval_cell(i).unwrap()).collect(),
        }
    }

    #[test]
    fn rank_one_medium_terminates_in_one_step() {
        let cell = build_cell_mesh(10, 10, 1.0, 1.0).unwrap();
        let s = media::sample_bernoulli_defect(9, &cell, 1.0, 100.0, 1.0, 3).unwrap();
        let model = eim_interpolate(&dense_of(&s.k), 1e-10, 100).unwrap();
        assert_eq!(model.rank(), 1);
        for i in 0..9 {
            let v = eim_evaluate(&model, i).unwrap();
            for (a, b) in v.iter().zip(&s.k.eval_cell(i).unwrap()) {
                assert!((a.xx - b.xx).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bernoulli_two_state_is_rank_two_exact() {
        let cell = build_cell_mesh(10, 10, 1.0, 1.0).unwrap();
        let s = media::sample_bernoulli_defect(25, &cell, 1.0, 100.0, 0.5, 11).unwrap();
        assert!(s.b.iter().any(|&x| x) && s.b.iter().any(|&x| !x));
        let model = eim_interpolate(&dense_of(&s.k), 0.1, 100).unwrap();
        assert_eq!(model.rank(), 2);
        for i in 0..25 {
            let v = eim_evaluate(&model, i).unwrap();
            for (a, b) in v.iter().zip(&s.k.eval_cell(i).unwrap()) {
                assert!((a.xx - b.xx).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn point_matrix_is_unit_lower_triangular() {
        let cell = build_cell_mesh(8, 8, 1.0, 1.0).unwrap();
        let d = media::sample_regular_peaks(16, &cell, 199.0, 2.0, 10.0, 7);
        let model = eim_interpolate(&d, 1.0, 100).unwrap();
        let p = model.point_matrix();
        for (r, row) in p.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if c == r {
                    assert!((v - 1.0).abs() < 1e-12);
                } else if c > r {
                    assert!(v.abs() < 1e-10, "upper entry ({r},{c}) = {v}");
                }
            }
        }
        // interpolation exactness at the selected points
        for (p, &(i, y)) in model.points.iter().enumerate() {
            let _ = p;
            let v = eim_evaluate(&model, i).unwrap();
            assert!((v[y].xx - d.cells[i][y].xx).abs() < 1e-12);
        }
    }

    #[test]
    fn sup_error_below_delta_everywhere() {
        let cell = build_cell_mesh(8, 8, 1.0, 1.0).unwrap();
        let d = media::sample_regular_peaks(9, &cell, 199.0, 2.0, 10.0, 13);
        for &delta in &[1.0, 0.1] {
            let model = eim_interpolate(&d, delta, 100).unwrap();
            for i in 0..9 {
                let v = eim_evaluate(&model, i).unwrap();
                for (a, b) in v.iter().zip(&d.cells[i]) {
                    assert!((a.xx - b.xx).abs() <= delta + 1e-12);
                }
            }
        }
    }

    #[test]
    fn rank_cap_reported() {
        let cell = build_cell_mesh(6, 6, 1.0, 1.0).unwrap();
        let d = media::sample_regular_peaks(20, &cell, 199.0, 2.0, 10.0, 19);
        match eim_interpolate(&d, 1e-12, 3) {
            Err(Error::EimRankCap { cap: 3, .. }) => {}
            other => panic!("expected rank-cap error, got {other:?}"),
        }
    }

    #[test]
    fn spd_repair_clamps_only_below_floor() {
        let mut f = vec![SymMat2::iso(2.0), SymMat2::iso(-0.3)];
        spd_repair(&mut f, 0.5);
        assert_eq!(f[0], SymMat2::iso(2.0));
        assert!((f[1].xx - 0.5).abs() < 1e-14);
    }

    #[test]
    fn repaired_low_rank_matches_model_when_already_spd() {
        let cell = build_cell_mesh(10, 10, 1.0, 1.0).unwrap();
        let s = media::sample_bernoulli_defect(16, &cell, 1.0, 100.0, 0.4, 21).unwrap();
        let model = eim_interpolate(&dense_of(&s.k), 0.01, 100).unwrap();
        let k = to_low_rank_repaired(&model, 0.5).unwrap();
        assert_eq!(k.rank(), model.rank());
        for i in 0..16 {
            for (a, b) in k.eval_cell(i).unwrap().iter().zip(&s.k.eval_cell(i).unwrap()) {
                assert!((a.xx - b.xx).abs() < 1e-9);
            }
        }
    }
}
