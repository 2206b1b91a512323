//! Conductivity fields over (cell index) ⊗ (reference-cell elements):
//! separated low-rank representations and full per-cell storage.

use crate::error::{Error, Result};
use crate::types::SymMat2;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};

/// One separated term: a real vector over the cell set times a per-element
/// matrix pattern on the reference cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LowRankTerm {
    pub meso: Vec<f64>,
    pub micro: Vec<SymMat2>,
}

/// Conductivity with a low rank over (cells) ⊗ (reference cell).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LowRankConductivity {
    pub n_cells: usize,
    pub n_elements: usize,
    pub terms: Vec<LowRankTerm>,
}

impl LowRankConductivity {
    pub fn new(n_cells: usize, n_elements: usize) -> Self {
        Self { n_cells, n_elements, terms: Vec::new() }
    }

    pub fn push_term(&mut self, meso: Vec<f64>, micro: Vec<SymMat2>) -> Result<()> {
        if meso.len() != self.n_cells {
            return Err(Error::FieldLengthMismatch { expected: self.n_cells, got: meso.len() });
        }
        if micro.len() != self.n_elements {
            return Err(Error::ElementCountMismatch {
                expected: self.n_elements,
                got: micro.len(),
            });
        }
        self.terms.push(LowRankTerm { meso, micro });
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.terms.len()
    }

    /// Evaluated conductivity on every element of cell `i`.
    pub fn eval_cell(&self, i: usize) -> Result<Vec<SymMat2>> {
        if i >= self.n_cells {
            return Err(Error::CellOutOfRange(i, self.n_cells));
        }
        let mut out = vec![SymMat2::iso(0.0); self.n_elements];
        for t in &self.terms {
            let c = t.meso[i];
            if c == 0.0 {
                continue;
            }
            for (o, m) in out.iter_mut().zip(&t.micro) {
                *o = *o + *m * c;
            }
        }
        Ok(out)
    }

    /// Drops terms whose meso or micro factor is identically zero.
    pub fn compress_trivial(&mut self) {
        self.terms.retain(|t| {
            t.meso.iter().any(|v| *v != 0.0)
                && t.micro.iter().any(|m| m.xx != 0.0 || m.xy != 0.0 || m.yy != 0.0)
        });
    }
}

/// Full storage: one element-wise conductivity per cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseConductivity {
    pub cells: Vec<Vec<SymMat2>>,
}

impl DenseConductivity {
    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }
}

/// A conductivity over the supercell, in whichever storage fits the medium.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ConductivityField {
    LowRank(LowRankConductivity),
    Dense(DenseConductivity),
}

impl ConductivityField {
    pub fn n_cells(&self) -> usize {
        match self {
            ConductivityField::LowRank(k) => k.n_cells,
            ConductivityField::Dense(k) => k.n_cells(),
        }
    }

    pub fn n_elements(&self) -> usize {
        match self {
            ConductivityField::LowRank(k) => k.n_elements,
            ConductivityField::Dense(k) => k.cells.first().map_or(0, |c| c.len()),
        }
    }

    pub fn eval_cell(&self, i: usize) -> Result<Vec<SymMat2>> {
        match self {
            ConductivityField::LowRank(k) => k.eval_cell(i),
            ConductivityField::Dense(k) => k
                .cells
                .get(i)
                .cloned()
                .ok_or(Error::CellOutOfRange(i, k.n_cells())),
        }
    }

    /// Smallest and largest elementwise eigenvalue over all cells.
    pub fn bounds(&self) -> Result<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..self.n_cells() {
            for m in self.eval_cell(i)? {
                let (a, b) = m.eigenvalues();
                lo = lo.min(a);
                hi = hi.max(b);
            }
        }
        Ok((lo, hi))
    }

    /// Errors on the first element whose evaluated matrix is not SPD.
    pub fn check_spd(&self) -> Result<()> {
        for i in 0..self.n_cells() {
            for (e, m) in self.eval_cell(i)?.iter().enumerate() {
                if !m.is_spd() {
                    return Err(Error::NotSpd { cell: i, element: e, eig: m.min_eigenvalue() });
                }
            }
        }
        Ok(())
    }

    /// Writes a portable grid file: text header, then little-endian f64
    /// triples (xx, xy, yy) per element, cell-major.
    pub fn dump_grid_file<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        writeln!(w, "qphom-grid 1 {} {}", self.n_cells(), self.n_elements())?;
        for i in 0..self.n_cells() {
            for m in self.eval_cell(i)? {
                w.write_all(&m.xx.to_le_bytes())?;
                w.write_all(&m.xy.to_le_bytes())?;
                w.write_all(&m.yy.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a grid file back as a dense field.
    pub fn read_grid_file<R: Read>(r: R) -> Result<ConductivityField> {
        let mut r = BufReader::new(r);
        let mut header = String::new();
        r.read_line(&mut header)?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "qphom-grid" || parts[1] != "1" {
            return Err(Error::InvalidParameter(format!("bad grid-file header: {header:?}")));
        }
        let n_cells: usize = parts[2]
            .parse()
            .map_err(|_| Error::InvalidParameter("bad cell count".into()))?;
        let n_elements: usize = parts[3]
            .parse()
            .map_err(|_| Error::InvalidParameter("bad element count".into()))?;
        let mut cells = Vec::with_capacity(n_cells);
        let mut buf = [0u8; 8];
        for _ in 0..n_cells {
            let mut cell = Vec::with_capacity(n_elements);
            for _ in 0..n_elements {
                let mut vals = [0.0; 3];
                for v in vals.iter_mut() {
                    r.read_exact(&mut buf)?;
                    *v = f64::from_le_bytes(buf);
                }
                cell.push(SymMat2 { xx: vals[0], xy: vals[1], yy: vals[2] });
            }
            cells.push(cell);
        }
        Ok(ConductivityField::Dense(DenseConductivity { cells }))
    }
}

impl From<LowRankConductivity> for ConductivityField {
    fn from(k: LowRankConductivity) -> Self {
        ConductivityField::LowRank(k)
    }
}

impl From<DenseConductivity> for ConductivityField {
    fn from(k: DenseConductivity) -> Self {
        ConductivityField::Dense(k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_term() -> LowRankConductivity {
        let mut k = LowRankConductivity::new(3, 2);
        k.push_term(vec![1.0; 3], vec![SymMat2::iso(1.0); 2]).unwrap();
        k.push_term(vec![0.0, 1.0, 0.0], vec![SymMat2::iso(0.0), SymMat2::iso(99.0)])
            .unwrap();
        k
    }

    #[test]
    fn eval_sums_terms() {
        let k = two_term();
        assert_eq!(k.rank(), 2);
        let c1 = k.eval_cell(1).unwrap();
        assert_eq!(c1[0].xx, 1.0);
        assert_eq!(c1[1].xx, 100.0);
        let c0 = k.eval_cell(0).unwrap();
        assert_eq!(c0[1].xx, 1.0);
        assert!(k.eval_cell(3).is_err());
    }

    #[test]
    fn bounds_and_spd() {
        let f: ConductivityField = two_term().into();
        let (lo, hi) = f.bounds().unwrap();
        assert_eq!(lo, 1.0);
        assert_eq!(hi, 100.0);
        f.check_spd().unwrap();
        let mut bad = two_term();
        bad.push_term(vec![-5.0; 3], vec![SymMat2::iso(1.0); 2]).unwrap();
        let bad: ConductivityField = bad.into();
        assert!(matches!(bad.check_spd(), Err(Error::NotSpd { .. })));
    }

    #[test]
    fn grid_file_round_trip() {
        let f: ConductivityField = two_term().into();
        let mut buf = Vec::new();
        f.dump_grid_file(&mut buf).unwrap();
        let g = ConductivityField::read_grid_file(buf.as_slice()).unwrap();
        for i in 0..3 {
            assert_eq!(f.eval_cell(i).unwrap(), g.eval_cell(i).unwrap());
        }
    }

    #[test]
    fn compress_drops_zero_terms() {
        let mut k = two_term();
        k.push_term(vec![0.0; 3], vec![SymMat2::iso(1.0); 2]).unwrap();
        k.compress_trivial();
        assert_eq!(k.rank(), 2);
    }
}
