//! Compressed sparse row matrices and a deflated conjugate gradient solver.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Csr {
    pub nrows: usize,
    pub ncols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub data: Vec<f64>,
}

/// Triplet accumulator; duplicate entries are summed on conversion.
#[derive(Debug, Clone)]
pub struct Triplets {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Triplets { nrows, ncols, entries: Vec::new() }
    }

    pub fn push(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.nrows && j < self.ncols);
        if v != 0.0 {
            self.entries.push((i, j, v));
        }
    }

    pub fn to_csr(&self) -> Csr {
        let mut counts = vec![0usize; self.nrows + 1];
        for &(i, _, _) in &self.entries {
            counts[i + 1] += 1;
        }
        for i in 0..self.nrows {
            counts[i + 1] += counts[i];
        }
        let mut indices = vec![0usize; self.entries.len()];
        let mut data = vec![0.0; self.entries.len()];
        let mut cursor = counts.clone();
        for &(i, j, v) in &self.entries {
            indices[cursor[i]] = j;
            data[cursor[i]] = v;
            cursor[i] += 1;
        }
        // sort each row and merge duplicates
        let mut out_indptr = vec![0usize; self.nrows + 1];
        let mut out_indices = Vec::with_capacity(self.entries.len());
        let mut out_data = Vec::with_capacity(self.entries.len());
        for i in 0..self.nrows {
            let (lo, hi) = (counts[i], counts[i + 1]);
            let mut row: Vec<(usize, f64)> =
                indices[lo..hi].iter().copied().zip(data[lo..hi].iter().copied()).collect();
            row.sort_unstable_by_key(|&(j, _)| j);
            for (j, v) in row {
                if let Some(last) = out_indices.last() {
                    if *last == j && out_indptr[i] < out_indices.len() {
                        *out_data.last_mut().unwrap() += v;
                        continue;
                    }
                }
                out_indices.push(j);
                out_data.push(v);
            }
            out_indptr[i + 1] = out_indices.len();
        }
        Csr {
            nrows: self.nrows,
            ncols: self.ncols,
            indptr: out_indptr,
            indices: out_indices,
            data: out_data,
        }
    }
}

impl Csr {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Csr { nrows, ncols, indptr: vec![0; nrows + 1], indices: vec![], data: vec![] }
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    /// y = A x
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for i in 0..self.nrows {
            let mut acc = 0.0;
            for k in self.indptr[i]..self.indptr[i + 1] {
                acc += self.data[k] * x[self.indices[k]];
            }
            y[i] = acc;
        }
    }

    /// y += c * A x
    pub fn mul_vec_acc(&self, x: &[f64], c: f64, y: &mut [f64]) {
        for i in 0..self.nrows {
            let mut acc = 0.0;
            for k in self.indptr[i]..self.indptr[i + 1] {
                acc += self.data[k] * x[self.indices[k]];
            }
            y[i] += c * acc;
        }
    }

    /// y += c * A^T x
    pub fn mul_transpose_acc(&self, x: &[f64], c: f64, y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.nrows);
        debug_assert_eq!(y.len(), self.ncols);
        for i in 0..self.nrows {
            let xi = c * x[i];
            if xi == 0.0 {
                continue;
            }
            for k in self.indptr[i]..self.indptr[i + 1] {
                y[self.indices[k]] += self.data[k] * xi;
            }
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.nrows];
        for i in 0..self.nrows {
            for k in self.indptr[i]..self.indptr[i + 1] {
                if self.indices[k] == i {
                    d[i] += self.data[k];
                }
            }
        }
        d
    }

    /// x^T A y (A square)
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.nrows {
            let mut row = 0.0;
            for k in self.indptr[i]..self.indptr[i + 1] {
                row += self.data[k] * y[self.indices[k]];
            }
            acc += x[i] * row;
        }
        acc
    }

    /// Max-norm asymmetry ||A - A^T||_max, for assembly checks.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.nrows {
            for k in self.indptr[i]..self.indptr[i + 1] {
                let j = self.indices[k];
                let aji = self.get(j, i);
                worst = worst.max((self.data[k] - aji).abs());
            }
        }
        worst
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        for k in self.indptr[i]..self.indptr[i + 1] {
            if self.indices[k] == j {
                return self.data[k];
            }
        }
        0.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn project_out_constant(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    for x in v.iter_mut() {
        *x -= mean;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CgOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Project iterates onto the zero-mean subspace (constant-vector deflation
    /// for semidefinite systems whose null space is the constants).
    pub deflate_constant: bool,
}

impl Default for CgOptions {
    fn default() -> Self {
        CgOptions { tol: 1e-10, max_iter: 50_000, deflate_constant: false }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CgReport {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Preconditioned conjugate gradients on a matrix-free symmetric PSD operator.
///
/// `precond_diag` holds the (positive) diagonal used as Jacobi preconditioner;
/// pass `None` for the identity.
pub fn cg<F>(
    apply: F,
    b: &[f64],
    precond_diag: Option<&[f64]>,
    opts: CgOptions,
) -> Result<(Vec<f64>, CgReport)>
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    if opts.deflate_constant {
        project_out_constant(&mut r);
    }
    let bnorm = norm2(&r);
    if bnorm == 0.0 {
        return Ok((x, CgReport { iterations: 0, relative_residual: 0.0 }));
    }
    let prec = |r: &[f64], z: &mut [f64]| match precond_diag {
        Some(d) => {
            for i in 0..n {
                z[i] = if d[i] > 0.0 { r[i] / d[i] } else { r[i] };
            }
        }
        None => z.copy_from_slice(r),
    };
    let mut z = vec![0.0; n];
    prec(&r, &mut z);
    if opts.deflate_constant {
        project_out_constant(&mut z);
    }
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 1..=opts.max_iter {
        apply(&p, &mut ap);
        if opts.deflate_constant {
            project_out_constant(&mut ap);
        }
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            // numerically singular direction; stop with what we have
            let res = norm2(&r) / bnorm;
            if res <= opts.tol * 10.0 {
                return Ok((x, CgReport { iterations: it, relative_residual: res }));
            }
            return Err(Error::SolverDiverged { residual: res, iterations: it });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let res = norm2(&r) / bnorm;
        if res <= opts.tol {
            if opts.deflate_constant {
                project_out_constant(&mut x);
            }
            return Ok((x, CgReport { iterations: it, relative_residual: res }));
        }
        prec(&r, &mut z);
        if opts.deflate_constant {
            project_out_constant(&mut z);
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let res = norm2(&r) / bnorm;
    Err(Error::SolverDiverged { residual: res, iterations: opts.max_iter })
}

/// CG on an assembled CSR matrix with Jacobi preconditioning.
pub fn cg_csr(a: &Csr, b: &[f64], opts: CgOptions) -> Result<(Vec<f64>, CgReport)> {
    let diag = a.diagonal();
    cg(|x, y| a.mul_vec(x, y), b, Some(&diag), opts)
}
