//! Small dense value types shared across the crate.

use serde::{Deserialize, Serialize};

/// Symmetric 2x2 matrix, used for per-element conductivities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SymMat2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl SymMat2 {
    pub const ZERO: SymMat2 = SymMat2 { xx: 0.0, xy: 0.0, yy: 0.0 };

    pub fn iso(k: f64) -> Self {
        SymMat2 { xx: k, xy: 0.0, yy: k }
    }

    pub fn diag(kx: f64, ky: f64) -> Self {
        SymMat2 { xx: kx, xy: 0.0, yy: ky }
    }

    /// Matrix-vector product.
    pub fn mul_vec(&self, v: [f64; 2]) -> [f64; 2] {
        [self.xx * v[0] + self.xy * v[1], self.xy * v[0] + self.yy * v[1]]
    }

    /// Eigenvalues, ascending.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let tr = self.xx + self.yy;
        let det = self.xx * self.yy - self.xy * self.xy;
        let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
        (tr / 2.0 - disc, tr / 2.0 + disc)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().0
    }

    pub fn is_spd(&self) -> bool {
        self.min_eigenvalue() > 0.0
    }

    /// Clamps eigenvalues below `floor` up to `floor`, keeping eigenvectors.
    pub fn clamp_eigenvalues(&self, floor: f64) -> SymMat2 {
        let (lo, hi) = self.eigenvalues();
        if lo >= floor {
            return *self;
        }
        // Spectral decomposition of a symmetric 2x2.
        let new_lo = floor;
        let new_hi = hi.max(floor);
        if self.xy.abs() < 1e-300 {
            let (a, b) = if self.xx <= self.yy {
                (new_lo, new_hi)
            } else {
                (new_hi, new_lo)
            };
            return SymMat2 { xx: a, xy: 0.0, yy: b };
        }
        // Eigenvector for lo: (xy, lo - xx), normalised.
        let v = [self.xy, lo - self.xx];
        let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
        let v = [v[0] / n, v[1] / n];
        let w = [-v[1], v[0]];
        SymMat2 {
            xx: new_lo * v[0] * v[0] + new_hi * w[0] * w[0],
            xy: new_lo * v[0] * v[1] + new_hi * w[0] * w[1],
            yy: new_lo * v[1] * v[1] + new_hi * w[1] * w[1],
        }
    }
}

impl std::ops::Add for SymMat2 {
    type Output = SymMat2;
    fn add(self, o: SymMat2) -> SymMat2 {
        SymMat2 { xx: self.xx + o.xx, xy: self.xy + o.xy, yy: self.yy + o.yy }
    }
}

impl std::ops::Mul<f64> for SymMat2 {
    type Output = SymMat2;
    fn mul(self, c: f64) -> SymMat2 {
        SymMat2 { xx: self.xx * c, xy: self.xy * c, yy: self.yy * c }
    }
}

/// A 2x2 homogenised diffusion tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct HomogenizedTensor {
    pub e: [[f64; 2]; 2],
}

impl HomogenizedTensor {
    pub const ZERO: HomogenizedTensor = HomogenizedTensor { e: [[0.0; 2]; 2] };

    pub fn new(e11: f64, e12: f64, e21: f64, e22: f64) -> Self {
        HomogenizedTensor { e: [[e11, e12], [e21, e22]] }
    }

    pub fn diag(a: f64, b: f64) -> Self {
        Self::new(a, 0.0, 0.0, b)
    }

    pub fn iso(c: f64) -> Self {
        Self::diag(c, c)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.e[i - 1][j - 1]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.e.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sub(&self, o: &HomogenizedTensor) -> HomogenizedTensor {
        let mut r = *self;
        for i in 0..2 {
            for j in 0..2 {
                r.e[i][j] -= o.e[i][j];
            }
        }
        r
    }

    pub fn add(&self, o: &HomogenizedTensor) -> HomogenizedTensor {
        let mut r = *self;
        for i in 0..2 {
            for j in 0..2 {
                r.e[i][j] += o.e[i][j];
            }
        }
        r
    }

    pub fn scale(&self, c: f64) -> HomogenizedTensor {
        let mut r = *self;
        for i in 0..2 {
            for j in 0..2 {
                r.e[i][j] *= c;
            }
        }
        r
    }

    /// Relative asymmetry |K12 - K21| / ||K||.
    pub fn asymmetry(&self) -> f64 {
        (self.e[0][1] - self.e[1][0]).abs() / self.frobenius_norm().max(f64::MIN_POSITIVE)
    }

    pub fn is_finite(&self) -> bool {
        self.e.iter().flatten().all(|v| v.is_finite())
    }
}

/// Deterministic per-sample seed derivation, order-independent across samples.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    // splitmix64 over the combined words
    let mut z = master ^ index.wrapping_mul(0x9e3779b97f4a7c15);
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
