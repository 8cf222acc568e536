//! Sparse matrix storage and kernels.
//!
//! The interior operator lives in DIA format (one dense array per nonzero
//! diagonal). The ILU0 preconditioner works on a CSR conversion, storing both
//! factors in a single value array over the source pattern with the U diagonal
//! reciprocals precomputed so the backward sweep is division-free. Triangular
//! solves are strictly sequential.

use crate::error::{Error, Result};

/// Largest matrix `to_dense` will materialize by default.
pub const DEFAULT_DENSE_CAP: usize = 4096;

/// Pivot magnitude below which ILU0 declares breakdown.
pub const ILU_PIVOT_MIN: f64 = 1e-300;

/// Diagonal-format sparse matrix. `bands[d][m]` is the coefficient of column
/// `m + offsets[d]` in row `m`; positions falling outside the matrix hold
/// exactly 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DiaMatrix {
    pub n: usize,
    pub offsets: Vec<isize>,
    pub bands: Vec<Vec<f64>>,
}

impl DiaMatrix {
    pub fn new(n: usize, offsets: Vec<isize>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("matrix dimension must be positive".into()));
        }
        for w in offsets.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config(format!(
                    "DIA offsets must be strictly increasing, found {} then {}",
                    w[0], w[1]
                )));
            }
        }
        let bands = vec![vec![0.0; n]; offsets.len()];
        Ok(DiaMatrix { n, offsets, bands })
    }

    /// The 7-offset layout for an r-fastest interior ordering of an
    /// nr x nt x np block: [-nr*nt, -nr, -1, 0, 1, nr, nr*nt].
    pub fn stencil7(nr: usize, nt: usize, np: usize) -> Result<Self> {
        if nr < 2 || nt < 2 || np < 2 {
            return Err(Error::Config(format!(
                "stencil7 needs at least 2 cells per axis, got {nr}x{nt}x{np}"
            )));
        }
        let s = (nr * nt) as isize;
        let r = nr as isize;
        DiaMatrix::new(nr * nt * np, vec![-s, -r, -1, 0, 1, r, s])
    }

    pub fn band(&self, offset: isize) -> Option<&[f64]> {
        self.offsets
            .iter()
            .position(|&o| o == offset)
            .map(|d| self.bands[d].as_slice())
    }

    pub fn band_mut(&mut self, offset: isize) -> Option<&mut [f64]> {
        match self.offsets.iter().position(|&o| o == offset) {
            Some(d) => Some(self.bands[d].as_mut_slice()),
            None => None,
        }
    }

    pub fn diag(&self) -> Result<&[f64]> {
        self.band(0)
            .ok_or_else(|| Error::Config("matrix has no main diagonal band".into()))
    }

    /// y = A x, skipping out-of-range columns.
    pub fn spmv(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::Dimension {
                expected: self.n,
                got: x.len(),
            });
        }
        if y.len() != self.n {
            return Err(Error::Dimension {
                expected: self.n,
                got: y.len(),
            });
        }
        y.fill(0.0);
        let n = self.n as isize;
        for (d, &off) in self.offsets.iter().enumerate() {
            let band = &self.bands[d];
            let lo = (-off).max(0) as usize;
            let hi = (n - off.max(0)).max(0) as usize;
            for m in lo..hi {
                y[m] += band[m] * x[(m as isize + off) as usize];
            }
        }
        Ok(())
    }

    /// Convert to CSR retaining every in-range band position, including exact
    /// zeros, so the pattern is the fixed stencil pattern regardless of which
    /// couplings happen to vanish.
    pub fn to_csr(&self) -> CsrMatrix {
        let n = self.n as isize;
        let mut row_ptr = Vec::with_capacity(self.n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for m in 0..self.n {
            for (d, &off) in self.offsets.iter().enumerate() {
                let col = m as isize + off;
                if col >= 0 && col < n {
                    col_idx.push(col as usize);
                    values.push(self.bands[d][m]);
                }
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix {
            n: self.n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn to_dense(&self) -> Result<Dense> {
        self.to_dense_capped(DEFAULT_DENSE_CAP)
    }

    pub fn to_dense_capped(&self, cap: usize) -> Result<Dense> {
        if self.n > cap {
            return Err(Error::DenseCap { n: self.n, cap });
        }
        let mut d = Dense::zeros(self.n);
        let n = self.n as isize;
        for (b, &off) in self.offsets.iter().enumerate() {
            for m in 0..self.n {
                let col = m as isize + off;
                if col >= 0 && col < n {
                    *d.at_mut(m, col as usize) = self.bands[b][m];
                }
            }
        }
        Ok(d)
    }
}

/// Compressed sparse row matrix with ascending in-row column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    pub fn new(
        n: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_ptr.len() != n + 1 || row_ptr[0] != 0 || *row_ptr.last().unwrap() != col_idx.len() {
            return Err(Error::Config("bad CSR row pointers".into()));
        }
        if col_idx.len() != values.len() {
            return Err(Error::Config("CSR col/value length mismatch".into()));
        }
        for m in 0..n {
            if row_ptr[m + 1] < row_ptr[m] {
                return Err(Error::Config("CSR row pointers not nondecreasing".into()));
            }
            let row = &col_idx[row_ptr[m]..row_ptr[m + 1]];
            for w in row.windows(2) {
                if w[1] <= w[0] {
                    return Err(Error::Config(format!(
                        "CSR row {m} columns not strictly increasing"
                    )));
                }
            }
            if let Some(&c) = row.last() {
                if c >= n {
                    return Err(Error::Config(format!("CSR row {m} column out of range")));
                }
            }
        }
        Ok(CsrMatrix {
            n,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn spmv(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::Dimension {
                expected: self.n,
                got: x.len(),
            });
        }
        if y.len() != self.n {
            return Err(Error::Dimension {
                expected: self.n,
                got: y.len(),
            });
        }
        for m in 0..self.n {
            let mut sum = 0.0;
            for idx in self.row_ptr[m]..self.row_ptr[m + 1] {
                sum += self.values[idx] * x[self.col_idx[idx]];
            }
            y[m] = sum;
        }
        Ok(())
    }

    /// Positions of the diagonal entry in each row; errors if a row lacks one.
    pub fn diag_positions(&self) -> Result<Vec<usize>> {
        let mut pos = Vec::with_capacity(self.n);
        for m in 0..self.n {
            let row = &self.col_idx[self.row_ptr[m]..self.row_ptr[m + 1]];
            match row.binary_search(&m) {
                Ok(p) => pos.push(self.row_ptr[m] + p),
                Err(_) => return Err(Error::Config(format!("CSR row {m} has no diagonal entry"))),
            }
        }
        Ok(pos)
    }

    /// Zero-fill incomplete LU factorization restricted to the existing
    /// pattern (row-wise IKJ sweep). L's unit diagonal is implicit; U occupies
    /// the diagonal and above. Breakdown on a pivot smaller than
    /// `ILU_PIVOT_MIN` in magnitude.
    pub fn ilu0(&self) -> Result<LuCsr> {
        let n = self.n;
        let diag_ptr = self.diag_positions()?;
        let mut lu = self.values.clone();
        const NONE: usize = usize::MAX;
        let mut pos = vec![NONE; n];
        for i in 0..n {
            for idx in self.row_ptr[i]..self.row_ptr[i + 1] {
                pos[self.col_idx[idx]] = idx;
            }
            for idx in self.row_ptr[i]..diag_ptr[i] {
                let k = self.col_idx[idx];
                // pivot of row k was validated when row k finished
                lu[idx] /= lu[diag_ptr[k]];
                let lik = lu[idx];
                for kidx in diag_ptr[k] + 1..self.row_ptr[k + 1] {
                    let j = self.col_idx[kidx];
                    let p = pos[j];
                    if p != NONE {
                        lu[p] -= lik * lu[kidx];
                    }
                }
            }
            let piv = lu[diag_ptr[i]];
            if piv.abs() < ILU_PIVOT_MIN {
                return Err(Error::IluBreakdown { row: i, pivot: piv });
            }
            for idx in self.row_ptr[i]..self.row_ptr[i + 1] {
                pos[self.col_idx[idx]] = NONE;
            }
        }
        let inv_udiag: Vec<f64> = diag_ptr.iter().map(|&p| 1.0 / lu[p]).collect();
        Ok(LuCsr {
            n,
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
            lu_values: lu,
            inv_udiag,
            diag_ptr,
        })
    }

    pub fn to_dense(&self) -> Result<Dense> {
        self.to_dense_capped(DEFAULT_DENSE_CAP)
    }

    pub fn to_dense_capped(&self, cap: usize) -> Result<Dense> {
        if self.n > cap {
            return Err(Error::DenseCap { n: self.n, cap });
        }
        let mut d = Dense::zeros(self.n);
        for m in 0..self.n {
            for idx in self.row_ptr[m]..self.row_ptr[m + 1] {
                *d.at_mut(m, self.col_idx[idx]) = self.values[idx];
            }
        }
        Ok(d)
    }
}

/// Combined ILU0 factors on the source pattern: strict lower part holds L
/// (unit diagonal implicit), diagonal and above hold U. `inv_udiag` caches the
/// reciprocals of the U diagonal.
#[derive(Debug, Clone)]
pub struct LuCsr {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub lu_values: Vec<f64>,
    pub inv_udiag: Vec<f64>,
    diag_ptr: Vec<usize>,
}

impl LuCsr {
    #[inline]
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    /// z := U^-1 L^-1 z by sequential forward then backward substitution.
    pub fn solve_in_place(&self, z: &mut [f64]) {
        debug_assert_eq!(z.len(), self.n);
        for i in 0..self.n {
            let mut zi = z[i];
            for idx in self.row_ptr[i]..self.diag_ptr[i] {
                zi -= self.lu_values[idx] * z[self.col_idx[idx]];
            }
            z[i] = zi;
        }
        for i in (0..self.n).rev() {
            let mut zi = z[i];
            for idx in self.diag_ptr[i] + 1..self.row_ptr[i + 1] {
                zi -= self.lu_values[idx] * z[self.col_idx[idx]];
            }
            z[i] = zi * self.inv_udiag[i];
        }
    }

    pub fn solve(&self, r: &[f64]) -> Vec<f64> {
        let mut z = r.to_vec();
        self.solve_in_place(&mut z);
        z
    }

    /// Dense L*U product, for factorization checks on small matrices.
    pub fn lu_product_dense(&self, cap: usize) -> Result<Dense> {
        if self.n > cap {
            return Err(Error::DenseCap { n: self.n, cap });
        }
        let n = self.n;
        let mut l = Dense::zeros(n);
        let mut u = Dense::zeros(n);
        for i in 0..n {
            *l.at_mut(i, i) = 1.0;
            for idx in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[idx];
                if j < i {
                    *l.at_mut(i, j) = self.lu_values[idx];
                } else {
                    *u.at_mut(i, j) = self.lu_values[idx];
                }
            }
        }
        let mut p = Dense::zeros(n);
        for i in 0..n {
            for k in 0..=i.min(n - 1) {
                let lik = l.at(i, k);
                if lik == 0.0 {
                    continue;
                }
                for j in 0..n {
                    *p.at_mut(i, j) += lik * u.at(k, j);
                }
            }
        }
        Ok(p)
    }
}

/// Row-major dense matrix used for oracles and small-matrix checks.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn zeros(n: usize) -> Self {
        Dense {
            n,
            data: vec![0.0; n * n],
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.n + j]
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let row = &self.data[i * self.n..(i + 1) * self.n];
            y[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut m = 0.0f64;
        for i in 0..self.n {
            for j in 0..i {
                m = m.max((self.at(i, j) - self.at(j, i)).abs());
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tridiag(n: usize, sub: f64, diag: f64, sup: f64) -> DiaMatrix {
        let mut a = DiaMatrix::new(n, vec![-1, 0, 1]).unwrap();
        for m in 0..n {
            if m > 0 {
                a.band_mut(-1).unwrap()[m] = sub;
            }
            a.band_mut(0).unwrap()[m] = diag;
            if m + 1 < n {
                a.band_mut(1).unwrap()[m] = sup;
            }
        }
        a
    }

    fn random_seven_band(nr: usize, nt: usize, np: usize, rng: &mut ChaCha8Rng) -> DiaMatrix {
        let mut a = DiaMatrix::stencil7(nr, nt, np).unwrap();
        let n = a.n;
        let offsets = a.offsets.clone();
        for (d, &off) in offsets.iter().enumerate() {
            for m in 0..n {
                let col = m as isize + off;
                if col < 0 || col >= n as isize {
                    continue;
                }
                a.bands[d][m] = rng.gen_range(-1.0..1.0);
            }
        }
        // make it comfortably diagonally dominant
        for m in 0..n {
            let mut rowsum = 0.0;
            for (d, &off) in offsets.iter().enumerate() {
                if off != 0 {
                    rowsum += a.bands[d][m].abs();
                }
            }
            a.band_mut(0).unwrap()[m] = rowsum + 1.0 + rng.gen_range(0.0..1.0);
        }
        a
    }

    /// Gaussian elimination with partial pivoting; test oracle.
    fn dense_solve(a: &Dense, b: &[f64]) -> Vec<f64> {
        let n = a.n;
        let mut m = a.data.clone();
        let mut x = b.to_vec();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&p, &q| {
                    m[p * n + col]
                        .abs()
                        .partial_cmp(&m[q * n + col].abs())
                        .unwrap()
                })
                .unwrap();
            if piv != col {
                for j in 0..n {
                    m.swap(col * n + j, piv * n + j);
                }
                x.swap(col, piv);
            }
            let d = m[col * n + col];
            for row in col + 1..n {
                let f = m[row * n + col] / d;
                if f == 0.0 {
                    continue;
                }
                for j in col..n {
                    m[row * n + j] -= f * m[col * n + j];
                }
                x[row] -= f * x[col];
            }
        }
        for row in (0..n).rev() {
            let mut s = x[row];
            for j in row + 1..n {
                s -= m[row * n + j] * x[j];
            }
            x[row] = s / m[row * n + row];
        }
        x
    }

    /// Dense-pattern ILU0 oracle (KIJ order, mask-restricted writes).
    fn dense_ilu0_oracle(a: &Dense, mask: &[bool]) -> Vec<f64> {
        let n = a.n;
        let mut f = a.data.clone();
        for k in 0..n {
            for i in k + 1..n {
                if !mask[i * n + k] {
                    continue;
                }
                f[i * n + k] /= f[k * n + k];
                let lik = f[i * n + k];
                for j in k + 1..n {
                    if mask[i * n + j] && mask[k * n + j] {
                        f[i * n + j] -= lik * f[k * n + j];
                    }
                }
            }
        }
        f
    }

    #[test]
    fn dia_identity_spmv() {
        let mut a = DiaMatrix::new(4, vec![0]).unwrap();
        a.band_mut(0).unwrap().fill(1.0);
        let x = vec![3.0, -1.0, 0.5, 2.0];
        let mut y = vec![0.0; 4];
        a.spmv(&x, &mut y).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dia_tridiagonal_spmv() {
        let a = tridiag(3, 1.0, 2.0, 1.0);
        let mut y = vec![0.0; 3];
        a.spmv(&[1.0, 1.0, 1.0], &mut y).unwrap();
        assert_eq!(y, vec![3.0, 4.0, 3.0]);
    }

    #[test]
    fn dia_spmv_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_seven_band(4, 4, 4, &mut rng);
        let d = a.to_dense().unwrap();
        let x: Vec<f64> = (0..a.n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut y = vec![0.0; a.n];
        let mut yd = vec![0.0; a.n];
        a.spmv(&x, &mut y).unwrap();
        d.matvec(&x, &mut yd);
        let scale = yd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (u, v) in y.iter().zip(&yd) {
            assert!((u - v).abs() <= 1e-14 * scale);
        }
    }

    #[test]
    fn dia_with_arbitrary_offsets_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let n = rng.gen_range(1..40);
            let mut offsets: Vec<isize> = (-(n as isize - 1)..n as isize)
                .filter(|_| rng.gen_bool(0.3))
                .collect();
            if offsets.is_empty() {
                offsets.push(0);
            }
            let mut a = DiaMatrix::new(n, offsets.clone()).unwrap();
            for (d, &off) in offsets.iter().enumerate() {
                for m in 0..n {
                    let col = m as isize + off;
                    if col >= 0 && col < n as isize {
                        a.bands[d][m] = rng.gen_range(-1.0..1.0);
                    }
                }
            }
            let dd = a.to_dense_capped(64).unwrap();
            let csr = a.to_csr();
            assert_eq!(dd, csr.to_dense_capped(64).unwrap());
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut y1 = vec![0.0; n];
            let mut y2 = vec![0.0; n];
            a.spmv(&x, &mut y1).unwrap();
            dd.matvec(&x, &mut y2);
            let scale = y2.iter().fold(1e-30f64, |m, v| m.max(v.abs()));
            for (u, v) in y1.iter().zip(&y2) {
                assert!((u - v).abs() <= 1e-14 * scale);
            }
        }
    }

    #[test]
    fn dia_spmv_length_mismatch() {
        let a = tridiag(3, 1.0, 2.0, 1.0);
        let mut y = vec![0.0; 3];
        assert!(matches!(
            a.spmv(&[1.0, 2.0], &mut y),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn csr_identity_and_empty_row() {
        let id = CsrMatrix::identity(3);
        let mut y = vec![0.0; 3];
        id.spmv(&[4.0, 5.0, 6.0], &mut y).unwrap();
        assert_eq!(y, vec![4.0, 5.0, 6.0]);

        // middle row empty
        let a = CsrMatrix::new(3, vec![0, 1, 1, 2], vec![0, 2], vec![2.0, 3.0]).unwrap();
        a.spmv(&[1.0, 1.0, 1.0], &mut y).unwrap();
        assert_eq!(y, vec![2.0, 0.0, 3.0]);
    }

    #[test]
    fn dia_to_csr_tridiagonal_pattern() {
        let a = tridiag(3, 1.0, 2.0, 1.0);
        let c = a.to_csr();
        assert_eq!(c.nnz(), 7);
        let rows: Vec<usize> = (0..3).map(|m| c.row_ptr[m + 1] - c.row_ptr[m]).collect();
        assert_eq!(rows, vec![2, 3, 2]);
        assert_eq!(a.to_dense().unwrap(), c.to_dense().unwrap());
    }

    #[test]
    fn dia_to_csr_retains_structural_zeros() {
        let mut a = DiaMatrix::stencil7(2, 2, 2).unwrap();
        a.band_mut(0).unwrap().fill(1.0);
        let c = a.to_csr();
        // every in-range offset position is kept even though most values are 0
        let mut expect = 0;
        for m in 0..a.n as isize {
            for &off in &a.offsets {
                let col = m + off;
                if col >= 0 && col < a.n as isize {
                    expect += 1;
                }
            }
        }
        assert_eq!(c.nnz(), expect);
        assert_eq!(a.to_dense().unwrap(), c.to_dense().unwrap());
    }

    #[test]
    fn one_by_one_csr() {
        let mut a = DiaMatrix::new(1, vec![0]).unwrap();
        a.band_mut(0).unwrap()[0] = 5.0;
        let c = a.to_csr();
        assert_eq!(c.row_ptr, vec![0, 1]);
        assert_eq!(c.values, vec![5.0]);
    }

    #[test]
    fn csr_spmv_matches_dia_after_conversion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let a = random_seven_band(3, 3, 4, &mut rng);
            let c = a.to_csr();
            let x: Vec<f64> = (0..a.n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut y1 = vec![0.0; a.n];
            let mut y2 = vec![0.0; a.n];
            a.spmv(&x, &mut y1).unwrap();
            c.spmv(&x, &mut y2).unwrap();
            let scale = y1.iter().fold(1e-30f64, |m, v| m.max(v.abs()));
            for (u, v) in y1.iter().zip(&y2) {
                assert!((u - v).abs() <= 1e-14 * scale);
            }
        }
    }

    #[test]
    fn ilu0_of_diagonal_matrix() {
        let mut a = DiaMatrix::new(4, vec![0]).unwrap();
        for (m, v) in a.band_mut(0).unwrap().iter_mut().enumerate() {
            *v = (m + 1) as f64;
        }
        let lu = a.to_csr().ilu0().unwrap();
        assert_eq!(lu.lu_values, vec![1.0, 2.0, 3.0, 4.0]);
        for (m, &inv) in lu.inv_udiag.iter().enumerate() {
            assert!((inv * (m + 1) as f64 - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn ilu0_tridiagonal_u_diagonal() {
        let a = tridiag(4, -1.0, 2.0, -1.0);
        let lu = a.to_csr().ilu0().unwrap();
        let expect = [2.0, 1.5, 4.0 / 3.0, 5.0 / 4.0];
        for (m, &e) in expect.iter().enumerate() {
            let d = 1.0 / lu.inv_udiag[m];
            assert!((d - e).abs() < 1e-14, "row {m}: {d} vs {e}");
        }
    }

    #[test]
    fn ilu0_exact_for_tridiagonal() {
        // tridiagonal LU has no fill, so L*U must reproduce A
        let a = tridiag(12, -1.0, 2.1, -0.9);
        let c = a.to_csr();
        let lu = c.ilu0().unwrap();
        let prod = lu.lu_product_dense(DEFAULT_DENSE_CAP).unwrap();
        let ad = c.to_dense().unwrap();
        let scale = ad.max_abs();
        for (p, q) in prod.data.iter().zip(&ad.data) {
            assert!((p - q).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn ilu0_matches_dense_pattern_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..5 {
            let a = random_seven_band(4, 3, 5, &mut rng);
            let c = a.to_csr();
            let lu = c.ilu0().unwrap();
            assert_eq!(lu.nnz(), c.nnz());
            let dense = c.to_dense().unwrap();
            let n = c.n;
            let mut mask = vec![false; n * n];
            for m in 0..n {
                for idx in c.row_ptr[m]..c.row_ptr[m + 1] {
                    mask[m * n + c.col_idx[idx]] = true;
                }
            }
            let oracle = dense_ilu0_oracle(&dense, &mask);
            let scale = dense.max_abs();
            for m in 0..n {
                for idx in c.row_ptr[m]..c.row_ptr[m + 1] {
                    let got = lu.lu_values[idx];
                    let want = oracle[m * n + c.col_idx[idx]];
                    assert!(
                        (got - want).abs() <= 1e-12 * scale.max(1.0),
                        "entry ({m},{}) {got} vs {want}",
                        c.col_idx[idx]
                    );
                }
            }
        }
    }

    #[test]
    fn ilu0_breakdown_reported() {
        // second pivot becomes exactly zero
        let a =
            CsrMatrix::new(2, vec![0, 2, 4], vec![0, 1, 0, 1], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        match a.ilu0() {
            Err(Error::IluBreakdown { row, .. }) => assert_eq!(row, 1),
            other => panic!("expected breakdown, got {other:?}"),
        }
    }

    #[test]
    fn lusolve_identity() {
        let lu = CsrMatrix::identity(5).ilu0().unwrap();
        let r = vec![1.0, -2.0, 3.0, -4.0, 5.0];
        assert_eq!(lu.solve(&r), r);
    }

    #[test]
    fn lusolve_matches_dense_solve_for_tridiagonal() {
        let a = tridiag(9, -1.0, 2.3, -1.1);
        let c = a.to_csr();
        let lu = c.ilu0().unwrap();
        let r: Vec<f64> = (0..9).map(|i| (i as f64 * 0.7).sin()).collect();
        let z = lu.solve(&r);
        let zd = dense_solve(&c.to_dense().unwrap(), &r);
        let scale = zd.iter().fold(1e-30f64, |m, v| m.max(v.abs()));
        for (u, v) in z.iter().zip(&zd) {
            assert!((u - v).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn lusolve_left_inverse_on_no_fill_matrix() {
        let a = tridiag(20, -1.0, 2.0, -1.0);
        let lu = a.to_csr().ilu0().unwrap();
        let x: Vec<f64> = (0..20).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut ax = vec![0.0; 20];
        a.spmv(&x, &mut ax).unwrap();
        let z = lu.solve(&ax);
        for (u, v) in z.iter().zip(&x) {
            assert!((u - v).abs() <= 1e-10);
        }
    }

    #[test]
    fn lusolve_in_place_aliases_input() {
        let a = tridiag(6, -1.0, 3.0, -1.0);
        let lu = a.to_csr().ilu0().unwrap();
        let r: Vec<f64> = (0..6).map(|i| i as f64 + 1.0).collect();
        let expect = lu.solve(&r);
        let mut z = r;
        lu.solve_in_place(&mut z);
        assert_eq!(z, expect);
    }

    #[test]
    fn dense_cap_refusal() {
        let a = DiaMatrix::new(5000, vec![0]).unwrap();
        assert!(matches!(a.to_dense(), Err(Error::DenseCap { .. })));
        assert!(a.to_dense_capped(5000).is_ok());
    }

    #[test]
    fn format_equivalence_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..8 {
            let nr = rng.gen_range(2..6);
            let nt = rng.gen_range(2..6);
            let np = rng.gen_range(2..6);
            let a = random_seven_band(nr, nt, np, &mut rng);
            let c = a.to_csr();
            let d = a.to_dense().unwrap();
            for _ in 0..100 {
                let x: Vec<f64> = (0..a.n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let mut y1 = vec![0.0; a.n];
                let mut y2 = vec![0.0; a.n];
                let mut y3 = vec![0.0; a.n];
                a.spmv(&x, &mut y1).unwrap();
                c.spmv(&x, &mut y2).unwrap();
                d.matvec(&x, &mut y3);
                let scale = y3.iter().fold(1e-30f64, |m, v| m.max(v.abs()));
                for m in 0..a.n {
                    assert!((y1[m] - y2[m]).abs() <= 1e-14 * scale);
                    assert!((y1[m] - y3[m]).abs() <= 1e-14 * scale);
                }
            }
        }
    }
}
