//! The two communication-free preconditioners: diagonal scaling (PC1) and
//! worker-local zero-fill incomplete LU (PC2). PC2 drops couplings to
//! neighboring workers outright (truncation, no lumping), so its application
//! is a purely local pair of triangular solves.

use crate::error::{Error, Result};
use crate::operator::LaplaceOperator;
use crate::sparse::{CsrMatrix, LuCsr};

#[derive(Debug, Clone)]
pub struct DiagPC {
    pub inv_diag: Vec<f64>,
}

impl DiagPC {
    pub fn from_diag(diag: &[f64]) -> Result<Self> {
        let mut inv = Vec::with_capacity(diag.len());
        for (m, &d) in diag.iter().enumerate() {
            if d == 0.0 || !d.is_finite() {
                return Err(Error::Config(format!(
                    "diagonal entry {m} is {d}; cannot build diagonal preconditioner"
                )));
            }
            inv.push(1.0 / d);
        }
        Ok(DiagPC { inv_diag: inv })
    }
}

/// Reciprocal of the operator's main DIA band.
pub fn build_pc1(op: &LaplaceOperator) -> Result<DiagPC> {
    DiagPC::from_diag(op.matrix().diag()?)
}

pub fn apply_pc1(pc: &DiagPC, r: &[f64], z: &mut [f64]) -> Result<()> {
    if r.len() != pc.inv_diag.len() || z.len() != pc.inv_diag.len() {
        return Err(Error::Dimension {
            expected: pc.inv_diag.len(),
            got: r.len(),
        });
    }
    for m in 0..r.len() {
        z[m] = pc.inv_diag[m] * r[m];
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct IluPC {
    pub lu: LuCsr,
}

/// ILU0 of the worker-local block; cross-worker couplings must already be
/// absent from `local_a`. Breakdown surfaces as a typed error so the caller
/// can fall back to PC1.
pub fn build_pc2(local_a: &CsrMatrix) -> Result<IluPC> {
    Ok(IluPC {
        lu: local_a.ilu0()?,
    })
}

/// Local triangular solves; no communication.
pub fn apply_pc2(pc: &IluPC, r_local: &[f64], z: &mut [f64]) -> Result<()> {
    if r_local.len() != pc.lu.n || z.len() != pc.lu.n {
        return Err(Error::Dimension {
            expected: pc.lu.n,
            got: r_local.len(),
        });
    }
    z.copy_from_slice(r_local);
    pc.lu.solve_in_place(z);
    Ok(())
}

/// A worker's preconditioner, either kind behind one call.
#[derive(Debug, Clone)]
pub enum Prec {
    Diag(DiagPC),
    Ilu(IluPC),
}

impl Prec {
    pub fn apply(&self, r: &[f64], z: &mut [f64]) -> Result<()> {
        match self {
            Prec::Diag(pc) => apply_pc1(pc, r, z),
            Prec::Ilu(pc) => apply_pc2(pc, r, z),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_mesh, MeshSpec};
    use crate::operator::{assemble, BoundarySpec, ScalarMap2D, UpperBc};
    use crate::sparse::DiaMatrix;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

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

    fn test_operator() -> crate::error::Result<LaplaceOperator> {
        let g = Arc::new(build_mesh(&MeshSpec {
            nr: 4,
            nt: 4,
            np: 4,
            r0: 1.0,
            r1: 2.0,
            r_stretch: 1.0,
        })?);
        let bc = Arc::new(BoundarySpec {
            upper: UpperBc::SourceSurface,
            br0: ScalarMap2D::zeros_on(&g),
        });
        assemble(g, bc)
    }

    #[test]
    fn pc1_of_scaled_identity() {
        let pc = DiagPC::from_diag(&[2.0, 2.0, 2.0]).unwrap();
        assert!(pc.inv_diag.iter().all(|&v| v == 0.5));
        let mut z = vec![0.0; 3];
        apply_pc1(&pc, &[4.0, 6.0, 0.0], &mut z).unwrap();
        assert_eq!(z, vec![2.0, 3.0, 0.0]);
    }

    #[test]
    fn pc1_zero_diagonal_is_an_error() {
        assert!(DiagPC::from_diag(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn pc1_matches_operator_diagonal() {
        let op = test_operator().unwrap();
        let pc = build_pc1(&op).unwrap();
        let diag = op.matrix().diag().unwrap();
        for (inv, d) in pc.inv_diag.iter().zip(diag) {
            assert!((inv * d - 1.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn pc1_double_application_scales_twice() {
        let pc = DiagPC::from_diag(&[2.0, 2.0]).unwrap();
        let r = vec![8.0, -4.0];
        let mut z1 = vec![0.0; 2];
        apply_pc1(&pc, &r, &mut z1).unwrap();
        let mut z2 = vec![0.0; 2];
        apply_pc1(&pc, &z1, &mut z2).unwrap();
        assert_eq!(z2, vec![2.0, -1.0]);
    }

    #[test]
    fn pc2_single_block_equals_global_ilu() {
        let op = test_operator().unwrap();
        let csr = op.matrix().to_csr();
        let pc = build_pc2(&csr).unwrap();
        let global = csr.ilu0().unwrap();
        assert_eq!(pc.lu.lu_values, global.lu_values);
    }

    #[test]
    fn pc2_on_diagonal_matrix_equals_pc1() {
        let mut a = DiaMatrix::new(5, vec![0]).unwrap();
        for (m, v) in a.band_mut(0).unwrap().iter_mut().enumerate() {
            *v = (m + 1) as f64;
        }
        let pc2 = build_pc2(&a.to_csr()).unwrap();
        let pc1 = DiagPC::from_diag(a.diag().unwrap()).unwrap();
        let r = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let mut z1 = vec![0.0; 5];
        let mut z2 = vec![0.0; 5];
        apply_pc1(&pc1, &r, &mut z1).unwrap();
        apply_pc2(&pc2, &r, &mut z2).unwrap();
        for (u, v) in z1.iter().zip(&z2) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn pc2_truncated_blocks_equal_exact_lu_of_each_block() {
        // two workers on a tridiagonal chain: each truncated block is itself
        // tridiagonal, so ILU0 of the block is its exact LU
        let n = 8;
        let a = tridiag(n, -1.0, 2.0, -1.0);
        let half = n / 2;
        for lo in [0, half] {
            // truncated local block (couplings across the cut dropped)
            let mut blk = tridiag(half, -1.0, 2.0, -1.0);
            // the truncation keeps the original diagonal values
            for m in 0..half {
                blk.band_mut(0).unwrap()[m] = a.diag().unwrap()[lo + m];
            }
            let pc = build_pc2(&blk.to_csr()).unwrap();
            let prod = pc.lu.lu_product_dense(64).unwrap();
            let want = blk.to_dense().unwrap();
            let scale = want.max_abs();
            for (p, q) in prod.data.iter().zip(&want.data) {
                assert!((p - q).abs() <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn pc2_recovers_solution_through_a_for_tridiagonal() {
        let a = tridiag(32, -1.0, 2.0, -1.0);
        let pc = build_pc2(&a.to_csr()).unwrap();
        let x: Vec<f64> = (0..32).map(|i| (0.2 * i as f64).sin()).collect();
        let mut ax = vec![0.0; 32];
        a.spmv(&x, &mut ax).unwrap();
        let mut z = vec![0.0; 32];
        apply_pc2(&pc, &ax, &mut z).unwrap();
        for (u, v) in z.iter().zip(&x) {
            assert!((u - v).abs() <= 1e-9);
        }
    }

    #[test]
    fn both_preconditioners_are_linear_and_self_adjoint() {
        let op = test_operator().unwrap();
        let n = op.n();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let r1: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r2: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (alpha, beta) = (0.7, -1.3);
        let combo: Vec<f64> = r1
            .iter()
            .zip(&r2)
            .map(|(u, v)| alpha * u + beta * v)
            .collect();

        let pcs = [
            Prec::Diag(build_pc1(&op).unwrap()),
            Prec::Ilu(build_pc2(&op.matrix().to_csr()).unwrap()),
        ];
        for (which, pc) in pcs.iter().enumerate() {
            let mut z1 = vec![0.0; n];
            let mut z2 = vec![0.0; n];
            let mut zc = vec![0.0; n];
            pc.apply(&r1, &mut z1).unwrap();
            pc.apply(&r2, &mut z2).unwrap();
            pc.apply(&combo, &mut zc).unwrap();
            let scale = zc.iter().fold(1e-30f64, |m, v| m.max(v.abs()));
            for m in 0..n {
                let lin = alpha * z1[m] + beta * z2[m];
                assert!(
                    (zc[m] - lin).abs() <= 1e-13 * scale,
                    "pc {which} not linear"
                );
            }
            // <M r1, r2> == <r1, M r2>
            let lhs: f64 = z1.iter().zip(&r2).map(|(u, v)| u * v).sum();
            let rhs: f64 = r1.iter().zip(&z2).map(|(u, v)| u * v).sum();
            let tol = if which == 0 { 1e-11 } else { 1e-9 };
            assert!(
                (lhs - rhs).abs() <= tol * lhs.abs().max(rhs.abs()).max(1e-30),
                "pc {which} pairing asymmetric: {lhs} vs {rhs}"
            );
        }
    }
}
