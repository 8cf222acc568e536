//! Magnetic field from the converged potential: B = grad(Phi), evaluated at
//! cell centers by centered differences over the half-mesh spacings.

use std::sync::Arc;

use crate::mesh::Grid3D;
use crate::operator::GhostLayout;

#[derive(Debug, Clone)]
pub struct VectorField3D {
    pub br: Vec<f64>,
    pub bt: Vec<f64>,
    pub bp: Vec<f64>,
    pub grid: Arc<Grid3D>,
}

/// Br = dPhi/dr, Bt = (1/r) dPhi/dtheta, Bp = (1/(r sin theta)) dPhi/dphi.
/// `phi_ghosted` must have its ghosts filled by the operator's boundary
/// closure (with boundary data for the lower radial ghost).
pub fn gradient(grid: &Arc<Grid3D>, phi_ghosted: &[f64]) -> VectorField3D {
    let (nr, nt, np) = grid.dims();
    let l = GhostLayout { nr, nt, np };
    debug_assert_eq!(phi_ghosted.len(), l.padded_len());
    let n = nr * nt * np;
    let mut br = vec![0.0; n];
    let mut bt = vec![0.0; n];
    let mut bp = vec![0.0; n];
    let mut m = 0;
    for k in 0..np {
        let ki = k as isize;
        for j in 0..nt {
            let ji = j as isize;
            for i in 0..nr {
                let ii = i as isize;
                let r = grid.rmesh.center(i);
                let dr = grid.rmesh.dxh[i] + grid.rmesh.dxh[i + 1];
                br[m] =
                    (phi_ghosted[l.at(ii + 1, ji, ki)] - phi_ghosted[l.at(ii - 1, ji, ki)]) / dr;
                let dt = grid.tmesh.dxh[j] + grid.tmesh.dxh[j + 1];
                bt[m] = (phi_ghosted[l.at(ii, ji + 1, ki)] - phi_ghosted[l.at(ii, ji - 1, ki)])
                    / (r * dt);
                let dp = grid.pmesh.dxh[k] + grid.pmesh.dxh[k + 1];
                bp[m] = (phi_ghosted[l.at(ii, ji, ki + 1)] - phi_ghosted[l.at(ii, ji, ki - 1)])
                    / (r * grid.sin_t[j] * dp);
                m += 1;
            }
        }
    }
    VectorField3D {
        br,
        bt,
        bp,
        grid: grid.clone(),
    }
}
