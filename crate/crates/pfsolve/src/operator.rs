//! Volume-scaled 7-point spherical Laplacian in DIA form with matrix-free
//! boundary closures.
//!
//! Each interior row holds the conservative flux-difference stencil of the
//! full spherical Laplacian multiplied by the cell volume, which makes the
//! interior matrix symmetric on nonuniform grids. The sign convention is
//! A = -volume * laplacian, so the diagonal band is strictly positive and the
//! system is positive (semi)definite.
//!
//! Boundary couplings never enter the DIA bands. The lower radial face is a
//! Neumann condition whose known flux moves to the right-hand side (the
//! diagonal drops that face's coupling); the upper face is either a closed
//! wall (zero flux, coupling dropped) or a source surface (potential pinned to
//! zero on the face, which doubles the face coupling on the diagonal). The
//! periodic phi couplings and the polar ring-average closure are applied
//! matrix-free from ghost values during `apply`. The pole faces carry zero
//! area, so the polar ghost enters with zero weight; the ring average is still
//! computed and filled to keep ghosted fields usable downstream.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mesh::{Block, Grid3D, TWO_PI};
use crate::sparse::{Dense, DiaMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpperBc {
    ClosedWall,
    SourceSurface,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pole {
    North,
    South,
}

/// How radial ghosts are filled.
///
/// `Homogeneous` is the operator's own closure (the inhomogeneous part of the
/// lower Neumann condition lives in the right-hand side). `WithBoundaryData`
/// folds the surface field into the lower ghost, which is what gradient
/// evaluation at the inner boundary needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GhostMode {
    Homogeneous,
    WithBoundaryData,
}

/// 2D scalar map on the theta-phi shell, theta-fastest storage.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap2D {
    pub nt: usize,
    pub np: usize,
    pub values: Vec<f64>,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
}

impl ScalarMap2D {
    pub fn new(
        nt: usize,
        np: usize,
        theta: Vec<f64>,
        phi: Vec<f64>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if nt == 0 || np == 0 {
            return Err(Error::Config("map dimensions must be positive".into()));
        }
        if theta.len() != nt || phi.len() != np || values.len() != nt * np {
            return Err(Error::Dimension {
                expected: nt * np,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("map contains non-finite values".into()));
        }
        Ok(ScalarMap2D {
            nt,
            np,
            values,
            theta,
            phi,
        })
    }

    pub fn zeros_on(grid: &Grid3D) -> Self {
        let (_, nt, np) = grid.dims();
        ScalarMap2D {
            nt,
            np,
            values: vec![0.0; nt * np],
            theta: (0..nt).map(|j| grid.tmesh.center(j)).collect(),
            phi: (0..np).map(|k| grid.pmesh.center(k)).collect(),
        }
    }

    #[inline]
    pub fn at(&self, j: usize, k: usize) -> f64 {
        self.values[j + self.nt * k]
    }

    #[inline]
    pub fn at_mut(&mut self, j: usize, k: usize) -> &mut f64 {
        &mut self.values[j + self.nt * k]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone)]
pub struct BoundarySpec {
    pub upper: UpperBc,
    pub br0: ScalarMap2D,
}

/// Index layout of a block-local field with one ghost layer per direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GhostLayout {
    pub nr: usize,
    pub nt: usize,
    pub np: usize,
}

impl GhostLayout {
    /// Buffer length including the ghost layers.
    pub fn padded_len(&self) -> usize {
        (self.nr + 2) * (self.nt + 2) * (self.np + 2)
    }

    /// Ghosted index; i in -1..=nr, j in -1..=nt, k in -1..=np.
    #[inline]
    pub fn at(&self, i: isize, j: isize, k: isize) -> usize {
        debug_assert!(i >= -1 && i <= self.nr as isize);
        debug_assert!(j >= -1 && j <= self.nt as isize);
        debug_assert!(k >= -1 && k <= self.np as isize);
        let w = (self.nr + 2) as isize;
        let h = (self.nt + 2) as isize;
        ((i + 1) + w * ((j + 1) + h * (k + 1))) as usize
    }
}

/// Copy an interior field into the interior region of a ghosted buffer.
pub fn scatter_interior(layout: GhostLayout, x: &[f64], xg: &mut [f64]) {
    debug_assert_eq!(x.len(), layout.nr * layout.nt * layout.np);
    debug_assert_eq!(xg.len(), layout.padded_len());
    let mut m = 0;
    for k in 0..layout.np {
        for j in 0..layout.nt {
            let base = layout.at(0, j as isize, k as isize);
            xg[base..base + layout.nr].copy_from_slice(&x[m..m + layout.nr]);
            m += layout.nr;
        }
    }
}

/// Discrete polar closure: for each radial index, the phi-average of the
/// interior ring adjacent to the pole, (1/2pi) sum_k x(i, j_adj, phi_k) dphi_k.
pub fn polar_ring_average(grid: &Grid3D, x: &[f64], pole: Pole) -> Vec<f64> {
    let (nr, nt, np) = grid.dims();
    debug_assert_eq!(x.len(), nr * nt * np);
    let j = match pole {
        Pole::North => 0,
        Pole::South => nt - 1,
    };
    let mut avg = vec![0.0; nr];
    for i in 0..nr {
        let mut sum = 0.0;
        for k in 0..np {
            sum += x[grid.cell_index(i, j, k)] * grid.pmesh.dx[k];
        }
        avg[i] = sum / TWO_PI;
    }
    avg
}

/// Subtract the area-weighted mean (weights sin(theta_j) dtheta_j dphi_k)
/// from every value.
pub fn enforce_solvability(map: &ScalarMap2D, grid: &Grid3D) -> Result<ScalarMap2D> {
    let (_, nt, np) = grid.dims();
    if map.nt != nt || map.np != np {
        return Err(Error::MapMismatch(format!(
            "map is {}x{}, grid shell is {}x{}",
            map.nt, map.np, nt, np
        )));
    }
    let mut wsum = 0.0;
    let mut vsum = 0.0;
    for k in 0..np {
        for j in 0..nt {
            let w = grid.sin_t[j] * grid.tmesh.dx[j] * grid.pmesh.dx[k];
            wsum += w;
            vsum += w * map.at(j, k);
        }
    }
    let mean = vsum / wsum;
    let mut out = map.clone();
    for v in &mut out.values {
        *v -= mean;
    }
    Ok(out)
}

pub struct LaplaceOperator {
    grid: Arc<Grid3D>,
    bc: Arc<BoundarySpec>,
    block: Block,
    a: DiaMatrix,
    /// Ghost-face coupling coefficients; `None` where the physical radial
    /// closure is folded into the matrix.
    cr_lo: Option<Vec<f64>>,
    cr_hi: Option<Vec<f64>>,
    ct_lo: Vec<f64>,
    ct_hi: Vec<f64>,
    cp_lo: Vec<f64>,
    cp_hi: Vec<f64>,
    layout: GhostLayout,
    scratch: RefCell<Vec<f64>>,
}

/// Radial face coupling r_f^2 sin(theta_j) dtheta_j dphi_k / dr_f.
#[inline]
fn coeff_r(grid: &Grid3D, f: usize, j: usize, k: usize) -> f64 {
    let rf = grid.rmesh.faces[f];
    rf * rf * grid.sin_t[j] * grid.tmesh.dx[j] * grid.pmesh.dx[k] / grid.rmesh.dxh[f]
}

/// Theta face coupling sin(theta_g) dr_i dphi_k / dtheta_g; zero at the poles.
#[inline]
fn coeff_t(grid: &Grid3D, i: usize, g: usize, k: usize) -> f64 {
    grid.sin_th[g] * grid.rmesh.dx[i] * grid.pmesh.dx[k] / grid.tmesh.dxh[g]
}

/// Phi face coupling dr_i dtheta_j / (sin(theta_j) dphi_h).
#[inline]
fn coeff_p(grid: &Grid3D, i: usize, j: usize, h: usize) -> f64 {
    grid.rmesh.dx[i] * grid.tmesh.dx[j] / (grid.sin_t[j] * grid.pmesh.dxh[h])
}

pub fn assemble(grid: Arc<Grid3D>, bc: Arc<BoundarySpec>) -> Result<LaplaceOperator> {
    let dims = grid.dims();
    assemble_block(grid, bc, Block::full(dims))
}

pub fn assemble_block(
    grid: Arc<Grid3D>,
    bc: Arc<BoundarySpec>,
    block: Block,
) -> Result<LaplaceOperator> {
    let (nr, nt, np) = grid.dims();
    block.validate((nr, nt, np))?;
    if bc.br0.nt != nt || bc.br0.np != np {
        return Err(Error::MapMismatch(format!(
            "boundary map is {}x{}, grid shell is {}x{}",
            bc.br0.nt, bc.br0.np, nt, np
        )));
    }
    if grid.sin_t.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Config(
            "degenerate grid: a theta center sits on a pole".into(),
        ));
    }

    let (lnr, lnt, lnp) = (block.nr, block.nt, block.np);
    let mut a = DiaMatrix::stencil7(lnr, lnt, lnp)?;
    let sr = lnr as isize;
    let ss = (lnr * lnt) as isize;

    for lk in 0..lnp {
        let k = block.k0 + lk;
        for lj in 0..lnt {
            let j = block.j0 + lj;
            for li in 0..lnr {
                let i = block.i0 + li;
                let m = block.local_index(li, lj, lk);

                let c_rlo = coeff_r(&grid, i, j, k);
                let c_rhi = coeff_r(&grid, i + 1, j, k);
                let c_tlo = coeff_t(&grid, i, j, k);
                let c_thi = coeff_t(&grid, i, j + 1, k);
                let c_plo = coeff_p(&grid, i, j, k);
                let c_phi = coeff_p(&grid, i, j, k + 1);

                let mut diag = c_tlo + c_thi + c_plo + c_phi;
                if i > 0 {
                    diag += c_rlo;
                }
                if i + 1 < nr {
                    diag += c_rhi;
                } else {
                    match bc.upper {
                        UpperBc::ClosedWall => {}
                        UpperBc::SourceSurface => diag += 2.0 * c_rhi,
                    }
                }
                a.band_mut(0).unwrap()[m] = diag;

                if li > 0 {
                    a.band_mut(-1).unwrap()[m] = -c_rlo;
                }
                if li + 1 < lnr {
                    a.band_mut(1).unwrap()[m] = -c_rhi;
                }
                if lj > 0 {
                    a.band_mut(-sr).unwrap()[m] = -c_tlo;
                }
                if lj + 1 < lnt {
                    a.band_mut(sr).unwrap()[m] = -c_thi;
                }
                if lk > 0 {
                    a.band_mut(-ss).unwrap()[m] = -c_plo;
                }
                if lk + 1 < lnp {
                    a.band_mut(ss).unwrap()[m] = -c_phi;
                }
            }
        }
    }

    // ghost-face coupling tables; radial physical faces are folded, so only
    // block-interface radial faces keep a table
    let cr_lo = (block.i0 > 0).then(|| {
        let mut c = vec![0.0; lnt * lnp];
        for lk in 0..lnp {
            for lj in 0..lnt {
                c[lj + lnt * lk] = coeff_r(&grid, block.i0, block.j0 + lj, block.k0 + lk);
            }
        }
        c
    });
    let cr_hi = (block.i0 + lnr < nr).then(|| {
        let mut c = vec![0.0; lnt * lnp];
        for lk in 0..lnp {
            for lj in 0..lnt {
                c[lj + lnt * lk] = coeff_r(&grid, block.i0 + lnr, block.j0 + lj, block.k0 + lk);
            }
        }
        c
    });
    let mut ct_lo = vec![0.0; lnr * lnp];
    let mut ct_hi = vec![0.0; lnr * lnp];
    for lk in 0..lnp {
        for li in 0..lnr {
            ct_lo[li + lnr * lk] = coeff_t(&grid, block.i0 + li, block.j0, block.k0 + lk);
            ct_hi[li + lnr * lk] = coeff_t(&grid, block.i0 + li, block.j0 + lnt, block.k0 + lk);
        }
    }
    let mut cp_lo = vec![0.0; lnr * lnt];
    let mut cp_hi = vec![0.0; lnr * lnt];
    for lj in 0..lnt {
        for li in 0..lnr {
            cp_lo[li + lnr * lj] = coeff_p(&grid, block.i0 + li, block.j0 + lj, block.k0);
            cp_hi[li + lnr * lj] = coeff_p(&grid, block.i0 + li, block.j0 + lj, block.k0 + lnp);
        }
    }

    let layout = GhostLayout {
        nr: lnr,
        nt: lnt,
        np: lnp,
    };
    let scratch = RefCell::new(vec![0.0; layout.padded_len()]);
    Ok(LaplaceOperator {
        grid,
        bc,
        block,
        a,
        cr_lo,
        cr_hi,
        ct_lo,
        ct_hi,
        cp_lo,
        cp_hi,
        layout,
        scratch,
    })
}

impl LaplaceOperator {
    pub fn matrix(&self) -> &DiaMatrix {
        &self.a
    }

    pub fn grid(&self) -> &Arc<Grid3D> {
        &self.grid
    }

    pub fn bc(&self) -> &Arc<BoundarySpec> {
        &self.bc
    }

    pub fn block(&self) -> Block {
        self.block
    }

    pub fn layout(&self) -> GhostLayout {
        self.layout
    }

    pub fn n(&self) -> usize {
        self.block.n()
    }

    /// DIA matvec plus ghost contributions. `x` is the block-interior vector,
    /// `xg` the ghosted buffer with ghosts already filled.
    pub fn apply_core(&self, x: &[f64], xg: &[f64], y: &mut [f64]) {
        self.a
            .spmv(x, y)
            .expect("interior dimensions fixed at assembly");
        let (lnr, lnt, lnp) = (self.block.nr, self.block.nt, self.block.np);
        let l = self.layout;
        if let Some(c) = &self.cr_lo {
            for lk in 0..lnp {
                for lj in 0..lnt {
                    let m = self.block.local_index(0, lj, lk);
                    y[m] -= c[lj + lnt * lk] * xg[l.at(-1, lj as isize, lk as isize)];
                }
            }
        }
        if let Some(c) = &self.cr_hi {
            for lk in 0..lnp {
                for lj in 0..lnt {
                    let m = self.block.local_index(lnr - 1, lj, lk);
                    y[m] -= c[lj + lnt * lk] * xg[l.at(lnr as isize, lj as isize, lk as isize)];
                }
            }
        }
        for lk in 0..lnp {
            for li in 0..lnr {
                let m = self.block.local_index(li, 0, lk);
                y[m] -= self.ct_lo[li + lnr * lk] * xg[l.at(li as isize, -1, lk as isize)];
                let m = self.block.local_index(li, lnt - 1, lk);
                y[m] -=
                    self.ct_hi[li + lnr * lk] * xg[l.at(li as isize, lnt as isize, lk as isize)];
            }
        }
        for lj in 0..lnt {
            for li in 0..lnr {
                let m = self.block.local_index(li, lj, 0);
                y[m] -= self.cp_lo[li + lnr * lj] * xg[l.at(li as isize, lj as isize, -1)];
                let m = self.block.local_index(li, lj, lnp - 1);
                y[m] -=
                    self.cp_hi[li + lnr * lj] * xg[l.at(li as isize, lj as isize, lnp as isize)];
            }
        }
    }

    /// Fill the physical radial ghosts of a block that touches the radial
    /// boundaries. Interface ghosts are a halo-exchange concern, not handled
    /// here.
    pub fn fill_radial_ghosts(&self, x: &[f64], xg: &mut [f64], mode: GhostMode) {
        let (nr, _, _) = self.grid.dims();
        let (lnr, lnt, lnp) = (self.block.nr, self.block.nt, self.block.np);
        let l = self.layout;
        if self.block.i0 == 0 {
            for lk in 0..lnp {
                let k = self.block.k0 + lk;
                for lj in 0..lnt {
                    let j = self.block.j0 + lj;
                    let inner = x[self.block.local_index(0, lj, lk)];
                    let g = match mode {
                        GhostMode::Homogeneous => inner,
                        GhostMode::WithBoundaryData => {
                            inner - self.grid.rmesh.dxh[0] * self.bc.br0.at(j, k)
                        }
                    };
                    xg[l.at(-1, lj as isize, lk as isize)] = g;
                }
            }
        }
        if self.block.i0 + lnr == nr {
            for lk in 0..lnp {
                for lj in 0..lnt {
                    let outer = x[self.block.local_index(lnr - 1, lj, lk)];
                    xg[l.at(lnr as isize, lj as isize, lk as isize)] = match self.bc.upper {
                        UpperBc::ClosedWall => outer,
                        UpperBc::SourceSurface => -outer,
                    };
                }
            }
        }
    }

    /// Assign the polar ring averages into the theta ghosts of a
    /// pole-adjacent block. `avg` is indexed by local radial index.
    pub fn set_polar_ghosts(&self, xg: &mut [f64], pole: Pole, avg: &[f64]) {
        let (_, nt, _) = self.grid.dims();
        let (lnr, lnt, lnp) = (self.block.nr, self.block.nt, self.block.np);
        debug_assert_eq!(avg.len(), lnr);
        let l = self.layout;
        match pole {
            Pole::North => {
                debug_assert_eq!(self.block.j0, 0);
                for lk in 0..lnp {
                    for li in 0..lnr {
                        xg[l.at(li as isize, -1, lk as isize)] = avg[li];
                    }
                }
            }
            Pole::South => {
                debug_assert_eq!(self.block.j0 + lnt, nt);
                for lk in 0..lnp {
                    for li in 0..lnr {
                        xg[l.at(li as isize, lnt as isize, lk as isize)] = avg[li];
                    }
                }
            }
        }
    }

    /// Full ghost fill on the whole grid (serial path): periodic phi wrap,
    /// polar ring averages, and radial closure per boundary mode.
    pub fn fill_ghosts_full(&self, x: &[f64], xg: &mut [f64], mode: GhostMode) {
        assert!(
            self.block.is_full(self.grid.dims()),
            "full ghost fill requires the full-grid block"
        );
        let (nr, nt, np) = self.grid.dims();
        let l = self.layout;
        for j in 0..nt {
            for i in 0..nr {
                xg[l.at(i as isize, j as isize, -1)] = x[self.grid.cell_index(i, j, np - 1)];
                xg[l.at(i as isize, j as isize, np as isize)] = x[self.grid.cell_index(i, j, 0)];
            }
        }
        let navg = polar_ring_average(&self.grid, x, Pole::North);
        let savg = polar_ring_average(&self.grid, x, Pole::South);
        for k in 0..np {
            for i in 0..nr {
                xg[l.at(i as isize, -1, k as isize)] = navg[i];
                xg[l.at(i as isize, nt as isize, k as isize)] = savg[i];
            }
        }
        self.fill_radial_ghosts(x, xg, mode);
    }

    /// Serial application on the full grid: scatter, fill ghosts, apply.
    /// Uses an internal scratch buffer, so a single instance must not be
    /// applied concurrently.
    pub fn apply_into(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        let n = self.n();
        if x.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: x.len(),
            });
        }
        if y.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: y.len(),
            });
        }
        let mut xg = self.scratch.borrow_mut();
        scatter_interior(self.layout, x, &mut xg);
        self.fill_ghosts_full(x, &mut xg, GhostMode::Homogeneous);
        self.apply_core(x, &xg, y);
        Ok(())
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = vec![0.0; self.n()];
        self.apply_into(x, &mut y)?;
        Ok(y)
    }

    /// Ghosted copy of a full-grid field with the requested radial closure.
    pub fn ghosted(&self, x: &[f64], mode: GhostMode) -> Result<Vec<f64>> {
        let n = self.n();
        if x.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: x.len(),
            });
        }
        let mut xg = vec![0.0; self.layout.padded_len()];
        scatter_interior(self.layout, x, &mut xg);
        self.fill_ghosts_full(x, &mut xg, mode);
        Ok(xg)
    }

    /// Right-hand side from eliminating the lower Neumann ghost: zero except
    /// the innermost radial layer, where b = -(face area) * br0.
    pub fn build_rhs(&self) -> Vec<f64> {
        let (lnt, lnp) = (self.block.nt, self.block.np);
        let mut b = vec![0.0; self.block.n()];
        if self.block.i0 != 0 {
            return b;
        }
        let r0 = self.grid.rmesh.faces[0];
        for lk in 0..lnp {
            let k = self.block.k0 + lk;
            for lj in 0..lnt {
                let j = self.block.j0 + lj;
                let area =
                    r0 * r0 * self.grid.sin_t[j] * self.grid.tmesh.dx[j] * self.grid.pmesh.dx[k];
                b[self.block.local_index(0, lj, lk)] = -area * self.bc.br0.at(j, k);
            }
        }
        b
    }
}

/// Materialize the full operator (matrix-free closures included) by applying
/// it to unit vectors. Test and diagnostic support for small grids.
pub fn materialize_full(op: &LaplaceOperator, cap: usize) -> Result<Dense> {
    let n = op.n();
    if n > cap {
        return Err(Error::DenseCap { n, cap });
    }
    let mut d = Dense::zeros(n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    for m in 0..n {
        e[m] = 1.0;
        op.apply_into(&e, &mut col)?;
        for row in 0..n {
            *d.at_mut(row, m) = col[row];
        }
        e[m] = 0.0;
    }
    Ok(d)
}
