//! Nonuniform logically-rectangular spherical grid with ghost layers and the
//! metric quantities used by the stencil.
//!
//! Cells are collocated at centers; each axis carries one ghost slot per end.
//! The theta faces span [0, pi] so the first and last theta centers sit half a
//! cell from the poles, and the phi faces span [0, 2*pi] with periodic wrap
//! distances populated in the half-mesh widths.

use crate::error::{Error, Result};

pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;
pub const PI: f64 = std::f64::consts::PI;

/// How close a face coordinate must be to an axis endpoint (pole, periodic
/// seam) before it is snapped exactly onto it.
const ENDPOINT_SNAP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct MeshSpec {
    pub nr: usize,
    pub nt: usize,
    pub np: usize,
    /// Inner radius in solar-radius units.
    pub r0: f64,
    /// Outer radius in solar-radius units.
    pub r1: f64,
    /// Geometric stretch ratio for radial spacing, >= 1 (1 = uniform).
    pub r_stretch: f64,
}

impl MeshSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nr < 2 || self.nt < 2 || self.np < 2 {
            return Err(Error::Config(format!(
                "cell counts must be >= 2, got {}x{}x{}",
                self.nr, self.nt, self.np
            )));
        }
        if !(self.r0 > 0.0) || !self.r0.is_finite() {
            return Err(Error::Config(format!(
                "r0 must be positive, got {}",
                self.r0
            )));
        }
        if !(self.r1 > self.r0) || !self.r1.is_finite() {
            return Err(Error::Config(format!(
                "r1 must exceed r0, got r0={} r1={}",
                self.r0, self.r1
            )));
        }
        if !(self.r_stretch >= 1.0) || !self.r_stretch.is_finite() {
            return Err(Error::Config(format!(
                "r_stretch must be >= 1, got {}",
                self.r_stretch
            )));
        }
        Ok(())
    }
}

/// One axis of the grid.
///
/// `centers` is padded with one ghost slot per end (length n+2); ghost centers
/// are placed by mirror reflection across the boundary face, or by periodic
/// translation for the phi axis. `dxh[f]` is the center-to-center distance
/// across face `f`, so `dxh[i] = centers[i+1] - centers[i]` in padded indexing.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh1D {
    pub n: usize,
    /// Ghost-padded cell centers, length n+2.
    pub centers: Vec<f64>,
    /// Face coordinates, length n+1, strictly increasing.
    pub faces: Vec<f64>,
    /// Cell widths faces[i+1] - faces[i], length n.
    pub dx: Vec<f64>,
    /// Half-mesh widths across each face, length n+1.
    pub dxh: Vec<f64>,
    pub periodic: bool,
}

impl Mesh1D {
    pub fn from_faces(faces: Vec<f64>, periodic: bool) -> Result<Self> {
        if faces.len() < 3 {
            return Err(Error::Config(format!(
                "axis needs at least 2 cells (3 faces), got {} faces",
                faces.len()
            )));
        }
        let n = faces.len() - 1;
        for w in faces.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::Config(format!(
                    "faces must be strictly increasing, found {} then {}",
                    w[0], w[1]
                )));
            }
        }
        let mut centers = vec![0.0; n + 2];
        for i in 0..n {
            centers[i + 1] = 0.5 * (faces[i] + faces[i + 1]);
        }
        if periodic {
            let period = faces[n] - faces[0];
            centers[0] = centers[n] - period;
            centers[n + 1] = centers[1] + period;
        } else {
            centers[0] = 2.0 * faces[0] - centers[1];
            centers[n + 1] = 2.0 * faces[n] - centers[n];
        }
        let dx: Vec<f64> = (0..n).map(|i| faces[i + 1] - faces[i]).collect();
        let dxh: Vec<f64> = (0..=n).map(|f| centers[f + 1] - centers[f]).collect();
        for (i, &h) in dxh.iter().enumerate() {
            if !(h > 0.0) {
                return Err(Error::Config(format!(
                    "half-mesh width at face {i} is non-positive ({h})"
                )));
            }
        }
        Ok(Mesh1D {
            n,
            centers,
            faces,
            dx,
            dxh,
            periodic,
        })
    }

    /// Interior cell center, i in 0..n.
    #[inline]
    pub fn center(&self, i: usize) -> f64 {
        self.centers[i + 1]
    }
}

/// Block of cells inside a global grid; the full grid is the trivial block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub i0: usize,
    pub j0: usize,
    pub k0: usize,
    pub nr: usize,
    pub nt: usize,
    pub np: usize,
}

impl Block {
    pub fn full(dims: (usize, usize, usize)) -> Self {
        Block {
            i0: 0,
            j0: 0,
            k0: 0,
            nr: dims.0,
            nt: dims.1,
            np: dims.2,
        }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.nr * self.nt * self.np
    }

    /// r-fastest local ordering.
    #[inline]
    pub fn local_index(&self, li: usize, lj: usize, lk: usize) -> usize {
        li + self.nr * (lj + self.nt * lk)
    }

    pub fn is_full(&self, dims: (usize, usize, usize)) -> bool {
        self.i0 == 0 && self.j0 == 0 && self.k0 == 0 && (self.nr, self.nt, self.np) == dims
    }

    pub fn validate(&self, dims: (usize, usize, usize)) -> Result<()> {
        if self.nr < 2 || self.nt < 2 || self.np < 2 {
            return Err(Error::Decomposition(format!(
                "block {}x{}x{} thinner than 2 cells per axis",
                self.nr, self.nt, self.np
            )));
        }
        if self.i0 + self.nr > dims.0 || self.j0 + self.nt > dims.1 || self.k0 + self.np > dims.2 {
            return Err(Error::Decomposition(format!(
                "block out of range for grid {}x{}x{}",
                dims.0, dims.1, dims.2
            )));
        }
        Ok(())
    }
}

/// Full 3D grid: the three axis meshes plus sin(theta) at centers and faces.
///
/// The pole faces carry zero transverse area, so `sin_th` is exactly 0 there
/// (the roundoff of sin(pi) is snapped away).
#[derive(Debug, Clone)]
pub struct Grid3D {
    pub rmesh: Mesh1D,
    pub tmesh: Mesh1D,
    pub pmesh: Mesh1D,
    /// sin(theta_j) at interior centers, length nt.
    pub sin_t: Vec<f64>,
    /// sin(theta) at faces, length nt+1; exactly 0 at the poles.
    pub sin_th: Vec<f64>,
}

impl Grid3D {
    pub fn new(rmesh: Mesh1D, tmesh: Mesh1D, pmesh: Mesh1D) -> Result<Self> {
        if !(rmesh.faces[0] > 0.0) {
            return Err(Error::Config(format!(
                "inner radius must be positive, got {}",
                rmesh.faces[0]
            )));
        }
        if tmesh.faces[0].abs() > ENDPOINT_SNAP || (tmesh.faces[tmesh.n] - PI).abs() > ENDPOINT_SNAP
        {
            return Err(Error::Config(format!(
                "theta faces must span [0, pi], got [{}, {}]",
                tmesh.faces[0], tmesh.faces[tmesh.n]
            )));
        }
        if pmesh.faces[0].abs() > ENDPOINT_SNAP
            || (pmesh.faces[pmesh.n] - TWO_PI).abs() > ENDPOINT_SNAP
        {
            return Err(Error::Config(format!(
                "phi faces must span [0, 2*pi], got [{}, {}]",
                pmesh.faces[0], pmesh.faces[pmesh.n]
            )));
        }
        if !pmesh.periodic {
            return Err(Error::Config("phi mesh must be periodic".into()));
        }
        let nt = tmesh.n;
        let sin_t: Vec<f64> = (0..nt).map(|j| tmesh.center(j).sin()).collect();
        for (j, &s) in sin_t.iter().enumerate() {
            if !(s > 0.0) {
                return Err(Error::Config(format!(
                    "theta center {j} sits on a pole (sin = {s})"
                )));
            }
        }
        let sin_th: Vec<f64> = (0..=nt)
            .map(|g| {
                if g == 0 || g == nt {
                    0.0
                } else {
                    tmesh.faces[g].sin()
                }
            })
            .collect();
        Ok(Grid3D {
            rmesh,
            tmesh,
            pmesh,
            sin_t,
            sin_th,
        })
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.rmesh.n, self.tmesh.n, self.pmesh.n)
    }

    #[inline]
    pub fn n_cells(&self) -> usize {
        self.rmesh.n * self.tmesh.n * self.pmesh.n
    }

    /// r-fastest interior ordering.
    #[inline]
    pub fn cell_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.rmesh.n * (j + self.tmesh.n * k)
    }

    /// Cell volume r_i^2 sin(theta_j) dr_i dtheta_j dphi_k.
    pub fn cell_volume(&self, i: usize, j: usize, k: usize) -> Result<f64> {
        let (nr, nt, np) = self.dims();
        if i >= nr || j >= nt || k >= np {
            return Err(Error::IndexOutOfRange {
                i,
                j,
                k,
                nr,
                nt,
                np,
            });
        }
        let r = self.rmesh.center(i);
        Ok(r * r * self.sin_t[j] * self.rmesh.dx[i] * self.tmesh.dx[j] * self.pmesh.dx[k])
    }
}

/// Build a grid from a spec: geometric radial spacing, uniform theta and phi.
pub fn build_mesh(spec: &MeshSpec) -> Result<Grid3D> {
    spec.validate()?;
    let rfaces = geometric_faces(spec.r0, spec.r1, spec.nr, spec.r_stretch);
    let tfaces: Vec<f64> = (0..=spec.nt)
        .map(|j| PI * j as f64 / spec.nt as f64)
        .collect();
    let pfaces: Vec<f64> = (0..=spec.np)
        .map(|k| TWO_PI * k as f64 / spec.np as f64)
        .collect();
    build_mesh_from_faces(rfaces, tfaces, pfaces)
}

/// Build a grid from explicit face arrays (e.g. loaded from a mesh file).
/// Theta and phi endpoints within 1e-12 of the poles / periodic seam are
/// snapped exactly onto them.
pub fn build_mesh_from_faces(
    rfaces: Vec<f64>,
    mut tfaces: Vec<f64>,
    mut pfaces: Vec<f64>,
) -> Result<Grid3D> {
    snap_endpoint(&mut tfaces, 0, 0.0);
    let tlast = tfaces.len() - 1;
    snap_endpoint(&mut tfaces, tlast, PI);
    snap_endpoint(&mut pfaces, 0, 0.0);
    let plast = pfaces.len() - 1;
    snap_endpoint(&mut pfaces, plast, TWO_PI);
    let rmesh = Mesh1D::from_faces(rfaces, false)?;
    let tmesh = Mesh1D::from_faces(tfaces, false)?;
    let pmesh = Mesh1D::from_faces(pfaces, true)?;
    Grid3D::new(rmesh, tmesh, pmesh)
}

fn snap_endpoint(faces: &mut [f64], idx: usize, target: f64) {
    if (faces[idx] - target).abs() <= ENDPOINT_SNAP {
        faces[idx] = target;
    }
}

fn geometric_faces(a: f64, b: f64, n: usize, q: f64) -> Vec<f64> {
    let mut faces = Vec::with_capacity(n + 1);
    faces.push(a);
    if (q - 1.0).abs() < 1e-14 {
        for i in 1..n {
            faces.push(a + (b - a) * i as f64 / n as f64);
        }
    } else {
        // first width from the geometric series sum w0 (q^n - 1)/(q - 1) = b - a
        let w0 = (b - a) * (q - 1.0) / (q.powi(n as i32) - 1.0);
        let mut w = w0;
        let mut x = a;
        for _ in 1..n {
            x += w;
            faces.push(x);
            w *= q;
        }
    }
    faces.push(b);
    faces
}

/// Read a mesh file: one section per axis (`r`, `theta`, `phi`), each a header
/// line `<axis> <n>` followed by n+1 face coordinates, one per line.
pub fn read_mesh_file(path: &std::path::Path) -> Result<Grid3D> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let mut read_axis = |name: &str| -> Result<Vec<f64>> {
        let header = lines
            .next()
            .ok_or_else(|| Error::Config(format!("mesh file: missing `{name}` section")))?;
        let mut parts = header.split_whitespace();
        let axis = parts.next().unwrap_or("");
        if axis != name {
            return Err(Error::Config(format!(
                "mesh file: expected `{name} <n>` header, got `{header}`"
            )));
        }
        let n: usize = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Config(format!("mesh file: bad cell count in `{header}`")))?;
        let mut faces = Vec::with_capacity(n + 1);
        for _ in 0..=n {
            let line = lines
                .next()
                .ok_or_else(|| Error::Config(format!("mesh file: `{name}` section ended early")))?;
            let v: f64 = line
                .parse()
                .map_err(|_| Error::Config(format!("mesh file: bad face value `{line}`")))?;
            faces.push(v);
        }
        Ok(faces)
    };
    let rfaces = read_axis("r")?;
    let tfaces = read_axis("theta")?;
    let pfaces = read_axis("phi")?;
    build_mesh_from_faces(rfaces, tfaces, pfaces)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(nr: usize, nt: usize, np: usize) -> MeshSpec {
        MeshSpec {
            nr,
            nt,
            np,
            r0: 1.0,
            r1: 2.5,
            r_stretch: 1.0,
        }
    }

    #[test]
    fn uniform_radial_bisection() {
        let g = build_mesh(&MeshSpec {
            nr: 2,
            nt: 4,
            np: 4,
            r0: 1.0,
            r1: 2.0,
            r_stretch: 1.0,
        })
        .unwrap();
        assert_eq!(g.rmesh.faces, vec![1.0, 1.5, 2.0]);
        assert_eq!(g.rmesh.center(0), 1.25);
        assert_eq!(g.rmesh.center(1), 1.75);
        // interior half-mesh width across face 1
        assert!((g.rmesh.dxh[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn theta_faces_span_poles_with_half_cell_offset() {
        let g = build_mesh(&spec(2, 4, 4)).unwrap();
        let expect = [0.0, PI / 4.0, PI / 2.0, 3.0 * PI / 4.0, PI];
        for (a, b) in g.tmesh.faces.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((g.tmesh.center(0) - PI / 8.0).abs() < 1e-15);
        // distance from pole to first center equals half the first cell width
        assert!((g.tmesh.center(0) - g.tmesh.faces[0] - 0.5 * g.tmesh.dx[0]).abs() < 1e-15);
        assert!(
            (g.tmesh.faces[g.tmesh.n]
                - g.tmesh.center(g.tmesh.n - 1)
                - 0.5 * g.tmesh.dx[g.tmesh.n - 1])
                .abs()
                < 1e-15
        );
    }

    #[test]
    fn geometric_stretch_spacings() {
        let g = build_mesh(&MeshSpec {
            nr: 3,
            nt: 4,
            np: 4,
            r0: 1.0,
            r1: 2.5,
            r_stretch: 2.0,
        })
        .unwrap();
        // geometric-series oracle: w0 (1 + q + q^2) = 1.5 with q = 2
        let w0 = 1.5 / (1.0 + 2.0 + 4.0);
        let dx = &g.rmesh.dx;
        assert!((dx[0] - w0).abs() < 1e-14);
        assert!((dx[1] / dx[0] - 2.0).abs() < 1e-12);
        assert!((dx[2] / dx[1] - 2.0).abs() < 1e-12);
        assert!((g.rmesh.faces[3] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn volume_sum_approximates_shell() {
        let g = build_mesh(&spec(8, 32, 32)).unwrap();
        let mut total = 0.0;
        let (nr, nt, np) = g.dims();
        for k in 0..np {
            for j in 0..nt {
                for i in 0..nr {
                    let v = g.cell_volume(i, j, k).unwrap();
                    assert!(v > 0.0);
                    total += v;
                }
            }
        }
        let exact = 4.0 / 3.0 * PI * (2.5f64.powi(3) - 1.0);
        assert!(
            (total - exact).abs() / exact < 0.02,
            "total {total} vs exact {exact}"
        );
    }

    #[test]
    fn equator_volume_has_unit_sin() {
        // nt = 5 puts a center exactly at pi/2
        let g = build_mesh(&spec(2, 5, 4)).unwrap();
        let j = 2;
        assert!((g.tmesh.center(j) - PI / 2.0).abs() < 1e-15);
        let v = g.cell_volume(0, j, 0).unwrap();
        let r = g.rmesh.center(0);
        let expect = r * r * g.rmesh.dx[0] * g.tmesh.dx[j] * g.pmesh.dx[0];
        assert!((v - expect).abs() <= 1e-15 * expect);
    }

    #[test]
    fn volume_index_out_of_range() {
        let g = build_mesh(&spec(2, 4, 4)).unwrap();
        assert!(matches!(
            g.cell_volume(2, 0, 0),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn half_mesh_widths_are_center_differences() {
        let g = build_mesh(&MeshSpec {
            nr: 7,
            nt: 5,
            np: 6,
            r0: 1.0,
            r1: 3.0,
            r_stretch: 1.3,
        })
        .unwrap();
        for m in [&g.rmesh, &g.tmesh, &g.pmesh] {
            for f in 0..=m.n {
                assert_eq!(m.dxh[f], m.centers[f + 1] - m.centers[f]);
            }
            // faces reconstruct from cumulative dx
            let mut x = m.faces[0];
            for i in 0..m.n {
                x += m.dx[i];
                assert!((x - m.faces[i + 1]).abs() <= 1e-15 * m.faces[m.n].abs().max(1.0));
            }
        }
    }

    #[test]
    fn uniform_spec_gives_equal_widths() {
        let g = build_mesh(&spec(9, 7, 11)).unwrap();
        let w = (2.5 - 1.0) / 9.0;
        for &d in &g.rmesh.dx {
            assert!((d - w).abs() <= 1e-14 * w);
        }
    }

    #[test]
    fn phi_widths_close_periodically() {
        let g = build_mesh(&spec(2, 4, 12)).unwrap();
        let total: f64 = g.pmesh.dx.iter().sum();
        assert!((total - TWO_PI).abs() < 1e-13);
        // wrap distance appears in both end half-widths
        let wrap = g.pmesh.center(0) + TWO_PI - g.pmesh.center(g.pmesh.n - 1);
        assert!((g.pmesh.dxh[0] - wrap).abs() < 1e-13);
        assert!((g.pmesh.dxh[g.pmesh.n] - wrap).abs() < 1e-13);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(build_mesh(&MeshSpec {
            nr: 1,
            nt: 4,
            np: 4,
            r0: 1.0,
            r1: 2.0,
            r_stretch: 1.0
        })
        .is_err());
        assert!(build_mesh(&MeshSpec {
            nr: 4,
            nt: 4,
            np: 4,
            r0: 2.0,
            r1: 1.0,
            r_stretch: 1.0
        })
        .is_err());
        assert!(build_mesh(&MeshSpec {
            nr: 4,
            nt: 4,
            np: 4,
            r0: -1.0,
            r1: 2.0,
            r_stretch: 1.0
        })
        .is_err());
    }

    #[test]
    fn pole_face_sines_snap_to_zero() {
        let g = build_mesh(&spec(2, 6, 4)).unwrap();
        assert_eq!(g.sin_th[0], 0.0);
        assert_eq!(g.sin_th[6], 0.0);
        for j in 1..6 {
            assert!(g.sin_th[j] > 0.0);
        }
    }

    #[test]
    fn mesh_file_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.mesh");
        let mut text = String::from("r 2\n1.0\n1.5\n2.0\ntheta 2\n");
        text.push_str(&format!("0\n{}\n{}\n", PI / 2.0, PI));
        text.push_str("phi 2\n");
        text.push_str(&format!("0\n{}\n{}\n", PI, TWO_PI));
        std::fs::write(&path, &text).unwrap();
        let g = read_mesh_file(&path).unwrap();
        assert_eq!(g.dims(), (2, 2, 2));
        assert_eq!(g.rmesh.faces, vec![1.0, 1.5, 2.0]);
        assert_eq!(g.tmesh.faces[2], PI);

        let bad = dir.path().join("bad.mesh");
        std::fs::write(&bad, "r 2\n1.0\n0.9\n2.0\n").unwrap();
        assert!(read_mesh_file(&bad).is_err());
    }
}
