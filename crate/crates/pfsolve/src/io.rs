//! File IO: the PF3D self-describing binary field format, synthetic boundary
//! maps, and solver statistics CSV output.
//!
//! PF3D layout, all little-endian: magic "PF3D", version u32, ndim u32 (2 or
//! 3), dims as u64 per axis, one f64 coordinate array per axis (the cell
//! centers), then the payload as f64 with the first axis fastest. Readers
//! reject malformed input outright; nothing is interpolated or partially
//! loaded.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::mesh::Grid3D;
use crate::operator::{enforce_solvability, ScalarMap2D};
use crate::solver::{SolveStats, TIMER_CATEGORIES};

pub const MAGIC: [u8; 4] = *b"PF3D";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FieldData {
    pub dims: Vec<usize>,
    pub coords: Vec<Vec<f64>>,
    pub values: Vec<f64>,
}

fn write_f64s<W: Write>(w: &mut W, vals: &[f64]) -> Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Write an n-dimensional field file.
pub fn write_field(path: &Path, dims: &[usize], coords: &[&[f64]], values: &[f64]) -> Result<()> {
    if dims.len() != coords.len() || !(dims.len() == 2 || dims.len() == 3) {
        return Err(Error::Config(format!(
            "field files hold 2 or 3 axes, got {} dims and {} coord arrays",
            dims.len(),
            coords.len()
        )));
    }
    let expect: usize = dims.iter().product();
    if values.len() != expect {
        return Err(Error::Dimension {
            expected: expect,
            got: values.len(),
        });
    }
    for (d, c) in dims.iter().zip(coords) {
        if c.len() != *d {
            return Err(Error::Dimension {
                expected: *d,
                got: c.len(),
            });
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for c in coords {
        write_f64s(&mut w, c)?;
    }
    write_f64s(&mut w, values)?;
    w.flush()?;
    Ok(())
}

pub fn read_field(path: &Path) -> Result<FieldData> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic, 4)?;
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let ndim = read_u32(&mut r)? as usize;
    if ndim != 2 && ndim != 3 {
        return Err(Error::Config(format!("field file declares ndim={ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = read_u64(&mut r)? as usize;
        if d == 0 {
            return Err(Error::Config("field file declares a zero dimension".into()));
        }
        dims.push(d);
    }
    let mut coords = Vec::with_capacity(ndim);
    for &d in &dims {
        coords.push(read_f64s(&mut r, d)?);
    }
    let n: usize = dims.iter().product();
    let values = read_f64s(&mut r, n)?;
    Ok(FieldData {
        dims,
        coords,
        values,
    })
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], expected: usize) -> Result<()> {
    let mut got = 0;
    while got < buf.len() {
        let k = r.read(&mut buf[got..])?;
        if k == 0 {
            return Err(Error::Truncated { expected, got });
        }
        got += k;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_truncated(r, &mut b, 4)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or_truncated(r, &mut b, 8)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    read_exact_or_truncated(r, &mut bytes, n * 8)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_map(path: &Path, map: &ScalarMap2D) -> Result<()> {
    write_field(
        path,
        &[map.nt, map.np],
        &[&map.theta, &map.phi],
        &map.values,
    )
}

pub fn read_map(path: &Path) -> Result<ScalarMap2D> {
    let f = read_field(path)?;
    if f.dims.len() != 2 {
        return Err(Error::Config(format!(
            "expected a 2D map file, found {} axes",
            f.dims.len()
        )));
    }
    let mut coords = f.coords;
    let phi = coords.pop().unwrap();
    let theta = coords.pop().unwrap();
    ScalarMap2D::new(f.dims[0], f.dims[1], theta, phi, f.values)
}

/// Refuse maps whose shell does not match the run's grid; no interpolation.
pub fn check_map_matches_grid(map: &ScalarMap2D, grid: &Grid3D) -> Result<()> {
    let (_, nt, np) = grid.dims();
    if map.nt != nt || map.np != np {
        return Err(Error::MapMismatch(format!(
            "map is {}x{}, run grid shell is {}x{}",
            map.nt, map.np, nt, np
        )));
    }
    for (j, &t) in map.theta.iter().enumerate() {
        let want = grid.tmesh.center(j);
        if (t - want).abs() > 1e-12 * (1.0 + want.abs()) {
            return Err(Error::MapMismatch(format!(
                "theta coordinate {j}: map {t} vs grid {want}"
            )));
        }
    }
    for (k, &p) in map.phi.iter().enumerate() {
        let want = grid.pmesh.center(k);
        if (p - want).abs() > 1e-12 * (1.0 + want.abs()) {
            return Err(Error::MapMismatch(format!(
                "phi coordinate {k}: map {p} vs grid {want}"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MapKind {
    Dipole,
    Harmonic { l: u32, m: i32 },
    Random { seed: u64, lmax: u32 },
}

/// Where the boundary map comes from: a PF3D file or a synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub enum MapSource {
    File(std::path::PathBuf),
    Synth(MapKind),
}

impl FromStr for MapSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(path) = s.strip_prefix("file:") {
            return Ok(MapSource::File(path.into()));
        }
        if s == "dipole" {
            return Ok(MapSource::Synth(MapKind::Dipole));
        }
        if let Some(rest) = s.strip_prefix("harmonic:") {
            let parts: Vec<&str> = rest.split(',').collect();
            if parts.len() == 2 {
                if let (Ok(l), Ok(m)) = (parts[0].parse::<u32>(), parts[1].parse::<i32>()) {
                    return Ok(MapSource::Synth(MapKind::Harmonic { l, m }));
                }
            }
            return Err(Error::Config(format!("bad harmonic spec `{s}`")));
        }
        if let Some(rest) = s.strip_prefix("random:") {
            let parts: Vec<&str> = rest.split(',').collect();
            if parts.len() == 2 {
                if let (Ok(seed), Ok(lmax)) = (parts[0].parse::<u64>(), parts[1].parse::<u32>()) {
                    return Ok(MapSource::Synth(MapKind::Random { seed, lmax }));
                }
            }
            return Err(Error::Config(format!("bad random spec `{s}`")));
        }
        Err(Error::Config(format!(
            "bad map spec `{s}`; use file:PATH, dipole, harmonic:L,M or random:SEED,LMAX"
        )))
    }
}

/// Associated Legendre P_l^m(x) with Condon-Shortley phase, m >= 0.
fn assoc_legendre(l: u32, m: u32, x: f64) -> f64 {
    debug_assert!(m <= l);
    // P_m^m = (-1)^m (2m-1)!! (1-x^2)^(m/2)
    let mut pmm = 1.0;
    if m > 0 {
        let s = ((1.0 - x) * (1.0 + x)).max(0.0).sqrt();
        let mut fact = 1.0;
        for _ in 0..m {
            pmm *= -fact * s;
            fact += 2.0;
        }
    }
    if l == m {
        return pmm;
    }
    // P_{m+1}^m = x (2m+1) P_m^m
    let mut pm1 = x * (2.0 * m as f64 + 1.0) * pmm;
    if l == m + 1 {
        return pm1;
    }
    let mut pl = 0.0;
    for ll in (m + 2)..=l {
        let llf = ll as f64;
        let mf = m as f64;
        pl = ((2.0 * llf - 1.0) * x * pm1 - (llf + mf - 1.0) * pmm) / (llf - mf);
        pmm = pm1;
        pm1 = pl;
    }
    pl
}

fn factorial_ratio(l: u32, m: u32) -> f64 {
    // (l-m)! / (l+m)!
    let mut v = 1.0;
    for k in (l - m + 1)..=(l + m) {
        v /= k as f64;
    }
    v
}

/// Orthonormal real spherical harmonic sampled at (theta, phi).
pub fn real_spherical_harmonic(l: u32, m: i32, theta: f64, phi: f64) -> Result<f64> {
    let ma = m.unsigned_abs();
    if ma > l {
        return Err(Error::Config(format!(
            "invalid harmonic degree (l={l}, m={m})"
        )));
    }
    let norm =
        ((2.0 * l as f64 + 1.0) / (4.0 * std::f64::consts::PI) * factorial_ratio(l, ma)).sqrt();
    let p = assoc_legendre(l, ma, theta.cos());
    let v = if m == 0 {
        norm * p
    } else if m > 0 {
        std::f64::consts::SQRT_2 * norm * p * (ma as f64 * phi).cos()
    } else {
        std::f64::consts::SQRT_2 * norm * p * (ma as f64 * phi).sin()
    };
    Ok(v)
}

/// Synthetic boundary maps sampled at the grid's shell centers; every kind is
/// passed through the solvability adjustment.
pub fn synth_map(kind: MapKind, grid: &Grid3D) -> Result<ScalarMap2D> {
    let (_, nt, np) = grid.dims();
    let mut map = ScalarMap2D::zeros_on(grid);
    match kind {
        MapKind::Dipole => {
            for k in 0..np {
                for j in 0..nt {
                    *map.at_mut(j, k) = grid.tmesh.center(j).cos();
                }
            }
        }
        MapKind::Harmonic { l, m } => {
            for k in 0..np {
                for j in 0..nt {
                    *map.at_mut(j, k) =
                        real_spherical_harmonic(l, m, grid.tmesh.center(j), grid.pmesh.center(k))?;
                }
            }
        }
        MapKind::Random { seed, lmax } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut coeffs = Vec::new();
            for l in 0..=lmax {
                for m in -(l as i32)..=(l as i32) {
                    let c: f64 = rng.sample(StandardNormal);
                    coeffs.push((l, m, c));
                }
            }
            for k in 0..np {
                for j in 0..nt {
                    let mut v = 0.0;
                    for &(l, m, c) in &coeffs {
                        v += c * real_spherical_harmonic(
                            l,
                            m,
                            grid.tmesh.center(j),
                            grid.pmesh.center(k),
                        )?;
                    }
                    *map.at_mut(j, k) = v;
                }
            }
        }
    }
    enforce_solvability(&map, grid)
}

fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

/// Stats CSV: the timer table (all seven categories plus their sum), then
/// iteration/convergence rows. IO time is not a solve timer and is reported
/// as its own `io_seconds` row.
pub fn write_stats_csv(stats: &SolveStats, io_seconds: f64, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "category,seconds")?;
    for c in TIMER_CATEGORIES {
        writeln!(w, "{},{}", c.name(), fmt_f64(stats.timers.get(c)))?;
    }
    writeln!(w, "sum,{}", fmt_f64(stats.timers.category_sum()))?;
    writeln!(w, "iterations,{}", stats.iterations)?;
    writeln!(w, "converged,{}", stats.converged)?;
    writeln!(
        w,
        "final_residual,{}",
        fmt_f64(*stats.residual_history.last().unwrap_or(&0.0))
    )?;
    writeln!(w, "true_residual,{}", fmt_f64(stats.true_residual))?;
    writeln!(w, "io_seconds,{}", fmt_f64(io_seconds))?;
    w.flush()?;
    Ok(())
}

pub fn write_residuals_csv(history: &[f64], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "iteration,rel_residual")?;
    for (i, r) in history.iter().enumerate() {
        writeln!(w, "{},{}", i, fmt_f64(*r))?;
    }
    w.flush()?;
    Ok(())
}
