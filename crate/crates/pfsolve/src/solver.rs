//! Preconditioned conjugate gradient iteration with pluggable operator and
//! preconditioner, per-category timers, and a collective hook so the same
//! code runs serial and domain-decomposed.
//!
//! Convergence is declared when the recurred residual norm drops below
//! tol * ||b||; when b is zero the initial residual norm takes its place. A
//! final true-residual check is reported in the stats for audit.

use std::time::Instant;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcChoice {
    Pc1,
    Pc2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimerCategory {
    Setup,
    Matvec,
    Precond,
    DotAllreduce,
    VectorOps,
    Halo,
    Total,
}

pub const TIMER_CATEGORIES: [TimerCategory; 7] = [
    TimerCategory::Setup,
    TimerCategory::Matvec,
    TimerCategory::Precond,
    TimerCategory::DotAllreduce,
    TimerCategory::VectorOps,
    TimerCategory::Halo,
    TimerCategory::Total,
];

impl TimerCategory {
    pub fn name(self) -> &'static str {
        match self {
            TimerCategory::Setup => "setup",
            TimerCategory::Matvec => "matvec",
            TimerCategory::Precond => "precond",
            TimerCategory::DotAllreduce => "dot_allreduce",
            TimerCategory::VectorOps => "vector_ops",
            TimerCategory::Halo => "halo",
            TimerCategory::Total => "total",
        }
    }

    fn index(self) -> usize {
        match self {
            TimerCategory::Setup => 0,
            TimerCategory::Matvec => 1,
            TimerCategory::Precond => 2,
            TimerCategory::DotAllreduce => 3,
            TimerCategory::VectorOps => 4,
            TimerCategory::Halo => 5,
            TimerCategory::Total => 6,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timers {
    secs: [f64; 7],
}

impl Timers {
    pub fn add(&mut self, c: TimerCategory, seconds: f64) {
        self.secs[c.index()] += seconds;
    }

    pub fn set(&mut self, c: TimerCategory, seconds: f64) {
        self.secs[c.index()] = seconds;
    }

    pub fn get(&self, c: TimerCategory) -> f64 {
        self.secs[c.index()]
    }

    /// Sum of all categories except `total`.
    pub fn category_sum(&self) -> f64 {
        self.secs[..6].iter().sum()
    }

    /// Elementwise maximum, used to merge per-worker timers.
    pub fn max_with(&mut self, other: &Timers) {
        for (a, b) in self.secs.iter_mut().zip(&other.secs) {
            *a = a.max(*b);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    /// Relative residual norms, one entry per iteration plus the initial one.
    pub residual_history: Vec<f64>,
    pub timers: Timers,
    pub converged: bool,
    /// ||b - A x|| / denom recomputed after the iteration, for audit.
    pub true_residual: f64,
}

impl SolveStats {
    /// Move `halo_seconds` of communication time out of the matvec bucket,
    /// where it was measured, into its own category.
    pub fn attribute_halo(&mut self, halo_seconds: f64) {
        self.timers.add(TimerCategory::Matvec, -halo_seconds);
        self.timers.add(TimerCategory::Halo, halo_seconds);
    }
}

#[derive(Debug, Clone)]
pub struct SolveConfig {
    /// Relative residual tolerance.
    pub tol: f64,
    pub max_iter: usize,
    pub pc: PcChoice,
}

impl SolveConfig {
    pub fn new(tol: f64, max_iter: usize, pc: PcChoice) -> Self {
        SolveConfig { tol, max_iter, pc }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(Error::Config(format!(
                "tolerance must lie in (0, 1), got {}",
                self.tol
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// Default iteration cap for an n-unknown system.
pub fn default_max_iter(n: usize) -> usize {
    10 * n.max(1)
}

/// Collective sum across cooperating workers. The serial implementation is
/// the identity; the parallel one reduces deterministically over ranks.
pub trait Collective {
    fn allreduce_sum(&mut self, local: f64) -> Result<f64>;
}

pub struct SerialComm;

impl Collective for SerialComm {
    fn allreduce_sum(&mut self, local: f64) -> Result<f64> {
        Ok(local)
    }
}

/// Inner product: sequential local partial sum, then the collective.
pub fn dot<C: Collective>(comm: &mut C, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension {
            expected: x.len(),
            got: y.len(),
        });
    }
    let mut local = 0.0;
    for (a, b) in x.iter().zip(y) {
        local += a * b;
    }
    comm.allreduce_sum(local)
}

/// Standard PCG. `apply_a` and `apply_m` act on worker-local vectors; every
/// inner product routes through `comm`, so all workers see identical scalars
/// and make identical decisions.
pub fn pcg<A, M, C>(
    mut apply_a: A,
    mut apply_m: M,
    comm: &mut C,
    b: &[f64],
    x0: &[f64],
    cfg: &SolveConfig,
    setup_seconds: f64,
) -> Result<(Vec<f64>, SolveStats)>
where
    A: FnMut(&[f64], &mut [f64]) -> Result<()>,
    M: FnMut(&[f64], &mut [f64]) -> Result<()>,
    C: Collective,
{
    cfg.validate()?;
    let n = b.len();
    if x0.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: x0.len(),
        });
    }

    let wall = Instant::now();
    let mut tm = Timers::default();
    tm.add(TimerCategory::Setup, setup_seconds);

    let mut x = x0.to_vec();
    let mut r = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut ap = vec![0.0; n];

    let t = Instant::now();
    apply_a(&x, &mut r)?;
    tm.add(TimerCategory::Matvec, t.elapsed().as_secs_f64());

    let t = Instant::now();
    for m in 0..n {
        r[m] = b[m] - r[m];
    }
    tm.add(TimerCategory::VectorOps, t.elapsed().as_secs_f64());

    let t = Instant::now();
    let bnorm = dot(comm, b, b)?.sqrt();
    let rnorm0 = dot(comm, &r, &r)?.sqrt();
    tm.add(TimerCategory::DotAllreduce, t.elapsed().as_secs_f64());

    let denom = if bnorm > 0.0 { bnorm } else { rnorm0 };
    if denom == 0.0 {
        // b and the initial residual both vanish; x0 already solves the system
        tm.set(
            TimerCategory::Total,
            setup_seconds + wall.elapsed().as_secs_f64(),
        );
        return Ok((
            x,
            SolveStats {
                iterations: 0,
                residual_history: vec![0.0],
                timers: tm,
                converged: true,
                true_residual: 0.0,
            },
        ));
    }

    let mut rel = rnorm0 / denom;
    let mut history = vec![rel];
    let mut converged = rel <= cfg.tol;
    let mut iterations = 0;

    if !converged {
        let t = Instant::now();
        apply_m(&r, &mut z)?;
        tm.add(TimerCategory::Precond, t.elapsed().as_secs_f64());

        let t = Instant::now();
        p.copy_from_slice(&z);
        tm.add(TimerCategory::VectorOps, t.elapsed().as_secs_f64());

        let t = Instant::now();
        let mut rz = dot(comm, &r, &z)?;
        tm.add(TimerCategory::DotAllreduce, t.elapsed().as_secs_f64());

        while iterations < cfg.max_iter {
            let t = Instant::now();
            apply_a(&p, &mut ap)?;
            tm.add(TimerCategory::Matvec, t.elapsed().as_secs_f64());

            let t = Instant::now();
            let pap = dot(comm, &p, &ap)?;
            tm.add(TimerCategory::DotAllreduce, t.elapsed().as_secs_f64());
            if pap <= 0.0 {
                return Err(Error::Indefinite {
                    value: pap,
                    iteration: iterations,
                });
            }
            let alpha = rz / pap;

            let t = Instant::now();
            for m in 0..n {
                x[m] += alpha * p[m];
                r[m] -= alpha * ap[m];
            }
            tm.add(TimerCategory::VectorOps, t.elapsed().as_secs_f64());

            let t = Instant::now();
            let rnorm = dot(comm, &r, &r)?.sqrt();
            tm.add(TimerCategory::DotAllreduce, t.elapsed().as_secs_f64());

            iterations += 1;
            rel = rnorm / denom;
            history.push(rel);
            if rel <= cfg.tol {
                converged = true;
                break;
            }

            let t = Instant::now();
            apply_m(&r, &mut z)?;
            tm.add(TimerCategory::Precond, t.elapsed().as_secs_f64());

            let t = Instant::now();
            let rz_new = dot(comm, &r, &z)?;
            tm.add(TimerCategory::DotAllreduce, t.elapsed().as_secs_f64());
            let beta = rz_new / rz;
            rz = rz_new;

            let t = Instant::now();
            for m in 0..n {
                p[m] = z[m] + beta * p[m];
            }
            tm.add(TimerCategory::VectorOps, t.elapsed().as_secs_f64());
        }
    }

    // true-residual audit
    let t = Instant::now();
    apply_a(&x, &mut ap)?;
    tm.add(TimerCategory::Matvec, t.elapsed().as_secs_f64());
    let t = Instant::now();
    for m in 0..n {
        ap[m] = b[m] - ap[m];
    }
    tm.add(TimerCategory::VectorOps, t.elapsed().as_secs_f64());
    let t = Instant::now();
    let true_residual = dot(comm, &ap, &ap)?.sqrt() / denom;
    tm.add(TimerCategory::DotAllreduce, t.elapsed().as_secs_f64());

    tm.set(
        TimerCategory::Total,
        setup_seconds + wall.elapsed().as_secs_f64(),
    );
    Ok((
        x,
        SolveStats {
            iterations,
            residual_history: history,
            timers: tm,
            converged,
            true_residual,
        },
    ))
}
