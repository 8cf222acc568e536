//! In-process domain decomposition: worker topology, halo exchange over
//! ordered channels, deterministic collectives, the polar ring reduction, and
//! the harness that runs the decomposed solve.
//!
//! Workers are threads communicating through ordered reliable point-to-point
//! channels; collectives synchronize every participant. The deterministic
//! reduction gathers rank-tagged values up a binary tree and sums them in
//! ascending rank order at the root, so repeated runs at the same worker
//! count are bit-identical. The opt-out reduction sums in arrival order.

use std::cell::{Cell, RefCell};
use std::collections::VecDeque;
use std::rc::Rc;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::mesh::{Block, Grid3D, TWO_PI};
use crate::operator::{assemble_block, scatter_interior, BoundarySpec, GhostMode, Pole, UpperBc};
use crate::precond::{build_pc1, build_pc2, Prec};
use crate::solver::{pcg, Collective, PcChoice, SolveConfig, SolveStats, Timers};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Face {
    RMinus,
    RPlus,
    TMinus,
    TPlus,
    PMinus,
    PPlus,
}

pub const FACES: [Face; 6] = [
    Face::RMinus,
    Face::RPlus,
    Face::TMinus,
    Face::TPlus,
    Face::PMinus,
    Face::PPlus,
];

impl Face {
    pub fn opposite(self) -> Face {
        match self {
            Face::RMinus => Face::RPlus,
            Face::RPlus => Face::RMinus,
            Face::TMinus => Face::TPlus,
            Face::TPlus => Face::TMinus,
            Face::PMinus => Face::PPlus,
            Face::PPlus => Face::PMinus,
        }
    }

    #[inline]
    fn index(self) -> usize {
        match self {
            Face::RMinus => 0,
            Face::RPlus => 1,
            Face::TMinus => 2,
            Face::TPlus => 3,
            Face::PMinus => 4,
            Face::PPlus => 5,
        }
    }
}

/// Worker grid: pr x pt x pp ranks in natural row-major order over
/// (cr, ct, cp), with phi periodic.
#[derive(Debug, Clone)]
pub struct Topology {
    pub pr: usize,
    pub pt: usize,
    pub pp: usize,
    pub grid_dims: (usize, usize, usize),
    pub blocks: Vec<Block>,
}

fn axis_partition(n: usize, p: usize) -> Vec<(usize, usize)> {
    // remainder cells go one each to the leading blocks
    let base = n / p;
    let rem = n % p;
    let mut out = Vec::with_capacity(p);
    let mut start = 0;
    for c in 0..p {
        let len = base + usize::from(c < rem);
        out.push((start, len));
        start += len;
    }
    out
}

impl Topology {
    pub fn new(pr: usize, pt: usize, pp: usize, grid_dims: (usize, usize, usize)) -> Result<Self> {
        if pr == 0 || pt == 0 || pp == 0 {
            return Err(Error::Decomposition(
                "worker counts must be positive".into(),
            ));
        }
        let rparts = axis_partition(grid_dims.0, pr);
        let tparts = axis_partition(grid_dims.1, pt);
        let pparts = axis_partition(grid_dims.2, pp);
        let mut blocks = Vec::with_capacity(pr * pt * pp);
        for cr in 0..pr {
            for ct in 0..pt {
                for cp in 0..pp {
                    let b = Block {
                        i0: rparts[cr].0,
                        j0: tparts[ct].0,
                        k0: pparts[cp].0,
                        nr: rparts[cr].1,
                        nt: tparts[ct].1,
                        np: pparts[cp].1,
                    };
                    b.validate(grid_dims)?;
                    blocks.push(b);
                }
            }
        }
        Ok(Topology {
            pr,
            pt,
            pp,
            grid_dims,
            blocks,
        })
    }

    #[inline]
    pub fn n_workers(&self) -> usize {
        self.pr * self.pt * self.pp
    }

    #[inline]
    pub fn coords(&self, rank: usize) -> (usize, usize, usize) {
        let cp = rank % self.pp;
        let ct = (rank / self.pp) % self.pt;
        let cr = rank / (self.pp * self.pt);
        (cr, ct, cp)
    }

    #[inline]
    pub fn rank_of(&self, cr: usize, ct: usize, cp: usize) -> usize {
        (cr * self.pt + ct) * self.pp + cp
    }

    /// Face neighbor; phi wraps periodically (possibly onto the same rank),
    /// r and theta faces at the physical boundaries have none.
    pub fn neighbor(&self, rank: usize, face: Face) -> Option<usize> {
        let (cr, ct, cp) = self.coords(rank);
        match face {
            Face::RMinus => (cr > 0).then(|| self.rank_of(cr - 1, ct, cp)),
            Face::RPlus => (cr + 1 < self.pr).then(|| self.rank_of(cr + 1, ct, cp)),
            Face::TMinus => (ct > 0).then(|| self.rank_of(cr, ct - 1, cp)),
            Face::TPlus => (ct + 1 < self.pt).then(|| self.rank_of(cr, ct + 1, cp)),
            Face::PMinus => Some(self.rank_of(cr, ct, (cp + self.pp - 1) % self.pp)),
            Face::PPlus => Some(self.rank_of(cr, ct, (cp + 1) % self.pp)),
        }
    }

    /// Ranks owning cells adjacent to the given pole, ascending.
    pub fn ring(&self, pole: Pole) -> Vec<usize> {
        let ct = match pole {
            Pole::North => 0,
            Pole::South => self.pt - 1,
        };
        let mut out = Vec::with_capacity(self.pr * self.pp);
        for cr in 0..self.pr {
            for cp in 0..self.pp {
                out.push(self.rank_of(cr, ct, cp));
            }
        }
        out.sort_unstable();
        out
    }
}

/// Choose the factorization (pr, pt, pp) of `n_workers` minimizing the
/// maximum local-block surface-to-volume ratio, ties broken by the
/// lexicographically smallest triple. The maximum ratio comes from the
/// all-floor block, which always exists because remainders pad the leading
/// blocks.
pub fn decompose(n_workers: usize, grid_dims: (usize, usize, usize)) -> Result<Topology> {
    if n_workers == 0 {
        return Err(Error::Decomposition("need at least one worker".into()));
    }
    let mut best: Option<(u128, u128, (usize, usize, usize))> = None;
    for pr in 1..=n_workers {
        if n_workers % pr != 0 {
            continue;
        }
        let rest = n_workers / pr;
        for pt in 1..=rest {
            if rest % pt != 0 {
                continue;
            }
            let pp = rest / pt;
            let a = grid_dims.0 / pr;
            let b = grid_dims.1 / pt;
            let c = grid_dims.2 / pp;
            if a < 2 || b < 2 || c < 2 {
                continue;
            }
            let num = (a * b + b * c + c * a) as u128;
            let den = (a * b * c) as u128;
            let better = match &best {
                None => true,
                Some((bn, bd, _)) => num * bd < bn * den,
            };
            if better {
                best = Some((num, den, (pr, pt, pp)));
            }
        }
    }
    match best {
        Some((_, _, (pr, pt, pp))) => Topology::new(pr, pt, pp, grid_dims),
        None => Err(Error::Decomposition(format!(
            "no factorization of {} workers leaves every block at least 2 cells thick on grid {}x{}x{}",
            n_workers, grid_dims.0, grid_dims.1, grid_dims.2
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tag {
    Halo(Face),
    ReduceUp,
    ReduceDown,
    PolarUp(Pole),
    PolarDown(Pole),
    Gather,
}

#[derive(Debug)]
struct Msg {
    src: usize,
    tag: Tag,
    data: Vec<f64>,
}

/// One worker's endpoint: senders to every rank plus its own ordered inbox.
/// Receives match on (source, tag); non-matching messages are stashed in
/// arrival order.
pub struct Channels {
    rank: usize,
    txs: Vec<Sender<Msg>>,
    rx: Receiver<Msg>,
    stash: VecDeque<Msg>,
    timeout: Duration,
}

pub fn make_channels(p: usize) -> Vec<Channels> {
    let mut txs = Vec::with_capacity(p);
    let mut rxs = Vec::with_capacity(p);
    for _ in 0..p {
        let (tx, rx) = channel();
        txs.push(tx);
        rxs.push(rx);
    }
    rxs.into_iter()
        .enumerate()
        .map(|(rank, rx)| Channels {
            rank,
            txs: txs.clone(),
            rx,
            stash: VecDeque::new(),
            timeout: Duration::from_secs(30),
        })
        .collect()
}

impl Channels {
    pub fn rank(&self) -> usize {
        self.rank
    }

    fn send(&self, dst: usize, tag: Tag, data: Vec<f64>) -> Result<()> {
        self.txs[dst]
            .send(Msg {
                src: self.rank,
                tag,
                data,
            })
            .map_err(|_| Error::Collective(format!("rank {dst} is gone")))
    }

    fn recv_from(&mut self, src: usize, tag: Tag) -> Result<Vec<f64>> {
        if let Some(pos) = self.stash.iter().position(|m| m.src == src && m.tag == tag) {
            return Ok(self.stash.remove(pos).unwrap().data);
        }
        loop {
            let msg = self.rx.recv_timeout(self.timeout).map_err(|e| {
                Error::Collective(format!(
                    "rank {} timed out waiting for {:?} from rank {}: {}",
                    self.rank, tag, src, e
                ))
            })?;
            if msg.src == src && msg.tag == tag {
                return Ok(msg.data);
            }
            self.stash.push_back(msg);
        }
    }

    fn recv_any(&mut self, tag: Tag) -> Result<(usize, Vec<f64>)> {
        if let Some(pos) = self.stash.iter().position(|m| m.tag == tag) {
            let m = self.stash.remove(pos).unwrap();
            return Ok((m.src, m.data));
        }
        loop {
            let msg = self.rx.recv_timeout(self.timeout).map_err(|e| {
                Error::Collective(format!(
                    "rank {} timed out waiting for any {:?}: {}",
                    self.rank, tag, e
                ))
            })?;
            if msg.tag == tag {
                return Ok((msg.src, msg.data));
            }
            self.stash.push_back(msg);
        }
    }
}

fn encode_pairs(list: &[(usize, f64)]) -> Vec<f64> {
    let mut out = Vec::with_capacity(list.len() * 2);
    for &(r, v) in list {
        out.push(r as f64);
        out.push(v);
    }
    out
}

fn decode_pairs(data: &[f64]) -> Vec<(usize, f64)> {
    data.chunks_exact(2)
        .map(|c| (c[0] as usize, c[1]))
        .collect()
}

fn merge_by_rank(a: Vec<(usize, f64)>, b: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i].0 <= b[j].0 {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// Collective sum over all `p` ranks. Every rank receives the identical
/// value; in deterministic mode the value equals a rank-ordered sequential
/// summation, bit for bit, independent of scheduling.
pub fn allreduce_sum(ch: &mut Channels, p: usize, local: f64, deterministic: bool) -> Result<f64> {
    if p == 1 {
        return Ok(local);
    }
    let rank = ch.rank;
    if deterministic {
        let children = [2 * rank + 1, 2 * rank + 2];
        let mut list = vec![(rank, local)];
        for c in children {
            if c < p {
                let data = ch.recv_from(c, Tag::ReduceUp)?;
                list = merge_by_rank(list, decode_pairs(&data));
            }
        }
        let sum = if rank == 0 {
            let mut s = 0.0;
            for &(_, v) in &list {
                s += v;
            }
            s
        } else {
            let parent = (rank - 1) / 2;
            ch.send(parent, Tag::ReduceUp, encode_pairs(&list))?;
            ch.recv_from(parent, Tag::ReduceDown)?[0]
        };
        for c in children {
            if c < p {
                ch.send(c, Tag::ReduceDown, vec![sum])?;
            }
        }
        Ok(sum)
    } else if rank == 0 {
        let mut s = local;
        for _ in 1..p {
            let (_, d) = ch.recv_any(Tag::ReduceUp)?;
            s += d[0];
        }
        for r in 1..p {
            ch.send(r, Tag::ReduceDown, vec![s])?;
        }
        Ok(s)
    } else {
        ch.send(0, Tag::ReduceUp, vec![local])?;
        Ok(ch.recv_from(0, Tag::ReduceDown)?[0])
    }
}

/// Ring-wide polar average. Only workers adjacent to the pole may call this;
/// each contributes partial sums of phi-weighted values for its own radial
/// range, and every member receives the full averaged profile over all
/// global radial indices.
pub fn polar_ring_reduce(
    ch: &mut Channels,
    topo: &Topology,
    pole: Pole,
    i0: usize,
    partials: &[f64],
) -> Result<Vec<f64>> {
    let rank = ch.rank;
    let group = topo.ring(pole);
    if !group.contains(&rank) {
        return Err(Error::Protocol(format!(
            "rank {rank} is not adjacent to the {pole:?} pole"
        )));
    }
    let root = group[0];
    let nr = topo.grid_dims.0;
    if rank == root {
        let mut acc = vec![0.0; nr];
        for &mem in &group {
            if mem == rank {
                for (t, &v) in partials.iter().enumerate() {
                    acc[i0 + t] += v;
                }
            } else {
                let d = ch.recv_from(mem, Tag::PolarUp(pole))?;
                if d.is_empty() {
                    return Err(Error::Protocol("empty polar contribution".into()));
                }
                let mi0 = d[0] as usize;
                if mi0 + d.len() - 1 > nr {
                    return Err(Error::Protocol("polar contribution out of range".into()));
                }
                for (t, &v) in d[1..].iter().enumerate() {
                    acc[mi0 + t] += v;
                }
            }
        }
        for v in &mut acc {
            *v /= TWO_PI;
        }
        for &mem in &group {
            if mem != rank {
                ch.send(mem, Tag::PolarDown(pole), acc.clone())?;
            }
        }
        Ok(acc)
    } else {
        let mut data = Vec::with_capacity(partials.len() + 1);
        data.push(i0 as f64);
        data.extend_from_slice(partials);
        ch.send(root, Tag::PolarUp(pole), data)?;
        ch.recv_from(root, Tag::PolarDown(pole))
    }
}

#[derive(Debug, Clone)]
pub struct FaceExchange {
    pub neighbor: usize,
    /// Ghosted-buffer indices of the interior layer to send.
    pub send: Vec<usize>,
    /// Ghosted-buffer indices of the ghost layer to fill.
    pub recv: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct HaloPlan {
    pub rank: usize,
    pub faces: [Option<FaceExchange>; 6],
}

pub fn build_halo_plan(topo: &Topology, rank: usize) -> HaloPlan {
    let block = topo.blocks[rank];
    let (lnr, lnt, lnp) = (block.nr as isize, block.nt as isize, block.np as isize);
    let l = crate::operator::GhostLayout {
        nr: block.nr,
        nt: block.nt,
        np: block.np,
    };
    let mut faces: [Option<FaceExchange>; 6] = Default::default();
    for f in FACES {
        let Some(neighbor) = topo.neighbor(rank, f) else {
            continue;
        };
        let mut send = Vec::new();
        let mut recv = Vec::new();
        match f {
            Face::RMinus | Face::RPlus => {
                let (si, ri) = if f == Face::RMinus {
                    (0, -1)
                } else {
                    (lnr - 1, lnr)
                };
                for lk in 0..lnp {
                    for lj in 0..lnt {
                        send.push(l.at(si, lj, lk));
                        recv.push(l.at(ri, lj, lk));
                    }
                }
            }
            Face::TMinus | Face::TPlus => {
                let (sj, rj) = if f == Face::TMinus {
                    (0, -1)
                } else {
                    (lnt - 1, lnt)
                };
                for lk in 0..lnp {
                    for li in 0..lnr {
                        send.push(l.at(li, sj, lk));
                        recv.push(l.at(li, rj, lk));
                    }
                }
            }
            Face::PMinus | Face::PPlus => {
                let (sk, rk) = if f == Face::PMinus {
                    (0, -1)
                } else {
                    (lnp - 1, lnp)
                };
                for lj in 0..lnt {
                    for li in 0..lnr {
                        send.push(l.at(li, lj, sk));
                        recv.push(l.at(li, lj, rk));
                    }
                }
            }
        }
        faces[f.index()] = Some(FaceExchange {
            neighbor,
            send,
            recv,
        });
    }
    HaloPlan { rank, faces }
}

/// Fill every interface ghost from the neighbor's adjacent interior layer
/// (phi wraps, possibly onto the same worker). Physical-boundary ghosts are
/// untouched; those belong to the operator's closure.
pub fn exchange_halos(ch: &mut Channels, plan: &HaloPlan, xg: &mut [f64]) -> Result<()> {
    for f in FACES {
        if let Some(fx) = &plan.faces[f.index()] {
            if fx.neighbor == plan.rank {
                let opp = plan.faces[f.opposite().index()]
                    .as_ref()
                    .expect("self-wrap implies both phi faces exist");
                debug_assert_eq!(opp.send.len(), fx.recv.len());
                for (s, r) in opp.send.iter().zip(&fx.recv) {
                    xg[*r] = xg[*s];
                }
            } else {
                let data: Vec<f64> = fx.send.iter().map(|&s| xg[s]).collect();
                ch.send(fx.neighbor, Tag::Halo(f), data)?;
            }
        }
    }
    for f in FACES {
        if let Some(fx) = &plan.faces[f.index()] {
            if fx.neighbor == plan.rank {
                continue;
            }
            let data = ch.recv_from(fx.neighbor, Tag::Halo(f.opposite()))?;
            if data.len() != fx.recv.len() {
                return Err(Error::Protocol(format!(
                    "halo message size mismatch on {f:?}: got {}, expected {}",
                    data.len(),
                    fx.recv.len()
                )));
            }
            for (r, v) in fx.recv.iter().zip(&data) {
                xg[*r] = *v;
            }
        }
    }
    Ok(())
}

fn place_block(global: &mut [f64], dims: (usize, usize, usize), block: Block, local: &[f64]) {
    let (nr, nt, _) = dims;
    for lk in 0..block.np {
        let k = block.k0 + lk;
        for lj in 0..block.nt {
            let j = block.j0 + lj;
            let g0 = block.i0 + nr * (j + nt * k);
            let l0 = block.local_index(0, lj, lk);
            global[g0..g0 + block.nr].copy_from_slice(&local[l0..l0 + block.nr]);
        }
    }
}

fn extract_block(global: &[f64], dims: (usize, usize, usize), block: Block) -> Vec<f64> {
    let (nr, nt, _) = dims;
    let mut local = vec![0.0; block.n()];
    for lk in 0..block.np {
        let k = block.k0 + lk;
        for lj in 0..block.nt {
            let j = block.j0 + lj;
            let g0 = block.i0 + nr * (j + nt * k);
            let l0 = block.local_index(0, lj, lk);
            local[l0..l0 + block.nr].copy_from_slice(&global[g0..g0 + block.nr]);
        }
    }
    local
}

/// Split a global natural-ordering field into per-rank local fields.
pub fn scatter_field(global: &[f64], topo: &Topology) -> Vec<Vec<f64>> {
    topo.blocks
        .iter()
        .map(|&b| extract_block(global, topo.grid_dims, b))
        .collect()
}

/// Reassemble per-rank local fields into the global natural ordering.
pub fn gather_field(locals: &[Vec<f64>], topo: &Topology) -> Vec<f64> {
    let (nr, nt, np) = topo.grid_dims;
    let mut global = vec![0.0; nr * nt * np];
    for (local, &b) in locals.iter().zip(&topo.blocks) {
        place_block(&mut global, topo.grid_dims, b, local);
    }
    global
}

/// Collective adapter for the solver's inner products.
pub struct WorkerComm {
    ch: Rc<RefCell<Channels>>,
    p: usize,
    deterministic: bool,
}

impl Collective for WorkerComm {
    fn allreduce_sum(&mut self, local: f64) -> Result<f64> {
        allreduce_sum(&mut self.ch.borrow_mut(), self.p, local, self.deterministic)
    }
}

/// Per-worker phi-weighted partial sums along its pole-adjacent ring.
fn polar_partials(grid: &Grid3D, block: Block, x: &[f64], pole: Pole) -> Vec<f64> {
    let lj = match pole {
        Pole::North => 0,
        Pole::South => block.nt - 1,
    };
    let mut out = vec![0.0; block.nr];
    for (li, o) in out.iter_mut().enumerate() {
        let mut sum = 0.0;
        for lk in 0..block.np {
            sum += x[block.local_index(li, lj, lk)] * grid.pmesh.dx[block.k0 + lk];
        }
        *o = sum;
    }
    out
}

#[derive(Debug, Clone)]
pub struct ParallelStats {
    /// Rank-0 iteration record with per-category maximum timers.
    pub stats: SolveStats,
    pub per_worker_timers: Vec<Timers>,
    pub topology: (usize, usize, usize),
}

struct WorkerOut {
    stats: SolveStats,
    x_global: Option<Vec<f64>>,
}

fn worker_main(
    rank: usize,
    ch: Channels,
    topo: Arc<Topology>,
    grid: Arc<Grid3D>,
    bc: Arc<BoundarySpec>,
    cfg: SolveConfig,
    deterministic: bool,
) -> Result<WorkerOut> {
    let p = topo.n_workers();
    let block = topo.blocks[rank];
    let ch = Rc::new(RefCell::new(ch));

    let t_setup = Instant::now();
    let op = assemble_block(grid.clone(), bc.clone(), block)?;
    let prec = match cfg.pc {
        PcChoice::Pc1 => Prec::Diag(build_pc1(&op)?),
        PcChoice::Pc2 => {
            let attempt = build_pc2(&op.matrix().to_csr());
            let flag = if attempt.is_ok() { 0.0 } else { 1.0 };
            let failures = allreduce_sum(&mut ch.borrow_mut(), p, flag, true)?;
            if failures > 0.0 {
                if rank == 0 {
                    eprintln!(
                        "warning: ILU0 breakdown on {failures} worker block(s); falling back to diagonal preconditioning"
                    );
                }
                Prec::Diag(build_pc1(&op)?)
            } else {
                Prec::Ilu(attempt?)
            }
        }
    };
    let setup_seconds = t_setup.elapsed().as_secs_f64();

    let b = op.build_rhs();
    let x0 = vec![0.0; op.n()];
    let plan = build_halo_plan(&topo, rank);
    let halo_secs = Rc::new(Cell::new(0.0));

    let (_, nt, _) = grid.dims();
    let at_north = block.j0 == 0;
    let at_south = block.j0 + block.nt == nt;

    let apply_ch = ch.clone();
    let halo_cell = halo_secs.clone();
    let topo_ref = topo.clone();
    let grid_ref = grid.clone();
    let mut xg = vec![0.0; op.layout().padded_len()];
    let op_ref = &op;
    let mut apply_a = move |x: &[f64], y: &mut [f64]| -> Result<()> {
        scatter_interior(op_ref.layout(), x, &mut xg);
        let t = Instant::now();
        {
            let mut c = apply_ch.borrow_mut();
            exchange_halos(&mut c, &plan, &mut xg)?;
            if at_north {
                let partials = polar_partials(&grid_ref, block, x, Pole::North);
                let avg = polar_ring_reduce(&mut c, &topo_ref, Pole::North, block.i0, &partials)?;
                op_ref.set_polar_ghosts(&mut xg, Pole::North, &avg[block.i0..block.i0 + block.nr]);
            }
            if at_south {
                let partials = polar_partials(&grid_ref, block, x, Pole::South);
                let avg = polar_ring_reduce(&mut c, &topo_ref, Pole::South, block.i0, &partials)?;
                op_ref.set_polar_ghosts(&mut xg, Pole::South, &avg[block.i0..block.i0 + block.nr]);
            }
        }
        halo_cell.set(halo_cell.get() + t.elapsed().as_secs_f64());
        op_ref.fill_radial_ghosts(x, &mut xg, GhostMode::Homogeneous);
        op_ref.apply_core(x, &xg, y);
        Ok(())
    };
    let mut apply_m = |r: &[f64], z: &mut [f64]| prec.apply(r, z);
    let mut comm = WorkerComm {
        ch: ch.clone(),
        p,
        deterministic,
    };

    let (mut x, mut stats) = pcg(
        &mut apply_a,
        &mut apply_m,
        &mut comm,
        &b,
        &x0,
        &cfg,
        setup_seconds,
    )?;
    stats.attribute_halo(halo_secs.get());

    // pure-Neumann gauge: shift the solution to zero volume-weighted mean
    if bc.upper == UpperBc::ClosedWall {
        let mut wsum = 0.0;
        let mut vsum = 0.0;
        for lk in 0..block.np {
            for lj in 0..block.nt {
                for li in 0..block.nr {
                    let vol = grid
                        .cell_volume(block.i0 + li, block.j0 + lj, block.k0 + lk)
                        .expect("block indices in range");
                    wsum += vol;
                    vsum += vol * x[block.local_index(li, lj, lk)];
                }
            }
        }
        let wtot = allreduce_sum(&mut ch.borrow_mut(), p, wsum, deterministic)?;
        let vtot = allreduce_sum(&mut ch.borrow_mut(), p, vsum, deterministic)?;
        let mean = vtot / wtot;
        for v in &mut x {
            *v -= mean;
        }
    }

    // final collective: gather the solution in natural ordering on rank 0
    let x_global = if rank == 0 {
        let mut g = vec![0.0; grid.n_cells()];
        place_block(&mut g, grid.dims(), block, &x);
        for src in 1..p {
            let d = ch.borrow_mut().recv_from(src, Tag::Gather)?;
            if d.len() != topo.blocks[src].n() {
                return Err(Error::Protocol(format!(
                    "gathered block from rank {src} has {} cells, expected {}",
                    d.len(),
                    topo.blocks[src].n()
                )));
            }
            place_block(&mut g, grid.dims(), topo.blocks[src], &d);
        }
        Some(g)
    } else {
        ch.borrow_mut().send(0, Tag::Gather, x)?;
        None
    };

    Ok(WorkerOut { stats, x_global })
}

/// Run the decomposed solve on `n_workers` in-process workers and gather the
/// global solution. One worker reproduces the serial path exactly.
pub fn run_workers(
    grid: &Arc<Grid3D>,
    bc: &Arc<BoundarySpec>,
    n_workers: usize,
    cfg: &SolveConfig,
    deterministic: bool,
) -> Result<(Vec<f64>, ParallelStats)> {
    let topo = Arc::new(decompose(n_workers, grid.dims())?);
    let chans = make_channels(n_workers);
    let mut handles = Vec::with_capacity(n_workers);
    for (rank, ch) in chans.into_iter().enumerate() {
        let topo = topo.clone();
        let grid = grid.clone();
        let bc = bc.clone();
        let cfg = cfg.clone();
        handles.push(std::thread::spawn(move || {
            worker_main(rank, ch, topo, grid, bc, cfg, deterministic)
        }));
    }
    let mut outs = Vec::with_capacity(n_workers);
    let mut first_err = None;
    for h in handles {
        match h.join() {
            Ok(Ok(out)) => outs.push(out),
            Ok(Err(e)) => first_err = first_err.or(Some(e)),
            Err(_) => first_err = first_err.or(Some(Error::Collective("worker panicked".into()))),
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }

    let x = outs[0]
        .x_global
        .take()
        .expect("rank 0 holds the gathered solution");
    let mut merged = outs[0].stats.clone();
    let mut per_worker_timers = Vec::with_capacity(n_workers);
    for o in &outs {
        debug_assert_eq!(o.stats.iterations, merged.iterations);
        per_worker_timers.push(o.stats.timers.clone());
        merged.timers.max_with(&o.stats.timers);
    }
    Ok((
        x,
        ParallelStats {
            stats: merged,
            per_worker_timers,
            topology: (topo.pr, topo.pt, topo.pp),
        },
    ))
}
