//! Uncertain linear systems and their decomposition into coupled agents.
//!
//! The global system is
//!
//! ```text
//!     x+ = A(d) x + B(d) u + C(d) w
//! ```
//!
//! where every uncertain matrix is affine in the realization `d`:
//! `M(d) = M0 + sum_k d_k M_k`. Partitioning splits the state, input and
//! disturbance vectors into agent blocks; each uncertainty channel `d_k` must act
//! on the rows of a single agent, so that uncertainty stays private to the agent
//! that owns it.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qp::{self, QpStatus, QuadraticProgram};

/// Absolute tolerance for structural zero tests.
pub const ZERO_TOL: f64 = 1e-12;
/// Random probes (besides `d = 0`) used to decide whether a coupling block vanishes.
pub const NEIGHBOR_PROBES: usize = 8;
const PROBE_SEED: u64 = 0x6e65_6967_6862_6f72;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMatrix {
    pub nominal: DMatrix<f64>,
    pub terms: Vec<DMatrix<f64>>,
}

impl AffineMatrix {
    pub fn new(nominal: DMatrix<f64>, terms: Vec<DMatrix<f64>>) -> Result<Self> {
        for (k, t) in terms.iter().enumerate() {
            if t.shape() != nominal.shape() {
                return Err(Error::DimensionMismatch(format!(
                    "uncertainty term {k} has shape {:?}, nominal {:?}",
                    t.shape(),
                    nominal.shape()
                )));
            }
        }
        Ok(Self { nominal, terms })
    }

    /// A matrix without uncertainty, padded with `channels` zero terms.
    pub fn constant(nominal: DMatrix<f64>, channels: usize) -> Self {
        let zero = DMatrix::zeros(nominal.nrows(), nominal.ncols());
        Self { terms: vec![zero; channels], nominal }
    }

    pub fn nrows(&self) -> usize {
        self.nominal.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.nominal.ncols()
    }

    pub fn channels(&self) -> usize {
        self.terms.len()
    }

    pub fn eval(&self, delta: &[f64]) -> DMatrix<f64> {
        debug_assert_eq!(delta.len(), self.terms.len());
        let mut m = self.nominal.clone();
        for (t, d) in self.terms.iter().zip(delta) {
            if *d != 0.0 {
                m += t * *d;
            }
        }
        m
    }

    /// `M(d) x` without forming `M(d)`.
    pub fn apply(&self, delta: &[f64], x: &DVector<f64>) -> DVector<f64> {
        let mut y = &self.nominal * x;
        for (t, d) in self.terms.iter().zip(delta) {
            if *d != 0.0 {
                y.gemv(*d, t, x, 1.0);
            }
        }
        y
    }

    pub fn is_zero_everywhere(&self) -> bool {
        self.nominal.amax() < ZERO_TOL && self.terms.iter().all(|t| t.amax() < ZERO_TOL)
    }

    fn sub_block(&self, r0: usize, nr: usize, c0: usize, nc: usize, channels: &[usize]) -> AffineMatrix {
        AffineMatrix {
            nominal: self.nominal.view((r0, c0), (nr, nc)).into_owned(),
            terms: channels.iter().map(|&k| self.terms[k].view((r0, c0), (nr, nc)).into_owned()).collect(),
        }
    }
}

/// Polytope `{x : a x <= b}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polytope {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Polytope {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(Error::DimensionMismatch(format!("polytope has {} rows but {} bounds", a.nrows(), b.len())));
        }
        Ok(Self { a, b })
    }

    /// Axis-aligned box `lo <= x <= hi`; infinite entries produce no row.
    pub fn from_box(lo: &[f64], hi: &[f64]) -> Self {
        let n = lo.len();
        let mut rows: Vec<(usize, f64, f64)> = Vec::new();
        for i in 0..n {
            if hi[i].is_finite() {
                rows.push((i, 1.0, hi[i]));
            }
            if lo[i].is_finite() {
                rows.push((i, -1.0, -lo[i]));
            }
        }
        let mut a = DMatrix::zeros(rows.len(), n);
        let mut b = DVector::zeros(rows.len());
        for (r, (i, s, v)) in rows.into_iter().enumerate() {
            a[(r, i)] = s;
            b[r] = v;
        }
        Self { a, b }
    }

    /// The whole space in dimension `n`.
    pub fn unbounded(n: usize) -> Self {
        Self { a: DMatrix::zeros(0, n), b: DVector::zeros(0) }
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        if self.rows() == 0 {
            return true;
        }
        let r = &self.a * x - &self.b;
        r.iter().all(|v| *v <= tol)
    }

    /// Largest Chebyshev-like margin `t` (capped at 1) such that `a_r x + t |a_r| <= b_r`
    /// for some `x`. Positive means a strictly interior point exists.
    pub fn interior_margin(&self) -> f64 {
        if self.rows() == 0 {
            return 1.0;
        }
        let n = self.dim();
        let rows = self.rows();
        // variables (x, t); maximize t with a tiny proximal term.
        let mut h = DMatrix::identity(n + 1, n + 1) * 1e-6;
        h[(n, n)] = 1e-6;
        let mut f = DVector::zeros(n + 1);
        f[n] = -1.0;
        let mut a = DMatrix::zeros(rows + 1, n + 1);
        let mut b = DVector::zeros(rows + 1);
        for r in 0..rows {
            let norm = self.a.row(r).norm();
            for c in 0..n {
                a[(r, c)] = self.a[(r, c)];
            }
            a[(r, n)] = norm;
            b[r] = self.b[r];
        }
        a[(rows, n)] = 1.0;
        b[rows] = 1.0;
        let qp = QuadraticProgram::new(h, f).with_inequalities(a, b);
        match qp::solve_default(&qp) {
            Ok(sol) if sol.status == QpStatus::Optimal => sol.x[n],
            Ok(sol) if sol.status == QpStatus::MaxIterations => sol.x[n],
            _ => f64::NEG_INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertainSystem {
    pub a: AffineMatrix,
    pub b: AffineMatrix,
    pub c: AffineMatrix,
    pub state_set: Polytope,
    pub input_set: Polytope,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub horizon: usize,
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    (m - m.transpose()).amax() <= 1e-10 * (1.0 + m.amax())
}

impl UncertainSystem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: AffineMatrix,
        b: AffineMatrix,
        c: AffineMatrix,
        state_set: Polytope,
        input_set: Polytope,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        p: DMatrix<f64>,
        k: DMatrix<f64>,
        horizon: usize,
    ) -> Result<Self> {
        let sys = Self { a, b, c, state_set, input_set, q, r, p, k, horizon };
        sys.validate()?;
        Ok(sys)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m, nw) = (self.nx(), self.nu(), self.nw());
        let dm = |what: &str| Err(Error::DimensionMismatch(what.to_string()));
        if self.a.ncols() != n {
            return dm("A must be square");
        }
        if self.b.nrows() != n || self.c.nrows() != n {
            return dm("B and C must have as many rows as A");
        }
        if self.b.channels() != self.a.channels() || self.c.channels() != self.a.channels() {
            return dm("A, B and C must share the uncertainty channels");
        }
        if self.state_set.dim() != n || self.input_set.dim() != m {
            return dm("constraint polytopes do not match state/input dimensions");
        }
        if self.q.shape() != (n, n) || self.p.shape() != (n, n) || self.r.shape() != (m, m) {
            return dm("cost weights do not match dimensions");
        }
        if self.k.shape() != (m, n) {
            return dm("feedback gain must be m x n");
        }
        let _ = nw;
        if self.horizon == 0 {
            return Err(Error::InvalidModel("horizon must be positive".into()));
        }
        if !is_symmetric(&self.q) || min_eigenvalue(&self.q) < -1e-10 {
            return Err(Error::InvalidModel("Q must be symmetric positive semidefinite".into()));
        }
        if !is_symmetric(&self.r) || min_eigenvalue(&self.r) <= 0.0 {
            return Err(Error::InvalidModel("R must be symmetric positive definite".into()));
        }
        if !is_symmetric(&self.p) {
            return Err(Error::InvalidModel("P must be symmetric".into()));
        }
        if self.state_set.interior_margin() <= 1e-9 {
            return Err(Error::InvalidModel("state constraint set has empty interior".into()));
        }
        if self.input_set.interior_margin() <= 1e-9 {
            return Err(Error::InvalidModel("input constraint set has empty interior".into()));
        }
        Ok(())
    }

    pub fn nx(&self) -> usize {
        self.a.nrows()
    }

    pub fn nu(&self) -> usize {
        self.b.ncols()
    }

    pub fn nw(&self) -> usize {
        self.c.ncols()
    }

    pub fn delta_dim(&self) -> usize {
        self.a.channels()
    }
}

/// `x+ = A(d) x + B(d) u + C(d) w`.
pub fn step_global(
    system: &UncertainSystem,
    x: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
    delta: &[f64],
) -> Result<DVector<f64>> {
    if x.len() != system.nx() || u.len() != system.nu() || w.len() != system.nw() || delta.len() != system.delta_dim() {
        return Err(Error::DimensionMismatch("step_global argument sizes".into()));
    }
    Ok(system.a.apply(delta, x) + system.b.apply(delta, u) + system.c.apply(delta, w))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSize {
    pub nx: usize,
    pub nu: usize,
    pub nw: usize,
}

impl BlockSize {
    pub fn new(nx: usize, nu: usize, nw: usize) -> Self {
        Self { nx, nu, nw }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub blocks: Vec<BlockSize>,
    /// `neighbors[i]` lists every `j != i` whose state enters agent `i`'s dynamics.
    pub neighbors: Vec<Vec<usize>>,
    /// Global uncertainty channels owned by each agent.
    pub channels: Vec<Vec<usize>>,
    /// Rows of the global state polytope owned by each agent.
    pub state_rows: Vec<Vec<usize>>,
    pub input_rows: Vec<Vec<usize>>,
    pub delta_dim: usize,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Agents that read agent `i`'s state (`i` in their neighbor set).
    pub fn followers(&self, i: usize) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.neighbors[j].contains(&i)).collect()
    }

    fn offsets(&self) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let mut ox = vec![0];
        let mut ou = vec![0];
        let mut ow = vec![0];
        for b in &self.blocks {
            ox.push(ox.last().unwrap() + b.nx);
            ou.push(ou.last().unwrap() + b.nu);
            ow.push(ow.last().unwrap() + b.nw);
        }
        (ox, ou, ow)
    }

    /// Splits a global state vector into agent blocks.
    pub fn split_state(&self, x: &DVector<f64>) -> Vec<DVector<f64>> {
        let (ox, _, _) = self.offsets();
        (0..self.len()).map(|i| x.rows(ox[i], self.blocks[i].nx).into_owned()).collect()
    }

    pub fn split_input(&self, u: &DVector<f64>) -> Vec<DVector<f64>> {
        let (_, ou, _) = self.offsets();
        (0..self.len()).map(|i| u.rows(ou[i], self.blocks[i].nu).into_owned()).collect()
    }

    pub fn split_disturbance(&self, w: &DVector<f64>) -> Vec<DVector<f64>> {
        let (_, _, ow) = self.offsets();
        (0..self.len()).map(|i| w.rows(ow[i], self.blocks[i].nw).into_owned()).collect()
    }

    pub fn split_delta(&self, delta: &[f64]) -> Vec<Vec<f64>> {
        self.channels.iter().map(|ch| ch.iter().map(|&k| delta[k]).collect()).collect()
    }
}

/// Stacks agent blocks into a global vector.
pub fn stack(blocks: &[DVector<f64>]) -> DVector<f64> {
    let n: usize = blocks.iter().map(|b| b.len()).sum();
    let mut out = DVector::zeros(n);
    let mut o = 0;
    for b in blocks {
        out.rows_mut(o, b.len()).copy_from(b);
        o += b.len();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub neighbor: usize,
    /// `A_ij(d_i)`, shape `n_i x n_j`.
    pub matrix: AffineMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentModel {
    pub index: usize,
    pub nx: usize,
    pub nu: usize,
    pub nw: usize,
    pub a_self: AffineMatrix,
    pub b: AffineMatrix,
    pub c: AffineMatrix,
    /// Sorted by neighbor index.
    pub couplings: Vec<Coupling>,
    pub k: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub state_set: Polytope,
    pub input_set: Polytope,
    pub horizon: usize,
}

impl AgentModel {
    /// The whole system viewed as a single agent without neighbors.
    pub fn from_system(system: &UncertainSystem) -> Self {
        Self {
            index: 0,
            nx: system.nx(),
            nu: system.nu(),
            nw: system.nw(),
            a_self: system.a.clone(),
            b: system.b.clone(),
            c: system.c.clone(),
            couplings: Vec::new(),
            k: system.k.clone(),
            q: system.q.clone(),
            r: system.r.clone(),
            p: system.p.clone(),
            state_set: system.state_set.clone(),
            input_set: system.input_set.clone(),
            horizon: system.horizon,
        }
    }

    /// Same agent with every coupling term dropped.
    pub fn decoupled(&self) -> Self {
        Self { couplings: Vec::new(), ..self.clone() }
    }

    pub fn delta_dim(&self) -> usize {
        self.a_self.channels()
    }

    pub fn neighbors(&self) -> Vec<usize> {
        self.couplings.iter().map(|c| c.neighbor).collect()
    }

    pub fn coupling(&self, j: usize) -> Option<&Coupling> {
        self.couplings.iter().find(|c| c.neighbor == j)
    }

    /// Decision dimension `T m_i` of the agent's scenario program.
    pub fn decision_dim(&self) -> usize {
        self.horizon * self.nu
    }
}

/// `x_i+ = A_ii(d_i) x_i + B_i(d_i) u_i + sum_j A_ij(d_i) x_j + C_i(d_i) w_i`.
pub fn step_agent(
    agent: &AgentModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    neighbor_states: &BTreeMap<usize, DVector<f64>>,
    w: &DVector<f64>,
    delta: &[f64],
) -> Result<DVector<f64>> {
    if x.len() != agent.nx || u.len() != agent.nu || w.len() != agent.nw || delta.len() != agent.delta_dim() {
        return Err(Error::DimensionMismatch(format!("step_agent argument sizes for agent {}", agent.index)));
    }
    let mut next = agent.a_self.apply(delta, x) + agent.b.apply(delta, u) + agent.c.apply(delta, w);
    for cpl in &agent.couplings {
        let xj = neighbor_states.get(&cpl.neighbor).ok_or(Error::MissingNeighborState(cpl.neighbor))?;
        if xj.len() != cpl.matrix.ncols() {
            return Err(Error::DimensionMismatch(format!("state of neighbor {}", cpl.neighbor)));
        }
        next += cpl.matrix.apply(delta, xj);
    }
    Ok(next)
}

fn block_is_zero(m: &DMatrix<f64>, r0: usize, nr: usize, c0: usize, nc: usize) -> bool {
    nr == 0 || nc == 0 || m.view((r0, c0), (nr, nc)).amax() < ZERO_TOL
}

fn check_block_diagonal(name: &str, m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> Result<()> {
    let nb = rows.len() - 1;
    for bi in 0..nb {
        for bj in 0..nb {
            if bi == bj {
                continue;
            }
            let (r0, nr) = (rows[bi], rows[bi + 1] - rows[bi]);
            let (c0, nc) = (cols[bj], cols[bj + 1] - cols[bj]);
            if !block_is_zero(m, r0, nr, c0, nc) {
                return Err(Error::NotBlockDecomposable { matrix: name.to_string(), row_block: bi, col_block: bj });
            }
        }
    }
    Ok(())
}

/// Assigns each polytope row to the unique agent whose columns it touches.
fn assign_rows(name: &str, a: &DMatrix<f64>, cols: &[usize]) -> Result<Vec<Vec<usize>>> {
    let nb = cols.len() - 1;
    let mut owned = vec![Vec::new(); nb];
    for r in 0..a.nrows() {
        let touched: Vec<usize> =
            (0..nb).filter(|&bj| !block_is_zero(a, r, 1, cols[bj], cols[bj + 1] - cols[bj])).collect();
        match touched.as_slice() {
            [bj] => owned[*bj].push(r),
            [] => {
                return Err(Error::InvalidModel(format!("{name} row {r} has no nonzero coefficient")));
            }
            [first, second, ..] => {
                return Err(Error::NotBlockDecomposable {
                    matrix: name.to_string(),
                    row_block: *first,
                    col_block: *second,
                });
            }
        }
    }
    Ok(owned)
}

fn neighbor_probes(delta_dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(PROBE_SEED);
    let mut probes = vec![vec![0.0; delta_dim]];
    for _ in 0..NEIGHBOR_PROBES {
        probes.push((0..delta_dim).map(|_| StandardNormal.sample(&mut rng)).collect());
    }
    probes
}

/// Splits `system` into agents with the given block sizes.
///
/// `B`, `C`, `K`, `Q`, `R`, `P` must be block diagonal, every polytope row must
/// involve a single agent, and every uncertainty channel must act on the rows of a
/// single agent. Neighbor sets are read off the off-diagonal blocks of `A(d)` at
/// `d = 0` and at [`NEIGHBOR_PROBES`] random realizations.
pub fn partition_system(system: &UncertainSystem, blocks: &[BlockSize]) -> Result<(Vec<AgentModel>, Partition)> {
    let (n, m, nw) = (system.nx(), system.nu(), system.nw());
    let sum = |f: fn(&BlockSize) -> usize| blocks.iter().map(f).sum::<usize>();
    if blocks.is_empty() || sum(|b| b.nx) != n || sum(|b| b.nu) != m || sum(|b| b.nw) != nw {
        return Err(Error::DimensionMismatch(format!(
            "block sizes sum to ({}, {}, {}), system has ({n}, {m}, {nw})",
            sum(|b| b.nx),
            sum(|b| b.nu),
            sum(|b| b.nw)
        )));
    }
    let mut ox = vec![0];
    let mut ou = vec![0];
    let mut ow = vec![0];
    for b in blocks {
        ox.push(ox.last().unwrap() + b.nx);
        ou.push(ou.last().unwrap() + b.nu);
        ow.push(ow.last().unwrap() + b.nw);
    }
    let nb = blocks.len();

    check_block_diagonal("B", &system.b.nominal, &ox, &ou)?;
    check_block_diagonal("C", &system.c.nominal, &ox, &ow)?;
    for (k, t) in system.b.terms.iter().enumerate() {
        check_block_diagonal(&format!("B term {k}"), t, &ox, &ou)?;
    }
    for (k, t) in system.c.terms.iter().enumerate() {
        check_block_diagonal(&format!("C term {k}"), t, &ox, &ow)?;
    }
    check_block_diagonal("K", &system.k, &ou, &ox)?;
    check_block_diagonal("Q", &system.q, &ox, &ox)?;
    check_block_diagonal("R", &system.r, &ou, &ou)?;
    check_block_diagonal("P", &system.p, &ox, &ox)?;
    let state_rows = assign_rows("G", &system.state_set.a, &ox)?;
    let input_rows = assign_rows("H", &system.input_set.a, &ou)?;

    // Channel ownership: the agent whose rows the channel touches.
    let delta_dim = system.delta_dim();
    let mut channels = vec![Vec::new(); nb];
    for k in 0..delta_dim {
        let mats = [&system.a.terms[k], &system.b.terms[k], &system.c.terms[k]];
        let owners: Vec<usize> = (0..nb)
            .filter(|&bi| mats.iter().any(|mat| !block_is_zero(mat, ox[bi], ox[bi + 1] - ox[bi], 0, mat.ncols())))
            .collect();
        match owners.as_slice() {
            [] => {}
            [bi] => channels[*bi].push(k),
            [first, second, ..] => {
                return Err(Error::NotBlockDecomposable {
                    matrix: format!("uncertainty channel {k}"),
                    row_block: *first,
                    col_block: *second,
                });
            }
        }
    }

    let probes = neighbor_probes(delta_dim);
    let probe_mats: Vec<DMatrix<f64>> = probes.iter().map(|d| system.a.eval(d)).collect();
    let mut neighbors = vec![Vec::new(); nb];
    for bi in 0..nb {
        for bj in 0..nb {
            if bi == bj {
                continue;
            }
            let nonzero =
                probe_mats.iter().any(|a| !block_is_zero(a, ox[bi], ox[bi + 1] - ox[bi], ox[bj], ox[bj + 1] - ox[bj]));
            if nonzero {
                neighbors[bi].push(bj);
            }
        }
    }

    let sub = |m: &DMatrix<f64>, r0: usize, nr: usize, c0: usize, nc: usize| m.view((r0, c0), (nr, nc)).into_owned();
    let mut agents = Vec::with_capacity(nb);
    for i in 0..nb {
        let (x0, nxi) = (ox[i], blocks[i].nx);
        let (u0, nui) = (ou[i], blocks[i].nu);
        let (w0, nwi) = (ow[i], blocks[i].nw);
        let ch = &channels[i];
        let pick_rows = |poly: &Polytope, rows: &[usize], c0: usize, nc: usize| {
            let mut a = DMatrix::zeros(rows.len(), nc);
            let mut b = DVector::zeros(rows.len());
            for (r, &g) in rows.iter().enumerate() {
                a.row_mut(r).copy_from(&poly.a.view((g, c0), (1, nc)));
                b[r] = poly.b[g];
            }
            Polytope { a, b }
        };
        let couplings = neighbors[i]
            .iter()
            .map(|&j| Coupling { neighbor: j, matrix: system.a.sub_block(x0, nxi, ox[j], blocks[j].nx, ch) })
            .collect();
        agents.push(AgentModel {
            index: i,
            nx: nxi,
            nu: nui,
            nw: nwi,
            a_self: system.a.sub_block(x0, nxi, x0, nxi, ch),
            b: system.b.sub_block(x0, nxi, u0, nui, ch),
            c: system.c.sub_block(x0, nxi, w0, nwi, ch),
            couplings,
            k: sub(&system.k, u0, nui, x0, nxi),
            q: sub(&system.q, x0, nxi, x0, nxi),
            r: sub(&system.r, u0, nui, u0, nui),
            p: sub(&system.p, x0, nxi, x0, nxi),
            state_set: pick_rows(&system.state_set, &state_rows[i], x0, nxi),
            input_set: pick_rows(&system.input_set, &input_rows[i], u0, nui),
            horizon: system.horizon,
        });
    }
    let partition = Partition { blocks: blocks.to_vec(), neighbors, channels, state_rows, input_rows, delta_dim };
    Ok((agents, partition))
}

/// Rebuilds the global system from agent pieces. Polytope rows follow the original
/// row order recorded in `partition`.
pub fn reassemble(agents: &[AgentModel], partition: &Partition) -> Result<UncertainSystem> {
    let nb = agents.len();
    if nb != partition.len() {
        return Err(Error::DimensionMismatch("agent count differs from partition".into()));
    }
    let (ox, ou, ow) = partition.offsets();
    let (n, m, nw) = (ox[nb], ou[nb], ow[nb]);
    let dd = partition.delta_dim;
    let mut a = AffineMatrix::constant(DMatrix::zeros(n, n), dd);
    let mut b = AffineMatrix::constant(DMatrix::zeros(n, m), dd);
    let mut c = AffineMatrix::constant(DMatrix::zeros(n, nw), dd);
    let mut k = DMatrix::zeros(m, n);
    let mut q = DMatrix::zeros(n, n);
    let mut r = DMatrix::zeros(m, m);
    let mut p = DMatrix::zeros(n, n);
    let nq: usize = partition.state_rows.iter().map(|v| v.len()).sum();
    let nh: usize = partition.input_rows.iter().map(|v| v.len()).sum();
    let mut g = DMatrix::zeros(nq, n);
    let mut gb = DVector::zeros(nq);
    let mut h = DMatrix::zeros(nh, m);
    let mut hb = DVector::zeros(nh);

    let place = |dst: &mut AffineMatrix, src: &AffineMatrix, r0: usize, c0: usize, ch: &[usize]| {
        dst.nominal.view_mut((r0, c0), (src.nrows(), src.ncols())).copy_from(&src.nominal);
        for (local, &global) in ch.iter().enumerate() {
            dst.terms[global].view_mut((r0, c0), (src.nrows(), src.ncols())).copy_from(&src.terms[local]);
        }
    };
    for (i, ag) in agents.iter().enumerate() {
        let ch = &partition.channels[i];
        place(&mut a, &ag.a_self, ox[i], ox[i], ch);
        place(&mut b, &ag.b, ox[i], ou[i], ch);
        place(&mut c, &ag.c, ox[i], ow[i], ch);
        for cpl in &ag.couplings {
            place(&mut a, &cpl.matrix, ox[i], ox[cpl.neighbor], ch);
        }
        k.view_mut((ou[i], ox[i]), (ag.nu, ag.nx)).copy_from(&ag.k);
        q.view_mut((ox[i], ox[i]), (ag.nx, ag.nx)).copy_from(&ag.q);
        r.view_mut((ou[i], ou[i]), (ag.nu, ag.nu)).copy_from(&ag.r);
        p.view_mut((ox[i], ox[i]), (ag.nx, ag.nx)).copy_from(&ag.p);
        for (local, &row) in partition.state_rows[i].iter().enumerate() {
            g.view_mut((row, ox[i]), (1, ag.nx)).copy_from(&ag.state_set.a.row(local));
            gb[row] = ag.state_set.b[local];
        }
        for (local, &row) in partition.input_rows[i].iter().enumerate() {
            h.view_mut((row, ou[i]), (1, ag.nu)).copy_from(&ag.input_set.a.row(local));
            hb[row] = ag.input_set.b[local];
        }
    }
    Ok(UncertainSystem {
        a,
        b,
        c,
        state_set: Polytope { a: g, b: gb },
        input_set: Polytope { a: h, b: hb },
        q,
        r,
        p,
        k,
        horizon: agents.first().map(|ag| ag.horizon).unwrap_or(1),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovCheck {
    pub holds: bool,
    pub max_eigenvalue: f64,
}

/// Checks the averaged decrease condition
/// `E[A_cl(d)' P A_cl(d)] + Q + K'RK - P <= tol` (in the semidefinite sense) with
/// `A_cl(d) = A(d) + B(d) K`, the expectation replaced by the sample mean.
pub fn check_lyapunov(
    system: &UncertainSystem,
    k: &DMatrix<f64>,
    p: &DMatrix<f64>,
    delta_samples: &[Vec<f64>],
    tol: f64,
) -> Result<LyapunovCheck> {
    let n = system.nx();
    if delta_samples.is_empty() {
        return Err(Error::InvalidModel("no uncertainty samples supplied".into()));
    }
    if k.shape() != (system.nu(), n) || p.shape() != (n, n) {
        return Err(Error::DimensionMismatch("gain or terminal weight shape".into()));
    }
    let mut acc = DMatrix::zeros(n, n);
    for d in delta_samples {
        if d.len() != system.delta_dim() {
            return Err(Error::DimensionMismatch("uncertainty sample length".into()));
        }
        let acl = system.a.eval(d) + system.b.eval(d) * k;
        acc += acl.transpose() * p * &acl;
    }
    acc /= delta_samples.len() as f64;
    let m = acc + &system.q + k.transpose() * &system.r * k - p;
    let sym = (&m + m.transpose()) * 0.5;
    let max_eigenvalue = SymmetricEigen::new(sym).eigenvalues.max();
    Ok(LyapunovCheck { holds: max_eigenvalue <= tol, max_eigenvalue })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};

    fn scalar_system(a: f64, b: f64, q: f64, r: f64) -> UncertainSystem {
        UncertainSystem::new(
            AffineMatrix::constant(dmatrix![a], 1),
            AffineMatrix::constant(dmatrix![b], 1),
            AffineMatrix::constant(dmatrix![1.0], 1),
            Polytope::from_box(&[-10.0], &[10.0]),
            Polytope::from_box(&[-1.0], &[1.0]),
            dmatrix![q],
            dmatrix![r],
            dmatrix![1.0],
            dmatrix![0.0],
            3,
        )
        .unwrap()
    }

    #[test]
    fn lyapunov_scalar_cases() {
        let sys = scalar_system(0.5, 0.0, 1.0, 1.0);
        let d = vec![vec![0.0]];
        let ok = check_lyapunov(&sys, &dmatrix![0.0], &dmatrix![1.3334], &d, 0.0).unwrap();
        assert!(ok.holds);
        assert_abs_diff_eq!(ok.max_eigenvalue, 0.25 * 1.3334 + 1.0 - 1.3334, epsilon = 1e-12);
        let bad = check_lyapunov(&sys, &dmatrix![0.0], &dmatrix![1.0], &d, 0.0).unwrap();
        assert!(!bad.holds);
        assert_abs_diff_eq!(bad.max_eigenvalue, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn lyapunov_trivial_zero_system() {
        let mut sys = scalar_system(0.0, 0.0, 0.0, 1.0);
        sys.r = dmatrix![1.0];
        let d = vec![vec![0.0], vec![0.3]];
        let res = check_lyapunov(&sys, &dmatrix![0.0], &dmatrix![2.0], &d, 0.0).unwrap();
        assert!(res.holds);
    }

    #[test]
    fn identity_agent_keeps_state() {
        let sys = UncertainSystem::new(
            AffineMatrix::constant(DMatrix::identity(2, 2), 0),
            AffineMatrix::constant(DMatrix::identity(2, 2), 0),
            AffineMatrix::constant(DMatrix::identity(2, 2), 0),
            Polytope::unbounded(2),
            Polytope::unbounded(2),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 2),
            2,
        )
        .unwrap();
        let (agents, part) = partition_system(&sys, &[BlockSize::new(1, 1, 1), BlockSize::new(1, 1, 1)]).unwrap();
        assert!(part.neighbors.iter().all(|n| n.is_empty()));
        let x = dvector![3.5];
        let next = step_agent(&agents[0], &x, &dvector![0.0], &BTreeMap::new(), &dvector![0.0], &[]).unwrap();
        assert_eq!(next, x);
    }

    #[test]
    fn missing_neighbor_state_is_reported() {
        let sys = UncertainSystem::new(
            AffineMatrix::constant(dmatrix![0.5, 0.1; 0.0, 0.5], 0),
            AffineMatrix::constant(DMatrix::identity(2, 2), 0),
            AffineMatrix::constant(DMatrix::identity(2, 2), 0),
            Polytope::unbounded(2),
            Polytope::unbounded(2),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 2),
            2,
        )
        .unwrap();
        let (agents, part) = partition_system(&sys, &[BlockSize::new(1, 1, 1), BlockSize::new(1, 1, 1)]).unwrap();
        assert_eq!(part.neighbors, vec![vec![1], vec![]]);
        assert_eq!(part.followers(1), vec![0]);
        let err = step_agent(&agents[0], &dvector![1.0], &dvector![0.0], &BTreeMap::new(), &dvector![0.0], &[]);
        assert_eq!(err, Err(Error::MissingNeighborState(1)));
    }

    #[test]
    fn rejects_coupled_input_matrix() {
        let sys = UncertainSystem::new(
            AffineMatrix::constant(DMatrix::identity(2, 2) * 0.5, 0),
            AffineMatrix::constant(dmatrix![1.0, 0.2; 0.0, 1.0], 0),
            AffineMatrix::constant(DMatrix::identity(2, 2), 0),
            Polytope::unbounded(2),
            Polytope::unbounded(2),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 2),
            2,
        )
        .unwrap();
        let err = partition_system(&sys, &[BlockSize::new(1, 1, 1), BlockSize::new(1, 1, 1)]).unwrap_err();
        assert_eq!(err, Error::NotBlockDecomposable { matrix: "B".into(), row_block: 0, col_block: 1 });
    }

    #[test]
    fn rejects_bad_block_sizes() {
        let sys = scalar_system(0.5, 1.0, 1.0, 1.0);
        assert!(matches!(partition_system(&sys, &[BlockSize::new(2, 1, 1)]), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn rejects_shared_uncertainty_channel() {
        let mut term = DMatrix::zeros(2, 2);
        term[(0, 0)] = 1.0;
        term[(1, 1)] = 1.0;
        let sys = UncertainSystem::new(
            AffineMatrix::new(DMatrix::identity(2, 2) * 0.5, vec![term]).unwrap(),
            AffineMatrix::constant(DMatrix::identity(2, 2), 1),
            AffineMatrix::constant(DMatrix::identity(2, 2), 1),
            Polytope::unbounded(2),
            Polytope::unbounded(2),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 2),
            2,
        )
        .unwrap();
        let err = partition_system(&sys, &[BlockSize::new(1, 1, 1), BlockSize::new(1, 1, 1)]).unwrap_err();
        assert!(matches!(err, Error::NotBlockDecomposable { .. }));
    }

    #[test]
    fn rejects_empty_interior_polytope() {
        let res = UncertainSystem::new(
            AffineMatrix::constant(dmatrix![0.5], 0),
            AffineMatrix::constant(dmatrix![1.0], 0),
            AffineMatrix::constant(dmatrix![1.0], 0),
            Polytope::from_box(&[1.0], &[1.0]),
            Polytope::unbounded(1),
            dmatrix![1.0],
            dmatrix![1.0],
            dmatrix![0.0],
            dmatrix![0.0],
            1,
        );
        assert!(matches!(res, Err(Error::InvalidModel(_))));
    }

    #[test]
    fn rejects_indefinite_r() {
        let mut sys = scalar_system(0.5, 1.0, 1.0, 1.0);
        sys.r = dmatrix![0.0];
        assert!(sys.validate().is_err());
    }
}
