//! Strictly convex QPs with one shared block `v` and independent scenario blocks.
//!
//! The Hessian is block-arrow shaped and every inequality row touches `v` and at most
//! one scenario block, so `H^-1` is applied through the Schur complement on `v`.
//! Solved by a dual active-set method that can start from a previous active set.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) struct ArrowRow {
    pub scenario: Option<usize>,
    pub cv: DVector<f64>,
    /// Coefficients on the scenario block (empty when `scenario` is `None`).
    pub cz: DVector<f64>,
    pub b: f64,
}

pub(crate) struct ArrowQp {
    nv: usize,
    nz: usize,
    hvs: Vec<DMatrix<f64>>,
    hss: Vec<Cholesky<f64, Dyn>>,
    /// `H_ss^-1 H_vs'` per scenario.
    w: Vec<DMatrix<f64>>,
    schur: Cholesky<f64, Dyn>,
    rows: Vec<ArrowRow>,
    norms: Vec<f64>,
}

fn factor(m: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let m = (&m + m.transpose()) * 0.5;
    m.cholesky().ok_or_else(|| Error::InvalidModel("scenario block Hessian is not positive definite".into()))
}

impl ArrowQp {
    /// `hvv` is `nv x nv`; `hvs[s]` is `nv x nz` and `hss[s]` is `nz x nz`.
    pub fn new(hvv: DMatrix<f64>, hvs: Vec<DMatrix<f64>>, hss: Vec<DMatrix<f64>>, rows: Vec<ArrowRow>) -> Result<Self> {
        let nv = hvv.nrows();
        let nz = hss.first().map_or(0, |h| h.nrows());
        let mut schur = hvv;
        let mut w = Vec::with_capacity(hss.len());
        let mut chols = Vec::with_capacity(hss.len());
        for (h, c) in hss.into_iter().zip(&hvs) {
            let ch = factor(h)?;
            let ws = ch.solve(&c.transpose());
            schur -= c * &ws;
            w.push(ws);
            chols.push(ch);
        }
        let norms = rows.iter().map(|r| (r.cv.norm_squared() + r.cz.norm_squared()).sqrt().max(1e-300)).collect();
        Ok(Self { nv, nz, hvs, hss: chols, w, schur: factor(schur)?, rows, norms })
    }

    pub fn dim(&self) -> usize {
        self.nv + self.nz * self.hss.len()
    }

    fn block(&self, s: usize) -> usize {
        self.nv + s * self.nz
    }

    /// `H^-1 r`.
    pub fn hinv(&self, r: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        let mut rhs = r.rows(0, self.nv).into_owned();
        let mut ys = Vec::with_capacity(self.hss.len());
        for s in 0..self.hss.len() {
            let y = self.hss[s].solve(&r.rows(self.block(s), self.nz).into_owned());
            rhs -= &self.hvs[s] * &y;
            ys.push(y);
        }
        let xv = self.schur.solve(&rhs);
        for (s, y) in ys.into_iter().enumerate() {
            let o = self.block(s);
            out.rows_mut(o, self.nz).copy_from(&(y - &self.w[s] * &xv));
        }
        out.rows_mut(0, self.nv).copy_from(&xv);
        out
    }

    /// `H^-1 a_k'` for row `k`.
    fn hinv_row(&self, k: usize) -> DVector<f64> {
        let row = &self.rows[k];
        let mut out = DVector::zeros(self.dim());
        let mut rhs = row.cv.clone();
        let mut ys = None;
        if let Some(s) = row.scenario {
            let y = self.hss[s].solve(&row.cz);
            rhs -= &self.hvs[s] * &y;
            ys = Some((s, y));
        }
        let xv = self.schur.solve(&rhs);
        for s in 0..self.hss.len() {
            let o = self.block(s);
            let mut xs = -(&self.w[s] * &xv);
            if let Some((t, y)) = &ys {
                if *t == s {
                    xs += y;
                }
            }
            out.rows_mut(o, self.nz).copy_from(&xs);
        }
        out.rows_mut(0, self.nv).copy_from(&xv);
        out
    }

    fn row_dot(&self, k: usize, x: &DVector<f64>) -> f64 {
        let row = &self.rows[k];
        let mut v = row.cv.dot(&x.rows(0, self.nv));
        if let Some(s) = row.scenario {
            v += row.cz.dot(&x.rows(self.block(s), self.nz));
        }
        v
    }

    fn violation(&self, k: usize, x: &DVector<f64>) -> f64 {
        (self.row_dot(k, x) - self.rows[k].b) / self.norms[k]
    }

    /// Minimizes `1/2 x'Hx + f'x` over the rows, starting from `warm` (row indices
    /// expected to be active). Returns the minimizer and its active set, or `None` when
    /// the rows are infeasible.
    pub fn solve(&self, f: &DVector<f64>, warm: &[usize]) -> Option<(DVector<f64>, Vec<usize>)> {
        let tol = 1e-10;
        let m = self.rows.len();
        let free = -self.hinv(f);
        let mut x = free.clone();
        let mut active: Vec<usize> = Vec::new();
        let mut u: Vec<f64> = Vec::new();
        let mut ha: Vec<DVector<f64>> = Vec::new();

        // Warm start: equality-constrained minimizer on `warm`, dropping rows with
        // negative multipliers until the start is dual feasible.
        let mut cand: Vec<usize> = warm.iter().copied().filter(|&k| k < m).collect();
        cand.sort_unstable();
        cand.dedup();
        let cand_h: Vec<DVector<f64>> = cand.iter().map(|&k| self.hinv_row(k)).collect();
        let mut keep: Vec<usize> = (0..cand.len()).collect();
        while !keep.is_empty() {
            let q = keep.len();
            let mm = DMatrix::from_fn(q, q, |a, b| self.row_dot(cand[keep[a]], &cand_h[keep[b]]));
            let rhs = DVector::from_fn(q, |a, _| self.row_dot(cand[keep[a]], &free) - self.rows[cand[keep[a]]].b);
            let Some(lam) = mm.lu().solve(&rhs) else {
                keep.clear();
                break;
            };
            let (worst, val) =
                lam.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
            if val < 0.0 {
                keep.remove(worst);
                continue;
            }
            x = free.clone();
            for (a, &kk) in keep.iter().enumerate() {
                x.axpy(-lam[a], &cand_h[kk], 1.0);
                active.push(cand[kk]);
                u.push(lam[a]);
                ha.push(cand_h[kk].clone());
            }
            break;
        }

        for _ in 0..(4 * m + 20) {
            let mut pick = None;
            let mut worst = tol;
            for k in 0..m {
                let v = self.violation(k, &x);
                if v > worst && !active.contains(&k) {
                    worst = v;
                    pick = Some(k);
                }
            }
            let Some(p) = pick else { return Some((x, active)) };
            let hp = self.hinv_row(p);
            let mut up = 0.0;
            let mut added = false;
            for _ in 0..(m + 2) {
                let q = active.len();
                let mut r = DVector::zeros(q);
                if q > 0 {
                    let mm = DMatrix::from_fn(q, q, |a, b| self.row_dot(active[a], &ha[b]));
                    let rhs = DVector::from_fn(q, |a, _| self.row_dot(active[a], &hp));
                    r = mm.lu().solve(&rhs)?;
                }
                let mut z = -hp.clone();
                for j in 0..q {
                    z.axpy(r[j], &ha[j], 1.0);
                }
                let slack = self.rows[p].b - self.row_dot(p, &x);
                let curv = -self.row_dot(p, &z);
                let t2 =
                    if z.norm() <= 1e-13 * (1.0 + x.norm()) || curv <= 0.0 { f64::INFINITY } else { -slack / curv };
                let mut t1 = f64::INFINITY;
                let mut drop = None;
                for j in 0..q {
                    if r[j] > 1e-14 {
                        let t = u[j] / r[j];
                        if t < t1 {
                            t1 = t;
                            drop = Some(j);
                        }
                    }
                }
                let t = t1.min(t2);
                if !t.is_finite() {
                    return None;
                }
                if t2.is_finite() {
                    x.axpy(t, &z, 1.0);
                }
                for j in 0..q {
                    u[j] -= t * r[j];
                }
                up += t;
                if t2 <= t1 {
                    active.push(p);
                    u.push(up);
                    ha.push(hp.clone());
                    added = true;
                    break;
                }
                let k = drop.expect("partial step drops a row");
                active.remove(k);
                u.remove(k);
                ha.remove(k);
            }
            if !added {
                return None;
            }
        }
        None
    }
}
