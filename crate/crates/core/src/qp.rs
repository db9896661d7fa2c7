//! Dense convex quadratic programming by operator splitting.
//!
//! Problems have the form
//!
//! ```text
//!     minimize    1/2 x' H x + f' x
//!     subject to  A_in x <= b_in
//!                 A_eq x  = b_eq
//!                 lo <= x <= hi        (optional)
//! ```
//!
//! and are solved with an ADMM splitting between the quadratic objective and the
//! indicator of the box `l <= A x <= u` built from all constraint rows. The linear
//! system of each iteration is reduced to the `d x d` matrix `H + sigma I + A' diag(rho) A`,
//! which suits the scenario programs in this crate: few decision variables and
//! thousands of constraint rows.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_SCALE: f64 = 1e3;
const SCALING_MIN: f64 = 1e-4;
const SCALING_MAX: f64 = 1e4;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub bounds: Option<(DVector<f64>, DVector<f64>)>,
}

impl QuadraticProgram {
    /// Unconstrained program `min 1/2 x'Hx + f'x`.
    pub fn new(hessian: DMatrix<f64>, linear: DVector<f64>) -> Self {
        let d = linear.len();
        Self {
            hessian,
            linear,
            a_in: DMatrix::zeros(0, d),
            b_in: DVector::zeros(0),
            a_eq: DMatrix::zeros(0, d),
            b_eq: DVector::zeros(0),
            bounds: None,
        }
    }

    pub fn with_inequalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_in = a;
        self.b_in = b;
        self
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_bounds(mut self, lo: DVector<f64>, hi: DVector<f64>) -> Self {
        self.bounds = Some((lo, hi));
        self
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let mismatch = |what: &str| Err(Error::DimensionMismatch(format!("quadratic program: {what}")));
        if self.hessian.nrows() != d || self.hessian.ncols() != d {
            return mismatch("hessian");
        }
        if self.a_in.ncols() != d || self.a_in.nrows() != self.b_in.len() {
            return mismatch("inequality block");
        }
        if self.a_eq.ncols() != d || self.a_eq.nrows() != self.b_eq.len() {
            return mismatch("equality block");
        }
        if let Some((lo, hi)) = &self.bounds {
            if lo.len() != d || hi.len() != d {
                return mismatch("bounds");
            }
        }
        let asym = (&self.hessian - self.hessian.transpose()).amax();
        if asym > 1e-10 * (1.0 + self.hessian.amax()) {
            return Err(Error::InvalidModel(format!("hessian not symmetric (asymmetry {asym:e})")));
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x)
    }

    /// Largest constraint violation at `x` (0 when feasible).
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        if self.a_in.nrows() > 0 {
            let r = &self.a_in * x - &self.b_in;
            worst = worst.max(r.max());
        }
        if self.a_eq.nrows() > 0 {
            let r = &self.a_eq * x - &self.b_eq;
            worst = worst.max(r.amax());
        }
        if let Some((lo, hi)) = &self.bounds {
            for i in 0..x.len() {
                worst = worst.max(lo[i] - x[i]).max(x[i] - hi[i]);
            }
        }
        worst
    }

    fn stacked(&self) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
        let d = self.dim();
        let n_in = self.a_in.nrows();
        let n_eq = self.a_eq.nrows();
        let n_bd = if self.bounds.is_some() { d } else { 0 };
        let rows = n_in + n_eq + n_bd;
        let mut a = DMatrix::zeros(rows, d);
        let mut l = DVector::from_element(rows, f64::NEG_INFINITY);
        let mut u = DVector::from_element(rows, f64::INFINITY);
        a.rows_mut(0, n_in).copy_from(&self.a_in);
        u.rows_mut(0, n_in).copy_from(&self.b_in);
        a.rows_mut(n_in, n_eq).copy_from(&self.a_eq);
        l.rows_mut(n_in, n_eq).copy_from(&self.b_eq);
        u.rows_mut(n_in, n_eq).copy_from(&self.b_eq);
        if let Some((lo, hi)) = &self.bounds {
            for i in 0..d {
                a[(n_in + n_eq + i, i)] = 1.0;
                l[n_in + n_eq + i] = lo[i];
                u[n_in + n_eq + i] = hi[i];
            }
        }
        (a, l, u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub status: QpStatus,
    pub x: DVector<f64>,
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    /// Multipliers of `A_in x <= b_in` (nonnegative at optimum).
    pub ineq_multipliers: DVector<f64>,
    pub eq_multipliers: DVector<f64>,
    /// Signed multipliers of the variable bounds (negative: lower bound active).
    pub bound_multipliers: DVector<f64>,
    /// Norm ratio of the infeasibility certificate when one was found.
    pub certificate: Option<f64>,
    pub polished: bool,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
    pub relaxation: f64,
    pub rho: f64,
    pub sigma: f64,
    pub adaptive_rho: bool,
    pub infeasibility_tol: f64,
    pub scaling_iters: usize,
    pub polish: bool,
    pub check_interval: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            abs_tol: 1e-6,
            rel_tol: 1e-6,
            max_iter: 20_000,
            relaxation: 1.6,
            rho: 0.1,
            sigma: 1e-6,
            adaptive_rho: true,
            infeasibility_tol: 1e-8,
            scaling_iters: 10,
            polish: true,
            check_interval: 5,
        }
    }
}

/// Solves `qp` with the default settings.
pub fn solve_default(qp: &QuadraticProgram) -> Result<QpSolution> {
    solve(qp, &QpSettings::default())
}

/// Ruiz-equilibrated problem data.
struct Scaled {
    p: DMatrix<f64>,
    q: DVector<f64>,
    a: DMatrix<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
}

fn equilibrate(
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    a: &DMatrix<f64>,
    l: &DVector<f64>,
    u: &DVector<f64>,
    iters: usize,
) -> Scaled {
    let n = q.len();
    let m = a.nrows();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let mut ps = p.clone();
    let mut as_ = a.clone();
    let clip = |v: f64| if v < 1e-12 { 1.0 } else { (1.0 / v.sqrt()).clamp(SCALING_MIN, SCALING_MAX) };
    for _ in 0..iters {
        let mut dx = DVector::zeros(n);
        for j in 0..n {
            let pn = ps.column(j).amax();
            let an = if m > 0 { as_.column(j).amax() } else { 0.0 };
            dx[j] = clip(pn.max(an));
        }
        let mut dz = DVector::zeros(m);
        for i in 0..m {
            dz[i] = clip(as_.row(i).amax());
        }
        for j in 0..n {
            for i in 0..n {
                ps[(i, j)] *= dx[i] * dx[j];
            }
            for i in 0..m {
                as_[(i, j)] *= dz[i] * dx[j];
            }
        }
        d.component_mul_assign(&dx);
        e.component_mul_assign(&dz);
    }
    let mut qs = q.component_mul(&d);
    let mean_p = if n > 0 { (0..n).map(|j| ps.column(j).amax()).sum::<f64>() / n as f64 } else { 0.0 };
    let denom = mean_p.max(qs.amax());
    let c = if denom < 1e-12 { 1.0 } else { (1.0 / denom).clamp(SCALING_MIN, SCALING_MAX) };
    ps *= c;
    qs *= c;
    let ls = l.component_mul(&e);
    let us = u.component_mul(&e);
    Scaled { p: ps, q: qs, a: as_, l: ls, u: us, d, e, c }
}

fn row_rho(l: &DVector<f64>, u: &DVector<f64>, rho: f64) -> DVector<f64> {
    DVector::from_fn(l.len(), |i, _| {
        if l[i] == f64::NEG_INFINITY && u[i] == f64::INFINITY {
            RHO_MIN
        } else if (u[i] - l[i]).abs() < 1e-12 {
            (RHO_EQ_SCALE * rho).min(RHO_MAX)
        } else {
            rho
        }
    })
}

fn factor(p: &DMatrix<f64>, a: &DMatrix<f64>, rho: &DVector<f64>, sigma: f64) -> Result<Cholesky<f64, Dyn>> {
    let n = p.nrows();
    let mut k = p.clone();
    for i in 0..n {
        k[(i, i)] += sigma;
    }
    if a.nrows() > 0 {
        let mut ra = a.clone();
        for i in 0..a.nrows() {
            let r = rho[i];
            ra.row_mut(i).scale_mut(r);
        }
        k += a.tr_mul(&ra);
    }
    Cholesky::new(k).ok_or_else(|| Error::Numerical("reduced KKT matrix is not positive definite".into()))
}

struct Residuals {
    prim: f64,
    dual: f64,
    prim_scale: f64,
    dual_scale: f64,
}

fn residuals(s: &Scaled, x: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>) -> Residuals {
    // Unscaled quantities: A x = E^-1 Abar xbar, z = E^-1 zbar, P x = D^-1 Pbar xbar / c, ...
    let ax = &s.a * x;
    let mut prim: f64 = 0.0;
    let mut ax_n: f64 = 0.0;
    let mut z_n: f64 = 0.0;
    for i in 0..ax.len() {
        let inv = 1.0 / s.e[i];
        prim = prim.max(((ax[i] - z[i]) * inv).abs());
        ax_n = ax_n.max((ax[i] * inv).abs());
        z_n = z_n.max((z[i] * inv).abs());
    }
    let px = &s.p * x;
    let aty = s.a.tr_mul(y);
    let mut dual: f64 = 0.0;
    let mut px_n: f64 = 0.0;
    let mut aty_n: f64 = 0.0;
    let mut q_n: f64 = 0.0;
    for j in 0..x.len() {
        let inv = 1.0 / (s.d[j] * s.c);
        dual = dual.max(((px[j] + s.q[j] + aty[j]) * inv).abs());
        px_n = px_n.max((px[j] * inv).abs());
        aty_n = aty_n.max((aty[j] * inv).abs());
        q_n = q_n.max((s.q[j] * inv).abs());
    }
    Residuals { prim, dual, prim_scale: ax_n.max(z_n), dual_scale: px_n.max(aty_n).max(q_n) }
}

fn primal_infeasible(s: &Scaled, dy: &DVector<f64>, tol: f64) -> Option<f64> {
    let mut norm_dy: f64 = 0.0;
    for i in 0..dy.len() {
        norm_dy = norm_dy.max((s.e[i] * dy[i]).abs());
    }
    if norm_dy < 1e-30 {
        return None;
    }
    let thresh = tol * norm_dy;
    let atdy = s.a.tr_mul(dy);
    let mut atdy_n: f64 = 0.0;
    for j in 0..atdy.len() {
        atdy_n = atdy_n.max((atdy[j] / s.d[j]).abs());
    }
    if atdy_n > thresh {
        return None;
    }
    let mut support = 0.0;
    for i in 0..dy.len() {
        let v = dy[i];
        if v > 0.0 {
            if s.u[i].is_infinite() {
                return None;
            }
            support += s.u[i] * v;
        } else if v < 0.0 {
            if s.l[i].is_infinite() {
                return None;
            }
            support += s.l[i] * v;
        }
    }
    if support < -thresh {
        Some(atdy_n / norm_dy)
    } else {
        None
    }
}

fn dual_infeasible(s: &Scaled, dx: &DVector<f64>, tol: f64) -> bool {
    let mut norm_dx: f64 = 0.0;
    for j in 0..dx.len() {
        norm_dx = norm_dx.max((s.d[j] * dx[j]).abs());
    }
    if norm_dx < 1e-30 {
        return false;
    }
    let thresh = tol * norm_dx;
    let pdx = &s.p * dx;
    for j in 0..dx.len() {
        if (pdx[j] / s.d[j]).abs() > thresh * s.c {
            return false;
        }
    }
    if s.q.dot(dx) >= -thresh * s.c {
        return false;
    }
    let adx = &s.a * dx;
    for i in 0..adx.len() {
        let v = adx[i] / s.e[i];
        if s.u[i].is_finite() && v > thresh {
            return false;
        }
        if s.l[i].is_finite() && v < -thresh {
            return false;
        }
    }
    true
}

/// Solves the program. Errors only for malformed input; solver outcomes are reported
/// through [`QpSolution::status`].
pub fn solve(qp: &QuadraticProgram, settings: &QpSettings) -> Result<QpSolution> {
    qp.validate()?;
    let (a_raw, l_raw, u_raw) = qp.stacked();
    for i in 0..l_raw.len() {
        if l_raw[i] > u_raw[i] {
            // Contradictory bounds on a single row; report as infeasible right away.
            return Ok(infeasible_solution(qp, 0, Some(f64::INFINITY)));
        }
    }
    let s = equilibrate(&qp.hessian, &qp.linear, &a_raw, &l_raw, &u_raw, settings.scaling_iters);
    let n = qp.dim();
    let m = s.a.nrows();

    let mut rho_scalar = settings.rho;
    let mut rho = row_rho(&s.l, &s.u, rho_scalar);
    let mut chol = factor(&s.p, &s.a, &rho, settings.sigma)?;

    let mut x = DVector::zeros(n);
    let mut z = DVector::zeros(m);
    let mut y = DVector::zeros(m);
    let alpha = settings.relaxation;
    let mut status = QpStatus::MaxIterations;
    let mut certificate = None;
    let mut iter = 0;
    let check = settings.check_interval.max(1);

    while iter < settings.max_iter {
        iter += 1;
        let x_prev = x.clone();
        let y_prev = y.clone();

        let mut rhs = &x * settings.sigma - &s.q;
        if m > 0 {
            let t = rho.component_mul(&z) - &y;
            rhs += s.a.tr_mul(&t);
        }
        let x_tilde = chol.solve(&rhs);
        let z_tilde = &s.a * &x_tilde;
        x = &x_tilde * alpha + &x_prev * (1.0 - alpha);
        for i in 0..m {
            let zr = alpha * z_tilde[i] + (1.0 - alpha) * z[i];
            let zn = (zr + y[i] / rho[i]).clamp(s.l[i], s.u[i]);
            y[i] += rho[i] * (zr - zn);
            z[i] = zn;
        }

        if iter % check != 0 && iter != settings.max_iter {
            continue;
        }
        let r = residuals(&s, &x, &z, &y);
        let eps_p = settings.abs_tol + settings.rel_tol * r.prim_scale;
        let eps_d = settings.abs_tol + settings.rel_tol * r.dual_scale;
        if r.prim <= eps_p && r.dual <= eps_d {
            status = QpStatus::Optimal;
            break;
        }
        let dy = &y - &y_prev;
        if let Some(cert) = primal_infeasible(&s, &dy, settings.infeasibility_tol) {
            status = QpStatus::Infeasible;
            certificate = Some(cert);
            break;
        }
        let dx = &x - &x_prev;
        if dual_infeasible(&s, &dx, settings.infeasibility_tol) {
            status = QpStatus::Unbounded;
            break;
        }
        if settings.adaptive_rho && iter % (5 * check) == 0 && m > 0 {
            let ax = &s.a * &x;
            let px = &s.p * &x;
            let aty = s.a.tr_mul(&y);
            let pn = (&ax - &z).amax() / ax.amax().max(z.amax()).max(1e-30);
            let dn = (&px + &s.q + &aty).amax() / px.amax().max(aty.amax()).max(s.q.amax()).max(1e-30);
            let ratio = (pn / dn.max(1e-30)).sqrt();
            let candidate = (rho_scalar * ratio).clamp(RHO_MIN, RHO_MAX);
            if candidate > 5.0 * rho_scalar || candidate < 0.2 * rho_scalar {
                rho_scalar = candidate;
                rho = row_rho(&s.l, &s.u, rho_scalar);
                chol = factor(&s.p, &s.a, &rho, settings.sigma)?;
            }
        }
    }

    if status == QpStatus::Infeasible || status == QpStatus::Unbounded {
        let mut sol = infeasible_solution(qp, iter, certificate);
        sol.status = status;
        return Ok(sol);
    }

    // Unscale.
    let x_out = x.component_mul(&s.d);
    let y_out = DVector::from_fn(m, |i, _| s.e[i] * y[i] / s.c);
    let r = residuals(&s, &x, &z, &y);
    let mut sol = assemble(qp, status, x_out, y_out, r.prim, r.dual, iter, None);

    if settings.polish && status == QpStatus::Optimal {
        if let Some(polished) = polish(qp, &a_raw, &l_raw, &u_raw, &sol, &s, &z, &y) {
            if polished.primal_residual <= sol.primal_residual.max(settings.abs_tol)
                && polished.dual_residual <= sol.dual_residual.max(settings.abs_tol)
            {
                sol = polished;
            }
        }
    }
    Ok(sol)
}

fn infeasible_solution(qp: &QuadraticProgram, iter: usize, certificate: Option<f64>) -> QpSolution {
    let d = qp.dim();
    QpSolution {
        status: QpStatus::Infeasible,
        x: DVector::zeros(d),
        objective: f64::INFINITY,
        primal_residual: f64::INFINITY,
        dual_residual: f64::INFINITY,
        iterations: iter,
        ineq_multipliers: DVector::zeros(qp.a_in.nrows()),
        eq_multipliers: DVector::zeros(qp.a_eq.nrows()),
        bound_multipliers: DVector::zeros(if qp.bounds.is_some() { d } else { 0 }),
        certificate,
        polished: false,
    }
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    qp: &QuadraticProgram,
    status: QpStatus,
    x: DVector<f64>,
    y: DVector<f64>,
    prim: f64,
    dual: f64,
    iterations: usize,
    polished: Option<bool>,
) -> QpSolution {
    let n_in = qp.a_in.nrows();
    let n_eq = qp.a_eq.nrows();
    let n_bd = y.len() - n_in - n_eq;
    QpSolution {
        status,
        objective: qp.objective(&x),
        x,
        primal_residual: prim,
        dual_residual: dual,
        iterations,
        ineq_multipliers: y.rows(0, n_in).into_owned(),
        eq_multipliers: y.rows(n_in, n_eq).into_owned(),
        bound_multipliers: y.rows(n_in + n_eq, n_bd).into_owned(),
        certificate: None,
        polished: polished.unwrap_or(false),
    }
}

/// Re-solves the equality-constrained problem on the guessed active set.
#[allow(clippy::too_many_arguments)]
fn polish(
    qp: &QuadraticProgram,
    a: &DMatrix<f64>,
    l: &DVector<f64>,
    u: &DVector<f64>,
    sol: &QpSolution,
    s: &Scaled,
    z: &DVector<f64>,
    y: &DVector<f64>,
) -> Option<QpSolution> {
    let n = qp.dim();
    let m = a.nrows();
    let mut active = Vec::new();
    let mut target = Vec::new();
    for i in 0..m {
        let lower = s.l[i].is_finite() && z[i] - s.l[i] < -y[i];
        let upper = s.u[i].is_finite() && s.u[i] - z[i] < y[i];
        if (u[i] - l[i]).abs() < 1e-12 {
            active.push(i);
            target.push(u[i]);
        } else if lower {
            active.push(i);
            target.push(l[i]);
        } else if upper {
            active.push(i);
            target.push(u[i]);
        }
    }
    let k = active.len();
    let delta = 1e-9;
    let dim = n + k;
    let mut kkt = DMatrix::zeros(dim, dim);
    let mut exact = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&qp.hessian);
    exact.view_mut((0, 0), (n, n)).copy_from(&qp.hessian);
    for i in 0..n {
        kkt[(i, i)] += delta;
    }
    for (r, &i) in active.iter().enumerate() {
        for j in 0..n {
            kkt[(n + r, j)] = a[(i, j)];
            kkt[(j, n + r)] = a[(i, j)];
            exact[(n + r, j)] = a[(i, j)];
            exact[(j, n + r)] = a[(i, j)];
        }
        kkt[(n + r, n + r)] = -delta;
    }
    let mut rhs = DVector::zeros(dim);
    for j in 0..n {
        rhs[j] = -qp.linear[j];
    }
    for (r, t) in target.iter().enumerate() {
        rhs[n + r] = *t;
    }
    let lu = kkt.lu();
    let mut sol_vec = lu.solve(&rhs)?;
    for _ in 0..5 {
        let res = &rhs - &exact * &sol_vec;
        let corr = lu.solve(&res)?;
        sol_vec += corr;
    }
    if sol_vec.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let x = sol_vec.rows(0, n).into_owned();
    let mut yfull = DVector::zeros(m);
    for (r, &i) in active.iter().enumerate() {
        yfull[i] = sol_vec[n + r];
    }
    // Multiplier signs must match the side of the active bound.
    for (r, &i) in active.iter().enumerate() {
        let yi = yfull[i];
        let eq = (u[i] - l[i]).abs() < 1e-12;
        if !eq {
            let is_upper = target[r] == u[i];
            if (is_upper && yi < -1e-9) || (!is_upper && yi > 1e-9) {
                return None;
            }
        }
    }
    let ax = a * &x;
    let mut prim: f64 = 0.0;
    for i in 0..m {
        prim = prim.max(l[i] - ax[i]).max(ax[i] - u[i]);
    }
    let dual = (&qp.hessian * &x + &qp.linear + a.tr_mul(&yfull)).amax();
    Some(assemble(qp, QpStatus::Optimal, x, yfull, prim.max(0.0), dual, sol.iterations, Some(true)))
}

/// Dual active-set solution of `min 1/2 x'Hx + f'x s.t. A x <= b` for a strictly convex
/// program whose Hessian is already factored. Meant for small programs solved many
/// times; returns `None` when the rows are infeasible or the active set cycles.
pub fn solve_active_set(
    chol: &Cholesky<f64, Dyn>,
    f: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Option<DVector<f64>> {
    let m = a.nrows();
    let mut x = -chol.solve(f);
    if m == 0 {
        return Some(x);
    }
    let norms: Vec<f64> = (0..m).map(|i| a.row(i).norm().max(1e-300)).collect();
    // Columns H^-1 a_i'.
    let ha = chol.solve(&a.transpose());
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let tol = 1e-11;
    for _ in 0..(4 * m + 20) {
        let ax = a * &x;
        let mut pick = None;
        let mut worst = tol;
        for i in 0..m {
            let v = (ax[i] - b[i]) / norms[i];
            if v > worst && !active.contains(&i) {
                worst = v;
                pick = Some(i);
            }
        }
        let Some(p) = pick else { return Some(x) };
        let mut up = 0.0;
        let mut added = false;
        for _ in 0..(m + 2) {
            let q = active.len();
            let mut r = DVector::zeros(q);
            if q > 0 {
                let mm = DMatrix::from_fn(q, q, |j, k| a.row(active[j]).dot(&ha.column(active[k]).transpose()));
                let rhs = DVector::from_fn(q, |j, _| a.row(active[j]).dot(&ha.column(p).transpose()));
                r = mm.lu().solve(&rhs)?;
            }
            // Step in the direction that decreases a_p x.
            let mut z = -ha.column(p).into_owned();
            for (j, &k) in active.iter().enumerate() {
                z += ha.column(k) * r[j];
            }
            let slack = b[p] - a.row(p).dot(&x.transpose());
            let curv = -a.row(p).dot(&z.transpose());
            let t2 = if z.norm() <= 1e-13 * (1.0 + x.norm()) || curv <= 0.0 { f64::INFINITY } else { -slack / curv };
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
                x += &z * t;
            }
            for j in 0..q {
                u[j] -= t * r[j];
            }
            up += t;
            if t2 <= t1 {
                active.push(p);
                u.push(up);
                added = true;
                break;
            }
            let k = drop.expect("partial step drops a row");
            active.remove(k);
            u.remove(k);
        }
        if !added {
            return None;
        }
    }
    None
}
