"""Dense convex QP solver.

Solves::

    minimize    1/2 x' P x + q' x
    subject to  A_eq x  = b_eq
                A_in x <= b_in

with an operator-splitting (ADMM) iteration in the style of OSQP: Ruiz
equilibration, over-relaxation, residual-balanced penalty updates and
infeasibility certificates, followed by an active-set polish that solves the
reduced KKT system to machine precision.  When there are many equalities they
are eliminated once through a null-space basis before iterating.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, lu_factor, lu_solve, qr, solve_triangular
from scipy.optimize import lsq_linear

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
PRIMAL_INFEASIBLE = "primal_infeasible"
DUAL_INFEASIBLE = "dual_infeasible"

_INF = np.inf


@dataclass
class QpProblem:
    hessian: np.ndarray
    linear: np.ndarray
    eq_mat: np.ndarray = None
    eq_rhs: np.ndarray = None
    ineq_mat: np.ndarray = None
    ineq_rhs: np.ndarray = None
    constant: float = 0.0

    def __post_init__(self):
        self.hessian = np.asarray(self.hessian, dtype=float)
        self.linear = np.asarray(self.linear, dtype=float).reshape(-1)
        n = self.linear.size
        if self.hessian.shape != (n, n):
            raise ValueError(f"hessian must be {n}x{n}, got {self.hessian.shape}")
        scale = max(1.0, np.abs(self.hessian).max(initial=0.0))
        if np.abs(self.hessian - self.hessian.T).max(initial=0.0) > 1e-12 * scale:
            raise ValueError("hessian must be symmetric")
        for mat, rhs in (("eq_mat", "eq_rhs"), ("ineq_mat", "ineq_rhs")):
            a = getattr(self, mat)
            b = getattr(self, rhs)
            a = np.zeros((0, n)) if a is None else np.asarray(a, dtype=float)
            if not (a.ndim == 2 and a.shape[1] == n):
                a = np.zeros((0, n)) if a.size == 0 else a.reshape(-1, n)
            b = np.zeros(0) if b is None else np.asarray(b, dtype=float).reshape(-1)
            if a.shape[0] != b.size:
                raise ValueError(f"{mat} has {a.shape[0]} rows but {rhs} has {b.size}")
            setattr(self, mat, a)
            setattr(self, rhs, b)

    @property
    def n(self):
        return self.linear.size

    def objective(self, x):
        return float(0.5 * x @ self.hessian @ x + self.linear @ x + self.constant)


@dataclass
class QpSettings:
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    eps_prim_inf: float = 1e-4
    eps_dual_inf: float = 1e-4
    max_iter: int = 20000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    scaling_iters: int = 15
    check_interval: int = 10
    adaptive_rho_interval: int = 50
    polish: bool = True
    polish_delta: float = 1e-9
    polish_refine: int = 10
    kkt_tol: float = 1e-8
    eliminate_equalities: str | bool = "auto"


@dataclass
class QpSolution:
    x: np.ndarray
    eq_duals: np.ndarray
    ineq_duals: np.ndarray
    status: str
    primal_residual: float = _INF
    dual_residual: float = _INF
    complementarity: float = _INF
    objective: float = _INF
    iterations: int = 0
    polished: bool = False
    info: dict = field(default_factory=dict)


def kkt_residuals(p: QpProblem, x, y_eq, y_in):
    """Primal, dual and complementarity infinity-norm residuals."""
    r_eq = p.eq_mat @ x - p.eq_rhs
    r_in = p.ineq_mat @ x - p.ineq_rhs
    primal = max(np.abs(r_eq).max(initial=0.0), np.maximum(r_in, 0.0).max(initial=0.0))
    grad = p.hessian @ x + p.linear + p.eq_mat.T @ y_eq + p.ineq_mat.T @ y_in
    dual = np.abs(grad).max(initial=0.0)
    comp = np.abs(y_in * r_in).max(initial=0.0)
    return primal, dual, comp


def _meets_contract(p, x, y_eq, y_in, tol):
    primal, dual, comp = kkt_residuals(p, x, y_eq, y_in)
    rhs = max(np.abs(p.eq_rhs).max(initial=0.0), np.abs(p.ineq_rhs).max(initial=0.0))
    ok = (
        primal <= tol * (1.0 + rhs)
        and dual <= tol * (1.0 + np.abs(p.linear).max(initial=0.0))
        and y_in.min(initial=0.0) >= -1e-10
        and comp <= tol
    )
    return ok, (primal, dual, comp)


def _ruiz(P, q, A, iters):
    n, m = P.shape[0], A.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    c = 1.0
    P = P.copy()
    q = q.copy()
    A = A.copy()

    def _limit(v):
        v = np.where(v < 1e-4, 1.0, v)
        return np.minimum(v, 1e4)

    for _ in range(iters):
        col = np.maximum(np.abs(P).max(axis=0, initial=0.0), np.abs(A).max(axis=0, initial=0.0))
        d = 1.0 / np.sqrt(_limit(col))
        e = 1.0 / np.sqrt(_limit(np.abs(A).max(axis=1, initial=0.0))) if m else E[:0]
        P = d[:, None] * P * d[None, :]
        q = d * q
        A = e[:, None] * A * d[None, :]
        D *= d
        E *= e
        mean_col = np.abs(P).max(axis=0, initial=0.0).mean() if n else 0.0
        gamma = 1.0 / _limit(np.array([max(mean_col, np.abs(q).max(initial=0.0))]))[0]
        P *= gamma
        q *= gamma
        c *= gamma
    return P, q, A, D, E, c


class _Admm:
    """ADMM on ``l <= A x <= u`` in scaled coordinates."""

    def __init__(self, P, q, A, l, u, settings: QpSettings):
        self.s = settings
        self.P0, self.q0, self.A0, self.l0, self.u0 = P, q, A, l, u
        self.P, self.q, self.A, self.D, self.E, self.c = _ruiz(P, q, A, settings.scaling_iters)
        self.l = np.where(np.isfinite(l), self.E * l, l)
        self.u = np.where(np.isfinite(u), self.E * u, u)
        self.n, self.m = self.P.shape[0], self.A.shape[0]
        self.is_eq = np.isfinite(self.l) & np.isfinite(self.u) & (np.abs(self.u - self.l) < 1e-12)
        self.free = ~np.isfinite(self.l) & ~np.isfinite(self.u)
        self._set_rho(settings.rho)

    def _set_rho(self, rho):
        self.rho = float(np.clip(rho, 1e-6, 1e6))
        rv = np.full(self.m, self.rho)
        rv[self.is_eq] *= 1e3
        rv[self.free] = 1e-6
        self.rho_vec = rv
        M = self.P + self.s.sigma * np.eye(self.n) + self.A.T @ (rv[:, None] * self.A)
        self.factor = cho_factor(M)

    def unscale(self, x, z, y):
        return self.D * x, z / self.E if self.m else z, self.E * y / self.c if self.m else y

    def residuals(self, x, z, y):
        xs, zs, ys = self.unscale(x, z, y)
        ax = self.A0 @ xs
        px = self.P0 @ xs
        aty = self.A0.T @ ys
        r_prim = np.abs(ax - zs).max(initial=0.0)
        r_dual = np.abs(px + self.q0 + aty).max(initial=0.0)
        e_prim = self.s.eps_abs + self.s.eps_rel * max(
            np.abs(ax).max(initial=0.0), np.abs(zs).max(initial=0.0)
        )
        e_dual = self.s.eps_abs + self.s.eps_rel * max(
            np.abs(px).max(initial=0.0), np.abs(aty).max(initial=0.0),
            np.abs(self.q0).max(initial=0.0),
        )
        return r_prim, r_dual, e_prim, e_dual

    def _primal_infeasible(self, dy):
        dy = self.E * dy
        norm = np.abs(dy).max(initial=0.0)
        if norm < 1e-30:
            return False
        eps = self.s.eps_prim_inf * norm
        if np.abs(self.A0.T @ dy).max(initial=0.0) > eps:
            return False
        pos, neg = np.maximum(dy, 0.0), np.minimum(dy, 0.0)
        if np.any((pos > eps) & ~np.isfinite(self.u0)) or np.any(
            (neg < -eps) & ~np.isfinite(self.l0)
        ):
            return False
        u = np.where(np.isfinite(self.u0), self.u0, 0.0)
        l = np.where(np.isfinite(self.l0), self.l0, 0.0)
        return float(u @ pos + l @ neg) < -eps

    def _dual_infeasible(self, dx):
        dx = self.D * dx
        norm = np.abs(dx).max(initial=0.0)
        if norm < 1e-30:
            return False
        eps = self.s.eps_dual_inf * norm
        if np.abs(self.P0 @ dx).max(initial=0.0) > eps or self.q0 @ dx > -eps:
            return False
        adx = self.A0 @ dx
        lo_ok = np.where(np.isfinite(self.l0), adx >= -eps, True)
        hi_ok = np.where(np.isfinite(self.u0), adx <= eps, True)
        return bool(np.all(lo_ok & hi_ok))

    def run(self, x, z, y, max_iter, eps_scale=1.0):
        s = self.s
        saved = (s.eps_abs, s.eps_rel)
        s.eps_abs, s.eps_rel = s.eps_abs * eps_scale, s.eps_rel * eps_scale
        try:
            status = MAX_ITER
            it = 0
            y_start = y
            for it in range(1, max_iter + 1):
                x_prev, y_prev = x, y
                rhs = s.sigma * x - self.q + self.A.T @ (self.rho_vec * z - y)
                x_t = cho_solve(self.factor, rhs)
                z_t = self.A @ x_t
                x = s.alpha * x_t + (1.0 - s.alpha) * x
                z_relax = s.alpha * z_t + (1.0 - s.alpha) * z
                z_new = np.clip(z_relax + y / self.rho_vec, self.l, self.u)
                y = y + self.rho_vec * (z_relax - z_new)
                z = z_new
                if it % s.check_interval == 0 or it == max_iter:
                    r_prim, r_dual, e_prim, e_dual = self.residuals(x, z, y)
                    if r_prim <= e_prim and r_dual <= e_dual:
                        status = OPTIMAL
                        break
                    # one-step and accumulated dual steps are both valid certificates
                    if self._primal_infeasible(y - y_prev) or self._primal_infeasible(y - y_start):
                        status = PRIMAL_INFEASIBLE
                        break
                    if self._dual_infeasible(x - x_prev):
                        status = DUAL_INFEASIBLE
                        break
                if it % s.adaptive_rho_interval == 0 and self.m:
                    self._adapt_rho(x, z, y)
            return x, z, y, status, it
        finally:
            s.eps_abs, s.eps_rel = saved

    def _adapt_rho(self, x, z, y):
        ax = self.A @ x
        prim = np.abs(ax - z).max(initial=0.0) / max(
            np.abs(ax).max(initial=0.0), np.abs(z).max(initial=0.0), 1e-30
        )
        px = self.P @ x
        aty = self.A.T @ y
        dual = np.abs(px + self.q + aty).max(initial=0.0) / max(
            np.abs(px).max(initial=0.0), np.abs(aty).max(initial=0.0),
            np.abs(self.q).max(initial=0.0), 1e-30,
        )
        new = self.rho * np.sqrt(prim / max(dual, 1e-30))
        if new > 5.0 * self.rho or new < 0.2 * self.rho:
            self._set_rho(new)

    def polish(self, x, z, y):
        """Solve the equality-constrained KKT system on the guessed active set."""
        s = self.s
        active = self.is_eq | (self.u - z < y) | (z - self.l < -y)
        active &= ~self.free
        A_act = self.A[active]
        b_act = np.where(y[active] >= 0, self.u[active], self.l[active])
        b_act = np.where(self.is_eq[active], self.u[active], b_act)
        n, k = self.n, int(active.sum())
        delta = s.polish_delta
        K = np.zeros((n + k, n + k))
        K[:n, :n] = self.P
        K[:n, n:] = A_act.T
        K[n:, :n] = A_act
        K_reg = K.copy()
        K_reg[np.arange(n), np.arange(n)] += delta
        K_reg[np.arange(n, n + k), np.arange(n, n + k)] -= delta
        try:
            lu = lu_factor(K_reg, check_finite=False)
        except (ValueError, np.linalg.LinAlgError):
            return None
        rhs = np.concatenate([-self.q, b_act])
        sol = lu_solve(lu, rhs)
        for _ in range(s.polish_refine):
            res = rhs - K @ sol
            if np.abs(res).max(initial=0.0) < 1e-15 * max(1.0, np.abs(rhs).max(initial=0.0)):
                break
            sol = sol + lu_solve(lu, res)
        if not np.all(np.isfinite(sol)):
            return None
        xp = sol[:n]
        yp = np.zeros(self.m)
        yp[active] = sol[n:]
        lower = active & ~self.is_eq & (y < 0)
        upper = active & ~self.is_eq & (y >= 0)
        if np.any(yp[upper] < 0) or np.any(yp[lower] > 0):
            # degenerate active set: multipliers are not unique, pick sign-feasible ones
            lb = np.where(upper, 0.0, -np.inf)[active]
            ub = np.where(lower, 0.0, np.inf)[active]
            fit = lsq_linear(A_act.T, -(self.P @ xp + self.q), bounds=(lb, ub),
                             method="bvls", tol=1e-14)
            yp[active] = fit.x
        zp = self.A @ xp
        return xp, zp, yp


def _split(p: QpProblem):
    A = np.vstack([p.eq_mat, p.ineq_mat])
    l = np.concatenate([p.eq_rhs, np.full(p.ineq_rhs.size, -_INF)])
    u = np.concatenate([p.eq_rhs, p.ineq_rhs])
    return A, l, u


def _solve_direct(p: QpProblem, s: QpSettings):
    A, l, u = _split(p)
    me = p.eq_rhs.size
    admm = _Admm(p.hessian, p.linear, A, l, u, s)
    x = np.zeros(admm.n)
    z = np.clip(np.zeros(admm.m), admm.l, admm.u)
    y = np.zeros(admm.m)
    total = 0
    eps_scale = 1.0
    best = None
    while total < s.max_iter:
        x, z, y, status, it = admm.run(x, z, y, s.max_iter - total, eps_scale)
        total += it
        if status in (PRIMAL_INFEASIBLE, DUAL_INFEASIBLE):
            return _finish(p, admm, x, z, y, me, status, total, False)
        candidates = [(x, z, y, False)]
        if s.polish:
            pol = admm.polish(x, z, y)
            if pol is not None:
                candidates.insert(0, (*pol, True))
        for cx, cz, cy, polished in candidates:
            sol = _finish(p, admm, cx, cz, cy, me, OPTIMAL, total, polished)
            ok, _ = _meets_contract(p, sol.x, sol.eq_duals, sol.ineq_duals, s.kkt_tol)
            if ok:
                return sol
        best = _finish(p, admm, x, z, y, me, MAX_ITER, total, False)
        if status != OPTIMAL:
            break
        eps_scale *= 0.1
        if eps_scale < 1e-6:
            break
    if best is None:
        best = _finish(p, admm, x, z, y, me, MAX_ITER, total, False)
    return best


def _finish(p, admm, x, z, y, me, status, iters, polished):
    xs, _, ys = admm.unscale(x, z, y)
    y_eq, y_in = ys[:me], ys[me:]
    primal, dual, comp = kkt_residuals(p, xs, y_eq, y_in)
    return QpSolution(
        x=xs, eq_duals=y_eq, ineq_duals=y_in, status=status,
        primal_residual=primal, dual_residual=dual, complementarity=comp,
        objective=p.objective(xs), iterations=iters, polished=polished,
    )


def _null_space(A_eq, b_eq):
    """Particular solution and orthonormal null-space basis of ``A_eq x = b_eq``."""
    n, m = A_eq.shape[1], A_eq.shape[0]
    # unpivoted Householder QR is several times faster; pivot only when rank-deficient
    Q, R = qr(A_eq.T, mode="full")
    diag = np.abs(np.diag(R))
    scale = diag.max(initial=0.0)
    piv = np.arange(m)
    if m > n or diag.min(initial=scale) <= 1e3 * max(A_eq.shape) * np.finfo(float).eps * scale:
        Q, R, piv = qr(A_eq.T, pivoting=True, mode="full")
        diag = np.abs(np.diag(R))
    tol = max(A_eq.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    r = int(np.sum(diag > tol))
    Q1, Z = Q[:, :r], Q[:, r:]
    R1 = R[:r, :r]
    w = solve_triangular(R1, b_eq[piv[:r]], trans="T")
    x_p = Q1 @ w
    return x_p, Z, Q1, R1, piv[:r], n - r


def _solve_eliminated(p: QpProblem, s: QpSettings):
    x_p, Z, Q1, R1, piv, dof = _null_space(p.eq_mat, p.eq_rhs)
    rhs_scale = 1.0 + np.abs(p.eq_rhs).max(initial=0.0)
    if np.abs(p.eq_mat @ x_p - p.eq_rhs).max(initial=0.0) > 1e-9 * rhs_scale:
        n = p.n
        return QpSolution(
            x=x_p, eq_duals=np.zeros(p.eq_rhs.size), ineq_duals=np.zeros(p.ineq_rhs.size),
            status=PRIMAL_INFEASIBLE, objective=p.objective(x_p) if n else 0.0,
        )
    Pz = Z.T @ p.hessian @ Z
    Pz = 0.5 * (Pz + Pz.T)
    qz = Z.T @ (p.hessian @ x_p + p.linear)
    reduced = QpProblem(
        Pz, qz, None, None, p.ineq_mat @ Z, p.ineq_rhs - p.ineq_mat @ x_p
    )
    sub = _solve_direct(reduced, s)
    x = x_p + Z @ sub.x
    y_in = sub.ineq_duals
    y_eq = np.zeros(p.eq_rhs.size)
    if sub.status == OPTIMAL or sub.status == MAX_ITER:
        grad = p.hessian @ x + p.linear + p.ineq_mat.T @ y_in
        # A_eq[piv]' = Q1 R1, so the least-squares multipliers come from one triangular solve
        y_eq[piv] = solve_triangular(R1, -(Q1.T @ grad))
    status = sub.status
    primal, dual, comp = kkt_residuals(p, x, y_eq, y_in)
    sol = QpSolution(
        x=x, eq_duals=y_eq, ineq_duals=y_in, status=status,
        primal_residual=primal, dual_residual=dual, complementarity=comp,
        objective=p.objective(x), iterations=sub.iterations, polished=sub.polished,
        info={"eliminated": True, "reduced_dim": dof},
    )
    if status == OPTIMAL:
        ok, _ = _meets_contract(p, x, y_eq, y_in, s.kkt_tol)
        if not ok:
            sol.status = MAX_ITER
    return sol


def qp_solve(problem: QpProblem, settings: QpSettings | None = None):
    """Solve a convex QP; never raises on infeasibility, reports it via ``status``.

    An ``optimal`` status guarantees the KKT residual contract::

        primal <= kkt_tol * (1 + |rhs|_inf),  dual <= kkt_tol * (1 + |q|_inf),
        ineq duals >= -1e-10,                 |y_i (a_i x - b_i)| <= kkt_tol
    """
    s = QpSettings() if settings is None else QpSettings(**vars(settings))
    p = problem
    try:
        cho_factor(p.hessian + 1e-10 * np.eye(p.n)) if p.n else None
    except np.linalg.LinAlgError:
        raise ValueError("hessian is not positive semi-definite") from None
    me = p.eq_rhs.size
    eliminate = s.eliminate_equalities
    if eliminate == "auto":
        eliminate = me > 0 and me >= 0.25 * p.n
    if eliminate and me > 0:
        return _solve_eliminated(p, s)
    return _solve_direct(p, s)
