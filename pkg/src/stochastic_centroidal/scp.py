"""Sequential convex programming for (chance-constrained) centroidal planning.

Each iteration linearizes the centroidal dynamics about the current iterate,
tightens the friction-pyramid and reachability rows by Gaussian back-offs
(stochastic mode), and solves one dense QP.  The angular-momentum trust
region is enforced through an exact L1 penalty ``gamma * sum_k t_k``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import qp as qpmod
from .gait import ContactPlan, ReferenceTrajectory
from .model import ANG, STATE_DIM, RobotParams, jacobian_arrays, second_order_terms, step_arrays
from .model import DynamicsDerivatives
from .uncertainty import (
    FIRST_ORDER,
    ZERO_ORDER,
    CovarianceTrajectory,
    FeedbackPolicy,
    UncertaintyModel,
    allocate_risk,
    gaussian_quantile,
    lqr_gains,
    norm_gradient,
    propagate_covariance,
    weighted_norm,
)
from .validation import ValidationError

logger = logging.getLogger(__name__)

NOMINAL = "nominal"
STOCHASTIC = "stochastic"

# local-frame friction pyramid rows a . f_local <= 0, ordered +x, -x, +y, -y
PYRAMID_ROWS = ("px", "nx", "py", "ny")
REACH_ROWS = ("cx+", "cx-", "cy+", "cy-", "cz+", "cz-")


def pyramid_matrix(mu):
    return np.array(
        [[1.0, 0.0, -mu], [-1.0, 0.0, -mu], [0.0, 1.0, -mu], [0.0, -1.0, -mu]]
    )


class ScpError(RuntimeError):
    """A QP inside the loop was not solved; ``status`` is the QP status."""

    def __init__(self, iteration, message, status=None):
        super().__init__(f"SCP iteration {iteration}: {message}")
        self.iteration = iteration
        self.status = status


class InfeasibleBackoffError(ValueError):
    """Some tightened rows have an empty interior; ``rows`` lists ``(step, name)``."""

    def __init__(self, rows):
        head = ", ".join(f"k={k}:{name}" for k, name in rows[:5])
        more = f" (+{len(rows) - 5} more)" if len(rows) > 5 else ""
        super().__init__(f"back-off exceeds the constraint bound at {head}{more}")
        self.rows = rows


@dataclass(frozen=True)
class CostWeights:
    com: np.ndarray = field(default_factory=lambda: np.full(3, 1e4))
    lin_momentum: np.ndarray = field(default_factory=lambda: np.full(3, 1e3))
    ang_momentum: np.ndarray = field(default_factory=lambda: np.full(3, 1e5))
    force: np.ndarray = field(default_factory=lambda: np.array([1e2, 1e0, 1e1]))
    terminal: np.ndarray | None = None  # 9 weights; defaults to the stage weights

    def __post_init__(self):
        for name in ("com", "lin_momentum", "ang_momentum", "force"):
            value = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (3,)).copy()
            if np.any(value < 0) or not np.all(np.isfinite(value)):
                raise ValidationError(name, "weights must be finite and nonnegative")
            object.__setattr__(self, name, value)
        if self.terminal is not None:
            term = np.broadcast_to(np.asarray(self.terminal, dtype=float), (9,)).copy()
            if np.any(term < 0):
                raise ValidationError("terminal", "weights must be nonnegative")
            object.__setattr__(self, "terminal", term)

    @property
    def state(self):
        return np.concatenate([self.com, self.lin_momentum, self.ang_momentum])

    @property
    def terminal_state(self):
        return self.state if self.terminal is None else self.terminal


@dataclass(frozen=True)
class ScpSettings:
    omega0: float = 1.0
    gamma0: float = 1e2
    gamma_growth: float = 2.0
    gamma_max: float = 1e10
    omega_shrink: float = 0.5
    omega_grow: float = 2.0
    omega_max: float = 1e3
    rho_accept: float = 0.25
    rho_good: float = 0.05
    max_iters: int = 50
    tol_z: float = 1e-6
    tol_defect: float = 1e-8
    slack_tol: float = 1e-9
    mode: str = NOMINAL
    backoff_mode: str = ZERO_ORDER
    terminal_constraint: bool = True
    lqr_q: float = 1.0
    lqr_r: float = 10.0
    qp: qpmod.QpSettings = field(default_factory=qpmod.QpSettings)

    def __post_init__(self):
        positive = ("omega0", "gamma0", "max_iters", "tol_z", "tol_defect", "lqr_q", "lqr_r")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValidationError(name, "must be positive")
        if not self.gamma_growth > 1:
            raise ValidationError("gamma_growth", "must be > 1")
        if not 0 < self.omega_shrink < 1:
            raise ValidationError("omega_shrink", "must lie in (0, 1)")
        if not self.omega_grow > 1:
            raise ValidationError("omega_grow", "must be > 1")
        if not 0 < self.rho_good < self.rho_accept < 1:
            raise ValidationError("rho_accept", "need 0 < rho_good < rho_accept < 1")
        if self.mode not in (NOMINAL, STOCHASTIC):
            raise ValidationError("mode", f"unknown mode {self.mode!r}")
        if self.backoff_mode not in (ZERO_ORDER, FIRST_ORDER):
            raise ValidationError("backoff_mode", f"unknown mode {self.backoff_mode!r}")


@dataclass
class ScpIterate:
    """Mean trajectories plus everything needed to audit the last QP.

    ``trust_center`` / ``trust_radius`` are the angular-momentum linearization
    point and radius of the QP that produced these trajectories.
    """

    states: np.ndarray  # (N + 1, 9)
    controls: np.ndarray  # (N, 3 * ee)
    omega: float
    gamma: float
    slacks: np.ndarray | None = None  # (N + 1,)
    covariances: CovarianceTrajectory | None = None
    policy: FeedbackPolicy | None = None
    backoffs_u: np.ndarray | None = None  # (N, ee, 4)
    backoffs_x: np.ndarray | None = None  # (N, ee, 6)
    trust_center: np.ndarray | None = None
    trust_radius: float | None = None
    diagnostics: list = field(default_factory=list)
    converged: bool = False
    n_accepted: int = 0

    def copy_trajectory(self):
        return ScpIterate(self.states.copy(), self.controls.copy(), self.omega, self.gamma)


@dataclass(frozen=True)
class _Layout:
    horizon: int
    control_dim: int

    @property
    def n_states(self):
        return STATE_DIM * (self.horizon + 1)

    @property
    def size(self):
        return self.n_states + self.control_dim * self.horizon + self.horizon + 1

    def s(self, k):
        return slice(STATE_DIM * k, STATE_DIM * (k + 1))

    def v(self, k):
        start = self.n_states + self.control_dim * k
        return slice(start, start + self.control_dim)

    def t(self, k):
        return self.n_states + self.control_dim * self.horizon + k

    def unpack(self, x):
        n, nu = self.horizon, self.control_dim
        states = x[: self.n_states].reshape(n + 1, STATE_DIM)
        controls = x[self.n_states : self.n_states + nu * n].reshape(n, nu)
        slacks = x[self.n_states + nu * n :]
        return states.copy(), controls.copy(), slacks.copy()

    def pack(self, states, controls, slacks=None):
        slacks = np.zeros(self.horizon + 1) if slacks is None else slacks
        return np.concatenate([states.reshape(-1), controls.reshape(-1), slacks])


@dataclass
class _Stochastic:
    policy: FeedbackPolicy
    covariances: CovarianceTrajectory
    backoffs_u: np.ndarray
    backoffs_x: np.ndarray
    grads_u: np.ndarray | None  # (N, ee, 4, nz)
    grads_x: np.ndarray | None  # (N, ee, 6, nz)


class CentroidalProblem:
    """Fixed data of one planning problem: contacts, references, weights."""

    def __init__(self, plan: ContactPlan, refs: ReferenceTrajectory, params: RobotParams,
                 model: UncertaintyModel | None = None, weights: CostWeights | None = None,
                 settings: ScpSettings | None = None, policy: FeedbackPolicy | None = None):
        self.plan = plan
        self.refs = refs
        self.params = params
        self.model = model
        self.weights = CostWeights() if weights is None else weights
        self.settings = ScpSettings() if settings is None else settings
        self.fixed_policy = policy
        if self.settings.mode == STOCHASTIC and model is None:
            raise ValidationError("model", "stochastic mode needs an UncertaintyModel")
        self.positions, self.rotations, self.friction, self.active = plan.arrays()
        self.dt = plan.dt
        self.n = plan.horizon
        self.ee = params.ee_count
        self.nu = 3 * self.ee
        if plan.ee_count != self.ee:
            raise ValidationError("plan", "end-effector count differs from robot params")
        if refs.states.shape != (self.n + 1, STATE_DIM) or refs.forces.shape != (self.n, self.nu):
            raise ValidationError("refs", "reference dimensions do not match the plan")
        self.layout = _Layout(self.n, self.nu)
        self._second = {}

    # -- dynamics -----------------------------------------------------------

    def step(self, x, u, k):
        return step_arrays(
            x, u.reshape(-1, 3), self.positions[k], self.active[k],
            self.params.mass, self.params.gravity, self.dt,
        )

    def defects(self, states, controls):
        out = np.empty((self.n, STATE_DIM))
        for k in range(self.n):
            out[k] = states[k + 1] - self.step(states[k], controls[k], k)
        return out

    def derivatives(self, states, controls):
        derivs = []
        for k in range(self.n):
            a, b, c = jacobian_arrays(
                states[k], controls[k].reshape(-1, 3), self.positions[k],
                self.active[k], self.params.mass, self.dt,
            )
            key = self.active[k].tobytes()
            if key not in self._second:
                self._second[key] = second_order_terms(self.active[k], self.ee, self.dt)
            derivs.append(DynamicsDerivatives(a, b, c, *self._second[key]))
        return derivs

    # -- uncertainty --------------------------------------------------------

    def feedback(self, derivs):
        if self.fixed_policy is not None:
            return self.fixed_policy
        s = self.settings
        return lqr_gains(
            [d.a_mat for d in derivs], [d.b_mat for d in derivs],
            s.lqr_q * np.eye(STATE_DIM), s.lqr_r * np.eye(self.nu), active=self.active,
        )

    def backoffs(self, derivs):
        """Back-offs (and their z-gradients in first-order mode) at the iterate."""
        s, model = self.settings, self.model
        policy = self.feedback(derivs)
        cov = propagate_covariance(derivs, policy, model, s.backoff_mode)
        first = s.backoff_mode == FIRST_ORDER
        nz = STATE_DIM + self.nu
        eta_u = np.zeros((self.n, self.ee, 4))
        eta_x = np.zeros((self.n, self.ee, 6))
        g_u = np.zeros((self.n, self.ee, 4, nz)) if first else None
        g_x = np.zeros((self.n, self.ee, 6, nz)) if first else None
        q_u = gaussian_quantile(1.0 - allocate_risk(model.alpha_u, 4)[0])
        q_x = None
        if model.alpha_x is not None:
            q_x = gaussian_quantile(1.0 - allocate_risk(model.alpha_x, 6)[0])
        for k in range(self.n):
            sigma = cov.sigmas[k]
            tensor = cov.derivs[k] if first else None
            gain = policy.gains[k]
            for i in np.flatnonzero(self.active[k]):
                local = pyramid_matrix(self.friction[k, i]) @ self.rotations[k, i].T
                for r in range(4):
                    row = local[r] @ gain[3 * i : 3 * i + 3]
                    eta_u[k, i, r] = q_u * weighted_norm(row, sigma)
                    if first:
                        g_u[k, i, r] = q_u * norm_gradient(row, sigma, tensor)
                if q_x is None:
                    continue
                for a in range(3):
                    row = np.zeros(STATE_DIM)
                    row[a] = 1.0
                    eta = q_x * weighted_norm(row, sigma)
                    eta_x[k, i, 2 * a : 2 * a + 2] = eta
                    if first:
                        g_x[k, i, 2 * a : 2 * a + 2] = q_x * norm_gradient(row, sigma, tensor)
        return _Stochastic(policy, cov, eta_u, eta_x, g_u, g_x)

    # -- QP assembly --------------------------------------------------------

    def assemble(self, iterate: ScpIterate, derivs=None, stoch: _Stochastic | None = None):
        lay, n = self.layout, self.n
        s_j, v_j = iterate.states, iterate.controls
        if derivs is None:
            derivs = self.derivatives(s_j, v_j)
        w_state = self.weights.state
        w_term = self.weights.terminal_state
        w_force = np.tile(self.weights.force, self.ee)
        ref_s = self.refs.states

        diag = np.zeros(lay.size)
        lin = np.zeros(lay.size)
        const = 0.0
        for k in range(n + 1):
            w = w_term if k == n else w_state
            diag[lay.s(k)] = 2.0 * w
            lin[lay.s(k)] = -2.0 * w * ref_s[k]
            const += float(ref_s[k] @ (w * ref_s[k]))
        for k in range(n):
            diag[lay.v(k)] = 2.0 * w_force
            lin[lay.t(k)] = iterate.gamma
        lin[lay.t(n)] = iterate.gamma
        hessian = np.diag(diag)

        eq_rows, eq_rhs = [], []

        def eq(cols_vals, rhs):
            row = np.zeros(lay.size)
            for cols, vals in cols_vals:
                row[cols] = vals
            eq_rows.append(row)
            eq_rhs.append(rhs)

        eye = np.eye(STATE_DIM)
        x0 = ref_s[0]
        for r in range(STATE_DIM):
            eq([(lay.s(0), eye[r])], x0[r])
        for k, d in enumerate(derivs):
            f_j = self.step(s_j[k], v_j[k], k)
            affine = f_j - d.a_mat @ s_j[k] - d.b_mat @ v_j[k]
            block = np.zeros((STATE_DIM, lay.size))
            block[:, lay.s(k + 1)] = eye
            block[:, lay.s(k)] = -d.a_mat
            block[:, lay.v(k)] = -d.b_mat
            eq_rows.extend(block)
            eq_rhs.extend(affine)
        if self.settings.terminal_constraint:
            for r in range(STATE_DIM):
                eq([(lay.s(n), eye[r])], ref_s[n][r])
        for k in range(n):
            start = lay.v(k).start
            for i in np.flatnonzero(~self.active[k]):
                for a in range(3):
                    row = np.zeros(lay.size)
                    row[start + 3 * i + a] = 1.0
                    eq_rows.append(row)
                    eq_rhs.append(0.0)

        in_rows, in_rhs, infeasible = [], [], []
        stochastic = stoch is not None
        first = stochastic and stoch.grads_u is not None
        reach = self.params.reach_limit
        for k in range(n):
            sv = lay.v(k)
            zk_cols = np.r_[np.arange(lay.s(k).start, lay.s(k).stop), np.arange(sv.start, sv.stop)]
            z_j = np.concatenate([s_j[k], v_j[k]])
            for i in np.flatnonzero(self.active[k]):
                mu = self.friction[k, i]
                rot = self.rotations[k, i]
                local = pyramid_matrix(mu) @ rot.T
                for r in range(4):
                    row = np.zeros(lay.size)
                    row[sv.start + 3 * i : sv.start + 3 * i + 3] = local[r]
                    rhs = 0.0
                    if stochastic:
                        eta = stoch.backoffs_u[k, i, r]
                        if mu == 0.0 and eta > 0.0:
                            infeasible.append((k, f"{self.params.ee_names[i]}.{PYRAMID_ROWS[r]}"))
                        rhs = -eta
                        if first:
                            grad = stoch.grads_u[k, i, r]
                            row[zk_cols] += grad
                            rhs += float(grad @ z_j)
                    in_rows.append(row)
                    in_rhs.append(rhs)
                row = np.zeros(lay.size)
                row[sv.start + 3 * i : sv.start + 3 * i + 3] = -rot[:, 2]
                in_rows.append(row)
                in_rhs.append(0.0)
                p = self.positions[k, i]
                for a in range(3):
                    for sign, r in ((1.0, 2 * a), (-1.0, 2 * a + 1)):
                        row = np.zeros(lay.size)
                        row[lay.s(k).start + a] = sign
                        rhs = reach[a] + sign * p[a]
                        if stochastic:
                            eta = stoch.backoffs_x[k, i, r]
                            if eta >= reach[a]:
                                infeasible.append((k, f"{self.params.ee_names[i]}.{REACH_ROWS[r]}"))
                            rhs -= eta
                            if first:
                                grad = stoch.grads_x[k, i, r]
                                row[zk_cols] += grad
                                rhs += float(grad @ z_j)
                        in_rows.append(row)
                        in_rhs.append(rhs)
        if infeasible:
            raise InfeasibleBackoffError(infeasible)
        kappa_j = s_j[:, ANG]
        for k in range(n + 1):
            ang = lay.s(k).start + ANG.start
            for a in range(3):
                for sign in (1.0, -1.0):
                    row = np.zeros(lay.size)
                    row[ang + a] = sign
                    row[lay.t(k)] = -1.0
                    in_rows.append(row)
                    in_rhs.append(iterate.omega + sign * kappa_j[k, a])
            row = np.zeros(lay.size)
            row[lay.t(k)] = -1.0
            in_rows.append(row)
            in_rhs.append(0.0)

        problem = qpmod.QpProblem(
            hessian, lin, np.array(eq_rows), np.array(eq_rhs),
            np.array(in_rows), np.array(in_rhs), const,
        )
        return problem, derivs

    def nonlinear_cost(self, qp_objective, states, controls, gamma):
        defect = np.abs(self.defects(states, controls)).sum()
        return qp_objective + gamma * defect


def build_qp(iterate: ScpIterate, plan, refs, params, model=None, weights=None, settings=None):
    """Convexified QP about ``iterate``; nominal when ``settings.mode`` is nominal."""
    prob = CentroidalProblem(plan, refs, params, model, weights, settings)
    derivs = prob.derivatives(iterate.states, iterate.controls)
    stoch = prob.backoffs(derivs) if prob.settings.mode == STOCHASTIC else None
    qp, _ = prob.assemble(iterate, derivs, stoch)
    return qp


def accuracy_ratio(problem: CentroidalProblem, qp_objective, states, controls, gamma):
    """Relative gap between the QP objective and the same objective charged
    with the true dynamics defect of the candidate: smaller is better."""
    nonlin = problem.nonlinear_cost(qp_objective, states, controls, gamma)
    return abs(nonlin - qp_objective) / max(abs(qp_objective), 1e-12)


def initial_iterate(refs: ReferenceTrajectory, settings: ScpSettings):
    return ScpIterate(refs.states.copy(), refs.forces.copy(), settings.omega0, settings.gamma0)


def scp_solve(plan, refs, params, model=None, weights=None, settings=None, policy=None,
              initial=None, callback=None):
    """Run the SCP loop until the iterate stops moving and is dynamically feasible.

    Returns the last accepted :class:`ScpIterate`; ``converged`` is false when
    ``max_iters`` ran out first.  A QP that is not solved to optimality raises
    :class:`ScpError` carrying the iteration index.
    """
    prob = CentroidalProblem(plan, refs, params, model, weights, settings, policy)
    s = prob.settings
    current = initial_iterate(refs, s) if initial is None else initial
    omega, gamma = current.omega, current.gamma
    history = []
    n_accepted = 0
    best = None
    stochastic = s.mode == STOCHASTIC
    lay = prob.layout
    for it in range(s.max_iters):
        derivs = prob.derivatives(current.states, current.controls)
        stoch = prob.backoffs(derivs) if stochastic else None
        lin_point = replace(current, omega=omega, gamma=gamma)
        qp, _ = prob.assemble(lin_point, derivs, stoch)
        sol = qpmod.qp_solve(qp, s.qp)
        if sol.status != qpmod.OPTIMAL:
            raise ScpError(it, f"QP returned {sol.status}", sol.status)
        states, controls, slacks = lay.unpack(sol.x)
        rho = accuracy_ratio(prob, sol.objective, states, controls, gamma)
        defect = float(np.abs(prob.defects(states, controls)).max())
        accepted = rho < s.rho_accept
        step = float(np.abs(sol.x - lay.pack(current.states, current.controls, slacks)).max())
        record = {
            "iteration": it, "cost": float(sol.objective), "rho": float(rho), "omega": omega,
            "gamma": gamma, "defect": defect, "slack": float(slacks.sum()),
            "step": step, "accepted": bool(accepted), "qp_iterations": int(sol.iterations),
        }
        history.append(record)
        logger.debug("scp %s", record)
        if callback is not None:
            callback(record)
        if accepted:
            n_accepted += 1
            nxt = ScpIterate(
                states, controls, omega, gamma, slacks=slacks,
                covariances=stoch.covariances if stoch else None,
                policy=stoch.policy if stoch else None,
                backoffs_u=stoch.backoffs_u if stoch else np.zeros((prob.n, prob.ee, 4)),
                backoffs_x=stoch.backoffs_x if stoch else np.zeros((prob.n, prob.ee, 6)),
                trust_center=current.states[:, ANG].copy(), trust_radius=omega,
            )
            current = best = nxt
            if rho < s.rho_good:
                omega = min(omega * s.omega_grow, s.omega_max)
            if slacks.sum() > s.slack_tol:
                gamma = min(gamma * s.gamma_growth, s.gamma_max)
            if step <= s.tol_z and defect <= s.tol_defect and slacks.sum() <= s.slack_tol:
                current.converged = True
                break
        else:
            omega *= s.omega_shrink
            gamma = min(gamma * s.gamma_growth, s.gamma_max)
    if best is None:
        best = current
    best.diagnostics = history
    best.n_accepted = n_accepted
    best.omega, best.gamma = omega, gamma
    return best


def tracking_policy(plan, iterate: ScpIterate, params, settings: ScpSettings | None = None):
    """LQR gains about a solved trajectory, with the weights the stochastic mode uses.

    Gives nominal plans the same kind of feedback as stochastic ones so the two
    can be compared under disturbances.
    """
    settings = ScpSettings() if settings is None else settings
    prob = CentroidalProblem(plan, ReferenceTrajectory(iterate.states, iterate.controls),
                             params, settings=replace(settings, mode=NOMINAL))
    return prob.feedback(prob.derivatives(iterate.states, iterate.controls))


def trajectory_defect(plan, params, states, controls):
    """``max_k |s_{k+1} - f(s_k, v_k)|_inf`` through the nonlinear dynamics."""
    positions, _, _, active = plan.arrays()
    worst = 0.0
    for k in range(plan.horizon):
        nxt = step_arrays(states[k], controls[k].reshape(-1, 3), positions[k], active[k],
                          params.mass, params.gravity, plan.dt)
        worst = max(worst, float(np.abs(states[k + 1] - nxt).max()))
    return worst
