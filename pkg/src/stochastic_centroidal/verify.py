"""Monte-Carlo rollouts of planned trajectories under Gaussian disturbances.

Every rollout draws its noise from its own Philox substream keyed by
``(seed, rollout_index, channel)``, so a rollout's record does not depend on
how many others are run or in which order.  Comparisons reuse the same draws
for both plans (common random numbers).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gait import ContactPlan
from .model import STATE_DIM, RobotParams, step_arrays
from .uncertainty import FeedbackPolicy, UncertaintyModel
from .validation import ValidationError, check_psd

PER_ROLLOUT = "per_rollout"
PER_STEP = "per_step"

_CHANNEL_W = 0
_CHANNEL_THETA = 1


@dataclass(frozen=True)
class DisturbanceSpec:
    sigma_w: np.ndarray
    sigma_theta: np.ndarray
    n_rollouts: int = 1000
    seed: int = 0
    contact_resample: str = PER_ROLLOUT

    def __post_init__(self):
        sw = check_psd(self.sigma_w, "sigma_w")
        st = check_psd(self.sigma_theta, "sigma_theta")
        if sw.shape != (STATE_DIM, STATE_DIM):
            raise ValidationError("sigma_w", f"expected 9x9, got {sw.shape}")
        if st.shape != (3, 3):
            raise ValidationError("sigma_theta", f"expected 3x3, got {st.shape}")
        if int(self.n_rollouts) < 1:
            raise ValidationError("n_rollouts", "must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError("seed", "must be an unsigned 64-bit integer")
        if self.contact_resample not in (PER_ROLLOUT, PER_STEP):
            raise ValidationError("contact_resample", f"unknown cadence {self.contact_resample!r}")
        object.__setattr__(self, "sigma_w", sw)
        object.__setattr__(self, "sigma_theta", st)
        object.__setattr__(self, "n_rollouts", int(self.n_rollouts))
        object.__setattr__(self, "seed", int(self.seed))

    @classmethod
    def from_model(cls, model: UncertaintyModel, **kwargs):
        return cls(model.sigma_w, model.sigma_theta, **kwargs)


@dataclass
class RolloutRecord:
    index: int
    states: np.ndarray  # (N + 1, 9)
    controls: np.ndarray  # (N, 3 * ee)
    margins: np.ndarray  # (N, ee, 2); nan for swing feet
    ratios: np.ndarray  # (N, ee); nan for swing feet
    max_violation: float
    violation_steps: int
    terminal_error: float
    tracking_cost: float

    @property
    def satisfied(self):
        """(N,) mask: every stance foot inside its friction pyramid."""
        return ~np.any(self.margins < 0, axis=(1, 2))

    @property
    def satisfied_fraction(self):
        stance = ~np.isnan(self.margins[..., 0])
        ok = np.all(self.margins >= 0, axis=-1) & stance
        return float(ok.sum() / max(stance.sum(), 1))


@dataclass
class RolloutReport:
    max_violation: np.ndarray  # per rollout
    violation_steps: np.ndarray
    terminal_error: np.ndarray
    tracking_cost: np.ndarray
    satisfied_fraction: np.ndarray
    step_satisfaction: np.ndarray  # (N,) fraction of rollouts satisfied at step k
    mean_ratio: np.ndarray  # (N, ee)

    @property
    def n_rollouts(self):
        return self.max_violation.size

    @property
    def satisfaction(self):
        """Empirical frequency of stance contacts inside the pyramid."""
        return float(self.satisfied_fraction.mean())

    @property
    def mean_tracking_cost(self):
        return float(self.tracking_cost.mean())

    @classmethod
    def from_records(cls, records):
        sat = np.stack([r.satisfied for r in records])
        ratios = np.stack([r.ratios for r in records])
        return cls(
            max_violation=np.array([r.max_violation for r in records]),
            violation_steps=np.array([r.violation_steps for r in records]),
            terminal_error=np.array([r.terminal_error for r in records]),
            tracking_cost=np.array([r.tracking_cost for r in records]),
            satisfied_fraction=np.array([r.satisfied_fraction for r in records]),
            step_satisfaction=sat.mean(axis=0),
            mean_ratio=ratios.mean(axis=0),
        )


@dataclass
class Comparison:
    nominal: RolloutReport
    stochastic: RolloutReport
    delta: float  # stochastic minus nominal satisfaction
    delta_ci: tuple
    deltas: np.ndarray = field(repr=False)

    @property
    def delta_tracking(self):
        return self.stochastic.mean_tracking_cost - self.nominal.mean_tracking_cost


def _factor(cov):
    vals, vecs = np.linalg.eigh(cov)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def _stream(seed, rollout, channel):
    seq = np.random.SeedSequence(seed, spawn_key=(rollout, channel))
    return np.random.Generator(np.random.Philox(seq))


def draw_noise(spec: DisturbanceSpec, rollout, horizon, ee_count):
    """Standardized draws for one rollout: ``w`` (N, 9) and ``theta`` offsets."""
    w = _stream(spec.seed, rollout, _CHANNEL_W).standard_normal((horizon, STATE_DIM))
    count = horizon if spec.contact_resample == PER_STEP else 1
    theta = _stream(spec.seed, rollout, _CHANNEL_THETA).standard_normal((count, ee_count, 3))
    if spec.contact_resample == PER_ROLLOUT:
        theta = np.broadcast_to(theta, (horizon, ee_count, 3))
    return w @ _factor(spec.sigma_w).T, theta @ _factor(spec.sigma_theta).T


def _simulate(plan: ContactPlan, states, controls, gains, params, noise_w, noise_theta):
    """Closed-loop rollouts, batched over the leading axis of the noise arrays."""
    positions, rotations, friction, active = plan.arrays()
    n, ee = active.shape
    batch = noise_w.shape[0]
    xs = np.empty((batch, n + 1, STATE_DIM))
    us = np.empty((batch, n, 3 * ee))
    xs[:, 0] = states[0]
    for k in range(n):
        mask = np.repeat(active[k], 3)
        # elementwise product keeps each rollout bitwise independent of the batch size
        u = controls[k] + (gains[k] * (xs[:, k] - states[k])[:, None, :]).sum(axis=-1)
        u[:, ~mask] = 0.0
        us[:, k] = u
        sampled = positions[k] + noise_theta[:, k]
        xs[:, k + 1] = step_arrays(
            xs[:, k], u.reshape(batch, ee, 3), sampled, active[k],
            params.mass, params.gravity, plan.dt,
        ) + noise_w[:, k]
    forces = us.reshape(batch, n, ee, 3)
    local = np.einsum("kiba,rkib->rkia", rotations, forces)
    mu_fz = friction[None] * local[..., 2]
    margins = np.stack([mu_fz - np.abs(local[..., 0]), mu_fz - np.abs(local[..., 1])], axis=-1)
    ratios = np.linalg.norm(local[..., :2], axis=-1) / np.maximum(local[..., 2], 1e-9)
    margins[:, ~active] = np.nan
    ratios[:, ~active] = np.nan
    return xs, us, margins, ratios


def _records(indices, xs, us, margins, ratios, states):
    out = []
    for j, idx in enumerate(indices):
        m = margins[j]
        worst = np.nan_to_num(-m, nan=-np.inf).max()
        violated = np.any(m < 0, axis=(1, 2))
        err = xs[j] - states
        out.append(RolloutRecord(
            index=int(idx), states=xs[j], controls=us[j], margins=m, ratios=ratios[j],
            max_violation=float(max(worst, 0.0)),
            violation_steps=int(violated.sum()),
            terminal_error=float(np.abs(err[-1]).max()),
            tracking_cost=float((err ** 2).sum()),
        ))
    return out


def _check(plan, solution, policy):
    n = plan.horizon
    if solution.states.shape != (n + 1, STATE_DIM):
        raise ValidationError("solution", "state trajectory does not match the plan")
    if solution.controls.shape != (n, 3 * plan.ee_count):
        raise ValidationError("solution", "control trajectory does not match the plan")
    gains = policy.gains if policy is not None else np.zeros((n, 3 * plan.ee_count, STATE_DIM))
    if gains.shape != (n, 3 * plan.ee_count, STATE_DIM):
        raise ValidationError("policy", "gain shapes do not match the plan")
    return gains


def rollout(plan: ContactPlan, solution, policy: FeedbackPolicy | None, spec: DisturbanceSpec,
            rollout_index: int, params: RobotParams | None = None) -> RolloutRecord:
    """One closed-loop rollout ``u_k = v_k + K_k (x_k - s_k)`` through the true dynamics."""
    params = RobotParams() if params is None else params
    gains = _check(plan, solution, policy)
    w, theta = draw_noise(spec, rollout_index, plan.horizon, plan.ee_count)
    sim = _simulate(plan, solution.states, solution.controls, gains, params, w[None], theta[None])
    return _records([rollout_index], *sim, solution.states)[0]


def rollouts(plan, solution, policy, spec: DisturbanceSpec, params=None, batch_size=2048):
    """All ``spec.n_rollouts`` records, identical to calling :func:`rollout` per index."""
    params = RobotParams() if params is None else params
    gains = _check(plan, solution, policy)
    records = []
    for start in range(0, spec.n_rollouts, batch_size):
        idx = range(start, min(start + batch_size, spec.n_rollouts))
        draws = [draw_noise(spec, i, plan.horizon, plan.ee_count) for i in idx]
        w = np.stack([d[0] for d in draws])
        theta = np.stack([d[1] for d in draws])
        sim = _simulate(plan, solution.states, solution.controls, gains, params, w, theta)
        records.extend(_records(idx, *sim, solution.states))
    return records


def evaluate(plan, solution, policy, spec, params=None):
    return RolloutReport.from_records(rollouts(plan, solution, policy, spec, params))


def compare(plan, nominal, stochastic, spec: DisturbanceSpec, params=None,
            nominal_policy=None, stochastic_policy=None, z=1.959963984540054):
    """Paired Monte-Carlo comparison with common random numbers.

    The per-rollout statistic is the fraction of stance contacts inside the
    friction pyramid; ``delta_ci`` is a normal-approximation interval for the
    mean paired difference (stochastic minus nominal).
    """
    nom = evaluate(plan, nominal, nominal_policy, spec, params)
    sto = evaluate(plan, stochastic, stochastic_policy, spec, params)
    deltas = sto.satisfied_fraction - nom.satisfied_fraction
    mean = float(deltas.mean())
    half = 0.0
    if deltas.size > 1:
        half = z * float(deltas.std(ddof=1)) / math.sqrt(deltas.size)
    return Comparison(nom, sto, mean, (mean - half, mean + half), deltas)
