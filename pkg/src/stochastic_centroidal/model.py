"""Point-foot centroidal momentum dynamics and their derivatives.

The state is the 9-vector ``x = (c, l, kappa)`` (CoM position, linear
momentum, angular momentum about the CoM) and the control stacks one inertial
3D force per end-effector in canonical order.  The discrete model is explicit
Euler::

    c'     = c + l / m * dt
    l'     = l + m g dt + sum_i f_i dt
    kappa' = kappa + sum_i (p_i - c) x f_i dt

where the sums run over active contacts only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .validation import (
    ValidationError,
    check_array,
    check_positive,
    check_rotation,
)

STATE_DIM = 9
COM = slice(0, 3)
LIN = slice(3, 6)
ANG = slice(6, 9)

QUADRUPED_EE = ("FL", "FR", "HL", "HR")


def skew(v):
    """Cross-product matrix: ``skew(a) @ b == np.cross(a, b)``."""
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


_SKEW_BASIS = np.stack([skew(e) for e in np.eye(3)])


@dataclass(frozen=True)
class CentroidalState:
    com: np.ndarray
    lin_momentum: np.ndarray
    ang_momentum: np.ndarray

    def __post_init__(self):
        for name in ("com", "lin_momentum", "ang_momentum"):
            object.__setattr__(
                self, name, check_array(getattr(self, name), name, shape=(3,))
            )

    def as_vector(self):
        return np.concatenate([self.com, self.lin_momentum, self.ang_momentum])

    @classmethod
    def from_vector(cls, x):
        x = check_array(x, "state", shape=(STATE_DIM,))
        return cls(x[COM], x[LIN], x[ANG])


@dataclass(frozen=True)
class ControlInput:
    """Inertial-frame contact forces, one row per end-effector."""

    forces: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "forces", check_array(self.forces, "forces", shape=(None, 3))
        )

    def as_vector(self):
        return self.forces.reshape(-1)

    @classmethod
    def from_vector(cls, u):
        return cls(np.asarray(u, dtype=float).reshape(-1, 3))


@dataclass(frozen=True)
class ContactPoint:
    position: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    friction: float = 0.5

    def __post_init__(self):
        object.__setattr__(
            self, "position", check_array(self.position, "position", shape=(3,))
        )
        object.__setattr__(self, "rotation", check_rotation(self.rotation, "rotation"))
        if not np.isfinite(self.friction) or self.friction < 0:
            raise ValidationError("friction", f"must be >= 0, got {self.friction}")
        object.__setattr__(self, "friction", float(self.friction))


@dataclass(frozen=True)
class RobotParams:
    mass: float = 2.5
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    reach_limit: np.ndarray = field(
        default_factory=lambda: np.array([0.35, 0.25, 0.35])
    )
    ee_count: int = 4
    ee_names: tuple = QUADRUPED_EE

    def __post_init__(self):
        object.__setattr__(self, "mass", check_positive(self.mass, "mass"))
        object.__setattr__(
            self, "gravity", check_array(self.gravity, "gravity", shape=(3,))
        )
        reach = check_array(self.reach_limit, "reach_limit", shape=(3,))
        if np.any(reach <= 0):
            raise ValidationError("reach_limit", "must be componentwise positive")
        object.__setattr__(self, "reach_limit", reach)
        if int(self.ee_count) < 1:
            raise ValidationError("ee_count", "must be a positive integer")
        object.__setattr__(self, "ee_count", int(self.ee_count))
        names = tuple(self.ee_names)
        if len(names) != self.ee_count:
            names = tuple(f"ee{i}" for i in range(self.ee_count))
        object.__setattr__(self, "ee_names", names)

    @property
    def control_dim(self):
        return 3 * self.ee_count


@dataclass(frozen=True)
class DynamicsDerivatives:
    """First derivatives of one Euler step plus the constant second-order terms.

    ``da_dz[..., j]`` is the derivative of ``a_mat`` with respect to the j-th
    entry of ``z = (x, u)``; likewise for ``db_dz`` and ``dc_dz``.
    """

    a_mat: np.ndarray
    b_mat: np.ndarray
    c_mat: np.ndarray
    da_dz: np.ndarray
    db_dz: np.ndarray
    dc_dz: np.ndarray


def contact_arrays(contacts: Sequence, ee_count: int):
    """Split a per-slot contact list (``None`` = swing) into arrays.

    Returns ``(positions, active)`` with shapes ``(ee, 3)`` and ``(ee,)``.
    """
    if len(contacts) != ee_count:
        raise ValidationError(
            "contacts", f"expected {ee_count} slots, got {len(contacts)}"
        )
    positions = np.zeros((ee_count, 3))
    active = np.zeros(ee_count, dtype=bool)
    for i, contact in enumerate(contacts):
        if contact is None:
            continue
        positions[i] = contact.position
        active[i] = True
    return positions, active


def _as_state(s):
    if isinstance(s, CentroidalState):
        return s.as_vector()
    x = np.asarray(s, dtype=float)
    if x.shape != (STATE_DIM,):
        raise ValidationError("state", f"expected shape (9,), got {x.shape}")
    for name, sl in (("com", COM), ("lin_momentum", LIN), ("ang_momentum", ANG)):
        if not np.all(np.isfinite(x[sl])):
            raise ValidationError(name, "contains non-finite entries")
    return x


def _as_control(v, ee_count):
    u = v.as_vector() if isinstance(v, ControlInput) else np.asarray(v, dtype=float)
    u = u.reshape(-1)
    if u.shape != (3 * ee_count,):
        raise ValidationError("forces", f"expected {3 * ee_count} entries, got {u.size}")
    if not np.all(np.isfinite(u)):
        raise ValidationError("forces", "contains non-finite entries")
    return u


def _prepare(s, v, contacts, params):
    x = _as_state(s)
    u = _as_control(v, params.ee_count)
    if isinstance(contacts, tuple) and len(contacts) == 2 and isinstance(
        contacts[1], np.ndarray
    ):
        positions, active = contacts
    else:
        positions, active = contact_arrays(contacts, params.ee_count)
    positions = check_array(positions, "contact position", shape=(params.ee_count, 3))
    active = np.asarray(active, dtype=bool)
    forces = u.reshape(-1, 3)
    if np.any(forces[~active] != 0.0):
        raise ValidationError("forces", "inactive contacts must carry zero force")
    return x, forces, positions, active


def step_arrays(x, forces, positions, active, mass, gravity, dt):
    """Unchecked Euler step on raw arrays; ``x`` may carry leading batch axes."""
    c = x[..., COM]
    lin = x[..., LIN]
    ang = x[..., ANG]
    f = forces * active[:, None]
    total = f.sum(axis=-2)
    lever = positions - c[..., None, :]
    torque = np.cross(lever, f).sum(axis=-2)
    return np.concatenate(
        [
            c + lin * (dt / mass),
            lin + (mass * dt) * gravity + total * dt,
            ang + torque * dt,
        ],
        axis=-1,
    )


def dynamics_step(s, v, contacts, params: RobotParams, dt: float):
    """Advance the centroidal state by one explicit Euler step.

    Parameters
    ----------
    s : CentroidalState or array of shape (9,)
    v : ControlInput or array of shape (3 * ee_count,)
    contacts : sequence of ContactPoint or None, one slot per end-effector,
        or a ``(positions, active)`` array pair.
    params : RobotParams
    dt : float
        Step length in seconds.

    Returns
    -------
    numpy.ndarray of shape (9,)
    """
    dt = check_positive(dt, "dt")
    x, forces, positions, active = _prepare(s, v, contacts, params)
    return step_arrays(x, forces, positions, active, params.mass, params.gravity, dt)


def second_order_terms(active, ee_count, dt):
    """Constant derivatives of A, B, C with respect to ``z = (x, u)``.

    They only depend on which contacts are active, because the dynamics are
    bilinear in (c, f) and (p, f).
    """
    nu = 3 * ee_count
    nz = STATE_DIM + nu
    da = np.zeros((STATE_DIM, STATE_DIM, nz))
    db = np.zeros((STATE_DIM, nu, nz))
    dc = np.zeros((STATE_DIM, nu, nz))
    for i in np.flatnonzero(active):
        cols = slice(3 * i, 3 * i + 3)
        for a in range(3):
            basis = dt * _SKEW_BASIS[a]
            da[ANG, COM, STATE_DIM + 3 * i + a] = basis
            db[ANG, cols, a] = -basis
            dc[ANG, cols, STATE_DIM + 3 * i + a] = -basis
    return da, db, dc


def jacobian_arrays(x, forces, positions, active, mass, dt):
    ee = len(active)
    a_mat = np.eye(STATE_DIM)
    a_mat[COM, LIN] = np.eye(3) * (dt / mass)
    b_mat = np.zeros((STATE_DIM, 3 * ee))
    c_mat = np.zeros((STATE_DIM, 3 * ee))
    c = x[COM]
    for i in np.flatnonzero(active):
        cols = slice(3 * i, 3 * i + 3)
        a_mat[ANG, COM] += dt * skew(forces[i])
        b_mat[LIN, cols] = dt * np.eye(3)
        b_mat[ANG, cols] = dt * skew(positions[i] - c)
        c_mat[ANG, cols] = -dt * skew(forces[i])
    return a_mat, b_mat, c_mat


def dynamics_jacobians(s, v, contacts, params: RobotParams, dt: float):
    """Analytic Jacobians of :func:`dynamics_step` and its second-order tensors."""
    dt = check_positive(dt, "dt")
    x, forces, positions, active = _prepare(s, v, contacts, params)
    a_mat, b_mat, c_mat = jacobian_arrays(x, forces, positions, active, params.mass, dt)
    da, db, dc = second_order_terms(active, params.ee_count, dt)
    return DynamicsDerivatives(a_mat, b_mat, c_mat, da, db, dc)


def local_force(f, rot):
    """Express an inertial force in the contact frame (``R^T f``)."""
    return np.asarray(rot).T @ np.asarray(f, dtype=float)
