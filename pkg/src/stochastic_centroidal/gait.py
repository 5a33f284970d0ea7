"""Contact schedules for quadruped gaits and static-equilibrium references."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import STATE_DIM, ContactPoint, RobotParams
from .validation import ValidationError, check_positive

FL, FR, HL, HR = range(4)


@dataclass(frozen=True)
class ContactPhase:
    active: tuple
    steps: int
    contacts: dict = field(default_factory=dict)

    def __post_init__(self):
        active = tuple(sorted(int(i) for i in self.active))
        if not active:
            raise ValidationError("active", "flight phases are not supported")
        if int(self.steps) < 1:
            raise ValidationError("steps", f"must be >= 1, got {self.steps}")
        if set(self.contacts) != set(active):
            raise ValidationError("contacts", "need exactly one contact per active foot")
        object.__setattr__(self, "active", active)
        object.__setattr__(self, "steps", int(self.steps))


@dataclass(frozen=True)
class ContactPlan:
    """Ordered contact phases sharing one time step.

    ``initial_positions`` / ``final_positions`` hold every foot's location
    before the first and after the last phase (swing feet included).
    """

    phases: tuple
    dt: float
    ee_count: int = 4
    initial_positions: np.ndarray = None
    final_positions: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "phases", tuple(self.phases))
        check_positive(self.dt, "dt")
        if self.horizon < 2:
            raise ValidationError("phases", f"horizon must be >= 2, got {self.horizon}")
        for phase in self.phases:
            if max(phase.active) >= self.ee_count:
                raise ValidationError("active", "end-effector index out of range")
        if self.initial_positions is None:
            object.__setattr__(self, "initial_positions", self._first_seen(self.phases))
        if self.final_positions is None:
            object.__setattr__(
                self, "final_positions", self._first_seen(self.phases[::-1])
            )

    def _first_seen(self, phases):
        pos = np.full((self.ee_count, 3), np.nan)
        for phase in phases:
            for i, contact in phase.contacts.items():
                if np.isnan(pos[i, 0]):
                    pos[i] = contact.position
        return pos

    @property
    def horizon(self):
        return sum(p.steps for p in self.phases)

    def expand(self):
        """Per-step contact slots (``None`` for swing feet), length N."""
        out = []
        for phase in self.phases:
            slots = [phase.contacts.get(i) for i in range(self.ee_count)]
            out.extend([slots] * phase.steps)
        return out

    def arrays(self):
        """Dense per-step arrays: positions, rotations, friction, active mask."""
        n, ee = self.horizon, self.ee_count
        positions = np.zeros((n, ee, 3))
        rotations = np.tile(np.eye(3), (n, ee, 1, 1))
        friction = np.zeros((n, ee))
        active = np.zeros((n, ee), dtype=bool)
        k = 0
        for phase in self.phases:
            sl = slice(k, k + phase.steps)
            for i, contact in phase.contacts.items():
                positions[sl, i] = contact.position
                rotations[sl, i] = contact.rotation
                friction[sl, i] = contact.friction
                active[sl, i] = True
            k += phase.steps
        return positions, rotations, friction, active


@dataclass(frozen=True)
class ReferenceTrajectory:
    states: np.ndarray
    forces: np.ndarray


def _stance_box(half_length, half_width):
    half_length, half_width = float(half_length), float(half_width)
    if not (half_length > 0 and half_width > 0):
        raise ValidationError(
            "geometry", "stance box half-length and half-width must be positive"
        )
    return np.array(
        [
            [half_length, half_width, 0.0],
            [half_length, -half_width, 0.0],
            [-half_length, half_width, 0.0],
            [-half_length, -half_width, 0.0],
        ]
    )


def _alternating_plan(pairs, geometry, step_length, phase_steps, n_cycles, dt, friction,
                      stance_steps=0):
    if int(phase_steps) < 1:
        raise ValidationError("phase_steps", "must be >= 1")
    if int(n_cycles) < 1:
        raise ValidationError("n_cycles", "must be >= 1")
    feet = _stance_box(*geometry)
    advance = np.array([float(step_length), 0.0, 0.0])
    initial = feet.copy()
    phases = []
    if int(stance_steps) > 0:
        contacts = {i: ContactPoint(feet[i].copy(), friction=friction) for i in range(4)}
        phases.append(ContactPhase((FL, FR, HL, HR), int(stance_steps), contacts))
    for cycle in range(int(n_cycles)):
        for j, pair in enumerate(pairs):
            contacts = {i: ContactPoint(feet[i].copy(), friction=friction) for i in pair}
            phases.append(ContactPhase(pair, int(phase_steps), contacts))
            # the other pair swings during this phase and lands one step ahead
            for i in pairs[1 - j]:
                feet[i] = feet[i] + advance
    return ContactPlan(
        tuple(phases), dt, 4, initial_positions=initial, final_positions=feet
    )


def make_trot_plan(geometry=(0.19, 0.15), step_length=0.05, phase_steps=10,
                   n_cycles=1, dt=0.01, friction=0.5, stance_steps=0):
    """Trot: diagonal pairs (FL+HR, FR+HL) alternate, each foot steps once per cycle.

    ``geometry`` is the stance box ``(half_length, half_width)`` about the
    origin.  All contacts lie on flat ground at ``z = 0``.  ``stance_steps``
    prepends an all-feet phase so the motion starts from standing.
    """
    return _alternating_plan(
        ((FL, HR), (FR, HL)), geometry, step_length, phase_steps, n_cycles, dt, friction,
        stance_steps,
    )


def make_bound_plan(geometry=(0.19, 0.15), step_length=0.05, phase_steps=10,
                    n_cycles=1, dt=0.01, friction=0.5, stance_steps=0):
    """Bound: the front pair and the hind pair alternate."""
    return _alternating_plan(
        ((FL, FR), (HL, HR)), geometry, step_length, phase_steps, n_cycles, dt, friction,
        stance_steps,
    )


def make_stand_plan(geometry=(0.19, 0.15), steps=10, dt=0.01, friction=0.5):
    feet = _stance_box(*geometry)
    contacts = {i: ContactPoint(feet[i], friction=friction) for i in range(4)}
    return ContactPlan((ContactPhase((0, 1, 2, 3), steps, contacts),), dt, 4)


def make_reference(plan: ContactPlan, params: RobotParams, com_height: float):
    """Piecewise-linear CoM reference through the stance centroids plus a static warm start.

    One knot per phase, placed at the phase's middle step, at the centroid of
    that phase's stance feet raised to ``com_height``.  Linear momentum is the
    forward difference of the CoM reference times the mass (zero at the final
    node), angular momentum is zero, and every step's warm-start force splits
    the weight equally over the stance feet.
    """
    n = plan.horizon
    knots_t, knots_c = [], []
    start = 0
    for phase in plan.phases:
        knots_t.append(start + 0.5 * (phase.steps - 1))
        centroid = np.mean([phase.contacts[i].position for i in phase.active], axis=0)
        knots_c.append(centroid[:2])
        start += phase.steps
    knots_t = np.asarray(knots_t)
    knots_c = np.asarray(knots_c)
    steps = np.arange(n + 1)
    com = np.column_stack(
        [
            np.interp(steps, knots_t, knots_c[:, 0]),
            np.interp(steps, knots_t, knots_c[:, 1]),
            np.full(n + 1, float(com_height)),
        ]
    )
    states = np.zeros((n + 1, STATE_DIM))
    states[:, 0:3] = com
    states[:-1, 3:6] = params.mass * np.diff(com, axis=0) / plan.dt

    weight = -params.mass * params.gravity
    forces = np.zeros((n, params.ee_count, 3))
    _, _, _, active = plan.arrays()
    for k in range(n):
        idx = np.flatnonzero(active[k])
        forces[k, idx] = weight / len(idx)
    return ReferenceTrajectory(states, forces.reshape(n, -1))
