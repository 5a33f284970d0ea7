"""Scenario files: a versioned JSON schema validated with pydantic.

Every validation failure maps to a code ``config.<field>.<kind>`` where kind
is one of ``range``, ``missing``, ``unknown``, ``type`` or ``invalid``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .gait import (
    ContactPhase,
    ContactPlan,
    make_bound_plan,
    make_stand_plan,
    make_trot_plan,
)
from .model import ContactPoint, RobotParams
from .scp import CostWeights, ScpSettings
from .uncertainty import UncertaintyModel
from .verify import DisturbanceSpec

SCHEMA_VERSION = 1

Vec3 = List[float]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RobotConfig(_Strict):
    mass: float = Field(2.5, gt=0)
    reach_limit: Vec3 = Field(default_factory=lambda: [0.35, 0.25, 0.35], min_length=3, max_length=3)
    ee_count: int = Field(4, ge=1)
    gravity: Vec3 = Field(default_factory=lambda: [0.0, 0.0, -9.81], min_length=3, max_length=3)

    @field_validator("reach_limit")
    @classmethod
    def _positive(cls, v):
        if min(v) <= 0:
            raise ValueError("reach limits must be positive")
        return v


class PhaseConfig(_Strict):
    active: List[int] = Field(min_length=1)
    steps: int = Field(ge=1)
    positions: Dict[str, Vec3]
    friction: Optional[float] = Field(None, ge=0)


class GaitConfig(_Strict):
    type: Literal["trot", "bound", "stand", "custom"] = "trot"
    geometry: List[float] = Field(default_factory=lambda: [0.19, 0.15], min_length=2, max_length=2)
    step_length: float = 0.05
    phase_steps: int = Field(10, ge=1)
    n_cycles: int = Field(1, ge=1)
    stance_steps: int = Field(0, ge=0)
    dt: float = Field(0.01, gt=0)
    com_height: float = Field(0.25, gt=0)
    friction: float = Field(0.5, ge=0)
    phases: Optional[List[PhaseConfig]] = None

    @model_validator(mode="after")
    def _custom_needs_phases(self):
        if self.type == "custom" and not self.phases:
            raise ValueError("custom gaits need a phases list")
        return self


class UncertaintyConfig(_Strict):
    sigma_w_diag: Optional[List[float]] = Field(None, min_length=9, max_length=9)
    sigma_theta_diag: Optional[List[float]] = Field(None, min_length=3, max_length=3)
    sigma_w: Optional[List[List[float]]] = None
    sigma_theta: Optional[List[List[float]]] = None
    scale: float = Field(1.0, ge=0)
    alpha_u: float = Field(0.9, gt=0.5, lt=1.0)
    alpha_x: Optional[float] = Field(None, gt=0.5, lt=1.0)

    @field_validator("sigma_w_diag", "sigma_theta_diag")
    @classmethod
    def _nonnegative(cls, v):
        if v is not None and min(v) < 0:
            raise ValueError("variances must be nonnegative")
        return v

    @model_validator(mode="after")
    def _one_of(self):
        for name in ("sigma_w", "sigma_theta"):
            if (getattr(self, name) is None) == (getattr(self, name + "_diag") is None):
                raise ValueError(f"give exactly one of {name} and {name}_diag")
        return self

    def matrices(self):
        sw = np.diag(self.sigma_w_diag) if self.sigma_w is None else np.array(self.sigma_w)
        st = (np.diag(self.sigma_theta_diag) if self.sigma_theta is None
              else np.array(self.sigma_theta))
        return self.scale * sw, self.scale * st


class WeightsConfig(_Strict):
    com: Union[float, Vec3] = 1e4
    lin_momentum: Union[float, Vec3] = 1e3
    ang_momentum: Union[float, Vec3] = 1e5
    force: Vec3 = Field(default_factory=lambda: [1e2, 1e0, 1e1], min_length=3, max_length=3)
    terminal: Optional[List[float]] = Field(None, min_length=9, max_length=9)


class ScpConfig(_Strict):
    omega0: float = Field(1.0, gt=0)
    gamma0: float = Field(1e2, gt=0)
    gamma_growth: float = Field(2.0, gt=1)
    omega_shrink: float = Field(0.5, gt=0, lt=1)
    omega_grow: float = Field(2.0, gt=1)
    rho_accept: float = Field(0.25, gt=0, lt=1)
    rho_good: float = Field(0.05, gt=0, lt=1)
    max_iters: int = Field(50, ge=1)
    tol_z: float = Field(1e-6, gt=0)
    tol_defect: float = Field(1e-8, gt=0)
    backoff_mode: Literal["zero_order", "first_order"] = "zero_order"
    terminal_constraint: bool = True
    lqr_q: float = Field(1.0, gt=0)
    lqr_r: float = Field(10.0, gt=0)


class VerifyConfig(_Strict):
    n_rollouts: int = Field(1000, ge=1)
    contact_resample: Literal["per_rollout", "per_step"] = "per_rollout"


class ScenarioConfig(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    name: str = "scenario"
    seed: int = Field(0, ge=0, lt=2**64)
    robot: RobotConfig = Field(default_factory=RobotConfig)
    gait: GaitConfig = Field(default_factory=GaitConfig)
    uncertainty: UncertaintyConfig
    weights: WeightsConfig = Field(default_factory=WeightsConfig)
    scp: ScpConfig = Field(default_factory=ScpConfig)
    verify: VerifyConfig = Field(default_factory=VerifyConfig)
    output: str = "out"

    # -- domain objects -----------------------------------------------------

    def robot_params(self):
        r = self.robot
        return RobotParams(r.mass, np.array(r.gravity), np.array(r.reach_limit), r.ee_count)

    def contact_plan(self):
        g = self.gait
        common = dict(dt=g.dt, friction=g.friction)
        if g.type in ("trot", "bound") and self.robot.ee_count != 4:
            raise ConfigError("config.ee_count.range", "trot and bound gaits need 4 feet")
        if g.type == "trot":
            return make_trot_plan(tuple(g.geometry), g.step_length, g.phase_steps,
                                  g.n_cycles, stance_steps=g.stance_steps, **common)
        if g.type == "bound":
            return make_bound_plan(tuple(g.geometry), g.step_length, g.phase_steps,
                                   g.n_cycles, stance_steps=g.stance_steps, **common)
        if g.type == "stand":
            return make_stand_plan(tuple(g.geometry), g.phase_steps, **common)
        phases = []
        for ph in g.phases:
            friction = g.friction if ph.friction is None else ph.friction
            contacts = {int(i): ContactPoint(np.array(p), friction=friction)
                        for i, p in ph.positions.items()}
            phases.append(ContactPhase(tuple(ph.active), ph.steps, contacts))
        return ContactPlan(tuple(phases), g.dt, self.robot.ee_count)

    def uncertainty_model(self):
        sw, st = self.uncertainty.matrices()
        return UncertaintyModel(sw, st, self.uncertainty.alpha_u, self.uncertainty.alpha_x)

    def cost_weights(self):
        w = self.weights
        return CostWeights(w.com, w.lin_momentum, w.ang_momentum, w.force, w.terminal)

    def scp_settings(self, mode):
        return ScpSettings(mode=mode, **self.scp.model_dump())

    def disturbance(self, seed=None):
        sw, st = self.uncertainty.matrices()
        return DisturbanceSpec(sw, st, self.verify.n_rollouts,
                               self.seed if seed is None else seed,
                               self.verify.contact_resample)


class ConfigError(Exception):
    def __init__(self, code, message):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


_KIND = {
    "greater_than": "range", "greater_than_equal": "range", "less_than": "range",
    "less_than_equal": "range", "too_short": "range", "too_long": "range",
    "missing": "missing", "extra_forbidden": "unknown", "literal_error": "invalid",
    "value_error": "invalid",
}


def error_codes(exc: ValidationError):
    """``(code, message)`` per pydantic error, e.g. ``config.alpha_u.range``."""
    out = []
    for err in exc.errors():
        names = [str(x) for x in err["loc"] if isinstance(x, str)]
        field = names[-1] if names else "root"
        kind = _KIND.get(err["type"], "type")
        if field in ("function-after",) or field.startswith("function"):
            field = names[-2] if len(names) > 1 else "root"
        out.append((f"config.{field}.{kind}", err["msg"]))
    return out


def load_config(path) -> ScenarioConfig:
    """Parse and validate a scenario file; raises :class:`ConfigError`."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("config.file.unreadable", str(exc)) from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("config.file.json", str(exc)) from None
    return parse_config(raw)


def parse_config(raw) -> ScenarioConfig:
    try:
        cfg = ScenarioConfig.model_validate(raw)
    except ValidationError as exc:
        codes = error_codes(exc)
        code, msg = codes[0]
        err = ConfigError(code, msg)
        err.all_codes = codes
        raise err from None
    if not cfg.scp.rho_good < cfg.scp.rho_accept:
        raise ConfigError("config.rho_good.range", "need rho_good < rho_accept")
    return cfg
