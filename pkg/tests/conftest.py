import numpy as np
import pytest

import stochastic_centroidal as sc
from stochastic_centroidal.scp import ScpSettings, scp_solve

# additive centroidal noise and contact-position variances used for the gaits
TROT_SIGMA_W = np.array([0.85, 0.4, 0.01, 0.75, 0.4, 0.01, 0.85, 0.4, 0.01]) ** 2
BOUND_SIGMA_W = np.array([0.75, 0.4, 0.01, 0.85, 0.4, 0.01, 0.75, 0.4, 0.01]) ** 2
SIGMA_THETA = np.full(3, 0.4**2)
DESK_SCALE = 0.1

DESK_GAIT = dict(step_length=0.1, phase_steps=5, n_cycles=3, dt=0.02, stance_steps=10, friction=0.5)


def desk_plan(kind="trot"):
    make = sc.make_trot_plan if kind == "trot" else sc.make_bound_plan
    return make(**DESK_GAIT)


def desk_model(kind="trot", scale=DESK_SCALE):
    sw = TROT_SIGMA_W if kind == "trot" else BOUND_SIGMA_W
    return sc.UncertaintyModel.from_diagonals(scale * sw, scale * SIGMA_THETA, alpha_u=0.9)


class DeskFixture:
    def __init__(self, kind):
        self.kind = kind
        self.params = sc.RobotParams()
        self.plan = desk_plan(kind)
        self.refs = sc.make_reference(self.plan, self.params, 0.25)
        self.model = desk_model(kind)
        self.settings = ScpSettings(mode="stochastic")
        self._cache = {}

    def solve(self, mode="nominal", backoff_mode="zero_order"):
        key = (mode, backoff_mode)
        if key not in self._cache:
            settings = ScpSettings(mode=mode, backoff_mode=backoff_mode)
            model = self.model if mode == "stochastic" else None
            self._cache[key] = scp_solve(self.plan, self.refs, self.params, model, settings=settings)
        return self._cache[key]


@pytest.fixture(scope="session")
def desk_trot():
    return DeskFixture("trot")


@pytest.fixture(scope="session")
def desk_bound():
    return DeskFixture("bound")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
