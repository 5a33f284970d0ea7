"""scikit-learn style front end: ``fit`` a contact plan, ``score`` it under noise."""

from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .gait import ContactPlan, ReferenceTrajectory, make_reference
from .model import RobotParams
from .scp import NOMINAL, STOCHASTIC, CostWeights, ScpSettings, scp_solve, tracking_policy
from .uncertainty import UncertaintyModel
from .validation import ValidationError
from .verify import DisturbanceSpec, evaluate


class CentroidalPlanner(BaseEstimator):
    """Plan centroidal trajectories for a fixed contact schedule.

    Parameters mirror :class:`ScpSettings`; ``robot``, ``uncertainty`` and
    ``weights`` take the corresponding dataclasses (``None`` = defaults).
    After :meth:`fit`, ``states_``, ``controls_``, ``policy_`` and
    ``result_`` hold the solution.
    """

    def __init__(self, mode=STOCHASTIC, robot=None, uncertainty=None, weights=None,
                 com_height=0.25, backoff_mode="zero_order", lqr_q=1.0, lqr_r=10.0,
                 omega0=1.0, gamma0=1e2, max_iters=50, tol_z=1e-6, tol_defect=1e-8,
                 terminal_constraint=True):
        self.mode = mode
        self.robot = robot
        self.uncertainty = uncertainty
        self.weights = weights
        self.com_height = com_height
        self.backoff_mode = backoff_mode
        self.lqr_q = lqr_q
        self.lqr_r = lqr_r
        self.omega0 = omega0
        self.gamma0 = gamma0
        self.max_iters = max_iters
        self.tol_z = tol_z
        self.tol_defect = tol_defect
        self.terminal_constraint = terminal_constraint

    def _settings(self):
        return ScpSettings(
            omega0=self.omega0, gamma0=self.gamma0, max_iters=self.max_iters,
            tol_z=self.tol_z, tol_defect=self.tol_defect, mode=self.mode,
            backoff_mode=self.backoff_mode, terminal_constraint=self.terminal_constraint,
            lqr_q=self.lqr_q, lqr_r=self.lqr_r,
        )

    def fit(self, X: ContactPlan, y: ReferenceTrajectory | None = None):
        """Solve for the plan ``X``; ``y`` overrides the generated reference."""
        if not isinstance(X, ContactPlan):
            raise ValidationError("X", "expected a ContactPlan")
        robot = RobotParams() if self.robot is None else self.robot
        if self.mode == STOCHASTIC and not isinstance(self.uncertainty, UncertaintyModel):
            raise ValidationError("uncertainty", "stochastic mode needs an UncertaintyModel")
        settings = self._settings()
        refs = make_reference(X, robot, self.com_height) if y is None else y
        weights = CostWeights() if self.weights is None else self.weights
        model = self.uncertainty if self.mode == STOCHASTIC else None
        result = scp_solve(X, refs, robot, model, weights, settings)
        self.plan_ = X
        self.reference_ = refs
        self.result_ = result
        self.states_ = result.states
        self.controls_ = result.controls
        self.converged_ = result.converged
        self.n_iter_ = len(result.diagnostics)
        self.policy_ = result.policy
        if self.policy_ is None:
            self.policy_ = tracking_policy(X, result, robot, settings)
        return self

    def predict(self, X: ContactPlan | None = None):
        """Planned contact forces, shape ``(N, ee, 3)``, for the fitted plan."""
        check_is_fitted(self, "result_")
        if X is not None and X.horizon != self.plan_.horizon:
            raise ValidationError("X", "planner was fitted on a different horizon")
        return self.controls_.reshape(self.plan_.horizon, -1, 3)

    def simulate(self, spec: DisturbanceSpec):
        check_is_fitted(self, "result_")
        robot = RobotParams() if self.robot is None else self.robot
        return evaluate(self.plan_, self.result_, self.policy_, spec, robot)

    def score(self, X=None, y=None, spec: DisturbanceSpec | None = None):
        """Monte-Carlo friction-satisfaction frequency; higher is better."""
        if spec is None:
            if not isinstance(self.uncertainty, UncertaintyModel):
                raise ValidationError("spec", "needs a DisturbanceSpec or an uncertainty model")
            spec = DisturbanceSpec.from_model(self.uncertainty, n_rollouts=1000)
        return self.simulate(spec).satisfaction


__all__ = ["CentroidalPlanner", "NOMINAL", "STOCHASTIC"]
