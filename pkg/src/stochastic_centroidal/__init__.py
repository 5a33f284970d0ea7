"""Chance-constrained centroidal trajectory optimization for legged robots."""

from .gait import (
    ContactPhase,
    ContactPlan,
    ReferenceTrajectory,
    make_bound_plan,
    make_reference,
    make_stand_plan,
    make_trot_plan,
)
from .model import (
    CentroidalState,
    ContactPoint,
    ControlInput,
    DynamicsDerivatives,
    RobotParams,
    dynamics_jacobians,
    dynamics_step,
)
from .qp import QpProblem, QpSettings, QpSolution, qp_solve
from .scp import (
    CostWeights,
    InfeasibleBackoffError,
    ScpError,
    ScpIterate,
    ScpSettings,
    accuracy_ratio,
    build_qp,
    scp_solve,
    tracking_policy,
    trajectory_defect,
)
from .uncertainty import (
    CovarianceTrajectory,
    FeedbackPolicy,
    UncertaintyModel,
    allocate_risk,
    backoff,
    backoff_gradient,
    gaussian_quantile,
    lqr_gains,
    propagate_covariance,
)
from .validation import ValidationError
from .verify import Comparison, DisturbanceSpec, RolloutReport, compare, evaluate, rollout, rollouts

__version__ = "0.1.0"

__all__ = [
    "CentroidalState",
    "Comparison",
    "ContactPhase",
    "ContactPlan",
    "ContactPoint",
    "ControlInput",
    "CostWeights",
    "CovarianceTrajectory",
    "DisturbanceSpec",
    "DynamicsDerivatives",
    "FeedbackPolicy",
    "InfeasibleBackoffError",
    "QpProblem",
    "QpSettings",
    "QpSolution",
    "ReferenceTrajectory",
    "RobotParams",
    "RolloutReport",
    "ScpError",
    "ScpIterate",
    "ScpSettings",
    "UncertaintyModel",
    "ValidationError",
    "accuracy_ratio",
    "allocate_risk",
    "backoff",
    "backoff_gradient",
    "build_qp",
    "compare",
    "dynamics_jacobians",
    "dynamics_step",
    "evaluate",
    "gaussian_quantile",
    "lqr_gains",
    "make_bound_plan",
    "make_reference",
    "make_stand_plan",
    "make_trot_plan",
    "propagate_covariance",
    "qp_solve",
    "rollout",
    "rollouts",
    "scp_solve",
    "tracking_policy",
    "trajectory_defect",
]
