"""Gaussian chance-constraint machinery: risk allocation, quantiles, feedback
gains, linearized covariance propagation and constraint back-offs."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag, cho_factor, cho_solve

from .model import STATE_DIM
from .validation import ValidationError, check_probability, check_psd

ZERO_ORDER = "zero_order"
FIRST_ORDER = "first_order"


class RiccatiError(RuntimeError):
    def __init__(self, step, message="R + B'PB is not positive definite"):
        super().__init__(f"step {step}: {message}")
        self.step = step


class CovarianceError(RuntimeError):
    def __init__(self, step, min_eig):
        super().__init__(f"step {step}: covariance lost PSD (min eigenvalue {min_eig:.3e})")
        self.step = step


@dataclass(frozen=True)
class UncertaintyModel:
    """Noise description plus the joint satisfaction levels.

    ``sigma_theta`` is the 3x3 covariance of one contact position; every
    end-effector shares it.  ``alpha_x = None`` keeps the reachability rows
    deterministic.
    """

    sigma_w: np.ndarray
    sigma_theta: np.ndarray
    alpha_u: float = 0.9
    alpha_x: float | None = None

    def __post_init__(self):
        sw = check_psd(self.sigma_w, "sigma_w")
        st = check_psd(self.sigma_theta, "sigma_theta")
        if sw.shape != (STATE_DIM, STATE_DIM):
            raise ValidationError("sigma_w", f"expected 9x9, got {sw.shape}")
        if st.shape != (3, 3):
            raise ValidationError("sigma_theta", f"expected 3x3, got {st.shape}")
        object.__setattr__(self, "sigma_w", sw)
        object.__setattr__(self, "sigma_theta", st)
        object.__setattr__(
            self, "alpha_u", check_probability(self.alpha_u, "alpha_u", 0.5, 1.0)
        )
        if self.alpha_x is not None:
            object.__setattr__(
                self, "alpha_x", check_probability(self.alpha_x, "alpha_x", 0.5, 1.0)
            )

    @classmethod
    def from_diagonals(cls, sigma_w_diag, sigma_theta_diag, **kwargs):
        return cls(np.diag(sigma_w_diag), np.diag(sigma_theta_diag), **kwargs)

    def theta_cov(self, ee_count):
        return block_diag(*[self.sigma_theta] * ee_count)

    def scaled(self, factor):
        return UncertaintyModel(
            self.sigma_w * factor, self.sigma_theta * factor, self.alpha_u, self.alpha_x
        )

    @property
    def is_zero(self):
        return not np.any(self.sigma_w) and not np.any(self.sigma_theta)


@dataclass(frozen=True)
class FeedbackPolicy:
    gains: np.ndarray  # (N, 3 * ee, 9)

    @classmethod
    def zeros(cls, horizon, control_dim):
        return cls(np.zeros((horizon, control_dim, STATE_DIM)))


@dataclass(frozen=True)
class CovarianceTrajectory:
    sigmas: np.ndarray  # (N + 1, 9, 9)
    derivs: np.ndarray | None = None  # (N + 1, 9, 9, nz)


def gaussian_cdf(z):
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def _upper_tail(z):
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def gaussian_quantile(p):
    """Inverse standard normal CDF by bracketed Newton iteration on ``erfc``."""
    p = check_probability(p, "p")
    if p == 0.5:
        return 0.0
    # solve Q(z) = tail on the upper tail, where erfc keeps relative accuracy
    sign, target = (-1.0, p) if p < 0.5 else (1.0, 1.0 - p)
    lo, hi = 0.0, 40.0
    z = 1.0
    for _ in range(200):
        tail = _upper_tail(z)
        if tail > target:
            lo = z
        else:
            hi = z
        dens = math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
        step = (tail - target) / dens if dens > 0 else math.inf
        z_new = z + step
        if not (lo < z_new < hi):
            z_new = 0.5 * (lo + hi)
        if abs(z_new - z) < 1e-15 * max(1.0, z):
            return sign * z_new
        z = z_new
    return sign * z


def allocate_risk(alpha, n_rows):
    """Split the violation budget ``1 - alpha`` equally over ``n_rows`` rows."""
    if int(n_rows) < 1:
        raise ValidationError("n_rows", "must be >= 1")
    return np.full(int(n_rows), (1.0 - float(alpha)) / int(n_rows))


def lqr_gains(a_mats, b_mats, q_mat, r_mat, qf_mat=None, active=None):
    """Finite-horizon time-varying LQR for ``u = v + K (x - s)``.

    Columns of ``B_k`` belonging to swing feet (``active[k, i]`` false) are
    removed before the backward pass and the matching gain rows are zero.
    """
    a_mats = np.asarray(a_mats, dtype=float)
    b_mats = np.array(b_mats, dtype=float)
    n, nx, nu = b_mats.shape
    check_psd(q_mat, "Q")
    r_mat = np.asarray(r_mat, dtype=float)
    qf_mat = q_mat if qf_mat is None else qf_mat
    masks = None
    if active is not None:
        masks = np.repeat(np.asarray(active, dtype=bool), 3, axis=1)
        b_mats[~masks[:, None, :].repeat(nx, axis=1)] = 0.0
    gains = np.zeros((n, nu, nx))
    p_mat = np.asarray(qf_mat, dtype=float)
    for k in range(n - 1, -1, -1):
        a, b = a_mats[k], b_mats[k]
        pb = p_mat @ b
        try:
            factor = cho_factor(r_mat + b.T @ pb)
        except np.linalg.LinAlgError:
            raise RiccatiError(k) from None
        gain = -cho_solve(factor, pb.T @ a)
        if masks is not None:
            gain[~masks[k]] = 0.0
        gains[k] = gain
        a_cl = a + b @ gain
        p_mat = q_mat + a.T @ p_mat @ a_cl
        p_mat = 0.5 * (p_mat + p_mat.T)
    return FeedbackPolicy(gains)


def propagate_covariance(derivs, policy: FeedbackPolicy, model: UncertaintyModel,
                         mode=ZERO_ORDER):
    """Propagate ``Sigma_{k+1} = Acl Sigma_k Acl' + C Sigma_theta C' + Sigma_w``.

    ``derivs`` is one :class:`~stochastic_centroidal.model.DynamicsDerivatives`
    per step.  In ``first_order`` mode the covariance sensitivity ``T_k`` is
    propagated alongside, treating ``z`` as a perturbation shared by every
    stage::

        T_{k+1} = Acl T_k Acl' + d(Acl Sigma_k Acl' + C Sigma_theta C') / dz_k
    """
    if mode not in (ZERO_ORDER, FIRST_ORDER):
        raise ValueError(f"unknown mode {mode!r}")
    n = len(derivs)
    gains = policy.gains
    if gains.shape[0] != n:
        raise ValidationError("policy", f"expected {n} gains, got {gains.shape[0]}")
    nu = gains.shape[1]
    theta = model.theta_cov(nu // 3)
    sigmas = np.zeros((n + 1, STATE_DIM, STATE_DIM))
    tensors = None
    if mode == FIRST_ORDER:
        tensors = np.zeros((n + 1, STATE_DIM, STATE_DIM, STATE_DIM + nu))
    for k, d in enumerate(derivs):
        a_cl = d.a_mat + d.b_mat @ gains[k]
        sig = sigmas[k]
        c_theta = d.c_mat @ theta
        nxt = a_cl @ sig @ a_cl.T + c_theta @ d.c_mat.T + model.sigma_w
        nxt = 0.5 * (nxt + nxt.T)
        if np.any(nxt):
            min_eig = np.linalg.eigvalsh(nxt)[0]
            if min_eig < -1e-8:
                raise CovarianceError(k + 1, min_eig)
        sigmas[k + 1] = nxt
        if tensors is not None:
            d_acl = d.da_dz + np.einsum("iuz,uj->ijz", d.db_dz, gains[k])
            stage = np.einsum("ijz,jk,lk->ilz", d_acl, sig, a_cl)
            stage += np.einsum("iuz,ul->ilz", d.dc_dz, c_theta.T)
            stage = stage + stage.transpose(1, 0, 2)
            carried = np.einsum("ij,jkz,lk->ilz", a_cl, tensors[k], a_cl)
            tensors[k + 1] = carried + stage
    return CovarianceTrajectory(sigmas, tensors)


def weighted_norm(row, sigma):
    """``sqrt(row' Sigma row)``, the standard deviation of ``row' x``."""
    row = np.asarray(row, dtype=float)
    return math.sqrt(max(float(row @ sigma @ row), 0.0))


def backoff(row, sigma, epsilon):
    """Deterministic tightening guaranteeing ``P(row' x > h - eta) <= epsilon``
    for zero-mean Gaussian deviations with covariance ``sigma``."""
    epsilon = check_probability(epsilon, "epsilon", 0.0, 0.5 + 1e-15)
    return gaussian_quantile(1.0 - epsilon) * weighted_norm(row, sigma)


def norm_gradient(row, sigma, sigma_deriv):
    """Gradient of ``sqrt(row' Sigma(z) row)`` with ``row`` held constant.

    ``sigma_deriv`` has shape ``(n, n, nz)``.  Returns zeros when the norm
    vanishes (the square root is not differentiable there).
    """
    row = np.asarray(row, dtype=float)
    nrm = weighted_norm(row, sigma)
    if nrm <= 1e-12:
        return np.zeros(np.shape(sigma_deriv)[-1])
    return np.einsum("i,j,ijz->z", row, row, sigma_deriv) / (2.0 * nrm)


def backoff_gradient(row, sigma, sigma_deriv, epsilon):
    """Gradient of :func:`backoff` with respect to ``z``."""
    epsilon = check_probability(epsilon, "epsilon", 0.0, 0.5 + 1e-15)
    return gaussian_quantile(1.0 - epsilon) * norm_gradient(row, sigma, sigma_deriv)
