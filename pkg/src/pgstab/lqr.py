"""Discounted LQR quantities for a fixed state-feedback gain.

With initial states drawn isotropically with identity covariance, the
gamma-discounted cost of a gain K is

    J(K | gamma) = tr(P)  where  P = Q + K'RK + gamma (A+BK)' P (A+BK),

finite exactly when ``sqrt(gamma) (A+BK)`` is Schur-stable.  Discounting is
equivalent to damping: J(K | gamma, A, B) = J(K | 1, sqrt(gamma) A, sqrt(gamma) B).
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .matops import NotStabilizableError, dlyap, solve_dare, spectral_radius
from .model import CostSpec, LinearSystem


class NoWitnessFoundError(RuntimeError):
    """The counterexample search exhausted its grid without a witness."""


def damp(sys: LinearSystem, gamma: float) -> LinearSystem:
    """The damped system (sqrt(gamma) A, sqrt(gamma) B)."""
    if not (0.0 < gamma <= 1.0):
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    sq = np.sqrt(gamma)
    return LinearSystem(sq * sys.A, sq * sys.B)


def value_matrix(
    sys: LinearSystem, cost: CostSpec, K: np.ndarray, gamma: float = 1.0
) -> np.ndarray:
    """Value matrix P of the gain K: solves P = Q + K'RK + gamma A_cl' P A_cl.

    Raises ``UnstableError`` when ``sqrt(gamma) (A+BK)`` is not Schur-stable.
    """
    if not (0.0 < gamma <= 1.0):
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    K = np.asarray(K, dtype=float)
    a_cl = np.sqrt(gamma) * sys.closed_loop(K)
    return dlyap(a_cl, cost.Q + K.T @ cost.R @ K)


def lqr_cost(
    sys: LinearSystem, cost: CostSpec, K: np.ndarray, gamma: float = 1.0
) -> float:
    """Discounted cost tr(P) of the gain K from identity-covariance starts."""
    return float(np.trace(value_matrix(sys, cost, K, gamma)))


def state_covariance(
    sys: LinearSystem, K: np.ndarray, gamma: float = 1.0
) -> np.ndarray:
    """Discounted state covariance Sigma_K = sum_t gamma^t A_cl^t (A_cl^t)'."""
    if not (0.0 < gamma <= 1.0):
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    K = np.asarray(K, dtype=float)
    a_cl = np.sqrt(gamma) * sys.closed_loop(K)
    return dlyap(a_cl.T, np.eye(sys.d_x))


def lqr_grad(
    sys: LinearSystem, cost: CostSpec, K: np.ndarray, gamma: float = 1.0
) -> np.ndarray:
    """Exact policy gradient of the discounted cost at K.

    grad = 2 (R K + gamma B' P_K (A + B K)) Sigma_K, with P_K the value
    matrix and Sigma_K the discounted state covariance.  Vanishes at the
    optimal gain.
    """
    K = np.asarray(K, dtype=float)
    P = value_matrix(sys, cost, K, gamma)
    sigma = state_covariance(sys, K, gamma)
    a_cl = sys.closed_loop(K)
    return 2.0 * (cost.R @ K + gamma * sys.B.T @ P @ a_cl) @ sigma


class ShapingWitness(NamedTuple):
    """A discount for which the discounted-optimal gain fails to stabilize."""

    beta: float
    gain: np.ndarray
    rho_undamped: float


def reward_shaping_counterexample(
    gamma: float, cost: CostSpec | None = None, *, beta_floor: float = 1e-12
) -> ShapingWitness:
    """Witness that solving the discounted problem can fail to stabilize.

    For A = diag(0, 2) and B = (1, beta)', any gain with
    ``max(|k1|, |k2|) < 1/(2 beta)`` leaves the closed loop unstable, yet for
    small beta the gamma-discounted optimal gain satisfies exactly that bound.
    Halves beta from 0.5 until the discounted-optimal gain has undamped
    spectral radius above 1.

    Requires ``gamma < 1/4`` so that the uncontrolled damped system is
    already stable (sqrt(gamma) * 2 < 1).
    """
    if not (0.0 < gamma < 0.25):
        raise ValueError(f"gamma must lie in (0, 1/4) for this family, got {gamma}")
    if cost is None:
        cost = CostSpec.identity(2, 1)
    if cost.d_x != 2 or cost.d_u != 1:
        raise ValueError("cost must be for d_x=2, d_u=1")

    A = np.diag([0.0, 2.0])
    beta = 0.5
    while beta >= beta_floor:
        sys = LinearSystem(A, np.array([[1.0], [beta]]))
        try:
            _, K = solve_dare(sys, cost, gamma)
        except NotStabilizableError:
            beta /= 2.0
            continue
        rho = spectral_radius(sys.closed_loop(K))
        if rho > 1.0:
            return ShapingWitness(beta=beta, gain=K, rho_undamped=rho)
        beta /= 2.0
    raise NoWitnessFoundError(
        f"no destabilizing discounted-optimal gain found above beta={beta_floor:g}"
    )
