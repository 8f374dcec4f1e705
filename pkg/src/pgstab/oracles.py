"""Simulator-only cost and gradient queries for damped closed loops.

A query draws N initial states uniformly from the sphere of radius r,
rolls the damped closed loop for H steps, and averages the undiscounted
stage costs scaled by ``d_x / r**2`` (so on linear systems the expectation
is the discounted cost ``tr(P)`` truncated at horizon H, independent of r).

Seeding contract: every query is pure given ``(cfg.seed, query_index)``.
Rollout i inside a query draws from the i-th child of
``SeedSequence(cfg.seed, spawn_key=(query_index,))``, so rollouts can be
evaluated in any order (or in parallel) without changing the result, and
distinct query indices give independent streams.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .dynamics import BLOWUP_FACTOR, NonlinearSystem, rollout_cost_batch
from .model import CostSpec


class DivergedAllError(RuntimeError):
    """Every rollout in a gradient query diverged; no estimate is available."""


@dataclass(frozen=True)
class OracleConfig:
    """Sampling configuration for cost/gradient queries.

    ``cap`` bounds evaluation queries (values are reported as
    ``min(estimate, cap)``); ``smoothing_radius`` is the perturbation size of
    the two-point zeroth-order estimator.
    """

    n_rollouts: int = 100
    horizon: int = 200
    radius: float = 1.0
    seed: int = 0
    cap: float = np.inf
    smoothing_radius: float = 1e-2
    estimator: str = "sensitivity"  # "sensitivity" | "zeroth"

    def __post_init__(self):
        if self.n_rollouts < 1:
            raise ValueError("n_rollouts must be at least 1")
        if self.horizon < 0:
            raise ValueError("horizon must be nonnegative")
        if self.radius <= 0 or self.smoothing_radius <= 0:
            raise ValueError("radius and smoothing_radius must be positive")
        if self.cap <= 0:
            raise ValueError("cap must be positive")
        if self.estimator not in ("sensitivity", "zeroth"):
            raise ValueError(f"unknown estimator {self.estimator!r}")


@dataclass
class QueryResult:
    """Outcome of a single oracle query.

    ``value`` is the (possibly capped) cost estimate; gradient queries also
    report the mean cost over the rollouts they kept.  ``stderr`` is a scalar
    for evaluations and an elementwise array for gradients.  ``capped`` means
    the cap bound or a divergence was hit, so ``value`` is only a lower
    witness of the true cost.
    """

    value: float | None
    gradient: np.ndarray | None
    stderr: float | np.ndarray
    capped: bool
    rollouts_used: int
    dropped: int = 0


def sphere_sample(rng: np.random.Generator, d: int, radius: float) -> np.ndarray:
    """One point uniform on the sphere of the given radius in R^d."""
    z = rng.standard_normal(d)
    return radius * z / np.linalg.norm(z)


def _rollout_generators(cfg: OracleConfig, query_index: int, n: int):
    root = np.random.SeedSequence(cfg.seed, spawn_key=(query_index,))
    return [np.random.default_rng(child) for child in root.spawn(n)]


def initial_states(cfg: OracleConfig, d_x: int, query_index: int) -> np.ndarray:
    """The N seeded initial states of a query, one per rollout substream."""
    gens = _rollout_generators(cfg, query_index, cfg.n_rollouts)
    return np.array([sphere_sample(g, d_x, cfg.radius) for g in gens])


def eps_eval(
    sys: NonlinearSystem,
    K: np.ndarray,
    gamma: float,
    cfg: OracleConfig,
    cost: CostSpec,
    query_index: int = 0,
) -> QueryResult:
    """Capped Monte-Carlo estimate of the damped closed-loop cost.

    Returns ``min(estimate, cfg.cap)`` with ``capped`` set when any rollout
    diverged or the estimate reached the cap.  Individual rollouts stop
    accumulating once they alone force the capped outcome
    (raw cost above ``cap * N * r^2 / d_x``), which bounds the work spent on
    destabilizing gains.
    """
    scale = sys.d_x / cfg.radius**2
    x0s = initial_states(cfg, sys.d_x, query_index)
    rollout_cap = (
        cfg.cap * cfg.n_rollouts / scale if np.isfinite(cfg.cap) else np.inf
    )
    batch = rollout_cost_batch(
        sys, K, gamma, x0s, cfg.horizon, cost, rollout_cap=rollout_cap
    )
    per_rollout = scale * batch.costs
    estimate = float(per_rollout.mean())
    stderr = (
        float(per_rollout.std(ddof=1) / np.sqrt(cfg.n_rollouts))
        if cfg.n_rollouts > 1
        else 0.0
    )
    capped = bool(batch.diverged.any() or batch.capped.any() or estimate >= cfg.cap)
    return QueryResult(
        value=float(min(estimate, cfg.cap)),
        gradient=None,
        stderr=stderr,
        capped=capped,
        rollouts_used=cfg.n_rollouts,
    )


def eps_grad_sensitivity(
    sys: NonlinearSystem,
    K: np.ndarray,
    gamma: float,
    cfg: OracleConfig,
    cost: CostSpec,
    query_index: int = 0,
) -> QueryResult:
    """Gradient of the sampled finite-horizon objective by forward sensitivity.

    Propagates ``S_t = d x_t / d K`` alongside each rollout, which yields the
    exact (machine-precision) gradient of the Monte-Carlo objective for the
    drawn initial states; no smoothing bias, no cost capping.  Rollouts that
    diverge are dropped and counted; if all diverge, raises ``DivergedAllError``.
    """
    K = np.asarray(K, dtype=float)
    d_x, d_u = sys.d_x, sys.d_u
    p = d_u * d_x
    scale = d_x / cfg.radius**2
    sq = np.sqrt(gamma)
    Q, R = cost.Q, cost.R
    Kt = K.T.copy()

    X = initial_states(cfg, d_x, query_index)
    n = X.shape[0]
    blow2 = (BLOWUP_FACTOR * np.maximum(1.0, np.linalg.norm(X, axis=1))) ** 2
    # flat layout: S[n, i, a * d_x + b] = d x_i / d K[a, b]
    S = np.zeros((n, d_x, p))
    G = np.zeros((n, p))
    costs = np.zeros(n)
    dropped = 0
    fused = sys.step_jac

    # Rollouts step in lockstep; diverged rows are compacted out so the common
    # all-alive case runs without per-step fancy indexing.
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(cfg.horizon):
            if not X.shape[0]:
                break
            u = X @ Kt
            qx = X @ Q
            ru = u @ R
            costs += (X * qx).sum(axis=1) + (u * ru).sum(axis=1)
            w = 2.0 * (qx + ru @ K)  # d(stage)/dx pulled back through u = Kx
            G += (w[:, None, :] @ S)[:, 0, :]
            G += 2.0 * (ru[:, :, None] * X[:, None, :]).reshape(-1, p)
            if fused is not None:
                xn, gx, gu = fused(X, u)
            else:
                gx, gu = sys.jac(X, u)
                xn = np.asarray(sys.step(X, u), dtype=float)
            t_cl = gx + gu @ K
            direct = (gu[:, :, :, None] * X[:, None, None, :]).reshape(-1, d_x, p)
            S = sq * (t_cl @ S + direct)
            X = sq * xn
            # squared-norm test: overflow to inf and NaN both fail `<=`
            bad = ~((X * X).sum(axis=1) <= blow2)
            if bad.any():
                dropped += int(bad.sum())
                keep = ~bad
                X = X[keep]
                S = S[keep]
                G = G[keep]
                costs = costs[keep]
                blow2 = blow2[keep]

    n_used = X.shape[0]
    if n_used == 0:
        raise DivergedAllError(
            f"all {n} sensitivity rollouts diverged at gamma={gamma:g}"
        )
    grad = scale * G.mean(axis=0).reshape(d_u, d_x)
    stderr = (
        scale * G.std(axis=0, ddof=1).reshape(d_u, d_x) / np.sqrt(n_used)
        if n_used > 1
        else np.zeros_like(grad)
    )
    return QueryResult(
        value=float(scale * costs.mean()),
        gradient=grad,
        stderr=stderr,
        capped=dropped > 0,
        rollouts_used=n_used,
        dropped=dropped,
    )


@dataclass
class TwoPointResult:
    gradient: np.ndarray
    stderr: np.ndarray
    value: float  # mean of the paired midpoint evaluations
    used: int
    dropped: int


def two_point_gradient(
    evaluate: Callable[[np.ndarray, np.random.Generator], float],
    K: np.ndarray,
    smoothing_radius: float,
    n_directions: int,
    seed: int,
    query_index: int = 0,
) -> TwoPointResult:
    """Two-point zeroth-order gradient of an arbitrary scalar objective.

    For each direction U uniform on the unit Frobenius sphere the estimate is
    ``(d_K / (2 r_s)) * (f(K + r_s U) - f(K - r_s U)) * U`` with
    ``d_K = K.size``; both evaluations see the same per-direction stream so
    paired noise cancels.  ``evaluate`` may return NaN to drop a direction.
    The pair midpoints ``(f_plus + f_minus) / 2`` double as a smoothed cost
    estimate.
    """
    K = np.asarray(K, dtype=float)
    d_k = K.size
    root = np.random.SeedSequence(seed, spawn_key=(query_index,))
    estimates = []
    midpoints = []
    dropped = 0
    for child in root.spawn(n_directions):
        rng = np.random.default_rng(child)
        u = rng.standard_normal(K.shape)
        u /= np.linalg.norm(u)
        state = rng.bit_generator.state
        f_plus = evaluate(K + smoothing_radius * u, rng)
        rng.bit_generator.state = state  # same draw stream for the paired rollout
        f_minus = evaluate(K - smoothing_radius * u, rng)
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            dropped += 1
            continue
        estimates.append(d_k / (2.0 * smoothing_radius) * (f_plus - f_minus) * u)
        midpoints.append(0.5 * (f_plus + f_minus))
    if not estimates:
        raise DivergedAllError("all two-point direction pairs were dropped")
    stack = np.array(estimates)
    grad = stack.mean(axis=0)
    stderr = (
        stack.std(axis=0, ddof=1) / np.sqrt(len(estimates))
        if len(estimates) > 1
        else np.zeros_like(grad)
    )
    return TwoPointResult(
        gradient=grad,
        stderr=stderr,
        value=float(np.mean(midpoints)),
        used=len(estimates),
        dropped=dropped,
    )


def eps_grad_zeroth_order(
    sys: NonlinearSystem,
    K: np.ndarray,
    gamma: float,
    cfg: OracleConfig,
    cost: CostSpec,
    query_index: int = 0,
) -> QueryResult:
    """Two-point zeroth-order gradient from capped single-rollout evaluations.

    Each of the ``cfg.n_rollouts`` directions perturbs K by
    ``cfg.smoothing_radius`` along a random unit direction and differences two
    rollout costs started from the same sphere point; both members of a pair
    come from the direction's own seeded substream, exactly as
    ``two_point_gradient`` would evaluate them, but all ``2 N`` rollouts are
    stepped as one batch.  Direction pairs with a diverged member are dropped
    and counted.
    """
    K = np.asarray(K, dtype=float)
    d_k = K.size
    r_s = cfg.smoothing_radius
    n = cfg.n_rollouts
    scale = sys.d_x / cfg.radius**2
    rollout_cap = cfg.cap / scale if np.isfinite(cfg.cap) else np.inf

    root = np.random.SeedSequence(cfg.seed, spawn_key=(query_index,))
    dirs = np.empty((n,) + K.shape)
    x0s = np.empty((n, sys.d_x))
    for i, child in enumerate(root.spawn(n)):
        rng = np.random.default_rng(child)
        u = rng.standard_normal(K.shape)
        dirs[i] = u / np.linalg.norm(u)
        x0s[i] = sphere_sample(rng, sys.d_x, cfg.radius)
    gains = np.concatenate([K + r_s * dirs, K - r_s * dirs])
    batch = rollout_cost_batch(
        sys,
        gains,
        gamma,
        np.vstack([x0s, x0s]),
        cfg.horizon,
        cost,
        rollout_cap=rollout_cap,
    )
    f = np.where(batch.diverged, np.nan, np.minimum(scale * batch.costs, cfg.cap))
    f_plus, f_minus = f[:n], f[n:]
    valid = np.isfinite(f_plus) & np.isfinite(f_minus)
    used = int(valid.sum())
    if used == 0:
        raise DivergedAllError("all two-point direction pairs were dropped")
    coeff = (d_k / (2.0 * r_s)) * (f_plus[valid] - f_minus[valid])
    estimates = coeff[:, None, None] * dirs[valid]
    grad = estimates.mean(axis=0)
    stderr = (
        estimates.std(axis=0, ddof=1) / np.sqrt(used)
        if used > 1
        else np.zeros_like(grad)
    )
    return QueryResult(
        value=float(0.5 * (f_plus[valid] + f_minus[valid]).mean()),
        gradient=grad,
        stderr=stderr,
        capped=used < n,
        rollouts_used=used,
        dropped=n - used,
    )


def query_record(
    kind: str,
    K: np.ndarray,
    gamma: float,
    cfg: OracleConfig,
    query_index: int,
    result: QueryResult,
) -> dict:
    """JSON-ready transcript entry for a query, keyed by an inputs hash."""
    K = np.asarray(K, dtype=float)
    key = hashlib.sha256()
    key.update(kind.encode())
    key.update(K.tobytes())
    key.update(
        json.dumps(
            [gamma, cfg.seed, query_index, cfg.n_rollouts, cfg.horizon, cfg.radius,
             cfg.cap if np.isfinite(cfg.cap) else None],
            sort_keys=True,
        ).encode()
    )
    stderr = result.stderr
    return {
        "inputs_hash": key.hexdigest()[:16],
        "kind": kind,
        "gamma": gamma,
        "query_index": query_index,
        "value": result.value,
        "stderr": float(np.max(stderr)) if np.ndim(stderr) else float(stderr),
        "capped": result.capped,
        "rollouts_used": result.rollouts_used,
        "dropped": result.dropped,
    }


def append_query_record(path, record: dict) -> None:
    """Append one transcript entry to a JSON-lines run log."""
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def with_overrides(cfg: OracleConfig, **kwargs) -> OracleConfig:
    """Copy of the config with the given fields replaced."""
    return replace(cfg, **kwargs)
