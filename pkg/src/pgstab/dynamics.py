"""Simulator-side view of a system: black-box steps, damped rollouts, cart-pole.

A ``NonlinearSystem`` exposes exactly what a simulator gives you: a one-step
transition ``G(x, u)`` and (for linearization and sensitivity propagation) its
Jacobians.  Both callables accept a single state of shape ``(d_x,)`` or a
batch of shape ``(N, d_x)`` and broadcast accordingly; all built-in systems
are vectorized over the batch axis.

Discounting is realized by damping the dynamics, never the costs: a damped
rollout steps ``x_{t+1} = sqrt(gamma) G(x_t, K x_t)`` and accumulates
*undiscounted* quadratic stage costs.  On linear systems this reproduces the
discounted cost exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import CostSpec, LinearSystem

BLOWUP_FACTOR = 1e6  # ||x_t|| > BLOWUP_FACTOR * max(1, ||x0||) counts as divergence


@dataclass(frozen=True)
class NonlinearSystem:
    """Black-box dynamics x' = G(x, u) with Jacobian access.

    Attributes
    ----------
    d_x, d_u : state and input dimensions.
    step : callable ``(x, u) -> x'`` mapping states to next states; must
        broadcast over a leading batch axis.
    jac : callable ``(x, u) -> (G_x, G_u)`` returning the Jacobians of
        ``step`` at ``(x, u)``, shapes ``(d_x, d_x)`` and ``(d_x, d_u)``
        (with a leading batch axis if the inputs are batched).
    step_jac : optional fused callable ``(x, u) -> (x', G_x, G_u)`` for
        batched inputs; lets sensitivity rollouts share the work between the
        step and its Jacobians.  Must agree with ``step`` and ``jac`` exactly.
    name : short descriptor used in reports.
    linear : the exact ``LinearSystem`` when the dynamics are declared
        linear, else ``None``.  Declared-linear systems get the cheaper
        search strategy during annealing.
    """

    d_x: int
    d_u: int
    step: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jac: Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]
    step_jac: Callable[
        [np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray, np.ndarray]
    ] | None = None
    name: str = ""
    linear: LinearSystem | None = None


def linear_as_nonlinear(sys: LinearSystem, name: str = "linear") -> NonlinearSystem:
    """Wrap exact linear dynamics in the simulator interface."""
    A, B = sys.A, sys.B
    At, Bt = A.T.copy(), B.T.copy()

    def step(x, u):
        return np.asarray(x, dtype=float) @ At + np.asarray(u, dtype=float) @ Bt

    def _batch_jacs(n):
        return (
            np.broadcast_to(A, (n,) + A.shape).copy(),
            np.broadcast_to(B, (n,) + B.shape).copy(),
        )

    def jac(x, u):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return A.copy(), B.copy()
        return _batch_jacs(x.shape[0])

    def step_jac(x, u):
        # read-only broadcast views: consumers combine, never mutate, Jacobians
        n = x.shape[0]
        gx = np.broadcast_to(A, (n,) + A.shape)
        gu = np.broadcast_to(B, (n,) + B.shape)
        return x @ At + u @ Bt, gx, gu

    return NonlinearSystem(
        d_x=sys.d_x,
        d_u=sys.d_u,
        step=step,
        jac=jac,
        step_jac=step_jac,
        name=name,
        linear=sys,
    )


@dataclass(frozen=True)
class CartPoleParams:
    """Cart-pole constants; defaults are the unity benchmark configuration."""

    m_p: float = 1.0  # pole mass
    m_c: float = 1.0  # cart mass
    l: float = 1.0  # pole length
    g: float = 1.0  # gravity
    ts: float = 0.05  # Euler integration step

    def __post_init__(self):
        for name in ("m_p", "m_c", "l", "g", "ts"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def cartpole(params: CartPoleParams | None = None) -> NonlinearSystem:
    """Cart-pole with the pole upright at the origin, forward-Euler discretized.

    State is ``(x, theta, xdot, thetadot)`` with ``theta = 0`` the unstable
    upright equilibrium; the input is a horizontal force on the cart.  The
    continuous dynamics solve

        [m_p + m_c,        -m_p l cos(theta)] [xddot    ]   [u - m_p l sin(theta) thetadot^2]
        [-m_p l cos(theta), m_p l^2         ] [thetaddot] = [m_p g l sin(theta)             ]

    and the 2x2 mass matrix is inverted in closed form.  ``jac`` is the
    hand-differentiated Jacobian of the Euler step.
    """
    p = params or CartPoleParams()
    mp, mc, l, g, ts = p.m_p, p.m_c, p.l, p.g, p.ts

    mpl = mp * l
    mpll = mp * l * l
    mtot = mp + mc

    def _core(th, om, f):
        s, c = np.sin(th), np.cos(th)
        invdet = 1.0 / (mpll * mtot - (mpl * c) ** 2)
        b1 = f - mpl * s * om**2
        b2 = mp * g * l * s
        xacc = (mpll * b1 + mpl * c * b2) * invdet
        thacc = (mpl * c * b1 + mtot * b2) * invdet
        return s, c, invdet, b1, b2, xacc, thacc

    def _euler(x, th, v, om, xacc, thacc):
        xn = np.empty_like(x)
        xn[..., 0] = x[..., 0] + ts * v
        xn[..., 1] = th + ts * om
        xn[..., 2] = v + ts * xacc
        xn[..., 3] = om + ts * thacc
        return xn

    def step(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        th, v, om = x[..., 1], x[..., 2], x[..., 3]
        xacc, thacc = _core(th, om, u[..., 0])[5:]
        return _euler(x, th, v, om, xacc, thacc)

    def _jacs(s, c, invdet, b1, b2, xacc, thacc, om, n):
        ddet_scaled = 2.0 * mpl * mpl * c * s * invdet
        db1_dth = -mpl * c * om**2
        db1_dom = -2.0 * mpl * s * om
        db2_dth = mp * g * l * c
        dxacc_dth = (
            mpll * db1_dth - mpl * s * b2 + mpl * c * db2_dth
        ) * invdet - xacc * ddet_scaled
        dxacc_dom = mpll * db1_dom * invdet
        dxacc_du = mpll * invdet
        dthacc_dth = (
            -mpl * s * b1 + mpl * c * db1_dth + mtot * db2_dth
        ) * invdet - thacc * ddet_scaled
        dthacc_dom = mpl * c * db1_dom * invdet
        dthacc_du = mpl * c * invdet

        gx = np.zeros((n, 4, 4))
        gx[:, 0, 0] = 1.0
        gx[:, 0, 2] = ts
        gx[:, 1, 1] = 1.0
        gx[:, 1, 3] = ts
        gx[:, 2, 1] = ts * dxacc_dth
        gx[:, 2, 2] = 1.0
        gx[:, 2, 3] = ts * dxacc_dom
        gx[:, 3, 1] = ts * dthacc_dth
        gx[:, 3, 3] = 1.0 + ts * dthacc_dom
        gu = np.zeros((n, 4, 1))
        gu[:, 2, 0] = ts * dxacc_du
        gu[:, 3, 0] = ts * dthacc_du
        return gx, gu

    def jac(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        single = x.ndim == 1
        xb = np.atleast_2d(x)
        ub = u.reshape(xb.shape[0], 1)
        th, om = xb[:, 1], xb[:, 3]
        core = _core(th, om, ub[:, 0])
        gx, gu = _jacs(*core, om, xb.shape[0])
        if single:
            return gx[0], gu[0]
        return gx, gu

    def step_jac(x, u):
        th, v, om = x[:, 1], x[:, 2], x[:, 3]
        core = _core(th, om, u[:, 0])
        xn = _euler(x, th, v, om, *core[5:])
        gx, gu = _jacs(*core, om, x.shape[0])
        return xn, gx, gu

    return NonlinearSystem(
        d_x=4, d_u=1, step=step, jac=jac, step_jac=step_jac, name="cartpole"
    )


def jacobian_linearization(sys: NonlinearSystem) -> LinearSystem:
    """Linearization (A, B) of the dynamics at the origin equilibrium."""
    gx, gu = sys.jac(np.zeros(sys.d_x), np.zeros(sys.d_u))
    return LinearSystem(np.asarray(gx, dtype=float), np.asarray(gu, dtype=float))


@dataclass
class Rollout:
    """A single closed-loop trajectory with its running quadratic cost.

    ``states`` has one more row than ``inputs`` and ``stage_costs``.
    ``truncated`` means the rollout stopped before the requested horizon
    (cost cap hit or divergence); ``diverged`` means the state blew past the
    blow-up bound or went non-finite.
    """

    states: np.ndarray
    inputs: np.ndarray
    stage_costs: np.ndarray
    truncated: bool
    diverged: bool

    @property
    def cost(self) -> float:
        return float(self.stage_costs.sum())

    @property
    def horizon(self) -> int:
        return self.inputs.shape[0]


def damped_rollout(
    sys: NonlinearSystem,
    K: np.ndarray,
    gamma: float,
    x0: np.ndarray,
    horizon: int,
    cost: CostSpec,
    *,
    cap: float = np.inf,
    blowup_factor: float = BLOWUP_FACTOR,
) -> Rollout:
    """Roll the damped closed loop x' = sqrt(gamma) G(x, Kx) for ``horizon`` steps.

    Stage costs are undiscounted ``x'Qx + u'Ru``.  Stops early (``truncated``)
    once the accumulated cost exceeds ``cap``, and flags ``diverged`` if the
    state norm exceeds ``blowup_factor * max(1, ||x0||)`` or goes non-finite.
    A zero horizon returns the initial state alone at zero cost.
    """
    if not (0.0 < gamma <= 1.0):
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    K = np.asarray(K, dtype=float)
    x = np.asarray(x0, dtype=float).reshape(sys.d_x)
    sq = np.sqrt(gamma)
    blow2 = (blowup_factor * max(1.0, float(np.linalg.norm(x)))) ** 2

    states = [x.copy()]
    inputs: list[np.ndarray] = []
    costs: list[float] = []
    total = 0.0
    truncated = False
    diverged = False
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(horizon):
            u = K @ x
            stage = float(cost.stage(x, u))
            inputs.append(u.copy())
            costs.append(stage)
            total += stage
            x = sq * np.asarray(sys.step(x, u), dtype=float).reshape(sys.d_x)
            states.append(x.copy())
            # squared-norm test: overflow to inf and NaN both fail `<=`
            if not float((x * x).sum()) <= blow2:
                diverged = True
                truncated = True
                break
            if total > cap:
                truncated = True
                break
    return Rollout(
        states=np.array(states),
        inputs=np.array(inputs).reshape(len(inputs), sys.d_u),
        stage_costs=np.array(costs),
        truncated=truncated,
        diverged=diverged,
    )


@dataclass
class BatchCosts:
    """Per-rollout outcome of a batched damped rollout."""

    costs: np.ndarray  # (N,) accumulated undiscounted stage costs
    steps: np.ndarray  # (N,) stages accumulated before stopping
    diverged: np.ndarray  # (N,) bool
    capped: np.ndarray  # (N,) bool, rollout stopped at its cost cap


def rollout_cost_batch(
    sys: NonlinearSystem,
    K: np.ndarray,
    gamma: float,
    x0s: np.ndarray,
    horizon: int,
    cost: CostSpec,
    *,
    rollout_cap: float = np.inf,
    blowup_factor: float = BLOWUP_FACTOR,
) -> BatchCosts:
    """Accumulate stage costs for a batch of damped closed-loop rollouts.

    Semantically identical to ``damped_rollout`` run per row of ``x0s`` with
    ``cap=rollout_cap``, but stepped in lockstep across the batch.  ``K`` may
    also carry one gain per rollout (shape ``(N, d_u, d_x)``).
    """
    if not (0.0 < gamma <= 1.0):
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    K = np.asarray(K, dtype=float)
    X = np.array(x0s, dtype=float)
    if X.ndim != 2 or X.shape[1] != sys.d_x:
        raise ValueError(f"x0s must have shape (N, {sys.d_x}), got {X.shape}")
    n = X.shape[0]
    per_row_gains = K.ndim == 3
    if per_row_gains:
        if K.shape != (n, sys.d_u, sys.d_x):
            raise ValueError(
                f"per-rollout gains must have shape ({n}, {sys.d_u}, {sys.d_x}),"
                f" got {K.shape}"
            )
        Ks = K
    else:
        Kt = K.T.copy()
    sq = np.sqrt(gamma)

    totals = np.zeros(n)
    steps = np.zeros(n, dtype=int)
    diverged = np.zeros(n, dtype=bool)
    capped = np.zeros(n, dtype=bool)

    # Rollouts step in lockstep; stopped rows are compacted out so the common
    # all-alive case runs without per-step fancy indexing.
    act = np.arange(n)
    blow2 = (blowup_factor * np.maximum(1.0, np.linalg.norm(X, axis=1))) ** 2
    tot = np.zeros(n)
    t = 0
    with np.errstate(over="ignore", invalid="ignore"):
        while t < horizon and act.size:
            if per_row_gains:
                u = (Ks @ X[:, :, None])[:, :, 0]
            else:
                u = X @ Kt
            tot += cost.stage(X, u)
            X = sq * np.asarray(sys.step(X, u), dtype=float)
            t += 1
            # squared-norm test: overflow to inf and NaN both fail `<=`
            bad = ~((X * X).sum(axis=1) <= blow2)
            over = tot > rollout_cap
            stop = bad | over
            if stop.any():
                ridx = act[stop]
                totals[ridx] = tot[stop]
                steps[ridx] = t
                diverged[act[bad]] = True
                capped[act[over & ~bad]] = True
                keep = ~stop
                act = act[keep]
                X = X[keep]
                tot = tot[keep]
                blow2 = blow2[keep]
                if per_row_gains:
                    Ks = Ks[keep]
    totals[act] = tot
    steps[act] = t
    return BatchCosts(costs=totals, steps=steps, diverged=diverged, capped=capped)


def rollout_to_csv(rollout: Rollout, path) -> None:
    """Write a rollout as CSV with columns t, state, input, stage cost.

    The final row carries the terminal state with empty input and cost cells.
    """
    d_x = rollout.states.shape[1]
    d_u = rollout.inputs.shape[1] if rollout.inputs.size else 1
    header = (
        ["t"]
        + [f"x{i}" for i in range(d_x)]
        + [f"u{i}" for i in range(d_u)]
        + ["stage_cost"]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t in range(rollout.horizon):
            writer.writerow(
                [t]
                + [repr(float(v)) for v in rollout.states[t]]
                + [repr(float(v)) for v in rollout.inputs[t]]
                + [repr(float(rollout.stage_costs[t]))]
            )
        t = rollout.horizon
        writer.writerow(
            [t] + [repr(float(v)) for v in rollout.states[t]] + [""] * d_u + [""]
        )
