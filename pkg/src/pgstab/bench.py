"""Benchmarks and report generation: region-of-attraction estimates, the
random linear suite, the cart-pole experiment, and the discounting
counterexample.  All outputs are plain CSV/JSON files with the
configuration hash and master seed alongside.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import oracles
from .anneal import AnnealConfig, discount_anneal
from .dynamics import (
    BLOWUP_FACTOR,
    CartPoleParams,
    NonlinearSystem,
    cartpole,
    jacobian_linearization,
    linear_as_nonlinear,
)
from .lqr import lqr_cost, reward_shaping_counterexample
from .matops import NotStabilizableError, solve_dare, spectral_radius
from .model import CostSpec, LinearSystem

# Reference value for an H-infinity controller synthesized with external
# tooling; reported for comparison only, never computed here.
HINF_REFERENCE_ROA = 0.506


@dataclass(frozen=True)
class RoaConfig:
    """Settings for the sampled region-of-attraction estimate."""

    directions: int = 64
    horizon: int = 2000
    delta_conv: float = 1e-3
    tol: float = 1e-3
    ceiling: float = 3.0
    seed: int = 0


@dataclass
class RoaReport:
    rho_roa: float
    radii: np.ndarray
    directions: np.ndarray
    config: RoaConfig

    def to_dict(self) -> dict:
        return {
            "rho_roa": self.rho_roa,
            "radii": self.radii.tolist(),
            "config": asdict(self.config),
        }


def _converged_mask(
    sys: NonlinearSystem,
    K: np.ndarray,
    x0s: np.ndarray,
    horizon: int,
    targets: np.ndarray,
) -> np.ndarray:
    """True per rollout if the undamped closed loop reaches ||x|| <= target."""
    K = np.asarray(K, dtype=float)
    Kt = K.T.copy()
    X = np.array(x0s, dtype=float)
    blow2 = (BLOWUP_FACTOR * np.maximum(1.0, np.linalg.norm(X, axis=1))) ** 2
    tgt2 = np.asarray(targets, dtype=float) ** 2
    conv = (X * X).sum(axis=1) <= tgt2
    act = np.flatnonzero(~conv)
    X = X[act]
    blow2 = blow2[act]
    tgt2 = tgt2[act]
    # squared-norm tests throughout; stopped rows are compacted out
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(horizon):
            if not act.size:
                break
            X = np.asarray(sys.step(X, X @ Kt), dtype=float)
            s2 = (X * X).sum(axis=1)
            reached = s2 <= tgt2  # NaN and inf fail `<=`
            dead = ~(s2 <= blow2)
            stop = reached | dead
            if stop.any():
                conv[act[reached]] = True
                keep = ~stop
                act = act[keep]
                X = X[keep]
                blow2 = blow2[keep]
                tgt2 = tgt2[keep]
    return conv


def estimate_roa(
    sys: NonlinearSystem, K: np.ndarray, cfg: RoaConfig | None = None
) -> RoaReport:
    """Largest sphere of initial states from which the closed loop converges.

    Draws seeded random unit directions, bisects the critical radius along
    each (convergence means reaching ``||x|| <= delta_conv * radius`` within
    the horizon), and reports the minimum over directions.  Directions that
    still converge at the search ceiling report the ceiling.
    """
    cfg = cfg or RoaConfig()
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0xD18,)))
    dirs = rng.standard_normal((cfg.directions, sys.d_x))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    lo = np.zeros(cfg.directions)
    hi = np.full(cfg.directions, cfg.ceiling)
    at_top = _converged_mask(
        sys,
        K,
        cfg.ceiling * dirs,
        cfg.horizon,
        cfg.delta_conv * cfg.ceiling * np.ones(cfg.directions),
    )
    lo[at_top] = cfg.ceiling
    open_dirs = np.flatnonzero(~at_top)
    rounds = max(1, math.ceil(math.log2(cfg.ceiling / cfg.tol)))
    for _ in range(rounds):
        if open_dirs.size == 0:
            break
        mid = 0.5 * (lo[open_dirs] + hi[open_dirs])
        conv = _converged_mask(
            sys,
            K,
            mid[:, None] * dirs[open_dirs],
            cfg.horizon,
            cfg.delta_conv * mid,
        )
        lo[open_dirs[conv]] = mid[conv]
        hi[open_dirs[~conv]] = mid[~conv]
        open_dirs = open_dirs[(hi[open_dirs] - lo[open_dirs]) > cfg.tol]
    return RoaReport(
        rho_roa=float(lo.min()), radii=lo, directions=dirs, config=cfg
    )


def write_csv(path, header: list[str], rows: list[list]) -> None:
    """CSV writer that renders floats with ``repr`` so files re-parse exactly."""

    def render(v):
        # np.float64 subclasses float but reprs as "np.float64(...)", so
        # coerce before repr
        if isinstance(v, (float, np.floating)):
            return repr(float(v))
        if isinstance(v, (np.integer,)):
            return str(int(v))
        return v

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([render(v) for v in row])


def _write_meta(out_dir: Path, name: str, config_obj, seed: int) -> None:
    # hash everything except where the report lands, so reruns of the same
    # experiment into different directories carry the same identifier
    hashed = asdict(config_obj)
    hashed.pop("out_dir", None)
    payload = json.dumps(hashed, sort_keys=True, default=str)
    meta = {
        "report": name,
        "config": asdict(config_obj),
        "config_hash": hashlib.sha256(payload.encode()).hexdigest()[:16],
        "seed": seed,
    }
    (out_dir / f"{name}.meta.json").write_text(
        json.dumps(meta, indent=2, default=str)
    )


def sample_stabilizable_system(
    rng: np.random.Generator, d_x: int, rho_low: float = 1.0, rho_high: float = 2.0
) -> LinearSystem:
    """Random stabilizable (A, B) with open-loop spectral radius in (rho_low, rho_high]."""
    while True:
        target = rng.uniform(rho_low + 1e-9, rho_high)
        A = rng.standard_normal((d_x, d_x))
        A *= target / spectral_radius(A)
        d_u = int(rng.integers(1, d_x + 1))
        B = rng.standard_normal((d_x, d_u))
        sys = LinearSystem(A, B)
        try:
            solve_dare(sys, CostSpec.identity(d_x, d_u), 1.0)
        except NotStabilizableError:
            continue
        return sys


@dataclass
class LinearSuiteConfig:
    instances: int = 10
    dims: tuple = (2, 3, 4)
    seed: int = 0
    modes: tuple = ("exact",)
    n_rollouts: int = 400
    horizon: int = 250
    pg_steps: int = 80
    estimator: str = "sensitivity"
    max_outer: int = 200
    out_dir: str | None = None


def run_linear_suite(cfg: LinearSuiteConfig) -> list[dict]:
    """Anneal a batch of random unstable linear systems and tabulate the outcome.

    Each instance is cross-checked against the Riccati solution: the row
    records the optimal undiscounted cost, the achieved gap, iteration and
    query counts, and the closed-loop spectral radius of the returned gain.
    Failures are recorded per instance and do not stop the suite.
    """
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0x11E,)))
    rows = []
    for i in range(cfg.instances):
        d_x = int(cfg.dims[i % len(cfg.dims)])
        lin = sample_stabilizable_system(rng, d_x)
        cost = CostSpec.identity(lin.d_x, lin.d_u)
        p_star, _ = solve_dare(lin, cost, 1.0)
        tr_p_star = float(np.trace(p_star))
        sys = linear_as_nonlinear(lin, name=f"linear-{i}")
        for mode in cfg.modes:
            seed_i = int(
                np.random.SeedSequence(cfg.seed, spawn_key=(i, 7)).generate_state(1)[0]
            )
            anneal_cfg = AnnealConfig(
                oracle_mode=mode,
                seed=seed_i,
                max_outer=cfg.max_outer,
                oracle=(
                    oracles.OracleConfig(
                        n_rollouts=cfg.n_rollouts,
                        horizon=cfg.horizon,
                        radius=math.sqrt(d_x),
                        seed=seed_i,
                        estimator=cfg.estimator,
                    )
                    if mode == "sampled"
                    else None
                ),
                pg_steps=cfg.pg_steps,
            )
            row = {
                "instance": i,
                "d_x": lin.d_x,
                "d_u": lin.d_u,
                "mode": mode,
                "tr_p_star": tr_p_star,
                "rho_open_loop": spectral_radius(lin.A),
            }
            try:
                K_hat, state = discount_anneal(sys, cost, anneal_cfg)
                final_cost = lqr_cost(lin, cost, K_hat, 1.0)
                row.update(
                    {
                        "status": "ok",
                        "final_cost": final_cost,
                        "gap": final_cost - tr_p_star,
                        "outer_iters": state.outer_iterations,
                        "eval_queries": state.eval_queries,
                        "grad_queries": state.grad_queries,
                        "max_search_queries": max(
                            (r.search_queries for r in state.history), default=0
                        ),
                        "rho_closed_loop": spectral_radius(lin.closed_loop(K_hat)),
                    }
                )
            except Exception as exc:  # noqa: BLE001 - suite must keep going
                row.update({"status": f"error:{type(exc).__name__}", "final_cost": np.nan,
                            "gap": np.nan, "outer_iters": -1, "eval_queries": -1,
                            "grad_queries": -1, "max_search_queries": -1,
                            "rho_closed_loop": np.nan})
            rows.append(row)
    if cfg.out_dir is not None:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        header = list(rows[0].keys())
        write_csv(out / "linear_suite.csv", header, [[r[h] for h in header] for r in rows])
        _write_meta(out, "linear_suite", cfg, cfg.seed)
    return rows


@dataclass
class CartpoleBenchConfig:
    radii: tuple = (0.1,)
    trials: int = 3
    seed: int = 0
    n_rollouts: int = 1000
    horizon: int = 400
    pg_steps: int = 120
    estimator: str = "sensitivity"
    learning_rate: float | None = None  # None -> 0.01 / radius
    max_outer: int = 30
    roa: RoaConfig = field(default_factory=RoaConfig)
    params: CartPoleParams = field(default_factory=CartPoleParams)
    out_dir: str | None = None


def run_cartpole(cfg: CartpoleBenchConfig) -> dict:
    """Anneal cart-pole from scratch at each start radius and measure the ROA.

    Emits a summary table with [min, max] over trials per radius, per-trial
    iteration traces that include the gap to the discounted Riccati gain on
    the linearization, and a baselines table (exact LQR on the linearization,
    plus an externally synthesized reference value).
    """
    sys = cartpole(cfg.params)
    cost = CostSpec.identity(sys.d_x, sys.d_u)
    lin = jacobian_linearization(sys)

    table_rows = []
    traces = {}
    for i, radius in enumerate(cfg.radii):
        roas, iters, final_costs = [], [], []
        for j in range(cfg.trials):
            seed_ij = int(
                np.random.SeedSequence(cfg.seed, spawn_key=(i, j)).generate_state(1)[0]
            )
            oracle_cfg = oracles.OracleConfig(
                n_rollouts=cfg.n_rollouts,
                horizon=cfg.horizon,
                radius=radius,
                seed=seed_ij,
                estimator=cfg.estimator,
            )
            anneal_cfg = AnnealConfig(
                oracle_mode="sampled",
                seed=seed_ij,
                oracle=oracle_cfg,
                pg_steps=cfg.pg_steps,
                pg_optimizer="adam",
                learning_rate=cfg.learning_rate,
                max_outer=cfg.max_outer,
            )
            K_hat, state = discount_anneal(sys, cost, anneal_cfg)
            roa = estimate_roa(sys, K_hat, cfg.roa)
            sampled = oracles.eps_eval(
                sys,
                K_hat,
                1.0,
                oracle_cfg,
                cost,
                query_index=state.query_counter + 1,
            )
            roas.append(roa.rho_roa)
            iters.append(state.outer_iterations)
            final_costs.append(sampled.value)
            trace_rows = []
            for rec in state.history:
                _, k_lin = solve_dare(lin, cost, rec.gamma)
                gain_gap = float(
                    np.linalg.norm(np.array(rec.gain) - k_lin, "fro")
                )
                trace_rows.append(
                    [
                        rec.iteration,
                        rec.gamma,
                        rec.gamma_next if rec.gamma_next is not None else "",
                        rec.cost_end,
                        rec.inner_steps,
                        rec.search_queries,
                        gain_gap,
                    ]
                )
            traces[(radius, j)] = trace_rows
        table_rows.append(
            [
                radius,
                min(roas),
                max(roas),
                cfg.trials,
                max(iters),
                min(final_costs),
                max(final_costs),
            ]
        )

    _, k_lqr = solve_dare(lin, cost, 1.0)
    roa_lqr = estimate_roa(sys, k_lqr, cfg.roa)
    baselines = [
        ["lqr_linearization", roa_lqr.rho_roa, "computed"],
        ["hinf", HINF_REFERENCE_ROA, "external"],
    ]

    result = {
        "table": table_rows,
        "baselines": baselines,
        "lqr_gain": k_lqr.tolist(),
        "traces": {f"r{r}_trial{j}": rows for (r, j), rows in traces.items()},
    }
    if cfg.out_dir is not None:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(
            out / "cartpole_table.csv",
            ["r", "roa_min", "roa_max", "trials", "iters_max",
             "final_cost_min", "final_cost_max"],
            table_rows,
        )
        write_csv(out / "baselines.csv", ["label", "rho_roa", "source"], baselines)
        for (radius, j), rows in traces.items():
            write_csv(
                out / f"trace_r{radius}_trial{j}.csv",
                ["iteration", "gamma", "gamma_next", "cost", "inner_steps",
                 "search_queries", "gain_gap_fro"],
                rows,
            )
        _write_meta(out, "cartpole", cfg, cfg.seed)
    return result


def run_counterexample(gamma: float = 0.9 / 4.0, out_dir: str | None = None) -> dict:
    """Produce the discounting-fails-to-stabilize witness and its certificates."""
    witness = reward_shaping_counterexample(gamma)
    A = np.diag([0.0, 2.0])
    B = np.array([[1.0], [witness.beta]])
    lin = LinearSystem(A, B)
    rho_damped = spectral_radius(np.sqrt(gamma) * lin.closed_loop(witness.gain))
    record = {
        "gamma": gamma,
        "beta": witness.beta,
        "gain": witness.gain.tolist(),
        "rho_damped": rho_damped,
        "rho_undamped": witness.rho_undamped,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "counterexample.json").write_text(json.dumps(record, indent=2))
    return record


def run_lqr_baseline(
    params: CartPoleParams | None = None,
    roa: RoaConfig | None = None,
    out_dir: str | None = None,
) -> dict:
    """Exact LQR gain on the cart-pole linearization and its measured ROA."""
    sys = cartpole(params)
    lin = jacobian_linearization(sys)
    cost = CostSpec.identity(lin.d_x, lin.d_u)
    _, k_lqr = solve_dare(lin, cost, 1.0)
    report = estimate_roa(sys, k_lqr, roa)
    record = {
        "gain": k_lqr.tolist(),
        "rho_roa": report.rho_roa,
        "rho_closed_loop_linearization": spectral_radius(lin.closed_loop(k_lqr)),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "lqr_baseline.json").write_text(json.dumps(record, indent=2))
    return record
