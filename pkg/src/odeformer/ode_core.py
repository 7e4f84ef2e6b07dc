"""Explicit Runge-Kutta integration driven by coefficient tables.

A scheme is fully described by its node offsets ``alpha``, the strictly
lower-triangular stage weights ``beta`` and the combination weights
``gamma``. One step computes::

    F_1 = h * f(y, t)
    F_i = h * f(y + sum_{j<i} beta[i, j] * F_j, t + alpha[i] * h)
    y'  = y + sum_i gamma[i] * F_i

All arithmetic is float64. Step size is uniform.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericalOverflowError, PrecisionFloorError

FieldFn = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class RkScheme:
    name: str
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    nominal_order: int

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64)
        beta = np.asarray(self.beta, dtype=np.float64)
        gamma = np.asarray(self.gamma, dtype=np.float64)
        n = gamma.shape[0]
        if n < 1:
            raise ValueError("a scheme needs at least one stage")
        if alpha.shape != (n,) or beta.shape != (n, n):
            raise ValueError(
                f"inconsistent table shapes: alpha {alpha.shape}, "
                f"beta {beta.shape}, gamma {gamma.shape}"
            )
        if np.any(np.triu(beta) != 0.0):
            raise ValueError(f"{self.name}: beta must be strictly lower triangular")
        if self.nominal_order < 1:
            raise ValueError("nominal_order must be >= 1")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "gamma", gamma)

    @property
    def stages(self) -> int:
        return self.gamma.shape[0]

    def is_consistent(self, tol: float = 1e-12) -> bool:
        return abs(self.gamma.sum() - 1.0) <= tol


EULER = RkScheme("euler", [0.0], [[0.0]], [1.0], 1)

RK2 = RkScheme(
    "rk2",
    [0.0, 1.0],
    [[0.0, 0.0],
     [1.0, 0.0]],
    [0.5, 0.5],
    2,
)

RK4 = RkScheme(
    "rk4",
    [0.0, 0.5, 0.5, 1.0],
    [[0.0, 0.0, 0.0, 0.0],
     [0.5, 0.0, 0.0, 0.0],
     [0.0, 0.5, 0.0, 0.0],
     [0.0, 0.0, 1.0, 0.0]],
    [1 / 6, 2 / 6, 2 / 6, 1 / 6],
    4,
)

PRESETS = {s.name: s for s in (EULER, RK2, RK4)}


@dataclass
class OdeProblem:
    field_fn: FieldFn
    y0: np.ndarray
    t0: float
    t_end: float
    analytic: Optional[Callable[[float], np.ndarray]] = None

    def __post_init__(self):
        self.y0 = np.atleast_1d(np.asarray(self.y0, dtype=np.float64))
        if not self.t_end > self.t0:
            raise ValueError(f"t_end ({self.t_end}) must exceed t0 ({self.t0})")


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray = field(repr=False)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def rk_step(scheme: RkScheme, f: FieldFn, y, t: float, h: float) -> np.ndarray:
    """Advance ``y`` by one step of size ``h``."""
    if not h > 0:
        raise ValueError(f"step size must be positive, got {h}")
    y = np.asarray(y, dtype=np.float64)
    ks = []
    for i in range(scheme.stages):
        yi = y.copy()
        for j in range(i):
            if scheme.beta[i, j] != 0.0:
                yi = yi + scheme.beta[i, j] * ks[j]
        with np.errstate(over="ignore", invalid="ignore"):
            k = h * np.asarray(f(yi, t + scheme.alpha[i] * h), dtype=np.float64)
        if k.shape != y.shape:
            raise ValueError(f"field returned shape {k.shape}, state has {y.shape}")
        if not np.all(np.isfinite(k)):
            raise NumericalOverflowError(
                f"{scheme.name}: non-finite value at stage {i}", stage=i
            )
        ks.append(k)
    out = y.copy()
    for g, k in zip(scheme.gamma, ks):
        out = out + g * k
    if not np.all(np.isfinite(out)):
        raise NumericalOverflowError(
            f"{scheme.name}: non-finite combination", stage=scheme.stages
        )
    return out


def integrate(scheme: RkScheme, problem: OdeProblem, n_steps: int) -> Trajectory:
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    h = (problem.t_end - problem.t0) / n_steps
    times = problem.t0 + h * np.arange(n_steps + 1, dtype=np.float64)
    states = np.empty((n_steps + 1,) + problem.y0.shape, dtype=np.float64)
    states[0] = problem.y0
    y = problem.y0
    for n in range(n_steps):
        try:
            y = rk_step(scheme, problem.field_fn, y, times[n], h)
        except NumericalOverflowError as exc:
            raise NumericalOverflowError(
                f"{exc} (step {n})", stage=exc.stage, step=n
            ) from exc
        states[n + 1] = y
    return Trajectory(times, states)


def global_error(scheme: RkScheme, problem: OdeProblem, n_steps: int) -> float:
    """Max-norm difference between the final state and the exact solution."""
    if problem.analytic is None:
        raise ValueError("problem has no analytic solution")
    traj = integrate(scheme, problem, n_steps)
    exact = np.atleast_1d(np.asarray(problem.analytic(problem.t_end), dtype=np.float64))
    return float(np.max(np.abs(traj.final - exact)))


def order_table(
    scheme: RkScheme, problem: OdeProblem, step_counts: Sequence[int]
) -> list[dict]:
    """Per-resolution errors and pairwise order estimates.

    Row ``i`` carries ``log2(e_i / e_{i+1})``; the last row has no estimate.
    """
    counts = list(step_counts)
    if len(counts) < 2:
        raise ValueError("need at least two step counts")
    for a, b in zip(counts, counts[1:]):
        if b != 2 * a:
            raise ValueError(f"step counts must double: got {a} then {b}")
    errors = [global_error(scheme, problem, n) for n in counts]
    for n, e in zip(counts, errors):
        if e < 1e-13:
            raise PrecisionFloorError(
                f"{scheme.name}: error {e:.3e} at n={n} is below the precision floor"
            )
    rows = []
    for i, (n, e) in enumerate(zip(counts, errors)):
        est = math.log2(e / errors[i + 1]) if i + 1 < len(errors) else float("nan")
        rows.append(
            {"scheme": scheme.name, "n_steps": n, "error": e, "estimated_order": est}
        )
    return rows


def empirical_order(
    scheme: RkScheme, problem: OdeProblem, step_counts: Sequence[int]
) -> float:
    rows = order_table(scheme, problem, step_counts)
    return float(np.mean([r["estimated_order"] for r in rows[:-1]]))


def write_order_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scheme", "n_steps", "error", "estimated_order"])
        for r in rows:
            est = r["estimated_order"]
            w.writerow([
                r["scheme"], r["n_steps"], repr(r["error"]),
                "" if math.isnan(est) else repr(est),
            ])


def decay_problem(t_end: float = 1.0) -> OdeProblem:
    """y' = -y, y(0) = 1."""
    return OdeProblem(lambda y, t: -y, np.array([1.0]), 0.0, t_end,
                      analytic=lambda t: np.array([math.exp(-t)]))


def growth_problem(t_end: float = 1.0) -> OdeProblem:
    """y' = y, y(0) = 1."""
    return OdeProblem(lambda y, t: y, np.array([1.0]), 0.0, t_end,
                      analytic=lambda t: np.array([math.exp(t)]))


def cosine_problem(t_end: float = 1.0) -> OdeProblem:
    """y' = cos t, y(0) = 0; the exact solution is sin t."""
    return OdeProblem(lambda y, t: np.full_like(y, math.cos(t)), np.array([0.0]),
                      0.0, t_end, analytic=lambda t: np.array([math.sin(t)]))
