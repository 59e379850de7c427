"""Reactive-power regulation against a trained ICNN surrogate.

Minimises ``sum_i a_i * f_i(p, q)`` over ``q_min <= q <= q_max`` with ``p``
held fixed, where ``f`` is the network's predicted voltage deviation. With
non-negative hidden weights, convex non-decreasing activations and ``a >= 0``
the objective is convex in ``q``, so projected gradient descent reaches the
global minimum.

``q`` is the controllable net reactive injection at each non-slack bus,
consumption-positive, and replaces the load-side reactive demand.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .icnn import IcnnModel, forward, is_convex_admissible
from .train import backward

ARMIJO = 1e-4
SHRINK = 0.5
MIN_STEP = 1e-20
MIN_BB, MAX_BB = 1e-10, 1e10
MAX_GRID_POINTS = 10 ** 7


class NotConvexError(ValueError):
    pass


@dataclass
class RegulationProblem:
    model: IcnnModel
    p_fixed: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    a: np.ndarray
    v_ref: float = 1.0
    check_convexity: bool = True

    def __post_init__(self):
        self.p_fixed = np.asarray(self.p_fixed, dtype=float)
        self.q_min = np.asarray(self.q_min, dtype=float)
        self.q_max = np.asarray(self.q_max, dtype=float)
        self.a = np.asarray(self.a, dtype=float)
        m = self.p_fixed.shape[0]
        if self.model.in_dim != 2 * m:
            raise ValueError(f"model takes {self.model.in_dim} inputs, p has {m} entries")
        for name in ("q_min", "q_max"):
            if getattr(self, name).shape != (m,):
                raise ValueError(f"{name} must have {m} entries")
        if self.a.shape != (self.model.out_dim,):
            raise ValueError(f"a must have {self.model.out_dim} entries")
        if np.any(self.q_min > self.q_max):
            raise ValueError("q_min exceeds q_max")
        if np.any(self.a < 0):
            raise NotConvexError("objective weights a must be non-negative")
        if self.check_convexity and not is_convex_admissible(self.model):
            raise NotConvexError("model is not convex-admissible")

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.q_min + self.q_max)

    def project(self, q) -> np.ndarray:
        return np.clip(q, self.q_min, self.q_max)


@dataclass
class RegulationResult:
    q_star: np.ndarray
    objective: float
    trace: list[float] = field(default_factory=list)
    converged: bool = False
    iterations: int = 0


def objective_and_q_gradient(problem: RegulationProblem, q) -> tuple[float, np.ndarray]:
    q = np.asarray(q, dtype=float)
    m = problem.p_fixed.shape[0]
    if q.shape != (m,):
        raise ValueError(f"q must have {m} entries")
    x = np.concatenate([problem.p_fixed, q])[None, :]
    y, trace = forward(problem.model, x)
    _, dx = backward(problem.model, trace, problem.a[None, :])
    return float(y[0] @ problem.a), dx[0, m:]


def objective_batch(problem: RegulationProblem, Q) -> np.ndarray:
    """Objective at each row of ``Q``."""
    Q = np.atleast_2d(Q)
    X = np.hstack([np.broadcast_to(problem.p_fixed, (Q.shape[0], problem.p_fixed.size)), Q])
    y, _ = forward(problem.model, X)
    return y @ problem.a


def solve(problem: RegulationProblem, step0: float = 1.0, max_iter: int = 1000,
          tol: float = 1e-8, q0: Optional[np.ndarray] = None) -> RegulationResult:
    """Projected gradient descent with Armijo backtracking from the box midpoint.

    The first trial step is ``step0``; later ones use the Barzilai-Borwein
    step ``s.s / s.y`` from the previous move (``step0`` when the curvature
    estimate is not positive), which is then backtracked as usual, so every
    accepted step still decreases the objective.

    Stops when the projected-gradient step ``q - clip(q - g)`` has norm below
    ``tol``, or when backtracking cannot find a decrease (a kink of a
    piecewise-linear objective), or after ``max_iter`` iterations.
    """
    q = problem.project(problem.midpoint if q0 is None else q0)
    f, g = objective_and_q_gradient(problem, q)
    trace = [f]
    converged = False
    it = 0
    trial = step0
    for it in range(1, max_iter + 1):
        if np.linalg.norm(q - problem.project(q - g)) < tol:
            converged = True
            it -= 1
            break
        eta = trial
        accepted = False
        while eta > MIN_STEP:
            cand = problem.project(q - eta * g)
            f_cand = objective_batch(problem, cand)[0]
            if f_cand <= f + ARMIJO * g @ (cand - q):
                accepted = True
                break
            eta *= SHRINK
        if not accepted:
            # no descent along the projected (sub)gradient: stationary up to rounding
            converged = bool(np.linalg.norm(q - problem.project(q - g)) < np.sqrt(tol))
            it -= 1
            break
        s = cand - q
        q = cand
        g_old = g
        f, g = objective_and_q_gradient(problem, q)
        trace.append(f)
        sy = float(s @ (g - g_old))
        trial = min(max(float(s @ s) / sy, MIN_BB), MAX_BB) if sy > 0 else step0
    return RegulationResult(problem.project(q), f, trace, converged, it)


@dataclass
class GridAudit:
    oracle_min: float  # best of grid search followed by local polish
    grid_min: float
    gap: float  # objective(q_star) - oracle_min
    q_oracle: np.ndarray
    free_dims: np.ndarray
    resolution_bound: float  # Lipschitz estimate times half the grid cell diagonal


def q_lipschitz_bound(problem: RegulationProblem) -> float:
    """Upper bound on the 2-norm of the objective gradient in q, from weight norms.

    Uses activation slopes <= 1 (true for every admissible activation).
    """
    m = problem.p_fixed.shape[0]
    model = problem.model
    gated = model.effective_W()
    lip = None
    for i, u in enumerate(model.U):
        uq = np.linalg.norm(u[:, m:], 2)
        lip = uq if i == 0 else np.linalg.norm(gated[i - 1], 2) * lip + uq
    return float(np.linalg.norm(problem.a) * lip)


def validate_against_grid(problem: RegulationProblem, result: RegulationResult,
                          grid_points_per_dim: int = 51, polish: bool = True) -> GridAudit:
    """Brute-force the objective on a uniform grid over the non-degenerate q dims.

    The polish step runs L-BFGS-B with finite-difference gradients from the
    best grid point, independent of the solver's analytic gradients.
    """
    from scipy.optimize import minimize

    free = np.flatnonzero(problem.q_max > problem.q_min)
    d = free.size
    if grid_points_per_dim ** d > MAX_GRID_POINTS:
        raise ValueError(f"grid of {grid_points_per_dim}^{d} points is too large")
    axes = [np.linspace(problem.q_min[i], problem.q_max[i], grid_points_per_dim) for i in free]
    base = problem.q_min.copy()
    best_val, best_q = np.inf, base.copy()
    chunk = 50_000
    points = itertools.product(*axes) if d else iter([()])
    while True:
        block = list(itertools.islice(points, chunk))
        if not block:
            break
        Q = np.tile(base, (len(block), 1))
        if d:
            Q[:, free] = np.array(block)
        vals = objective_batch(problem, Q)
        k = int(np.argmin(vals))
        if vals[k] < best_val:
            best_val, best_q = float(vals[k]), Q[k].copy()
    grid_min = best_val
    oracle_q = best_q
    if polish and d:
        def f(z):
            q = base.copy()
            q[free] = z
            return float(objective_batch(problem, q)[0])
        res = minimize(f, best_q[free], method="L-BFGS-B",
                       bounds=list(zip(problem.q_min[free], problem.q_max[free])),
                       options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 2000})
        if res.fun < best_val:
            best_val = float(res.fun)
            oracle_q = base.copy()
            oracle_q[free] = res.x
    spacing = np.array([(problem.q_max[i] - problem.q_min[i]) / (grid_points_per_dim - 1)
                        for i in free]) if d else np.zeros(0)
    resolution = q_lipschitz_bound(problem) * 0.5 * float(np.linalg.norm(spacing))
    f_star = float(objective_batch(problem, result.q_star)[0])
    return GridAudit(best_val, grid_min, f_star - best_val, oracle_q, free, resolution)
