"""Reverse-mode gradients for the ICNN and the three convexification strategies.

Strategies differ only in how the hidden weights ``W`` are kept non-negative:

``post_check``
    train ungated, zero every negative raw ``W`` entry after each optimizer step.
``clamp_gate``
    forward with ``max(0, w)``; its 0/1 derivative enters back-propagation.
``smooth_gate``
    forward with ``max(0, w) + s * min(0, w)`` (s <= 0); the s/1 derivative
    enters back-propagation.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .icnn import DEFAULT_SLOPE, GateMode, IcnnModel, forward, gate_weight_derivative

log = logging.getLogger(__name__)

STRATEGIES = ("post_check", "clamp_gate", "smooth_gate")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, report: "TrainReport"):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class TrainStrategy:
    kind: str = "smooth_gate"
    slope: float = DEFAULT_SLOPE

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}")
        if self.kind == "smooth_gate" and not self.slope <= 0:
            raise ValueError("smooth_gate slope must be <= 0")

    @property
    def gate(self) -> GateMode:
        if self.kind == "clamp_gate":
            return GateMode.hard_clamp()
        if self.kind == "smooth_gate":
            return GateMode.smooth(self.slope)
        return GateMode.none()

    @classmethod
    def parse(cls, name: str, slope: float = DEFAULT_SLOPE) -> "TrainStrategy":
        aliases = {"post-check": "post_check", "post_check": "post_check",
                   "clamp": "clamp_gate", "clamp_gate": "clamp_gate",
                   "smooth": "smooth_gate", "smooth_gate": "smooth_gate"}
        if name not in aliases:
            raise ValueError(f"unknown strategy {name!r}")
        return cls(aliases[name], slope)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    strategy: TrainStrategy = field(default_factory=TrainStrategy)
    loss: str = "mse"
    log_every: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss != "mse":
            raise ValueError("only the mse loss is implemented")


@dataclass
class Gradients:
    W: list[np.ndarray]
    U: list[np.ndarray]
    b: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        return [*self.W, *self.U, *self.b]


@dataclass
class TrainReport:
    loss_history: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)  # cumulative, per iteration
    negative_weight_events: list[int] = field(default_factory=list)
    wall_time: float = 0.0
    initial_loss: float = float("nan")
    final_loss: float = float("nan")  # full training-set MSE after training
    final_sse: float = float("nan")  # same, unreduced sum of squares
    epochs_run: int = 0
    diverged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.loss_history)

    @property
    def time_per_iteration(self) -> float:
        return self.wall_time / max(self.iterations, 1)


# ---------------------------------------------------------------------------
# gradients


def backward(model: IcnnModel, trace, dy: np.ndarray) -> tuple[Gradients, np.ndarray]:
    """Propagate dL/dy back through a forward trace.

    Returns gradients with respect to the raw parameters (gate derivative
    included) and with respect to the input rows.
    """
    x = trace.x
    H = len(model.W)
    gW: list = [None] * H
    gU: list = [None] * (H + 1)
    gb: list = [None] * (H + 1)
    dx = np.zeros_like(x)
    delta = dy
    for i in range(H, -1, -1):
        gU[i] = delta.T @ x
        gb[i] = delta.sum(axis=0)
        dx += delta @ model.U[i]
        if i > 0:
            g_eff = delta.T @ trace.post[i - 1]
            gW[i - 1] = g_eff * gate_weight_derivative(model.W[i - 1], model.gate)
            delta = (delta @ trace.gated[i - 1]) * model.activation.derivative(trace.pre[i - 1])
    return Gradients(gW, gU, gb), dx


def mse(model: IcnnModel, inputs, targets) -> float:
    y, _ = forward(model, np.atleast_2d(inputs))
    return float(np.mean((y - np.atleast_2d(targets)) ** 2))


def loss_and_gradients(model: IcnnModel, inputs, targets,
                       strategy: Optional[TrainStrategy] = None) -> tuple[float, Gradients]:
    """Mean squared error over the batch and its gradients w.r.t. raw W, U, b.

    When ``strategy`` is given the model is evaluated under that strategy's
    gate; otherwise under ``model.gate``.
    """
    if strategy is not None and model.gate != strategy.gate:
        model = model.with_gate(strategy.gate)
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    T = np.atleast_2d(np.asarray(targets, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    y, trace = forward(model, X)
    if T.shape != y.shape:
        raise ValueError(f"targets have shape {T.shape}, model gives {y.shape}")
    err = y - T
    loss = float(np.mean(err ** 2))
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    grads, _ = backward(model, trace, 2.0 * err / err.size)
    return loss, grads


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def delta(self, g: np.ndarray) -> np.ndarray:
        """Parameter change for the flattened gradient ``g``."""
        return -self.learning_rate * g

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        _scatter_add(params, self.delta(_flatten(grads)))


class Adam:
    """Adam with bias-corrected moments, kept as flat vectors over all parameters."""

    def __init__(self, learning_rate: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: Optional[np.ndarray] = None
        self.v: Optional[np.ndarray] = None

    def delta(self, g: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(g)
            self.v = np.zeros_like(g)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        self.m *= b1
        self.m += (1.0 - b1) * g
        self.v *= b2
        self.v += (1.0 - b2) * g * g
        return -(self.learning_rate * (self.m / c1) / (np.sqrt(self.v / c2) + self.eps))

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        _scatter_add(params, self.delta(_flatten(grads)))


def _flatten(arrays: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([a.ravel() for a in arrays])


def _scatter_add(params: list[np.ndarray], flat: np.ndarray) -> None:
    pos = 0
    for p in params:
        p += flat[pos:pos + p.size].reshape(p.shape)
        pos += p.size


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(cfg.learning_rate)
    return Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)


def apply_update(model: IcnnModel, grads: Gradients, optimizer) -> IcnnModel:
    """One optimizer step on the raw parameters, in place.

    Raises FloatingPointError, leaving the model untouched, when the step is
    not finite.
    """
    params = model.parameters()
    arrays = grads.arrays()
    if [p.shape for p in params] != [g.shape for g in arrays]:
        raise ValueError("gradient shapes do not match the model")
    step = optimizer.delta(_flatten(arrays))
    if not np.isfinite(step).all():
        raise FloatingPointError("non-finite parameter update")
    _scatter_add(params, step)
    return model


def post_check_clamp(model: IcnnModel) -> int:
    """Zero every negative raw hidden weight in place; return how many were zeroed."""
    count = 0
    for w in model.W:
        neg = w < 0
        count += int(neg.sum())
        w[neg] = 0.0
    return count


# ---------------------------------------------------------------------------
# training loop


def _as_arrays(data, input_transform):
    if hasattr(data, "inputs"):
        X, Y = data.inputs, data.targets
    else:
        X, Y = data
    X = np.asarray(X, dtype=float)
    if input_transform is not None:
        X = input_transform(X)
    return X, np.asarray(Y, dtype=float)


def train(model: IcnnModel, train_set, cfg: TrainConfig,
          after_step: Optional[Callable[[IcnnModel], None]] = None,
          input_transform: Optional[Callable[[np.ndarray], np.ndarray]] = None,
          record_timing: bool = True) -> tuple[IcnnModel, TrainReport]:
    """Mini-batch training of a copy of ``model`` under ``cfg.strategy``.

    ``train_set`` is a Dataset or an ``(inputs, targets)`` pair. The shuffle
    order of every epoch comes from ``default_rng(cfg.seed)``. ``after_step``
    runs after every optimizer step (and after the post-check clamp).
    """
    strategy = cfg.strategy
    model = model.with_gate(strategy.gate)
    X, Y = _as_arrays(train_set, input_transform)
    if X.shape[1] != model.in_dim or Y.shape[1] != model.out_dim:
        raise ValueError("dataset dimensions do not match the model")
    n = X.shape[0]
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg)
    report = TrainReport(initial_loss=mse(model, X, Y))
    clock = time.perf_counter if record_timing else (lambda: 0.0)
    start = clock()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            try:
                loss, grads = loss_and_gradients(model, X[idx], Y[idx])
                apply_update(model, grads, opt)
            except FloatingPointError as exc:
                report.diverged = True
                report.wall_time = clock() - start
                raise TrainingDiverged(f"diverged in epoch {epoch}: {exc}", report) from exc
            events = post_check_clamp(model) if strategy.kind == "post_check" else 0
            if after_step is not None:
                after_step(model)
            report.loss_history.append(loss)
            report.negative_weight_events.append(events)
            report.wall_ms.append(1000.0 * (clock() - start))
        report.epochs_run = epoch + 1
        if cfg.log_every and (epoch + 1) % cfg.log_every == 0:
            log.info("epoch %d  batch loss %.6g", epoch + 1, report.loss_history[-1])
    report.wall_time = clock() - start
    if strategy.kind == "post_check":
        post_check_clamp(model)
    report.final_loss = mse(model, X, Y)
    report.final_sse = report.final_loss * Y.size
    if not np.isfinite(report.final_loss):
        report.diverged = True
        raise TrainingDiverged("non-finite final loss", report)
    return model, report


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MapeReport:
    per_bus: np.ndarray
    mean: float
    max: float


def evaluate_mape(model: IcnnModel, test_set, v_ref: float = 1.0, basis: str = "magnitude",
                  input_transform: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> MapeReport:
    """Bus-level mean absolute percentage error on a dataset.

    ``basis="magnitude"`` reconstructs V_hat = v_ref - y_hat and compares with
    the true magnitudes; ``basis="deviation"`` compares y_hat with the
    deviation targets directly.
    """
    if len(test_set) == 0:
        raise ValueError("empty test set")
    X = test_set.inputs if input_transform is None else input_transform(test_set.inputs)
    y_hat, _ = forward(model, X)
    if basis == "magnitude":
        V = test_set.voltages
        if np.any(V <= 0):
            raise ValueError("true voltage magnitudes must be positive")
        err = np.abs((v_ref - y_hat) - V) / V
    elif basis == "deviation":
        T = test_set.targets
        if np.any(T <= 0):
            raise ValueError("deviation basis needs strictly positive targets")
        err = np.abs(y_hat - T) / T
    else:
        raise ValueError(f"unknown MAPE basis {basis!r}")
    per_bus = 100.0 * err.mean(axis=0)
    return MapeReport(per_bus, float(per_bus.mean()), float(per_bus.max()))


def mean_predictor_mape(train_set, test_set, v_ref: float = 1.0) -> MapeReport:
    """MAPE of predicting the training-set mean deviation for every sample."""
    mean_dev = train_set.targets.mean(axis=0)
    V = test_set.voltages
    err = np.abs((v_ref - mean_dev)[None, :] - V) / V
    per_bus = 100.0 * err.mean(axis=0)
    return MapeReport(per_bus, float(per_bus.mean()), float(per_bus.max()))
