"""Input-convex network: parameters, gated forward pass, and convexity checks.

Layout for hidden widths ``h_0..h_{H-1}`` and output width ``m``::

    z_0 = act(U[0] x + b[0])
    z_j = act(gate(W[j-1]) z_{j-1} + U[j] x + b[j])      j = 1..H-1
    y   = gate(W[H-1]) z_{H-1} + U[H] x + b[H]           (affine output)

Matrices are stored (out, in). ``W`` holds raw, unconstrained weights; the
gate maps them to the effective weights used in the forward pass. ``U`` and
``b`` are never gated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

SCHEMA = "convexvolt-icnn"
SCHEMA_VERSION = 1
DEFAULT_SLOPE = -0.01


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class Activation:
    kind: str = "relu"
    alpha: float = 0.0

    def __post_init__(self):
        if self.kind == "relu":
            object.__setattr__(self, "alpha", 0.0)
        elif self.kind == "leaky_relu":
            if not 0 < self.alpha < 1:
                raise ValueError("leaky_relu needs 0 < alpha < 1")
        elif self.kind == "elu":
            # alpha > 1 makes the left slope at 0 exceed the right one
            if not 0 < self.alpha <= 1:
                raise ValueError("elu needs 0 < alpha <= 1 to stay convex")
        else:
            raise ValueError(f"unknown activation {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "Activation":
        """``relu``, ``leaky_relu:0.1`` or ``elu:1``."""
        kind, _, alpha = text.partition(":")
        defaults = {"relu": 0.0, "leaky_relu": 0.01, "elu": 1.0}
        if kind not in defaults:
            raise ValueError(f"unknown activation {kind!r}")
        return cls(kind, float(alpha) if alpha else defaults[kind])

    def __call__(self, z: np.ndarray) -> np.ndarray:
        if self.kind == "relu":
            return np.maximum(z, 0.0)
        if self.kind == "leaky_relu":
            return np.where(z > 0, z, self.alpha * z)
        return np.where(z > 0, z, self.alpha * np.expm1(np.minimum(z, 0.0)))

    def derivative(self, z: np.ndarray) -> np.ndarray:
        if self.kind == "relu":
            return (z > 0).astype(float)
        if self.kind == "leaky_relu":
            return np.where(z > 0, 1.0, self.alpha)
        return np.where(z > 0, 1.0, self.alpha * np.exp(np.minimum(z, 0.0)))


@dataclass(frozen=True)
class GateMode:
    kind: str = "none"
    slope: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "hard_clamp", "smooth"):
            raise ValueError(f"unknown gate {self.kind!r}")
        if self.kind == "smooth":
            if not self.slope <= 0:
                raise ValueError("smooth gate slope must be <= 0")
        else:
            object.__setattr__(self, "slope", 0.0)

    @classmethod
    def none(cls) -> "GateMode":
        return cls("none")

    @classmethod
    def hard_clamp(cls) -> "GateMode":
        return cls("hard_clamp")

    @classmethod
    def smooth(cls, slope: float = DEFAULT_SLOPE) -> "GateMode":
        return cls("smooth", slope)


def gate_weight(w, mode: GateMode):
    """Effective weight for raw weight ``w``."""
    w = np.asarray(w, dtype=float)
    if mode.kind == "none":
        out = w.copy()
    elif mode.kind == "hard_clamp":
        out = np.maximum(w, 0.0)
    else:
        out = np.maximum(w, 0.0) + mode.slope * np.minimum(w, 0.0)
    return float(out) if out.ndim == 0 else out


def gate_weight_derivative(w, mode: GateMode):
    """d gate(w) / dw, taking the positive-branch slope at w == 0."""
    w = np.asarray(w, dtype=float)
    if mode.kind == "none":
        out = np.ones_like(w)
    elif mode.kind == "hard_clamp":
        out = np.where(w >= 0, 1.0, 0.0)
    else:
        out = np.where(w >= 0, 1.0, mode.slope)
    return float(out) if out.ndim == 0 else out


@dataclass
class IcnnModel:
    W: list[np.ndarray]
    U: list[np.ndarray]
    b: list[np.ndarray]
    activation: Activation = field(default_factory=Activation)
    gate: GateMode = field(default_factory=GateMode)

    def __post_init__(self):
        H = len(self.W)
        if len(self.U) != H + 1 or len(self.b) != H + 1:
            raise ValueError("need len(U) == len(b) == len(W) + 1")
        self.W = [np.array(w, dtype=float) for w in self.W]
        self.U = [np.array(u, dtype=float) for u in self.U]
        self.b = [np.array(v, dtype=float) for v in self.b]
        n = self.U[0].shape[1]
        for i, (u, bias) in enumerate(zip(self.U, self.b)):
            if u.ndim != 2 or u.shape[1] != n:
                raise ValueError(f"U[{i}] must be (width, {n})")
            if bias.shape != (u.shape[0],):
                raise ValueError(f"b[{i}] must have shape ({u.shape[0]},)")
        for i, w in enumerate(self.W):
            if w.shape != (self.U[i + 1].shape[0], self.U[i].shape[0]):
                raise ValueError(f"W[{i}] has shape {w.shape}, expected "
                                 f"{(self.U[i + 1].shape[0], self.U[i].shape[0])}")

    @property
    def in_dim(self) -> int:
        return self.U[0].shape[1]

    @property
    def hidden_dims(self) -> list[int]:
        return [u.shape[0] for u in self.U[:-1]]

    @property
    def out_dim(self) -> int:
        return self.U[-1].shape[0]

    @property
    def k(self) -> int:
        """Layer count including the output layer."""
        return len(self.U)

    def parameters(self) -> list[np.ndarray]:
        """Raw parameter arrays (live references), ordered W, U, b."""
        return [*self.W, *self.U, *self.b]

    def n_parameters(self) -> int:
        return sum(a.size for a in self.parameters())

    def effective_W(self) -> list[np.ndarray]:
        return [gate_weight(w, self.gate) for w in self.W]

    def copy(self) -> "IcnnModel":
        return IcnnModel([w.copy() for w in self.W], [u.copy() for u in self.U],
                         [v.copy() for v in self.b], self.activation, self.gate)

    def with_gate(self, gate: GateMode) -> "IcnnModel":
        m = self.copy()
        m.gate = gate
        return m


def init_model(in_dim: int, hidden_dims, out_dim: int, seed=0,
               activation: Optional[Activation] = None, gate: Optional[GateMode] = None,
               weight_sign: str = "mixed") -> IcnnModel:
    """Uniform(-c, c) initialisation with c = sqrt(1 / fan_in) per matrix.

    ``weight_sign`` forces the sign of the hidden weights ``W``:
    ``"mixed"`` (default), ``"positive"`` or ``"negative"``. ``U`` and ``b``
    stay sign-mixed. Biases use the layer's total fan-in.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    widths = list(hidden_dims) + [out_dim]
    W, U, b = [], [], []
    for i, width in enumerate(widths):
        c_u = np.sqrt(1.0 / in_dim)
        U.append(rng.uniform(-c_u, c_u, size=(width, in_dim)))
        fan_in = in_dim
        if i > 0:
            c_w = np.sqrt(1.0 / widths[i - 1])
            w = rng.uniform(-c_w, c_w, size=(width, widths[i - 1]))
            if weight_sign == "positive":
                w = np.abs(w)
            elif weight_sign == "negative":
                w = -np.abs(w)
            elif weight_sign != "mixed":
                raise ValueError(f"unknown weight_sign {weight_sign!r}")
            W.append(w)
            fan_in += widths[i - 1]
        c_b = np.sqrt(1.0 / fan_in)
        b.append(rng.uniform(-c_b, c_b, size=width))
    return IcnnModel(W, U, b, activation or Activation(), gate or GateMode())


@dataclass
class ForwardTrace:
    x: np.ndarray  # (B, in_dim)
    pre: list[np.ndarray]  # hidden pre-activations
    post: list[np.ndarray]  # hidden activations
    gated: list[np.ndarray]  # effective W used in this pass
    y: np.ndarray  # (B, out_dim)


def forward(model: IcnnModel, x) -> tuple[np.ndarray, ForwardTrace]:
    """Evaluate the network on one input (1-D) or a batch (rows of a 2-D array)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != model.in_dim:
        raise ValueError(f"input must have {model.in_dim} columns, got shape {x.shape}")
    gated = model.effective_W()
    act = model.activation
    pre, post = [], []
    z = None
    H = len(model.W)
    for i in range(H + 1):
        a = X @ model.U[i].T + model.b[i]
        if i > 0:
            a = a + z @ gated[i - 1].T
        if i == H:
            y = a
        else:
            pre.append(a)
            z = act(a)
            post.append(z)
    trace = ForwardTrace(X, pre, post, gated, y)
    return (y[0] if single else y), trace


def replay_output(model: IcnnModel, trace: ForwardTrace) -> np.ndarray:
    """Recompute the output layer from a trace."""
    y = trace.x @ model.U[-1].T + model.b[-1]
    if trace.post:
        y = y + trace.post[-1] @ trace.gated[-1].T
    return y


def predict(model: IcnnModel, x) -> np.ndarray:
    return forward(model, x)[0]


# ---------------------------------------------------------------------------
# input mirroring


def mirror_inputs(x) -> np.ndarray:
    """[x; -x] along the last axis."""
    x = np.asarray(x, dtype=float)
    return np.concatenate([x, -x], axis=-1)


def build_duplicated(model: IcnnModel) -> IcnnModel:
    """Equivalent model over mirrored input ``[x; -x]``.

    Each passthrough matrix is split by sign: positive entries stay on the
    ``x`` half, a negative entry ``u`` becomes 0 there and ``-u`` on the
    ``-x`` half.
    """
    out = model.copy()
    out.U = [np.concatenate([np.maximum(u, 0.0), -np.minimum(u, 0.0)], axis=1) for u in model.U]
    return out


def resplit_passthrough(model: IcnnModel) -> None:
    """Rebuild the mirrored half of each U from the sign split of the direct half.

    In place. Whatever the mirrored half held before is discarded.
    """
    n = model.in_dim // 2
    for u in model.U:
        direct = u[:, :n].copy()
        u[:, :n] = np.maximum(direct, 0.0)
        u[:, n:] = -np.minimum(direct, 0.0)


# ---------------------------------------------------------------------------
# convexity


ADMISSIBLE = ("relu", "leaky_relu", "elu")


def is_convex_admissible(model: IcnnModel) -> bool:
    act = model.activation
    if act.kind not in ADMISSIBLE:
        return False
    if act.kind == "leaky_relu" and not 0 < act.alpha < 1:
        return False
    if act.kind == "elu" and not 0 < act.alpha <= 1:
        return False
    return all(bool(np.all(w >= 0)) for w in model.effective_W())


@dataclass
class ConvexityReport:
    passed: bool
    worst_violation: float
    witness: Optional[dict] = None


def box_from_data(X, inflate: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate min/max of ``X`` widened by ``inflate`` of the range on each side."""
    X = np.asarray(X, dtype=float)
    lo, hi = X.min(axis=0), X.max(axis=0)
    pad = inflate * (hi - lo)
    return lo - pad, hi + pad


def check_convexity(model: IcnnModel, seed=0, n_pairs: int = 200, n_lambdas: int = 9,
                    tol: float = 1e-9, box=None) -> ConvexityReport:
    """Sampled midpoint-convexity test along segments.

    Draws ``n_pairs`` pairs uniformly from ``box`` (default [-1, 1]^n) and
    checks f(l x + (1-l) y) <= l f(x) + (1-l) f(y) + tol for every output and
    every l = j / (n_lambdas + 1), j = 1..n_lambdas.
    """
    if n_pairs < 1 or n_lambdas < 1 or tol < 0:
        raise ValueError("need n_pairs >= 1, n_lambdas >= 1, tol >= 0")
    rng = np.random.default_rng(seed)
    n = model.in_dim
    if box is None:
        lo, hi = -np.ones(n), np.ones(n)
    else:
        lo, hi = (np.broadcast_to(np.asarray(a, dtype=float), (n,)) for a in box)
    xs = rng.uniform(lo, hi, size=(n_pairs, n))
    ys = rng.uniform(lo, hi, size=(n_pairs, n))
    lams = np.arange(1, n_lambdas + 1) / (n_lambdas + 1)
    fx, fy = predict(model, xs), predict(model, ys)
    mids = lams[:, None, None] * xs[None] + (1 - lams)[:, None, None] * ys[None]
    fm = predict(model, mids.reshape(-1, n)).reshape(n_lambdas, n_pairs, -1)
    chord = lams[:, None, None] * fx[None] + (1 - lams)[:, None, None] * fy[None]
    gap = fm - chord
    worst = float(gap.max())
    if worst <= tol:
        return ConvexityReport(True, worst)
    li, pi, oi = np.unravel_index(np.argmax(gap), gap.shape)
    witness = {"x": xs[pi], "y": ys[pi], "lam": float(lams[li]), "output": int(oi),
               "violation": worst}
    return ConvexityReport(False, worst, witness)


# ---------------------------------------------------------------------------
# persistence


def model_to_dict(model: IcnnModel) -> dict:
    return {
        "schema": SCHEMA,
        "schema_version": SCHEMA_VERSION,
        "in_dim": model.in_dim,
        "hidden_dims": model.hidden_dims,
        "out_dim": model.out_dim,
        "activation": {"kind": model.activation.kind, "alpha": model.activation.alpha},
        "gate": {"kind": model.gate.kind, "slope": model.gate.slope},
        "W": [w.tolist() for w in model.W],
        "U": [u.tolist() for u in model.U],
        "b": [v.tolist() for v in model.b],
    }


def model_from_dict(doc: dict) -> IcnnModel:
    if doc.get("schema") != SCHEMA:
        raise SchemaError("not an ICNN model file")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"model schema version {version!r} is not supported "
                          f"(this build reads version {SCHEMA_VERSION})")
    for key in ("activation", "gate", "W", "U", "b", "in_dim", "hidden_dims", "out_dim"):
        if key not in doc:
            raise SchemaError(f"model file is missing {key!r}")
    model = IcnnModel(doc["W"], doc["U"], doc["b"],
                      Activation(doc["activation"]["kind"], doc["activation"]["alpha"]),
                      GateMode(doc["gate"]["kind"], doc["gate"]["slope"]))
    if (model.in_dim, model.hidden_dims, model.out_dim) != (
            doc["in_dim"], list(doc["hidden_dims"]), doc["out_dim"]):
        raise SchemaError("declared shapes do not match the stored parameters")
    return model


def save_model(model: IcnnModel, path) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    Path(path).write_text(json.dumps(model_to_dict(model)) + "\n")


def load_model(path) -> IcnnModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"model file is not valid JSON: {exc}") from exc
    return model_from_dict(doc)
