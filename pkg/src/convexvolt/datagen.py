"""Scenario sampling and voltage-deviation datasets.

Random streams: sample ``i`` of a dataset seeded with ``seed`` draws from
``numpy.random.Generator(PCG64(SeedSequence(seed, spawn_key=(i,))))``. It
first draws one load scale per non-slack bus from Unif(scale_min, scale_max),
then one power factor per non-slack bus from Unif(pf_min, pf_max). PCG64 and
SeedSequence are specified bit-for-bit by numpy, so datasets are identical
across platforms and independent of how samples are spread over workers.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .grid import PowerFlowDivergence, RadialNetwork, solve_distflow, voltage_magnitudes

log = logging.getLogger(__name__)

DATASET_TAG = "convexvolt-dataset"
DATASET_VERSION = 1
MAX_SKIP_FRACTION = 0.10


class DatasetGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    n_samples: int = 500
    load_scale_min: float = 0.5
    load_scale_max: float = 1.5
    pf_min: float = 0.85
    pf_max: float = 0.95
    seed: int = 0
    v_ref: float = 1.0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not 0 < self.pf_min <= self.pf_max <= 1:
            raise ValueError("need 0 < pf_min <= pf_max <= 1")
        if self.load_scale_min > self.load_scale_max:
            raise ValueError("load_scale_min exceeds load_scale_max")


@dataclass(frozen=True)
class Sample:
    p: np.ndarray
    q: np.ndarray
    target: np.ndarray  # |V - v_ref| per non-slack bus
    v_true: np.ndarray  # V per non-slack bus

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.p, self.q])


@dataclass(frozen=True)
class Dataset:
    samples: tuple[Sample, ...]
    network_id: str
    config: ScenarioConfig
    skipped: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.samples:
            m = self.samples[0].p.shape
            if any(s.p.shape != m or s.q.shape != m or s.target.shape != m
                   or s.v_true.shape != m for s in self.samples):
                raise ValueError("samples disagree on dimensions")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def n_buses(self) -> int:
        """Non-slack buses per sample."""
        return self.samples[0].p.shape[0]

    @cached_property
    def inputs(self) -> np.ndarray:
        """(N, 2m) array of concatenated (p, q)."""
        return np.stack([s.x for s in self.samples])

    @cached_property
    def targets(self) -> np.ndarray:
        return np.stack([s.target for s in self.samples])

    @cached_property
    def voltages(self) -> np.ndarray:
        return np.stack([s.v_true for s in self.samples])

    def subset(self, index) -> "Dataset":
        return Dataset(tuple(self.samples[i] for i in index), self.network_id,
                       self.config, self.skipped, dict(self.meta))


def reactive_from_pf(p, pf):
    """Lagging reactive power for real power ``p`` at power factor ``pf``."""
    pf_arr = np.asarray(pf, dtype=float)
    if np.any(pf_arr <= 0) or np.any(pf_arr > 1):
        raise ValueError("power factor must lie in (0, 1]")
    q = np.asarray(p, dtype=float) * np.sqrt(1.0 - pf_arr ** 2) / pf_arr
    return float(q) if q.ndim == 0 else q


def sample_stream(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def draw_scenario(net: RadialNetwork, cfg: ScenarioConfig, index: int):
    rng = sample_stream(cfg.seed, index)
    m = net.n_loads
    scale = rng.uniform(cfg.load_scale_min, cfg.load_scale_max, size=m)
    pf = rng.uniform(cfg.pf_min, cfg.pf_max, size=m)
    p = scale * net.base_p
    return p, reactive_from_pf(p, pf)


def make_sample(net: RadialNetwork, p, q, v_ref: float = 1.0):
    """Solve the power flow at (p, q); None when it fails to converge."""
    try:
        sol = solve_distflow(net, p, q)
    except PowerFlowDivergence:
        return None
    if not sol.converged:
        return None
    V = voltage_magnitudes(sol)[1:]
    return Sample(np.array(p, dtype=float), np.array(q, dtype=float), np.abs(V - v_ref), V)


def _solve_range(net, cfg, start, stop):
    out = []
    for i in range(start, stop):
        p, q = draw_scenario(net, cfg, i)
        out.append(make_sample(net, p, q, cfg.v_ref))
    return out


def generate_dataset(net: RadialNetwork, cfg: ScenarioConfig, workers: int = 1) -> Dataset:
    """Sample ``cfg.n_samples`` operating points and record voltage deviations.

    Non-converged scenarios are dropped and counted; more than 10% dropped
    raises ``DatasetGenerationError``.
    """
    if workers > 1 and cfg.n_samples > 1:
        bounds = np.linspace(0, cfg.n_samples, workers + 1).astype(int)
        with ProcessPoolExecutor(workers) as pool:
            chunks = pool.map(_solve_range, [net] * workers, [cfg] * workers,
                              bounds[:-1], bounds[1:])
            results = [s for chunk in chunks for s in chunk]
    else:
        results = _solve_range(net, cfg, 0, cfg.n_samples)
    samples = [s for s in results if s is not None]
    skipped = len(results) - len(samples)
    if skipped > MAX_SKIP_FRACTION * cfg.n_samples or not samples:
        raise DatasetGenerationError(
            f"{skipped} of {cfg.n_samples} scenarios failed to converge; check the load scales"
        )
    if skipped:
        log.warning("%s: skipped %d non-converged scenarios", net.name, skipped)
    below = float(np.mean(np.stack([s.v_true for s in samples]) <= cfg.v_ref))
    return Dataset(tuple(samples), net.name, cfg, skipped, {"fraction_below_ref": below})


def split_dataset(ds: Dataset, train_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    n = len(ds)
    n_train = int(round(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"split of {n} samples at {train_fraction} leaves a partition empty")
    perm = np.random.default_rng(seed).permutation(n)
    return ds.subset(np.sort(perm[:n_train])), ds.subset(np.sort(perm[n_train:]))


# ---------------------------------------------------------------------------
# file format
#
#   # convexvolt-dataset 1
#   # network_id=<json string>
#   # config=<json object>
#   # n_samples=<int>
#   # n_buses=<int>
#   # skipped=<int>
#   p_1,...,p_m,q_1,...,q_m,target_1,...,target_m,v_1,...,v_m
#   <one row per sample, floats written with repr() so they round-trip exactly>


def dataset_to_text(ds: Dataset) -> str:
    m = ds.n_buses if len(ds) else 0
    lines = [
        f"# {DATASET_TAG} {DATASET_VERSION}",
        f"# network_id={json.dumps(ds.network_id)}",
        f"# config={json.dumps(dataclasses.asdict(ds.config), sort_keys=True)}",
        f"# n_samples={len(ds)}",
        f"# n_buses={m}",
        f"# skipped={ds.skipped}",
        ",".join(f"{name}_{k}" for name in ("p", "q", "target", "v") for k in range(1, m + 1)),
    ]
    for s in ds.samples:
        row = np.concatenate([s.p, s.q, s.target, s.v_true])
        lines.append(",".join(repr(float(val)) for val in row))
    return "\n".join(lines) + "\n"


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(dataset_to_text(ds))


def load_dataset(path) -> Dataset:
    text = Path(path).read_text()
    header = {}
    rows = []
    for raw in text.splitlines():
        if raw.startswith("#"):
            body = raw[1:].strip()
            if "=" in body:
                key, value = body.split("=", 1)
                header[key] = value
            elif body.split()[:1] == [DATASET_TAG] and int(body.split()[1]) != DATASET_VERSION:
                raise ValueError(f"unsupported dataset version {body.split()[1]}")
        elif raw.strip() and not raw.startswith("p_"):
            rows.append([float(v) for v in raw.split(",")])
    try:
        m = int(header["n_buses"])
        cfg = ScenarioConfig(**json.loads(header["config"]))
        network_id = json.loads(header["network_id"])
        skipped = int(header["skipped"])
        expected = int(header["n_samples"])
    except KeyError as exc:
        raise ValueError(f"dataset header missing {exc}") from None
    if len(rows) != expected:
        raise ValueError(f"dataset declares {expected} samples, found {len(rows)}")
    samples = []
    for row in rows:
        if len(row) != 4 * m:
            raise ValueError("dataset row has the wrong number of columns")
        a = np.array(row)
        samples.append(Sample(a[:m], a[m:2 * m], a[2 * m:3 * m], a[3 * m:]))
    return Dataset(tuple(samples), network_id, cfg, skipped)


def dataset_hash(ds: Dataset) -> str:
    return hashlib.sha256(dataset_to_text(ds).encode()).hexdigest()[:16]


def drawn_power_factors(ds: Dataset) -> np.ndarray:
    """Recover the per-bus power factors from (p, q); NaN where p == 0."""
    p, q = ds.inputs[:, :ds.n_buses], ds.inputs[:, ds.n_buses:]
    with np.errstate(invalid="ignore", divide="ignore"):
        return p / np.hypot(p, q)

