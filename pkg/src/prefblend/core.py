"""Shared domain types, session configuration, and validation."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

SCHEMA_VERSION = 1


def _as_readonly_vector(values) -> np.ndarray:
    v = np.array(values, dtype=np.float64, copy=True)
    if v.ndim != 1:
        raise ValueError("expected a 1-D coefficient vector")
    v.setflags(write=False)
    return v


@dataclass(frozen=True)
class MergeCoefficients:
    """A blend-strength vector with one coefficient in [0, 1] per adapter."""

    values: np.ndarray

    def __post_init__(self):
        v = _as_readonly_vector(self.values)
        if v.size == 0:
            raise ValueError("coefficient vector must be non-empty")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("coefficients must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return int(self.values.size)

    def total(self) -> float:
        return float(self.values.sum())

    def support(self) -> tuple[int, ...]:
        """Indices of exactly non-zero coefficients."""
        return tuple(int(i) for i in np.flatnonzero(self.values))

    def tolist(self) -> list[float]:
        return [float(x) for x in self.values]

    def __eq__(self, other) -> bool:
        return isinstance(other, MergeCoefficients) and np.array_equal(
            self.values, other.values
        )

    def __hash__(self):
        return hash(self.values.tobytes())


@dataclass(frozen=True)
class Hypercube:
    """Search space [0, 1]^n."""

    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("dimension must be >= 1")

    def contains(self, values: np.ndarray, tol: float = 1e-12) -> bool:
        v = np.asarray(values, dtype=np.float64)
        return v.size == self.n and bool(
            (v >= -tol).all() and (v <= 1.0 + tol).all()
        )


@dataclass(frozen=True)
class CappedSimplex:
    """Search space {alpha in [0,1]^n : sum(alpha) <= bound}."""

    n: int
    bound: float

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("dimension must be >= 1")
        if not self.bound > 0.0:
            raise ValueError("bound must be > 0")

    def contains(self, values: np.ndarray, tol: float = 1e-12) -> bool:
        v = np.asarray(values, dtype=np.float64)
        if v.size != self.n or (v < -tol).any() or (v > 1.0 + tol).any():
            return False
        return bool(v.sum() <= self.bound + tol)


SearchSpace = Union[Hypercube, CappedSimplex]


@dataclass(frozen=True)
class SparsityPattern:
    """Ordered set of active coordinate indices."""

    active: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.active)
        if len(idx) < 1:
            raise ValueError("pattern must contain at least one index")
        if len(set(idx)) != len(idx):
            raise ValueError("pattern indices must be unique")
        if any(i < 0 for i in idx):
            raise ValueError("pattern indices must be non-negative")
        object.__setattr__(self, "active", tuple(sorted(idx)))

    @property
    def size(self) -> int:
        return len(self.active)

    def covers(self, support: Iterable[int]) -> bool:
        return set(support) <= set(self.active)


@dataclass(frozen=True)
class PreferencePair:
    """One observed comparison: `preferred` was ranked above `other`."""

    preferred: str
    other: str

    def __post_init__(self):
        if self.preferred == self.other:
            raise ValueError("a sample cannot be preferred over itself")


@dataclass
class SessionConfig:
    """Knobs of one optimization session.

    The displayed-image count per round is derived, not free:
    N = q (new batch) + 1 (current top) + m_past (revisited samples).
    """

    n: int = 20
    B: float = 2.0
    tau: float = 0.1
    ucb_lambda: float = 9.0
    q: int = 8
    k: int = 5
    m_past: int = 2
    t1: int = 10
    t2: int = 10
    n_init: int = 5
    raw_samples: int = 1024
    restarts: int = 20
    mc_base_samples: int = 128
    sigma_pref: float = 1.0
    seed: int = 0
    strict_budget: bool = True
    retain_mode: str = "subset"  # "subset" | "exact"

    @property
    def display_count(self) -> int:
        return self.q + 1 + self.m_past

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SessionConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)


def validate_config(config: SessionConfig) -> list[str]:
    """Return every violated constraint; an empty list means the config is valid."""
    errors = []
    if config.n < 1:
        errors.append("n must be >= 1")
    if not config.B > 0:
        errors.append("B must be > 0")
    if not 0.0 < config.tau < 1.0:
        errors.append(f"tau out of (0,1): {config.tau}")
    if config.ucb_lambda < 0:
        errors.append("ucb_lambda must be >= 0")
    if config.q < 1:
        errors.append("q must be >= 1")
    if config.m_past < 0:
        errors.append("m_past must be >= 0")
    n_display = config.q + 1 + config.m_past
    if config.k < 1:
        errors.append("k must be >= 1")
    elif config.k > n_display:
        errors.append(
            f"k exceeds display count: k={config.k} > N={n_display}"
        )
    if config.q > n_display:
        errors.append("q exceeds display count")
    if config.t1 < 1:
        errors.append("t1 must be >= 1")
    if config.t2 < 1:
        errors.append("t2 must be >= 1")
    if config.n_init < 1:
        errors.append("n_init must be >= 1")
    if config.restarts < 1:
        errors.append("restarts must be >= 1")
    if config.raw_samples < config.restarts:
        errors.append("raw_samples must be >= restarts")
    if config.mc_base_samples < 1:
        errors.append("mc_base_samples must be >= 1")
    if not config.sigma_pref > 0:
        errors.append("sigma_pref must be > 0")
    if config.retain_mode not in ("subset", "exact"):
        errors.append(f"retain_mode must be 'subset' or 'exact': {config.retain_mode}")
    return errors


def require_valid(config: SessionConfig) -> SessionConfig:
    errors = validate_config(config)
    if errors:
        raise ValueError("invalid config: " + "; ".join(errors))
    return config


def save_config(config: SessionConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")


def load_config(path: str | Path) -> SessionConfig:
    return SessionConfig.from_dict(json.loads(Path(path).read_text()))


def apply_overrides(config: SessionConfig, overrides: dict) -> SessionConfig:
    """CLI-style overrides: non-None entries replace file values."""
    updates = {k: v for k, v in overrides.items() if v is not None}
    if not updates:
        return config
    return SessionConfig.from_dict({**config.to_dict(), **updates})
