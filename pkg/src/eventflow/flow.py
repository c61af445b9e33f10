"""Reference process, balanced couplings and the linear interpolant path.

Everything here works on model-scale positions (see ``Normalizer``) as plain
numpy vectors; the training loop pads them into tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class CountDistribution:
    """Categorical distribution over event counts ``0..n_max``."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=np.float64).reshape(-1)
        if p.size == 0:
            raise ValueError("count distribution must be nonempty")
        if np.any(p < 0) or not np.isclose(p.sum(), 1.0, atol=1e-6):
            raise ValueError("count probabilities must be nonnegative and sum to 1")
        p = p / p.sum()
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def from_counts(cls, counts, n_max: int | None = None) -> "CountDistribution":
        counts = np.asarray(counts, dtype=np.int64)
        if counts.size == 0:
            raise ValueError("need at least one observed count")
        size = int(max(counts.max(), n_max or 0)) + 1
        hist = np.bincount(counts, minlength=size).astype(np.float64)
        return cls(hist / hist.sum())

    @classmethod
    def point_mass(cls, n: int) -> "CountDistribution":
        p = np.zeros(n + 1)
        p[n] = 1.0
        return cls(p)

    @property
    def n_max(self) -> int:
        return self.probs.size - 1

    def mean(self) -> float:
        return float(np.arange(self.probs.size) @ self.probs)

    def sample(self, rng: np.random.Generator, size=None):
        return rng.choice(self.probs.size, size=size, p=self.probs)

    def to_list(self) -> list[float]:
        return self.probs.tolist()


@dataclass(frozen=True, eq=False)
class CouplingDraw:
    gamma0: np.ndarray
    gamma1: np.ndarray

    def __post_init__(self) -> None:
        g0 = np.asarray(self.gamma0, dtype=np.float64).reshape(-1)
        g1 = np.asarray(self.gamma1, dtype=np.float64).reshape(-1)
        if g0.shape != g1.shape:
            raise ValueError(f"unbalanced pair: {g0.size} vs {g1.size} events")
        object.__setattr__(self, "gamma0", g0)
        object.__setattr__(self, "gamma1", g1)

    def __len__(self) -> int:
        return int(self.gamma1.size)


@dataclass(frozen=True, eq=False)
class FlowState:
    positions: np.ndarray
    s: float

    def __len__(self) -> int:
        return int(np.asarray(self.positions).size)


def sample_reference_counts(count_source: CountDistribution, rng: np.random.Generator, size=None):
    return count_source.sample(rng, size)


def sample_reference(n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` sorted i.i.d. standard-normal positions."""
    return np.sort(rng.standard_normal(n))


def sample_balanced_pair(gamma1, rng: np.random.Generator) -> CouplingDraw:
    """Pair a normalised data sequence with an equally sized sorted reference draw."""
    gamma1 = np.asarray(gamma1, dtype=np.float64).reshape(-1)
    return CouplingDraw(sample_reference(gamma1.size, rng), gamma1)


def interpolate(pair: CouplingDraw, s: float) -> FlowState:
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"flow time must be in [0, 1], got {s}")
    return FlowState((1.0 - s) * pair.gamma0 + s * pair.gamma1, float(s))


def perturb(state: FlowState, sigma: float, rng: np.random.Generator) -> FlowState:
    """Add i.i.d. ``N(0, sigma^2)`` noise to every position; no clamping."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    pos = np.asarray(state.positions, dtype=np.float64)
    return FlowState(pos + sigma * rng.standard_normal(pos.shape), state.s)


def target_velocity(pair: CouplingDraw) -> np.ndarray:
    return pair.gamma1 - pair.gamma0
