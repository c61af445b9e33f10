"""Synthetic temporal point processes used as benchmarks.

Hawkes and non-stationary Poisson draws go through Ogata thinning; renewal and
self-correcting processes are drawn by inverting their inter-arrival laws.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .sequences import EventSequence, TPPDataset, split_sequences

KINDS = (
    "hawkes1",
    "hawkes2",
    "nonstationary_poisson",
    "nonstationary_renewal",
    "stationary_renewal",
    "self_correcting",
    "homogeneous_poisson",
)

# Hawkes kernels are alpha * beta * exp(-beta * dt), so sum(alpha) is the branching ratio.
DEFAULT_PARAMS: dict[str, dict[str, float]] = {
    "hawkes1": {"mu": 0.2, "alpha": 0.8, "beta": 1.0},
    "hawkes2": {"mu": 0.2, "alpha1": 0.4, "beta1": 1.0, "alpha2": 0.4, "beta2": 20.0},
    "nonstationary_poisson": {"amplitude": 0.99, "period": 20.0, "base_rate": 1.0},
    "nonstationary_renewal": {"gap_cv": 0.3, "amplitude": 0.99, "period": 20.0},
    "stationary_renewal": {"gap_mean": 1.0, "gap_std": 6.0},
    "self_correcting": {"mu": 1.0, "alpha": 1.0},
    "homogeneous_poisson": {"rate": 1.0},
}

# Reported per-dataset count statistics (mean, std) for 1000 sequences on [0, 100].
REFERENCE_COUNT_STATS = {
    "hawkes1": (95.4, 45.8),
    "hawkes2": (97.2, 49.1),
    "nonstationary_poisson": (100.3, 9.8),
    "nonstationary_renewal": (98.0, 2.9),
    "stationary_renewal": (109.2, 38.1),
    "self_correcting": (100.3, 0.74),
}


class ThinningBoundError(RuntimeError):
    """The proposal rate failed to dominate the intensity."""


@dataclass(frozen=True)
class SimulatorSpec:
    kind: str
    params: dict = field(default_factory=dict)
    support_end: float = 100.0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown simulator kind {self.kind!r}; expected one of {KINDS}")
        merged = {**DEFAULT_PARAMS[self.kind], **self.params}
        object.__setattr__(self, "params", merged)
        if self.support_end <= 0:
            raise ValueError("support_end must be positive")
        for key, value in merged.items():
            if key == "amplitude":
                continue
            if not value > 0:
                raise ValueError(f"parameter {key} must be positive, got {value}")
        if self.kind.startswith("hawkes"):
            br = self.branching_ratio()
            if br >= 1:
                raise ValueError(f"non-stationary Hawkes parameters: branching ratio {br:.3f} >= 1")
        if "amplitude" in merged and not 0 <= merged["amplitude"] < merged.get("base_rate", 1.0):
            raise ValueError("modulation amplitude must lie in [0, base_rate)")

    def kernels(self) -> list[tuple[float, float]]:
        p = self.params
        if self.kind == "hawkes1":
            return [(p["alpha"], p["beta"])]
        if self.kind == "hawkes2":
            return [(p["alpha1"], p["beta1"]), (p["alpha2"], p["beta2"])]
        raise ValueError(f"{self.kind} is not a Hawkes process")

    def branching_ratio(self) -> float:
        return float(sum(a for a, _ in self.kernels()))


def sequence_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for sequence ``index`` so draws don't depend on scheduling."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


IntensityFn = Callable[[float, Sequence[float]], float]


def thinning_sample(
    intensity_fn: IntensityFn,
    upper_bound_fn: IntensityFn,
    support_end: float,
    seed=None,
) -> EventSequence:
    """Ogata thinning on ``[0, support_end]``.

    ``intensity_fn(t, events)`` is the conditional intensity given the accepted
    events so far. ``upper_bound_fn(t, events)`` must dominate the intensity on
    ``[t, next proposal]`` as long as no event is accepted in between; it is
    re-evaluated after every proposal.

    Raises:
        ThinningBoundError: if a proposal finds ``intensity > bound``.
    """
    rng = _as_rng(seed)
    events: list[float] = []
    t = 0.0
    while True:
        bound = float(upper_bound_fn(t, events))
        if bound <= 0.0:
            break
        t += rng.exponential(1.0 / bound)
        if t > support_end:
            break
        lam = float(intensity_fn(t, events))
        if lam > bound * (1.0 + 1e-9):
            raise ThinningBoundError(
                f"intensity {lam:.6g} exceeds bound {bound:.6g} at t={t:.6g} "
                f"after {len(events)} events"
            )
        if rng.uniform() * bound <= lam:
            events.append(t)
    return EventSequence.from_raw(events, support_end)


def _hawkes_fns(mu: float, kernels: list[tuple[float, float]]):
    alphas = np.array([a for a, _ in kernels])
    betas = np.array([b for _, b in kernels])

    def intensity(t, events):
        if not events:
            return mu
        dt = t - np.asarray(events)
        # only recent events matter for fast-decaying kernels, but the full sum is exact
        return mu + float(np.sum(alphas[:, None] * betas[:, None] * np.exp(-betas[:, None] * dt)))

    # exponential kernels decay, so the intensity at the current time bounds the future
    return intensity, intensity


def _renewal_times(gaps_fn, support_end: float, rng, batch: int = 256) -> np.ndarray:
    out = []
    t = 0.0
    while True:
        gaps = gaps_fn(rng, batch)
        times = t + np.cumsum(gaps)
        keep = times[times <= support_end]
        out.append(keep)
        if keep.size < batch:
            break
        t = float(times[-1])
    return np.concatenate(out) if out else np.empty(0)


def _lognormal_params(mean: float, std: float) -> tuple[float, float]:
    sigma2 = np.log1p((std / mean) ** 2)
    return np.log(mean) - 0.5 * sigma2, np.sqrt(sigma2)


def _modulated_rate(p: dict):
    base = p.get("base_rate", 1.0)
    amp, period = p["amplitude"], p["period"]

    def rate(t):
        return base + amp * np.sin(2 * np.pi * t / period)

    def cumulative(t):
        return base * t + amp * period / (2 * np.pi) * (1 - np.cos(2 * np.pi * t / period))

    return rate, cumulative


def _invert_monotone(cumulative, targets: np.ndarray, hi: float) -> np.ndarray:
    """Solve ``cumulative(t) = y`` for each target by vectorised bisection."""
    lo_arr = np.zeros_like(targets)
    hi_arr = np.full_like(targets, hi)
    for _ in range(64):
        mid = 0.5 * (lo_arr + hi_arr)
        below = cumulative(mid) < targets
        lo_arr = np.where(below, mid, lo_arr)
        hi_arr = np.where(below, hi_arr, mid)
    return 0.5 * (lo_arr + hi_arr)


def simulate_one(spec: SimulatorSpec, rng: np.random.Generator) -> EventSequence:
    T = spec.support_end
    p = spec.params
    kind = spec.kind
    if kind in ("hawkes1", "hawkes2"):
        lam, bound = _hawkes_fns(p["mu"], spec.kernels())
        return thinning_sample(lam, bound, T, rng)
    if kind == "homogeneous_poisson":
        rate = p["rate"]
        return thinning_sample(lambda t, ev: rate, lambda t, ev: rate, T, rng)
    if kind == "nonstationary_poisson":
        rate, _ = _modulated_rate(p)
        peak = p.get("base_rate", 1.0) + p["amplitude"]
        return thinning_sample(lambda t, ev: rate(t), lambda t, ev: peak, T, rng)
    if kind == "stationary_renewal":
        m, s = _lognormal_params(p["gap_mean"], p["gap_std"])
        times = _renewal_times(lambda r, k: r.lognormal(m, s, size=k), T, rng)
        return EventSequence.from_raw(times, T)
    if kind == "nonstationary_renewal":
        # unit-mean gamma renewal in operational time, mapped through the inverse
        # of the integrated modulated rate
        shape = 1.0 / p["gap_cv"] ** 2
        _, cumulative = _modulated_rate({**p, "base_rate": 1.0})
        horizon = float(cumulative(T))
        op_times = _renewal_times(lambda r, k: r.gamma(shape, 1.0 / shape, size=k), horizon, rng)
        times = _invert_monotone(cumulative, op_times, T) if op_times.size else op_times
        return EventSequence.from_raw(np.clip(times, 0.0, T), T)
    if kind == "self_correcting":
        # intensity exp(mu * t - alpha * N(t-)); compensator inverts in closed form
        mu, alpha = p["mu"], p["alpha"]
        events = []
        t, n = 0.0, 0
        while True:
            e = rng.exponential()
            t = (np.log(e * mu * np.exp(alpha * n) + np.exp(mu * t))) / mu
            if t > T:
                break
            events.append(t)
            n += 1
        return EventSequence.from_raw(events, T)
    raise AssertionError(kind)


def simulate(spec: SimulatorSpec, n_sequences: int, seed: int = 0) -> TPPDataset:
    """Draw ``n_sequences`` independent sequences; deterministic in ``seed``."""
    if n_sequences < 1:
        raise ValueError("n_sequences must be positive")
    seqs = [simulate_one(spec, sequence_rng(seed, i)) for i in range(n_sequences)]
    return TPPDataset(seqs, spec.support_end, "train", spec.kind)


def simulate_splits(spec: SimulatorSpec, n_sequences: int, seed: int = 0):
    """Simulate and split 60/20/20, ready for :func:`eventflow.sequences.save_dataset`."""
    ds = simulate(spec, n_sequences, seed)
    splits = split_sequences(ds.sequences, spec.support_end, seed=seed, name=spec.kind)
    splits.meta = {"kind": spec.kind, "params": dict(spec.params)}
    return splits
