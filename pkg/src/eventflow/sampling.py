"""Generation by forward-Euler integration of a learned vector field."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint
from .flow import sample_reference
from .nets import pad_batch
from .sequences import EventSequence, Normalizer, TPPDataset
from .training import (
    ForecastWindow,
    encode_histories,
    history_model_scale,
    make_window,
    sample_t0,
    window_normalizer,
)

FieldFn = Callable[[np.ndarray, float], np.ndarray]


def euler_integrate(field: FieldFn, x0: np.ndarray, nfe: int) -> np.ndarray:
    """Integrate ``dx/ds = field(x, s)`` from ``s=0`` to ``s=1`` in ``nfe`` uniform steps."""
    if nfe < 1:
        raise ValueError("nfe must be >= 1")
    x = np.array(x0, dtype=np.float64)
    h = 1.0 / nfe
    for k in range(nfe):
        x = x + h * field(x, k * h)
    return x


def model_field(model, mask=None, memory=None) -> FieldFn:
    """Wrap a vector-field module as a numpy ``field(x, s)`` over a (B, L) batch."""
    dtype = next(model.parameters()).dtype

    @torch.no_grad()
    def field(x: np.ndarray, s: float) -> np.ndarray:
        xt = torch.as_tensor(x, dtype=dtype)
        st = torch.full((xt.shape[0],), s, dtype=dtype)
        return model(xt, st, mask, memory).double().numpy()

    return field


def _to_data_scale(z: np.ndarray, normalizer: Normalizer, support_end: float) -> EventSequence:
    t = np.clip(np.sort(normalizer.denormalize(z)), 0.0, support_end)
    return EventSequence.from_raw(t, support_end)


@dataclass(frozen=True)
class Forecast:
    """Conditioning for forecast-mode sampling; ``history`` and ``t0`` on data scale."""

    history: np.ndarray
    t0: float


def _integrate_padded(model, x0s: list[np.ndarray], nfe: int, memory=None) -> list[np.ndarray]:
    dtype = next(model.parameters()).dtype
    x, mask = pad_batch(x0s, dtype)
    out = euler_integrate(model_field(model, mask, memory), x.double().numpy(), nfe)
    return [out[i, : len(z)] for i, z in enumerate(x0s)]


def sample(
    checkpoint: Checkpoint,
    n_sequences: int,
    nfe: int,
    rng: np.random.Generator,
    mode: Forecast | None = None,
    count_checkpoint: Checkpoint | None = None,
    batch_size: int = 256,
) -> list[EventSequence]:
    """Draw sequences from a trained vector field.

    Unconditional: counts come from the training-split histogram stored in the
    manifest. Forecast: counts come from the count model and the result lives
    on ``[t0, t0 + delta_t]`` (absolute times, support ``t0 + delta_t``).
    """
    if nfe < 1:
        raise ValueError("nfe must be >= 1")
    model = checkpoint.model.eval()
    if mode is None:
        ns = checkpoint.count_distribution.sample(rng, n_sequences)
        x0s = [sample_reference(int(n), rng) for n in ns]
        z1 = _integrate_grouped(model, x0s, nfe, batch_size)
        T = checkpoint.support_end
        return [_to_data_scale(z, checkpoint.normalizer, T) for z in z1]

    if count_checkpoint is None:
        raise ValueError("forecast sampling needs a count model checkpoint")
    dt = float(checkpoint.delta_t)
    window = ForecastWindow(np.asarray(mode.history, dtype=np.float64), float(mode.t0), EventSequence([], dt))
    gens = _forecast_windows(checkpoint, count_checkpoint, [window] * n_sequences, nfe, rng, batch_size)
    return [EventSequence.from_raw(g + mode.t0, mode.t0 + dt) for g in gens]


def _integrate_grouped(model, x0s, nfe, batch_size):
    out: list[np.ndarray | None] = [None] * len(x0s)
    groups = defaultdict(list)
    for i, z in enumerate(x0s):
        groups[len(z)].append(i)
    for n, idx in sorted(groups.items()):
        if n == 0:
            for i in idx:
                out[i] = np.empty(0)
            continue
        for j in range(0, len(idx), batch_size):
            part = idx[j : j + batch_size]
            x = np.stack([x0s[i] for i in part])
            res = euler_integrate(model_field(model), x, nfe)
            for i, r in zip(part, res):
                out[i] = r
    return out


@torch.no_grad()
def sample_counts(count_checkpoint: Checkpoint, tokens: list[np.ndarray], rng) -> np.ndarray:
    model = count_checkpoint.model.eval()
    dtype = next(model.parameters()).dtype
    h, mask = pad_batch(tokens, dtype)
    probs = torch.softmax(model(h, mask).double(), dim=-1).numpy()
    u = rng.uniform(size=len(tokens))
    cdf = np.cumsum(probs, axis=1)
    return np.minimum((cdf < u[:, None]).sum(1), probs.shape[1] - 1)


def _forecast_windows(
    checkpoint: Checkpoint,
    count_checkpoint: Checkpoint,
    windows: Sequence[ForecastWindow],
    nfe: int,
    rng: np.random.Generator,
    batch_size: int,
) -> list[np.ndarray]:
    """Generated events in window coordinates ``[0, delta_t]`` for each window."""
    model = checkpoint.model.eval()
    norm = checkpoint.normalizer
    count_norm = count_checkpoint.normalizer
    dt = float(checkpoint.delta_t)
    wnorm = window_normalizer(dt)
    out: list[np.ndarray] = []
    for j in range(0, len(windows), batch_size):
        part = windows[j : j + batch_size]
        ns = sample_counts(count_checkpoint, [history_model_scale(w, count_norm) for w in part], rng)
        x0s = [sample_reference(int(n), rng) for n in ns]
        live = [i for i, n in enumerate(ns) if n > 0]
        gens = [np.empty(0) for _ in part]
        if live:
            with torch.no_grad():
                memory = encode_histories(model, [history_model_scale(part[i], norm) for i in live])
            z1 = _integrate_padded(model, [x0s[i] for i in live], nfe, memory)
            for i, z in zip(live, z1):
                gens[i] = np.clip(np.sort(wnorm.denormalize(z)), 0.0, dt)
        out.extend(gens)
    return out


@dataclass
class ForecastRecord:
    history: np.ndarray
    t0: float
    dt: float
    truth: np.ndarray  # absolute times in (t0, t0 + dt]
    generated: np.ndarray  # absolute times in [t0, t0 + dt]
    sequence_index: int = -1

    def truth_window(self) -> np.ndarray:
        return self.truth - self.t0

    def generated_window(self) -> np.ndarray:
        return self.generated - self.t0

    def to_record(self) -> dict:
        return {
            "history": np.asarray(self.history).tolist(),
            "t0": self.t0,
            "dt": self.dt,
            "truth": np.asarray(self.truth).tolist(),
            "generated": np.asarray(self.generated).tolist(),
            "sequence_index": self.sequence_index,
        }

    @classmethod
    def from_record(cls, d: dict) -> "ForecastRecord":
        return cls(
            np.asarray(d["history"], dtype=np.float64),
            float(d["t0"]),
            float(d["dt"]),
            np.asarray(d["truth"], dtype=np.float64),
            np.asarray(d["generated"], dtype=np.float64),
            int(d.get("sequence_index", -1)),
        )


def evaluation_windows(
    dataset: TPPDataset | Sequence[EventSequence],
    delta_t: float,
    windows_per_sequence: int = 50,
    seed: int = 0,
) -> tuple[list[tuple[int, ForecastWindow]], int]:
    """Test-time windows, identical for every method given the same seed.

    Returns ``(windows, n_skipped)`` where skipped sequences are those whose
    support is shorter than ``2 * delta_t``.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 50]))
    out, skipped = [], 0
    for i, seq in enumerate(dataset):
        if seq.support_end < 2 * delta_t:
            skipped += 1
            continue
        for _ in range(windows_per_sequence):
            out.append((i, make_window(seq, sample_t0(rng, seq.support_end, delta_t), delta_t)))
    return out, skipped


@dataclass
class ForecastResults:
    records: list[ForecastRecord]
    skipped: int = 0


def _records(windows, gens, dt) -> list[ForecastRecord]:
    return [
        ForecastRecord(w.history, w.t0, dt, w.target.events + w.t0, np.asarray(g) + w.t0, i)
        for (i, w), g in zip(windows, gens)
    ]


def forecast(
    checkpoint: Checkpoint,
    count_checkpoint: Checkpoint,
    dataset: TPPDataset | Sequence[EventSequence],
    nfe: int,
    rng: np.random.Generator,
    windows_per_sequence: int = 50,
    window_seed: int = 0,
    batch_size: int = 256,
) -> ForecastResults:
    """Forecast ``windows_per_sequence`` random windows of each test sequence."""
    if checkpoint.delta_t is None:
        raise ValueError("checkpoint was not trained for forecasting")
    dt = float(checkpoint.delta_t)
    windows, skipped = evaluation_windows(dataset, dt, windows_per_sequence, window_seed)
    gens = _forecast_windows(checkpoint, count_checkpoint, [w for _, w in windows], nfe, rng, batch_size)
    return ForecastResults(_records(windows, gens, dt), skipped)


def write_forecasts(path: Path | str, records: Sequence[ForecastRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_record()) + "\n")


def read_forecasts(path: Path | str) -> list[ForecastRecord]:
    with open(path) as fh:
        return [ForecastRecord.from_record(json.loads(line)) for line in fh if line.strip()]
