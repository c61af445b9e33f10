"""Sequence distance, MMD, MARE and single-step MSE."""

from __future__ import annotations

import logging
import math
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .sequences import EventSequence

logger = logging.getLogger(__name__)

BANDWIDTH_FLOOR = 1e-8


def _events(seq) -> np.ndarray:
    if isinstance(seq, EventSequence):
        return seq.events
    return np.asarray(seq, dtype=np.float64).reshape(-1)


def sequence_distance(gamma, eta, t_end: float) -> float:
    """Distance between two sorted sequences on ``[0, t_end]``.

    Matched events contribute ``|t_gamma - t_eta|``; each extra event of the
    longer sequence contributes ``t_end - t``. Equivalently, the L1 distance
    between the two counting functions on ``[0, t_end]``.
    """
    a, b = _events(gamma), _events(eta)
    for ev in (a, b):
        if ev.size and ev[-1] > t_end * (1 + 1e-12):
            raise ValueError(f"event {ev[-1]} beyond t_end={t_end}")
    if a.size > b.size:
        a, b = b, a
    n = a.size
    return float(np.abs(a - b[:n]).sum() + (t_end - b[n:]).sum())


def normalized_forecast_distance(truth, generated, delta_t: float) -> float:
    """Distance between two window sequences in window coordinates, divided by ``delta_t``."""
    return sequence_distance(truth, generated, delta_t) / delta_t


def padded_matrix(seqs: Sequence, t_end: float, length: int | None = None) -> np.ndarray:
    """Stack sequences right-padded with ``t_end``.

    Padding with ``t_end`` turns the sequence distance into a plain L1
    distance between rows.
    """
    evs = [_events(s) for s in seqs]
    L = max([e.size for e in evs] + [length or 0, 1])
    out = np.full((len(evs), L), float(t_end))
    for i, e in enumerate(evs):
        out[i, : e.size] = e
    return out


def distance_matrix(seqs_a: Sequence, seqs_b: Sequence | None, t_end: float) -> np.ndarray:
    if seqs_b is None:
        seqs_b = seqs_a
    L = max([len(_events(s)) for s in list(seqs_a) + list(seqs_b)] + [1])
    return cdist(padded_matrix(seqs_a, t_end, L), padded_matrix(seqs_b, t_end, L), metric="cityblock")


def median_bandwidth(d_pooled: np.ndarray) -> float:
    sigma = float(np.median(d_pooled))
    if sigma <= 0:
        logger.warning("median pairwise distance is zero; using bandwidth floor %g", BANDWIDTH_FLOOR)
        sigma = BANDWIDTH_FLOOR
    return sigma


def _fmean(x: np.ndarray) -> float:
    return math.fsum(x.ravel().tolist()) / x.size


def mmd(
    sample_a: Sequence,
    sample_b: Sequence,
    t_end: float | None = None,
    sigma: float | None = None,
) -> float:
    """Square root of the biased (V-statistic) MMD^2 under ``exp(-d / (2 sigma^2))``.

    ``sigma`` defaults to the median of all pairwise distances over the pooled
    samples (diagonal included). ``t_end`` defaults to the support of the
    first ``EventSequence`` found.
    """
    if len(sample_a) == 0 or len(sample_b) == 0:
        raise ValueError("both samples must be nonempty")
    pooled = list(sample_a) + list(sample_b)
    if t_end is None:
        supports = [s.support_end for s in pooled if isinstance(s, EventSequence)]
        if not supports:
            raise ValueError("t_end is required for raw event arrays")
        t_end = supports[0]
    d = distance_matrix(pooled, None, t_end)
    if sigma is None:
        sigma = median_bandwidth(d)
    k = np.exp(-d / (2.0 * sigma**2))
    na = len(sample_a)
    kaa, kbb, kab = k[:na, :na], k[na:, na:], k[:na, na:]
    # exact block sums, so identical samples cancel to exactly zero
    mmd2 = _fmean(kaa) + _fmean(kbb) - 2.0 * _fmean(kab)
    return float(np.sqrt(max(mmd2, 0.0)))


def mare(truth_counts, predicted_counts) -> float:
    """Mean of ``|n_hat - n| / n``; pairs with ``n == 0`` are dropped (see :func:`mare_excluded`)."""
    n = np.asarray(truth_counts, dtype=np.float64)
    n_hat = np.asarray(predicted_counts, dtype=np.float64)
    if n.shape != n_hat.shape:
        raise ValueError("truth and predicted counts differ in length")
    keep = n > 0
    if not keep.any():
        raise ValueError("no evaluation pairs with a positive true count")
    return float(np.mean(np.abs(n_hat[keep] - n[keep]) / n[keep]))


def mare_excluded(truth_counts) -> int:
    return int(np.sum(np.asarray(truth_counts) == 0))


def _firsts(truths, generated):
    pairs = [(_events(t), _events(g)) for t, g in zip(truths, generated)]
    kept = [(t[0], g[0]) for t, g in pairs if t.size and g.size]
    return kept, len(pairs) - len(kept)


def single_step_mse(truth_windows: Sequence, generated_windows: Sequence) -> float:
    """MSE between first true and first generated event times; empty-sided pairs are dropped."""
    kept, _ = _firsts(truth_windows, generated_windows)
    if not kept:
        raise ValueError("no evaluation pairs with events on both sides")
    arr = np.asarray(kept)
    return float(np.mean((arr[:, 0] - arr[:, 1]) ** 2))


def single_step_excluded(truth_windows: Sequence, generated_windows: Sequence) -> int:
    return _firsts(truth_windows, generated_windows)[1]
