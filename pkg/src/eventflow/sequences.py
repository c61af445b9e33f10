"""Event sequences, datasets and the data-scale <-> model-scale normalizer."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)
DUPLICATE_JITTER = 1e-9


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class EventSequence:
    """Strictly increasing event times on ``[0, support_end]``.

    Use :meth:`from_raw` for untrusted input; the constructor only validates.
    """

    events: np.ndarray
    support_end: float

    def __post_init__(self) -> None:
        events = _frozen(self.events)
        object.__setattr__(self, "events", events)
        object.__setattr__(self, "support_end", float(self.support_end))
        if not self.support_end > 0:
            raise ValueError(f"support_end must be positive, got {self.support_end}")
        if events.size:
            if not np.all(np.isfinite(events)):
                raise ValueError("event times must be finite")
            if events[0] < 0 or events[-1] > self.support_end:
                raise ValueError(
                    f"events must lie in [0, {self.support_end}], "
                    f"got range [{events[0]}, {events[-1]}]"
                )
            if np.any(np.diff(events) <= 0):
                raise ValueError("events must be strictly increasing")

    @classmethod
    def from_raw(cls, events: Iterable[float], support_end: float) -> "EventSequence":
        """Sort ``events`` and break ties by nudging later duplicates forward."""
        arr = np.sort(np.asarray(list(events), dtype=np.float64))
        step = DUPLICATE_JITTER * float(support_end)
        while arr.size > 1:
            dup = np.flatnonzero(np.diff(arr) <= 0) + 1
            if dup.size == 0:
                break
            arr[dup] = arr[dup - 1] + step
            arr = np.sort(arr)
        if arr.size and arr[-1] > support_end >= arr[-1] - arr.size * step:
            # nudging pushed a duplicate run past the right edge; pack it backwards
            arr[-1] = support_end
            for i in range(arr.size - 2, -1, -1):
                if arr[i] < arr[i + 1]:
                    break
                arr[i] = arr[i + 1] - step
        return cls(arr, support_end)

    def __len__(self) -> int:
        return int(self.events.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EventSequence):
            return NotImplemented
        return self.support_end == other.support_end and np.array_equal(self.events, other.events)

    def __repr__(self) -> str:
        return f"EventSequence(n={len(self)}, support_end={self.support_end})"

    def to_record(self) -> dict:
        return {"events": self.events.tolist(), "t_max": self.support_end}

    @classmethod
    def from_record(cls, record: dict, support_end: float | None = None) -> "EventSequence":
        t_max = record.get("t_max", support_end)
        if t_max is None:
            raise ValueError("record has no 't_max' and no support_end was given")
        return cls.from_raw(record["events"], t_max)


def count(seq: EventSequence) -> int:
    return len(seq)


def restrict(seq: EventSequence, window_start: float, window_end: float) -> EventSequence:
    """Events in ``(window_start, window_end]``, shifted so the window starts at 0."""
    if not (0 <= window_start < window_end <= seq.support_end):
        raise ValueError(
            f"invalid window ({window_start}, {window_end}] for support [0, {seq.support_end}]"
        )
    ev = seq.events
    inside = ev[(ev > window_start) & (ev <= window_end)] - window_start
    width = window_end - window_start
    # float shift may land a hair past the new support end
    inside = np.minimum(inside, width)
    return EventSequence(inside, width)


def history(seq: EventSequence, t0: float) -> np.ndarray:
    """Event times ``<= t0`` (data scale, unshifted)."""
    return seq.events[seq.events <= t0]


@dataclass(frozen=True)
class Normalizer:
    """Affine map from ``[t_min, t_max]`` onto ``[-1, 1]``."""

    t_min: float
    t_max: float

    def __post_init__(self) -> None:
        if not self.t_min < self.t_max:
            raise ValueError(f"degenerate normalizer: t_min={self.t_min}, t_max={self.t_max}")

    @classmethod
    def fit(cls, sequences: Iterable[EventSequence]) -> "Normalizer":
        lo, hi = np.inf, -np.inf
        for s in sequences:
            if len(s):
                lo = min(lo, float(s.events[0]))
                hi = max(hi, float(s.events[-1]))
        if not np.isfinite(lo):
            raise ValueError("cannot fit a normalizer on sequences without events")
        return cls(lo, hi)

    @property
    def scale(self) -> float:
        return self.t_max - self.t_min

    def normalize(self, t, clamp: bool = True) -> np.ndarray:
        if isinstance(t, EventSequence):
            t = t.events
        z = 2.0 * (np.asarray(t, dtype=np.float64) - self.t_min) / self.scale - 1.0
        return np.clip(z, -1.0, 1.0) if clamp else z

    def denormalize(self, z) -> np.ndarray:
        return (np.asarray(z, dtype=np.float64) + 1.0) * 0.5 * self.scale + self.t_min

    def to_dict(self) -> dict:
        return {"t_min": self.t_min, "t_max": self.t_max}


@dataclass
class TPPDataset:
    sequences: list[EventSequence]
    support_end: float
    split: str = "train"
    name: str = ""

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        for s in self.sequences:
            if s.support_end != self.support_end:
                raise ValueError(
                    f"sequence support {s.support_end} differs from dataset support {self.support_end}"
                )

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def __getitem__(self, i):
        return self.sequences[i]

    def counts(self) -> np.ndarray:
        return np.array([len(s) for s in self.sequences], dtype=np.int64)

    def max_count(self) -> int:
        return int(self.counts().max()) if self.sequences else 0


@dataclass
class DatasetSplits:
    train: TPPDataset
    val: TPPDataset
    test: TPPDataset
    name: str = ""
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def support_end(self) -> float:
        return self.train.support_end

    def __getitem__(self, split: str) -> TPPDataset:
        return getattr(self, split)


def split_sequences(
    sequences: Sequence[EventSequence],
    support_end: float,
    seed: int = 0,
    name: str = "",
    shuffle: bool = True,
) -> DatasetSplits:
    """Split into 60/20/20 train/val/test by sequence."""
    n = len(sequences)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    parts = np.split(order, [n_train, n_train + n_val])
    ds = [
        TPPDataset([sequences[i] for i in idx], support_end, split, name)
        for idx, split in zip(parts, SPLITS)
    ]
    return DatasetSplits(*ds, name=name, seed=seed)


def write_jsonl(path: Path | str, sequences: Iterable[EventSequence]) -> None:
    with open(path, "w") as fh:
        for s in sequences:
            fh.write(json.dumps(s.to_record()) + "\n")


def read_jsonl(path: Path | str, support_end: float | None = None) -> list[EventSequence]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(EventSequence.from_record(json.loads(line), support_end))
    return out


def save_dataset(splits: DatasetSplits, directory: Path | str) -> Path:
    """Write ``train/val/test.jsonl`` plus ``meta.json`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        write_jsonl(directory / f"{split}.jsonl", splits[split])
    meta = {"support_end": splits.support_end, "name": splits.name, "seed": splits.seed}
    meta.update(splits.meta)
    (directory / "meta.json").write_text(json.dumps(meta, indent=2))
    return directory


def load_dataset(directory: Path | str) -> DatasetSplits:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    support_end = float(meta["support_end"])
    parts = []
    for split in SPLITS:
        seqs = read_jsonl(directory / f"{split}.jsonl", support_end)
        parts.append(TPPDataset(seqs, support_end, split, meta.get("name", "")))
    extra = {k: v for k, v in meta.items() if k not in ("support_end", "name", "seed")}
    return DatasetSplits(*parts, name=meta.get("name", ""), seed=int(meta.get("seed", 0)), meta=extra)
