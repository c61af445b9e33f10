"""Experiment orchestration: multi-seed runs, the Poisson baseline, tables and plots."""

from __future__ import annotations

import csv
import json
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import MANIFEST, Checkpoint, load_checkpoint
from .metrics import mare, mare_excluded, mmd, normalized_forecast_distance, single_step_excluded, single_step_mse
from .sampling import ForecastRecord, evaluation_windows, forecast, sample, sample_counts
from .sequences import DatasetSplits, EventSequence, TPPDataset, load_dataset, save_dataset
from .synthetic import KINDS, SimulatorSpec, simulate_splits
from .training import TrainConfig, history_model_scale, train, train_count_model

logger = logging.getLogger(__name__)

DATA_DIR_ENV = "EVENTFLOW_DATA_DIR"
REPORT_COLUMNS = ["dataset", "method", "metric", "mean", "std", "n_seeds", "nfe"]
UNCONDITIONAL_METRICS = ("mmd",)
FORECAST_METRICS = ("distance", "mare", "mse")
WINDOW_NOTE = (
    "Forecast windows: T0 drawn uniformly in [dT, T - dT] from a fixed evaluation seed; "
    "every method is scored on the same windows."
)
DATA_ROW_NOTE = "Unconditional 'data' row: MMD between two disjoint halves of the test split."


def resolve_dataset_path(path: str | Path) -> Path:
    """Return ``path`` if it exists, else try it under ``$EVENTFLOW_DATA_DIR``."""
    p = Path(path)
    if p.exists() or p.is_absolute():
        return p
    root = os.environ.get(DATA_DIR_ENV)
    if root and (Path(root) / p).exists():
        return Path(root) / p
    return p


# ---------------------------------------------------------------------------
# baseline


@dataclass(frozen=True)
class TrainStatistics:
    rate: float  # events per unit time over the training split
    support_end: float

    @classmethod
    def from_dataset(cls, ds: TPPDataset) -> "TrainStatistics":
        total = float(ds.counts().sum())
        return cls(total / (len(ds) * ds.support_end), ds.support_end)


def naive_baseline_forecast(
    history,
    t0: float,
    delta_t: float,
    stats: TrainStatistics,
    rng: np.random.Generator,
) -> EventSequence:
    """Homogeneous Poisson draw on ``(t0, t0 + delta_t]`` at the training mean rate.

    The history is ignored; it is accepted so the baseline has the forecaster
    call shape.
    """
    n = rng.poisson(stats.rate * delta_t) if stats.rate > 0 else 0
    times = t0 + np.sort(rng.uniform(0.0, delta_t, n))
    return EventSequence.from_raw(times, t0 + delta_t)


def poisson_baseline_sample(stats: TrainStatistics, n_sequences: int, seed: int) -> list[EventSequence]:
    rng = np.random.default_rng(seed)
    T = stats.support_end
    out = []
    for _ in range(n_sequences):
        n = rng.poisson(stats.rate * T)
        out.append(EventSequence.from_raw(np.sort(rng.uniform(0.0, T, n)), T))
    return out


# ---------------------------------------------------------------------------
# metric evaluation of forecast records


def forecast_metrics(records: Sequence[ForecastRecord], metrics: Sequence[str]) -> dict:
    out: dict[str, dict] = {}
    truths = [r.truth_window() for r in records]
    gens = [r.generated_window() for r in records]
    if "distance" in metrics:
        d = [normalized_forecast_distance(t, g, r.dt) for t, g, r in zip(truths, gens, records)]
        out["distance"] = {"value": float(np.mean(d)), "n_pairs": len(d), "excluded": 0}
    if "mare" in metrics:
        n_true = [len(t) for t in truths]
        n_gen = [len(g) for g in gens]
        excl = mare_excluded(n_true)
        out["mare"] = {"value": mare(n_true, n_gen), "n_pairs": len(n_true) - excl, "excluded": excl}
    if "mse" in metrics:
        excl = single_step_excluded(truths, gens)
        out["mse"] = {
            "value": single_step_mse(truths, gens),
            "n_pairs": len(truths) - excl,
            "excluded": excl,
        }
    return out


# ---------------------------------------------------------------------------
# count model selection

# alpha * N_max values searched for the count regularizer
ALPHA_GRID = (1.0, 10.0, 100.0, 1000.0)


def count_mare(
    count_checkpoint: Checkpoint,
    dataset: TPPDataset | Sequence[EventSequence],
    rng: np.random.Generator,
    windows_per_sequence: int = 50,
    window_seed: int = 0,
) -> float:
    """MARE of counts drawn from ``p_phi(n | H)`` on the shared evaluation windows."""
    dt = float(count_checkpoint.delta_t)
    windows, _ = evaluation_windows(dataset, dt, windows_per_sequence, window_seed)
    norm = count_checkpoint.normalizer
    tokens = [history_model_scale(w, norm) for _, w in windows]
    pred = np.concatenate(
        [sample_counts(count_checkpoint, tokens[i : i + 512], rng) for i in range(0, len(tokens), 512)]
    )
    return mare([len(w.target) for _, w in windows], pred)


def tune_alpha(
    splits: DatasetSplits,
    config: TrainConfig,
    grid: Sequence[float] = ALPHA_GRID,
    windows_per_sequence: int = 10,
) -> tuple[float, dict[float, float]]:
    """Pick ``alpha`` from ``grid / N_max`` by validation MARE; returns ``(alpha, {alpha: mare})``."""
    n_max = splits.train.max_count()
    scores: dict[float, float] = {}
    for g in grid:
        alpha = g / n_max
        res = train_count_model(splits, replace(config, alpha=alpha))
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3]))
        scores[alpha] = count_mare(res.checkpoint, splits.val, rng, windows_per_sequence, config.seed)
        logger.info("alpha=%g (x N_max = %g): val MARE %.4f", alpha, g, scores[alpha])
    return min(scores, key=scores.get), scores


# ---------------------------------------------------------------------------
# experiment


@dataclass
class ExperimentSpec:
    dataset: str
    task: str = "unconditional"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    nfes: list[int] = field(default_factory=lambda: [1, 10, 25])
    metrics: list[str] | None = None
    out_dir: str = "runs/experiment"
    train: dict = field(default_factory=dict)
    n_samples: int = 1000
    windows_per_sequence: int = 50
    eval_seed: int = 0
    delta_t: float | None = None
    parallel: bool = False
    # synthetic datasets are generated on the fly when the path does not exist
    n_sequences: int = 1000

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ValueError("need at least one seed")
        if any(k < 1 for k in self.nfes):
            raise ValueError("NFEs must be >= 1")
        if self.metrics is None:
            self.metrics = list(UNCONDITIONAL_METRICS if self.task == "unconditional" else FORECAST_METRICS)

    @classmethod
    def from_json(cls, path: Path | str) -> "ExperimentSpec":
        return cls(**json.loads(Path(path).read_text()))


@dataclass
class Report:
    dataset: str
    task: str
    seeds: list[int]
    per_seed: list[dict] = field(default_factory=list)  # dataset, method, metric, nfe, seed, value, ...
    failures: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def summary(self) -> list[dict]:
        groups: dict[tuple, list[float]] = {}
        for r in self.per_seed:
            key = (r["dataset"], r["method"], r["metric"], r["nfe"])
            groups.setdefault(key, []).append(r["value"])
        rows = []
        for (ds, method, metric, nfe), vals in groups.items():
            v = np.asarray(vals, dtype=np.float64)
            rows.append(
                {
                    "dataset": ds,
                    "method": method,
                    "metric": metric,
                    "mean": float(v.mean()),
                    "std": float(v.std(ddof=0)),
                    "n_seeds": int(v.size),
                    "nfe": "" if nfe is None else nfe,
                }
            )
        return rows

    def incomplete(self, row: dict) -> bool:
        return row["n_seeds"] < len(self.seeds)

    def write(self, out_dir: Path | str) -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "report.csv"
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            w.writeheader()
            w.writerows(self.summary())
        json_path = out_dir / "report.json"
        json_path.write_text(json.dumps(asdict(self), indent=2, default=float))
        md_path = out_dir / "report.md"
        md_path.write_text(self.markdown())
        return {"csv": csv_path, "json": json_path, "markdown": md_path}

    def markdown(self) -> str:
        lines = [f"# {self.dataset} ({self.task})", ""]
        lines += [f"> {n}" for n in self.notes]
        lines += ["", "| method | nfe | metric | mean | std | seeds |", "|---|---|---|---|---|---|"]
        for r in self.summary():
            flag = " (incomplete)" if self.incomplete(r) else ""
            lines.append(
                f"| {r['method']} | {r['nfe']} | {r['metric']} | {r['mean']:.4g} | {r['std']:.2g} "
                f"| {r['n_seeds']}{flag} |"
            )
        if self.failures:
            lines += ["", "## Failures", ""]
            lines += [f"- seed {s}: {msg.splitlines()[-1]}" for s, msg in self.failures.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_json(cls, path: Path | str) -> "Report":
        d = json.loads(Path(path).read_text())
        d["failures"] = {int(k): v for k, v in d.get("failures", {}).items()}
        return cls(**d)


def load_or_generate(spec: ExperimentSpec) -> DatasetSplits:
    path = resolve_dataset_path(spec.dataset)
    if (path / "meta.json").exists():
        return load_dataset(path)
    kind = Path(spec.dataset).name
    if kind in KINDS:
        logger.info("dataset %s not found; simulating %d sequences", spec.dataset, spec.n_sequences)
        splits = simulate_splits(SimulatorSpec(kind), spec.n_sequences, seed=spec.eval_seed)
        save_dataset(splits, path)
        return splits
    raise FileNotFoundError(f"dataset {spec.dataset} not found")


def _train_config(spec: ExperimentSpec, seed: int, splits: DatasetSplits) -> TrainConfig:
    d = dict(spec.train)
    d["task"] = spec.task
    d["seed"] = seed
    if spec.task == "forecast":
        d["delta_t"] = spec.delta_t or d.get("delta_t") or splits.meta.get("delta_t")
    return TrainConfig.from_dict(d)


def run_seed(spec: ExperimentSpec, seed: int, splits: DatasetSplits) -> list[dict]:
    """Train (or reuse) one seed's models and score every NFE plus the baseline."""
    name = splits.name or Path(spec.dataset).name
    seed_dir = Path(spec.out_dir) / f"seed_{seed}"
    ckpt_dir = seed_dir / "model"
    config = _train_config(spec, seed, splits)
    if (ckpt_dir / MANIFEST).exists():
        vf = load_checkpoint(ckpt_dir)
        count = load_checkpoint(ckpt_dir / "count") if spec.task == "forecast" else None
    else:
        out = train(splits, config, ckpt_dir)
        vf = out.vector_field.checkpoint
        count = out.count.checkpoint if out.count else None
    rows = []
    if not spec.metrics:
        return rows

    def row(method, metric, nfe, value, **extra):
        rows.append(dict(dataset=name, method=method, metric=metric, nfe=nfe, seed=seed, value=value, **extra))

    stats = TrainStatistics.from_dataset(splits.train)
    test = list(splits.test)
    if spec.task == "unconditional":
        for nfe in spec.nfes:
            rng = np.random.default_rng(np.random.SeedSequence([seed, nfe, 3]))
            gen = sample(vf, spec.n_samples, nfe, rng)
            if "mmd" in spec.metrics:
                row("eventflow", "mmd", nfe, mmd(gen, test, splits.support_end))
        base = poisson_baseline_sample(stats, spec.n_samples, seed)
        if "mmd" in spec.metrics:
            row("poisson", "mmd", None, mmd(base, test, splits.support_end))
            half = len(test) // 2
            if half:
                row("data", "mmd", None, mmd(test[:half], test[half:], splits.support_end))
        return rows

    dt = float(config.delta_t)
    for nfe in spec.nfes:
        rng = np.random.default_rng(np.random.SeedSequence([seed, nfe, 4]))
        res = forecast(vf, count, test, nfe, rng, spec.windows_per_sequence, spec.eval_seed)
        for metric, v in forecast_metrics(res.records, spec.metrics).items():
            row("eventflow", metric, nfe, v["value"], n_pairs=v["n_pairs"], excluded=v["excluded"])
    windows, _ = evaluation_windows(test, dt, spec.windows_per_sequence, spec.eval_seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    base_records = []
    for i, w in windows:
        g = naive_baseline_forecast(w.history, w.t0, dt, stats, rng)
        base_records.append(ForecastRecord(w.history, w.t0, dt, w.target.events + w.t0, g.events, i))
    for metric, v in forecast_metrics(base_records, spec.metrics).items():
        row("poisson", metric, None, v["value"], n_pairs=v["n_pairs"], excluded=v["excluded"])
    return rows


def _run_seed_safe(spec, seed, splits):
    try:
        return seed, run_seed(spec, seed, splits), None
    except Exception:
        return seed, [], traceback.format_exc()


def run_experiment(spec: ExperimentSpec) -> Report:
    """Train, sample and evaluate every seed, then write CSV/JSON/markdown reports."""
    splits = load_or_generate(spec)
    report = Report(splits.name or Path(spec.dataset).name, spec.task, list(spec.seeds))
    report.notes.append(WINDOW_NOTE if spec.task == "forecast" else DATA_ROW_NOTE)
    if spec.parallel and len(spec.seeds) > 1:
        with ProcessPoolExecutor() as pool:
            results = list(pool.map(_run_seed_safe, [spec] * len(spec.seeds), spec.seeds, [splits] * len(spec.seeds)))
    else:
        results = [_run_seed_safe(spec, s, splits) for s in spec.seeds]
    for seed, rows, err in results:
        if err:
            logger.error("seed %d failed:\n%s", seed, err)
            report.failures[seed] = err
        report.per_seed.extend(rows)
    report.write(spec.out_dir)
    return report


# ---------------------------------------------------------------------------
# plotting


def plot_report(report: Report, out_dir: Path | str, formats: Sequence[str] = ("png",)) -> list[Path]:
    """One bar chart (mean with std error bars, one panel per metric) per dataset."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = report.summary()
    if not rows:
        return []
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for dataset in sorted({r["dataset"] for r in rows}):
        ds_rows = [r for r in rows if r["dataset"] == dataset]
        metrics = sorted({r["metric"] for r in ds_rows})
        fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3.2), squeeze=False)
        for ax, metric in zip(axes[0], metrics):
            mr = [r for r in ds_rows if r["metric"] == metric]
            labels = [r["method"] + (f"\nK={r['nfe']}" if r["nfe"] != "" else "") for r in mr]
            ax.bar(range(len(mr)), [r["mean"] for r in mr], yerr=[r["std"] for r in mr], capsize=4)
            ax.set_xticks(range(len(mr)))
            ax.set_xticklabels(labels, fontsize=8)
            ax.set_title(metric)
        fig.suptitle(dataset)
        fig.tight_layout()
        for fmt in formats:
            p = out_dir / f"{dataset}.{fmt}"
            fig.savefig(p)
            paths.append(p)
        plt.close(fig)
    return paths
