"""Flow-matching training of the vector field and cross-entropy training of the count model."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import Tensor, nn

from .checkpoint import Checkpoint, save_checkpoint
from .flow import CountDistribution, interpolate, perturb, sample_balanced_pair, target_velocity
from .nets import CountModel, NetConfig, VectorFieldModel, history_tokens, pad_batch
from .sequences import DatasetSplits, EventSequence, Normalizer, history, restrict

logger = logging.getLogger(__name__)

TASKS = ("unconditional", "forecast")
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class EmptyBatchError(ValueError):
    """Every sequence in the batch had zero events in the target window."""


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint_dir: Path | None):
        self.step = step
        self.checkpoint_dir = checkpoint_dir
        where = f"; last good checkpoint in {checkpoint_dir}" if checkpoint_dir else ""
        super().__init__(f"loss became non-finite at step {step}{where}")


@dataclass
class TrainConfig:
    task: str = "unconditional"
    lr: float = 1e-3
    batch_size: int = 64
    steps: int = 30_000
    cycle: int = 10_000
    beta1: float = 0.9
    beta2: float = 0.999
    sigma: float = 0.01
    seed: int = 0
    delta_t: float | None = None
    alpha: float = 0.0
    net: NetConfig = field(default_factory=NetConfig)
    n_evals: int = 10
    grad_clip: float | None = 1.0
    val_max_sequences: int = 256
    train_count_model: bool = True
    dtype: str = "float32"
    # group similar-length sequences per batch (unconditional task) to cut padding
    length_bucketing: bool = True

    def __post_init__(self) -> None:
        if isinstance(self.net, dict):
            self.net = NetConfig(**self.net)
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.steps < 1 or self.cycle < 1:
            raise ValueError("batch_size, steps and cycle must be >= 1")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.task == "forecast" and not (self.delta_t and self.delta_t > 0):
            raise ValueError("forecast task needs a positive delta_t")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {tuple(_DTYPES)}")

    @property
    def dropout(self) -> float:
        return self.net.dropout

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        net = dict(d.pop("net", {}) or {})
        if "dropout" in d:
            net["dropout"] = d.pop("dropout")
        size = net.pop("size", None)
        net_cfg = NetConfig.small(**net) if size == "small" else NetConfig(**net)
        return cls(net=net_cfg, **d)

    @classmethod
    def from_json(cls, path: Path | str) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# forecast windows


@dataclass(frozen=True)
class ForecastWindow:
    history: np.ndarray  # data scale, events <= t0
    t0: float
    target: EventSequence  # events in (t0, t0 + dt], shifted to [0, dt]


def make_window(seq: EventSequence, t0: float, delta_t: float) -> ForecastWindow:
    return ForecastWindow(history(seq, t0), float(t0), restrict(seq, t0, t0 + delta_t))


def sample_t0(rng: np.random.Generator, support_end: float, delta_t: float) -> float:
    if support_end < 2 * delta_t:
        raise ValueError(f"support {support_end} shorter than twice the horizon {delta_t}")
    return float(rng.uniform(delta_t, support_end - delta_t))


def forecast_batch_prep(seq: EventSequence, rng: np.random.Generator, delta_t: float) -> ForecastWindow:
    """Draw ``T0 ~ U[dt, T - dt]`` and split ``seq`` into history and target window."""
    return make_window(seq, sample_t0(rng, seq.support_end, delta_t), delta_t)


def window_normalizer(delta_t: float) -> Normalizer:
    return Normalizer(0.0, float(delta_t))


def history_model_scale(window: ForecastWindow, normalizer: Normalizer) -> np.ndarray:
    """Model-scale history tokens with the window start appended last."""
    return history_tokens([normalizer.normalize(window.history)], [normalizer.normalize(window.t0)])[0]


# ---------------------------------------------------------------------------
# losses


@dataclass
class FlowBatch:
    x: Tensor  # perturbed interpolant, (B, L)
    s: Tensor  # (B,)
    target: Tensor  # gamma1 - gamma0, (B, L)
    mask: Tensor  # (B, L), True on real events
    keep: list[int]  # indices of the input sequences that made it into the batch


def build_flow_batch(gamma1s, rng: np.random.Generator, sigma: float, dtype=torch.float32) -> FlowBatch:
    """Couple, interpolate at ``s ~ U[0, 1]`` per sequence and perturb.

    Sequences with no events are skipped.
    """
    keep = [i for i, g in enumerate(gamma1s) if len(g)]
    if not keep:
        raise EmptyBatchError("batch contains no events")
    xs, targets, ss = [], [], []
    for i in keep:
        pair = sample_balanced_pair(gamma1s[i], rng)
        s = float(rng.uniform())
        xs.append(perturb(interpolate(pair, s), sigma, rng).positions)
        targets.append(target_velocity(pair))
        ss.append(s)
    x, mask = pad_batch(xs, dtype)
    target, _ = pad_batch(targets, dtype)
    return FlowBatch(x, torch.tensor(ss, dtype=dtype), target, mask, keep)


def regression_loss(pred: Tensor, target: Tensor, mask: Tensor) -> Tensor:
    """Squared error averaged over events within a sequence, then over sequences."""
    m = mask.to(pred.dtype)
    per_seq = (((pred - target) ** 2) * m).sum(1) / m.sum(1).clamp_min(1.0)
    return per_seq.mean()


def encode_histories(model: VectorFieldModel, tokens: list[np.ndarray]) -> Tensor:
    dtype = next(model.parameters()).dtype
    h, mask = pad_batch(tokens, dtype)
    return model.encoder(h, mask)


def flow_loss(
    model: VectorFieldModel,
    gamma1s,
    rng: np.random.Generator,
    sigma: float,
    histories: list[np.ndarray] | None = None,
) -> Tensor:
    """Flow-matching regression loss on a batch of model-scale target sequences.

    ``histories`` (forecast task) are model-scale history tokens with the
    window start appended, aligned with ``gamma1s``.
    """
    dtype = next(model.parameters()).dtype
    batch = build_flow_batch(gamma1s, rng, sigma, dtype)
    memory = None
    if histories is not None:
        memory = encode_histories(model, [histories[i] for i in batch.keep])
    pred = model(batch.x, batch.s, batch.mask, memory)
    return regression_loss(pred, batch.target, batch.mask)


def count_loss_from_logits(logits: Tensor, n: Tensor, alpha: float) -> Tensor:
    """Cross-entropy plus ``alpha / n_max * sum_k p(k) (n - k)^2``, averaged over the batch."""
    n_max = logits.shape[-1] - 1
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, n.long().unsqueeze(-1)).squeeze(-1)
    k = torch.arange(n_max + 1, dtype=logits.dtype, device=logits.device)
    sq = (n.to(logits.dtype).unsqueeze(-1) - k) ** 2
    reg = (logp.exp() * sq).sum(-1) * (alpha / max(n_max, 1))
    return (nll + reg).mean()


def clamp_counts(ns, n_max: int) -> np.ndarray:
    ns = np.asarray(ns, dtype=np.int64)
    if np.any(ns > n_max):
        logger.warning("clamping %d counts above n_max=%d", int(np.sum(ns > n_max)), n_max)
    return np.minimum(ns, n_max)


def count_loss(model: CountModel, histories: list[np.ndarray], ns, alpha: float) -> Tensor:
    """Regularised cross-entropy for model-scale history tokens (window start appended)."""
    dtype = next(model.parameters()).dtype
    h, mask = pad_batch(histories, dtype)
    n = torch.as_tensor(clamp_counts(ns, model.n_max))
    return count_loss_from_logits(model(h, mask), n, alpha)


# ---------------------------------------------------------------------------
# optimisation loop


def make_optimizer(model: nn.Module, config: TrainConfig):
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(config.beta1, config.beta2))
    sched = torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(opt, T_0=config.cycle)
    return opt, sched


def eval_steps(steps: int, n_evals: int) -> list[int]:
    """1-based step numbers at which validation runs, evenly spaced and ending at ``steps``."""
    return sorted({max(1, round(steps * (i + 1) / n_evals)) for i in range(n_evals)})


@dataclass
class TrainResult:
    model: nn.Module
    losses: list[float]
    val_steps: list[int] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_step: int = 0
    best_val: float = math.inf
    checkpoint: Checkpoint | None = None

    @property
    def n_evals(self) -> int:
        return len(self.val_losses)


def optimize(
    model: nn.Module,
    step_loss: Callable[[np.random.Generator], Tensor],
    config: TrainConfig,
    val_loss: Callable[[], float] | None = None,
    on_best: Callable[[nn.Module, int], None] | None = None,
    log_path: Path | None = None,
) -> TrainResult:
    """Adam + cyclic cosine schedule; keeps the weights with the best validation loss."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    opt, sched = make_optimizer(model, config)
    checkpoints = set(eval_steps(config.steps, config.n_evals)) if val_loss else set()
    result = TrainResult(model, [])
    best_state = None
    writer = fh = None
    if log_path is not None:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "train_loss", "val_loss"])
    try:
        for step in range(1, config.steps + 1):
            model.train()
            loss = step_loss(rng)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDiverged(step, getattr(on_best, "directory", None))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if config.grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            sched.step()
            result.losses.append(value)
            val = ""
            if step in checkpoints:
                model.eval()
                with torch.no_grad():
                    v = float(val_loss())
                result.val_steps.append(step)
                result.val_losses.append(v)
                val = v
                if v < result.best_val:
                    result.best_val, result.best_step = v, step
                    best_state = copy.deepcopy(model.state_dict())
                    if on_best is not None:
                        on_best(model, step)
            if writer is not None:
                writer.writerow([step, value, val])
    finally:
        if fh is not None:
            fh.close()
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        result.best_step = config.steps
    model.eval()
    return result


class _BestSaver:
    def __init__(self, directory: Path | None, manifest: dict):
        self.directory = directory
        self.manifest = manifest

    def __call__(self, model: nn.Module, step: int) -> None:
        self.manifest["step"] = step
        if self.directory is not None:
            save_checkpoint(model, self.manifest, self.directory)


def _seed_torch(seed: int) -> None:
    torch.manual_seed(seed)


def base_manifest(kind: str, splits: DatasetSplits, config: TrainConfig, normalizer: Normalizer) -> dict:
    return {
        "kind": kind,
        "task": config.task,
        "net": config.net.to_dict(),
        "dtype": config.dtype,
        "normalizer": normalizer.to_dict(),
        "n_max": splits.train.max_count(),
        "sigma": config.sigma,
        "seed": config.seed,
        "step": 0,
        "delta_t": config.delta_t,
        "support_end": splits.support_end,
        "dataset": splits.name,
        "train_config": {k: v for k, v in config.to_dict().items() if k != "net"},
    }


def fixed_windows(seqs, delta_t: float, seed: int, per_sequence: int = 1) -> list[ForecastWindow]:
    rng = np.random.default_rng(seed)
    return [forecast_batch_prep(s, rng, delta_t) for s in seqs for _ in range(per_sequence)]


def train_vector_field(
    splits: DatasetSplits,
    config: TrainConfig,
    out_dir: Path | str | None = None,
) -> TrainResult:
    """Train v_theta (and the history encoder for forecasting) on ``splits.train``."""
    out_dir = Path(out_dir) if out_dir is not None else None
    normalizer = Normalizer.fit(splits.train)
    _seed_torch(config.seed)
    model = VectorFieldModel(config.net, conditional=config.task == "forecast").to(config.torch_dtype)
    manifest = base_manifest("vector_field", splits, config, normalizer)
    if config.task == "unconditional":
        manifest["count_probs"] = CountDistribution.from_counts(splits.train.counts()).to_list()

    train = list(splits.train)
    val = list(splits.val)[: config.val_max_sequences]
    if config.task == "unconditional":
        train_z = [normalizer.normalize(s) for s in train]
        val_z = sorted((z for z in (normalizer.normalize(s) for s in val) if z.size), key=len)

        draw = _batch_sampler(
            [z.size for z in train_z], config.batch_size, config.length_bucketing
        )

        def step_loss(rng):
            return flow_loss(model, [train_z[i] for i in draw(rng)], rng, config.sigma)

        def val_loss():
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
            return _chunked_mean(
                lambda chunk: flow_loss(model, chunk, rng, config.sigma), val_z, config.batch_size
            )

    else:
        wnorm = window_normalizer(config.delta_t)

        def to_model(windows):
            gamma1s = [wnorm.normalize(w.target) for w in windows]
            hist = [history_model_scale(w, normalizer) for w in windows]
            return gamma1s, hist

        def step_loss(rng):
            idx = rng.integers(0, len(train), config.batch_size)
            windows = [forecast_batch_prep(train[i], rng, config.delta_t) for i in idx]
            gamma1s, hist = to_model(windows)
            try:
                return flow_loss(model, gamma1s, rng, config.sigma, hist)
            except EmptyBatchError:
                return torch.zeros((), dtype=config.torch_dtype, requires_grad=True)

        val_windows = [w for w in fixed_windows(val, config.delta_t, config.seed + 7919) if len(w.target)]

        def val_loss():
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))

            def chunk_loss(chunk):
                gamma1s, hist = to_model(chunk)
                return flow_loss(model, gamma1s, rng, config.sigma, hist)

            return _chunked_mean(chunk_loss, val_windows, config.batch_size)

    has_val = len(val_z if config.task == "unconditional" else val_windows) > 0
    saver = _BestSaver(out_dir, manifest)
    result = optimize(
        model,
        step_loss,
        config,
        val_loss if has_val else None,
        saver if has_val else None,
        out_dir / "metrics.csv" if out_dir else None,
    )
    manifest["step"] = result.best_step
    manifest["train_steps"] = config.steps
    manifest["best_val"] = result.best_val if has_val else None
    if out_dir is not None:
        save_checkpoint(model, manifest, out_dir)
    result.checkpoint = Checkpoint(model, manifest, out_dir)
    return result


def train_count_model(
    splits: DatasetSplits,
    config: TrainConfig,
    out_dir: Path | str | None = None,
) -> TrainResult:
    """Train p_phi(n | H) on randomly placed forecast windows of ``splits.train``."""
    if config.delta_t is None:
        raise ValueError("count model training needs delta_t")
    out_dir = Path(out_dir) if out_dir is not None else None
    normalizer = Normalizer.fit(splits.train)
    _seed_torch(config.seed)
    n_max = splits.train.max_count()
    model = CountModel(config.net, n_max).to(config.torch_dtype)
    manifest = base_manifest("count", splits, config, normalizer)
    manifest["alpha"] = config.alpha
    train = list(splits.train)
    val = list(splits.val)[: config.val_max_sequences]

    def step_loss(rng):
        idx = rng.integers(0, len(train), config.batch_size)
        windows = [forecast_batch_prep(train[i], rng, config.delta_t) for i in idx]
        hist = [history_model_scale(w, normalizer) for w in windows]
        return count_loss(model, hist, [len(w.target) for w in windows], config.alpha)

    val_windows = fixed_windows(val, config.delta_t, config.seed + 7919)

    def val_loss():
        return _chunked_mean(
            lambda chunk: count_loss(
                model,
                [history_model_scale(w, normalizer) for w in chunk],
                [len(w.target) for w in chunk],
                config.alpha,
            ),
            val_windows,
            config.batch_size,
        )

    has_val = len(val_windows) > 0
    saver = _BestSaver(out_dir, manifest)
    result = optimize(
        model,
        step_loss,
        config,
        val_loss if has_val else None,
        saver if has_val else None,
        out_dir / "metrics.csv" if out_dir else None,
    )
    manifest["step"] = result.best_step
    manifest["train_steps"] = config.steps
    if out_dir is not None:
        save_checkpoint(model, manifest, out_dir)
    result.checkpoint = Checkpoint(model, manifest, out_dir)
    return result


def _batch_sampler(lengths, batch_size: int, bucketing: bool):
    """Return ``draw(rng) -> indices``.

    Without bucketing, indices are i.i.d. uniform. With bucketing, each pass
    over the data sorts sequences by jittered length, cuts the order into
    batches and serves them in random order, so every sequence is seen once
    per pass while padding stays small.
    """
    lengths = np.asarray(lengths, dtype=np.float64)
    n = lengths.size
    if not bucketing or n <= batch_size:
        return lambda rng: rng.integers(0, n, batch_size)
    spread = max(1.0, 0.1 * float(lengths.std()))
    queue: list[np.ndarray] = []

    def draw(rng):
        if not queue:
            order = np.argsort(lengths + rng.uniform(0.0, spread, n), kind="stable")
            batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
            queue.extend(batches[j] for j in rng.permutation(len(batches)))
        return queue.pop()

    return draw


def _chunked_mean(fn, items, chunk: int) -> float:
    total, weight = 0.0, 0
    for i in range(0, len(items), chunk):
        part = items[i : i + chunk]
        total += float(fn(part)) * len(part)
        weight += len(part)
    return total / max(weight, 1)


@dataclass
class TrainOutput:
    vector_field: TrainResult
    count: TrainResult | None = None


def train(splits: DatasetSplits, config: TrainConfig, out_dir: Path | str | None = None) -> TrainOutput:
    """Full training run; for forecasting also trains the count model under ``out_dir/count``."""
    out_dir = Path(out_dir) if out_dir is not None else None
    if config.task == "forecast":
        for ds in (splits.train, splits.val):
            if ds.support_end < 2 * config.delta_t:
                raise ValueError("dataset support shorter than twice the forecast horizon")
    vf = train_vector_field(splits, config, out_dir)
    count = None
    if config.task == "forecast" and config.train_count_model:
        count = train_count_model(splits, config, out_dir / "count" if out_dir else None)
    if out_dir is not None:
        (out_dir / "train_config.json").write_text(json.dumps(config.to_dict(), indent=2))
    return TrainOutput(vf, count)
