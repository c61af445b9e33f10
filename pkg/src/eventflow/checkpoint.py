"""Checkpoint directories: ``weights.pt`` plus a self-describing ``manifest.json``."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .flow import CountDistribution
from .nets import CountModel, NetConfig, VectorFieldModel
from .sequences import Normalizer

WEIGHTS = "weights.pt"
MANIFEST = "manifest.json"

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class Checkpoint:
    model: nn.Module
    manifest: dict
    path: Path | None = None

    @property
    def kind(self) -> str:
        return self.manifest["kind"]

    @property
    def task(self) -> str:
        return self.manifest.get("task", "unconditional")

    @property
    def normalizer(self) -> Normalizer:
        return Normalizer(**self.manifest["normalizer"])

    @property
    def delta_t(self) -> float | None:
        return self.manifest.get("delta_t")

    @property
    def support_end(self) -> float:
        return float(self.manifest["support_end"])

    @property
    def count_distribution(self) -> CountDistribution:
        return CountDistribution(self.manifest["count_probs"])

    def save(self, directory: Path | str) -> Path:
        return save_checkpoint(self.model, self.manifest, directory)


def build_model(manifest: dict) -> nn.Module:
    cfg = NetConfig(**manifest["net"])
    if manifest["kind"] == "vector_field":
        model = VectorFieldModel(cfg, conditional=manifest.get("task") == "forecast")
    elif manifest["kind"] == "count":
        model = CountModel(cfg, manifest["n_max"])
    else:
        raise ValueError(f"unknown checkpoint kind {manifest['kind']!r}")
    return model.to(_DTYPES[manifest.get("dtype", "float32")])


def save_checkpoint(model: nn.Module, manifest: dict, directory: Path | str) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), directory / WEIGHTS)
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return directory


def load_checkpoint(directory: Path | str, device: str = "cpu") -> Checkpoint:
    directory = Path(directory)
    manifest_path = directory / MANIFEST
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest in {directory}")
    manifest = json.loads(manifest_path.read_text())
    model = build_model(manifest)
    state = torch.load(directory / WEIGHTS, map_location=device, weights_only=True)
    model.load_state_dict(state)
    model.to(device).eval()
    return Checkpoint(model, manifest, directory)
