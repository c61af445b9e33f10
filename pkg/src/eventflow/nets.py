"""Transformer networks: the vector field, the history encoder and the count model.

All modules take padded batches. Masks are boolean with ``True`` marking a
real (non-padding) entry; this is the opposite of torch's
``key_padding_mask`` convention, so the modules invert internally.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .flow import CountDistribution


@dataclass
class NetConfig:
    d_model: int = 512
    n_heads: int = 8
    n_layers: int = 6
    d_ff: int = 2048
    dropout: float = 0.1
    # learned query tokens that summarise a history into a fixed-size e_H
    history_tokens: int = 4

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.n_layers < 1:
            raise ValueError("need at least one layer")

    @classmethod
    def small(cls, **overrides) -> "NetConfig":
        base = dict(d_model=64, n_heads=4, n_layers=2, d_ff=128, dropout=0.0)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


# s lives in [0, 1]; stretch it so the sinusoid frequencies resolve it
FLOW_TIME_SCALE = 100.0


def sinusoidal(x: Tensor, dim: int, base: float = 1e4) -> Tensor:
    """Standard transformer sinusoidal features of ``x`` (any shape) -> ``(*x.shape, dim)``."""
    half = dim // 2
    freqs = torch.exp(-math.log(base) * torch.arange(half, dtype=x.dtype, device=x.device) / half)
    ang = x.unsqueeze(-1) * freqs
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    if dim % 2:
        emb = nn.functional.pad(emb, (0, 1))
    return emb


class EventEmbedding(nn.Module):
    """linear(time) + linear(sin(index)) [+ linear(sin(flow time))], summed per event."""

    def __init__(self, d_model: int, with_flow_time: bool = True):
        super().__init__()
        self.d_model = d_model
        self.time = nn.Linear(1, d_model)
        self.index = nn.Linear(d_model, d_model)
        self.flow_time = nn.Linear(d_model, d_model) if with_flow_time else None

    def forward(self, x: Tensor, s: Tensor | None = None) -> Tensor:
        B, L = x.shape
        idx = torch.arange(L, dtype=x.dtype, device=x.device).expand(B, L)
        h = self.time(x.unsqueeze(-1)) + self.index(sinusoidal(idx, self.d_model))
        if self.flow_time is not None:
            if s is None:
                raise ValueError("flow time required")
            h = h + self.flow_time(sinusoidal(FLOW_TIME_SCALE * s, self.d_model)).unsqueeze(1)
        return h


def _encoder_layer(cfg: NetConfig) -> nn.TransformerEncoderLayer:
    return nn.TransformerEncoderLayer(
        cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.dropout, batch_first=True, norm_first=True
    )


def _pad_mask(mask: Tensor | None) -> Tensor | None:
    return None if mask is None else ~mask


class HistoryEncoder(nn.Module):
    """Encode ``history + [T0]`` into ``history_tokens`` vectors of width ``d_model``.

    ``None`` histories (unconditional use, or no events and no window start)
    map to a learned null embedding.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = EventEmbedding(cfg.d_model, with_flow_time=False)
        self.layers = nn.ModuleList(_encoder_layer(cfg) for _ in range(max(1, cfg.n_layers // 2)))
        self.norm = nn.LayerNorm(cfg.d_model)
        self.queries = nn.Parameter(0.02 * torch.randn(cfg.history_tokens, cfg.d_model))
        self.pool = nn.MultiheadAttention(cfg.d_model, cfg.n_heads, batch_first=True)
        self.null = nn.Parameter(0.02 * torch.randn(cfg.history_tokens, cfg.d_model))

    def forward(self, h: Tensor, mask: Tensor) -> Tensor:
        """``h``: (B, L) model-scale history with T0 appended; ``mask``: (B, L), all rows nonempty."""
        z = self.embed(h)
        pad = _pad_mask(mask)
        for layer in self.layers:
            z = layer(z, src_key_padding_mask=pad)
        z = self.norm(z)
        q = self.queries.unsqueeze(0).expand(h.shape[0], -1, -1)
        out, _ = self.pool(q, z, z, key_padding_mask=pad, need_weights=False)
        return out

    def null_embedding(self, batch: int) -> Tensor:
        return self.null.unsqueeze(0).expand(batch, -1, -1)


class VectorFieldModel(nn.Module):
    """v_theta(positions, s, e_H) -> one velocity per position.

    The conditional variant swaps the middle self-attention layer for a
    decoder layer that also cross-attends to the history embedding.
    """

    def __init__(self, cfg: NetConfig, conditional: bool = False):
        super().__init__()
        self.cfg = cfg
        self.conditional = conditional
        self.embed = EventEmbedding(cfg.d_model)
        self.cross_at = cfg.n_layers // 2 if conditional else -1
        layers = []
        for i in range(cfg.n_layers):
            if i == self.cross_at:
                layers.append(
                    nn.TransformerDecoderLayer(
                        cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.dropout,
                        batch_first=True, norm_first=True,
                    )
                )
            else:
                layers.append(_encoder_layer(cfg))
        self.layers = nn.ModuleList(layers)
        self.norm = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, 1)
        self.encoder = HistoryEncoder(cfg) if conditional else None

    def forward(
        self,
        x: Tensor,
        s: Tensor,
        mask: Tensor | None = None,
        memory: Tensor | None = None,
    ) -> Tensor:
        """``x``: (B, L) positions, ``s``: (B,) flow times, ``memory``: (B, M, d) history embedding."""
        if x.shape[-1] == 0:
            raise ValueError("vector field needs at least one event")
        z = self.embed(x, s)
        pad = _pad_mask(mask)
        for i, layer in enumerate(self.layers):
            if i == self.cross_at:
                if memory is None:
                    memory = self.encoder.null_embedding(x.shape[0])
                z = layer(z, memory, tgt_key_padding_mask=pad)
            else:
                z = layer(z, src_key_padding_mask=pad)
        out = self.head(self.norm(z)).squeeze(-1)
        if mask is not None:
            out = out.masked_fill(~mask, 0.0)
        return out


class CountModel(nn.Module):
    """p_phi(n | H): transformer over ``history + [T0]``, mean-pooled, residual MLP to logits."""

    def __init__(self, cfg: NetConfig, n_max: int):
        super().__init__()
        if n_max < 0:
            raise ValueError("n_max must be nonnegative")
        self.cfg = cfg
        self.n_max = int(n_max)
        self.embed = EventEmbedding(cfg.d_model, with_flow_time=False)
        self.layers = nn.ModuleList(_encoder_layer(cfg) for _ in range(cfg.n_layers))
        self.norm = nn.LayerNorm(cfg.d_model)
        self.mlp = nn.ModuleList(
            nn.Sequential(nn.Linear(cfg.d_model, cfg.d_model), nn.GELU()) for _ in range(3)
        )
        self.out = nn.Linear(cfg.d_model, self.n_max + 1)
        # near-zero logits at init -> near-uniform count distribution
        nn.init.normal_(self.out.weight, std=1e-3)
        nn.init.zeros_(self.out.bias)

    def forward(self, h: Tensor, mask: Tensor) -> Tensor:
        """Return logits of shape (B, n_max + 1)."""
        z = self.embed(h)
        pad = _pad_mask(mask)
        for layer in self.layers:
            z = layer(z, src_key_padding_mask=pad)
        z = self.norm(z)
        m = mask.unsqueeze(-1).to(z.dtype)
        pooled = (z * m).sum(1) / m.sum(1).clamp_min(1.0)
        for block in self.mlp:
            pooled = pooled + block(pooled)
        return self.out(pooled)


# ---------------------------------------------------------------------------
# batching helpers


def pad_batch(seqs, dtype=torch.float32, device=None) -> tuple[Tensor, Tensor]:
    """Right-pad variable-length 1-D arrays into ``(values, mask)``."""
    B = len(seqs)
    L = max((len(s) for s in seqs), default=0)
    values = torch.zeros(B, L, dtype=dtype, device=device)
    mask = torch.zeros(B, L, dtype=torch.bool, device=device)
    for i, s in enumerate(seqs):
        n = len(s)
        if n:
            values[i, :n] = torch.as_tensor(np.asarray(s), dtype=dtype)
            mask[i, :n] = True
    return values, mask


def history_tokens(histories, t0s) -> list[np.ndarray]:
    """Append the (model-scale) window start as the final token of each history."""
    return [np.append(np.asarray(h, dtype=np.float64), t0) for h, t0 in zip(histories, t0s)]


# ---------------------------------------------------------------------------
# functional API


def _param_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


@torch.no_grad()
def encode_history(encoder: HistoryEncoder, history, t0: float | None) -> Tensor:
    """Fixed-size embedding (history_tokens, d_model) of one history.

    ``history`` and ``t0`` are on model scale. With no events and no ``t0``
    the learned null embedding is returned.
    """
    history = np.asarray(history if history is not None else [], dtype=np.float64)
    if history.size == 0 and t0 is None:
        return encoder.null_embedding(1)[0].clone()
    tokens = history if t0 is None else np.append(history, t0)
    h, mask = pad_batch([tokens], dtype=_param_dtype(encoder))
    return encoder(h, mask)[0]


@torch.no_grad()
def vf_forward(model: VectorFieldModel, positions, s: float, e_h: Tensor | None = None) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64).reshape(-1)
    if positions.size == 0:
        raise ValueError("vector field needs at least one event")
    dtype = _param_dtype(model)
    x = torch.as_tensor(positions, dtype=dtype).unsqueeze(0)
    st = torch.tensor([float(s)], dtype=dtype)
    mem = None if e_h is None else e_h.to(dtype).unsqueeze(0)
    return model(x, st, None, mem)[0].double().numpy()


@torch.no_grad()
def count_forward(model: CountModel, history, t0: float) -> CountDistribution:
    """Distribution over ``0..n_max`` given a model-scale history and window start."""
    tokens = np.append(np.asarray(history, dtype=np.float64), t0)
    h, mask = pad_batch([tokens], dtype=_param_dtype(model))
    return CountDistribution(torch.softmax(model(h, mask)[0].double(), dim=-1).numpy())
