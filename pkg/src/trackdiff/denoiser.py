"""Rotary-attention transformer that predicts clean tokens from a corrupted grid.

Each grid cell is embedded, the condition flag vector for that cell is
added, the 14 row embeddings of a column are concatenated and projected to
the model width, and transformer layers mix information across columns.
An output MLP maps back to one d-vector per row and a shared head gives
logits over the vocabulary.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
import torch
from torch import nn

from .codec import MAX_L, N_ROWS
from .diffusion import gumbel_sample  # noqa: F401  (re-exported)


@dataclass(frozen=True)
class DenoiserConfig:
    K: int
    d: int = 16
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_mult: int = 4
    T: int = 20
    max_L: int = MAX_L
    n_rows: int = N_ROWS
    rope: bool = True
    init: str = "fan_in"  # linear weights N(0, 1/fan_in); "normal" puts N(0, 0.02) on every weight

    def __post_init__(self):
        if self.init not in ("normal", "fan_in"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary embeddings")
        if self.K < 3 or self.T < 1:
            raise ValueError("invalid K or T")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "DenoiserConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config fields {sorted(unknown)}")
        return cls(**doc)


PRESETS = {
    "toy": dict(d=16, d_model=64, n_layers=2, n_heads=4, T=20),
    "full": dict(d=96, d_model=768, n_layers=12, n_heads=12, T=100),
}


def preset(name: str, K: int, **overrides) -> DenoiserConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}")
    return replace(DenoiserConfig(K=K, **PRESETS[name]), **overrides)


def rope_angles(positions: torch.Tensor, head_dim: int) -> tuple[torch.Tensor, torch.Tensor]:
    if head_dim % 2:
        raise ValueError("head dimension must be even")
    inv_freq = 10000.0 ** (-torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    theta = positions.to(torch.float64)[:, None] * inv_freq[None, :]
    return torch.cos(theta), torch.sin(theta)


def rotate(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate consecutive pairs (x[2i], x[2i+1]) of the last axis; positions on axis -2."""
    x1, x2 = x[..., 0::2], x[..., 1::2]
    cos, sin = cos.to(x.dtype), sin.to(x.dtype)
    out = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)
    return out.flatten(-2)


def apply_rope(q: torch.Tensor, k: torch.Tensor, positions: torch.Tensor):
    cos, sin = rope_angles(positions, q.shape[-1])
    return rotate(q, cos, sin), rotate(k, cos, sin)


@contextmanager
def single_thread():
    previous = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(previous)


class Block(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.rope = cfg.rope
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ff1 = nn.Linear(cfg.d_model, cfg.ffn_mult * cfg.d_model)
        self.ff2 = nn.Linear(cfg.ffn_mult * cfg.d_model, cfg.d_model)

    def attention(self, h: torch.Tensor, positions: torch.Tensor):
        B, L, D = h.shape
        q, k, v = self.qkv(h).split(D, dim=-1)
        q, k, v = (z.view(B, L, self.n_heads, -1).transpose(1, 2) for z in (q, k, v))
        if self.rope:
            q, k = apply_rope(q, k, positions)
        weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(B, L, D)
        return self.proj(out), weights

    def forward(self, h, positions):
        h = h + self.attention(self.ln1(h), positions)[0]
        return h + self.ff2(nn.functional.gelu(self.ff1(self.ln2(h))))


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        width = cfg.n_rows * cfg.d
        self.tok_emb = nn.Embedding(cfg.K, cfg.d)
        self.flag_emb = nn.Parameter(torch.empty(2, cfg.d))
        self.in_mlp = nn.Sequential(nn.Linear(width, cfg.d_model), nn.GELU(), nn.Linear(cfg.d_model, cfg.d_model))
        self.time_emb = nn.Embedding(cfg.T + 1, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.out_mlp = nn.Sequential(nn.Linear(cfg.d_model, cfg.d_model), nn.GELU(), nn.Linear(cfg.d_model, width))
        self.head = nn.Linear(cfg.d, cfg.K)
        self.double()
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            norms = {id(m.weight) for m in self.modules() if isinstance(m, nn.LayerNorm)}
            linears = {id(m.weight) for m in self.modules() if isinstance(m, nn.Linear)}
            for name, p in self.named_parameters():
                if id(p) in norms:
                    p.fill_(1.0)
                elif name.endswith("bias"):
                    p.zero_()
                else:
                    std = 0.02
                    if self.cfg.init == "fan_in" and id(p) in linears:
                        std = p.shape[1] ** -0.5
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)

    # ------------------------------------------------------------------

    def _inputs(self, x_t, flags, t):
        x = torch.as_tensor(np.asarray(x_t) if not isinstance(x_t, torch.Tensor) else x_t).long()
        f = torch.as_tensor(np.asarray(flags) if not isinstance(flags, torch.Tensor) else flags).long()
        if x.dim() == 2:
            x, f = x.unsqueeze(0), f.unsqueeze(0)
        f = f.expand_as(x)
        B = x.shape[0]
        t = torch.as_tensor(t).long().reshape(-1).expand(B)
        return x, f, t

    def embed(self, x_t, flags) -> torch.Tensor:
        """(B, L, 14 * d) column embeddings: token vector plus flag vector per cell."""
        x, f, _ = self._inputs(x_t, flags, 1)
        if x.shape[1] != self.cfg.n_rows:
            raise ValueError(f"expected {self.cfg.n_rows} rows, got {x.shape[1]}")
        if (x >= self.cfg.K).any() or (x < 0).any():
            raise ValueError(f"token id outside [0, {self.cfg.K})")
        e = self.tok_emb(x) + self.flag_emb[f]  # (B, rows, L, d)
        B, R, L, d = e.shape
        return e.permute(0, 2, 1, 3).reshape(B, L, R * d)

    def forward(self, x_t, t, flags, positions=None) -> torch.Tensor:
        """Logits of shape (B, 14, L, K); a 2-D x_t gives B = 1."""
        x, f, tt = self._inputs(x_t, flags, t)
        L = x.shape[2]
        if L > self.cfg.max_L:
            raise ValueError(f"L={L} exceeds max_L={self.cfg.max_L}")
        if ((tt < 1) | (tt > self.cfg.T)).any():
            raise ValueError(f"t outside [1, {self.cfg.T}]")
        if positions is None:
            positions = torch.arange(L)
        h = self.in_mlp(self.embed(x, f)) + self.time_emb(tt)[:, None, :]
        for block in self.blocks:
            h = block(h, positions)
        h = self.out_mlp(self.ln_f(h))  # (B, L, rows * d)
        B = h.shape[0]
        h = h.view(B, L, self.cfg.n_rows, self.cfg.d).permute(0, 2, 1, 3)
        return self.head(h)

    @torch.no_grad()
    def predict(self, x_t, t: int, flags) -> np.ndarray:
        """Numpy logits (14, L, K) for one grid; the callable generation expects.

        Runs single-threaded: BLAS reductions split across threads change the
        last bits of the logits, and sampling must not depend on that.
        """
        with single_thread():
            return self.forward(x_t, t, flags)[0].numpy()

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())
