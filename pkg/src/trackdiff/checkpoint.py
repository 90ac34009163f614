"""Binary checkpoint format.

Layout: magic ``GETDIFF1``; uint64 LE length of a UTF-8 JSON header; the
header; every tensor as little-endian float64 in the header's declared
order; uint64 LE FNV-1a hash of all preceding bytes.
"""

from __future__ import annotations

import json
import struct

import numba
import numpy as np
import torch

from .denoiser import Denoiser, DenoiserConfig

MAGIC = b"GETDIFF1"
FORMAT_VERSION = 1

_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)


@numba.njit(cache=True)
def _fnv1a(data, h, prime):
    for b in data:
        h = (h ^ np.uint64(b)) * prime
    return h


def fnv1a64(data: bytes) -> int:
    return int(_fnv1a(np.frombuffer(data, dtype=np.uint8), _FNV_OFFSET, _FNV_PRIME))


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Denoiser, optimizer: torch.optim.Optimizer | None = None,
                    extra: dict | None = None) -> bytes:
    """Serialize parameters, optional AdamW moments, and a JSON-able `extra` dict."""
    tensors: list[tuple[str, torch.Tensor]] = list(model.named_parameters())
    opt_meta = None
    if optimizer is not None:
        params = dict(model.named_parameters())
        steps = {}
        for name, p in params.items():
            state = optimizer.state.get(p)
            if not state:
                continue
            tensors.append((f"adam.exp_avg.{name}", state["exp_avg"]))
            tensors.append((f"adam.exp_avg_sq.{name}", state["exp_avg_sq"]))
            steps[name] = float(state["step"])
        opt_meta = {"steps": steps, "lr": [g["lr"] for g in optimizer.param_groups]}
    header = {
        "version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "tensors": [[name, list(t.shape)] for name, t in tensors],
        "optimizer": opt_meta,
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(t.detach().to(torch.float64).contiguous().numpy().astype("<f8").tobytes() for _, t in tensors)
    payload = MAGIC + struct.pack("<Q", len(head)) + head + body
    return payload + struct.pack("<Q", fnv1a64(payload))


def read_checkpoint(data: bytes, expected_K: int | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse and verify; returns (header, tensors by name)."""
    if len(data) < len(MAGIC):
        raise CheckpointError("unexpected end of checkpoint")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise CheckpointError("unexpected end of checkpoint")
    (head_len,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    if len(data) < pos + head_len:
        raise CheckpointError("unexpected end of checkpoint")
    try:
        header = json.loads(data[pos : pos + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    pos += head_len
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    sizes = [int(np.prod(shape, dtype=np.int64)) for _, shape in header["tensors"]]
    end = pos + 8 * sum(sizes)
    if len(data) < end + 8:
        raise CheckpointError("unexpected end of checkpoint")
    if len(data) > end + 8:
        raise CheckpointError("trailing bytes after checkpoint")
    (stored,) = struct.unpack_from("<Q", data, end)
    if stored != fnv1a64(data[:end]):
        raise CheckpointError("checksum mismatch")
    if expected_K is not None and header["config"]["K"] != expected_K:
        raise CheckpointError(f"vocab mismatch: checkpoint K={header['config']['K']}, vocabulary K={expected_K}")
    tensors = {}
    for (name, shape), size in zip(header["tensors"], sizes):
        tensors[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    return header, tensors


def load_checkpoint(data: bytes, expected_K: int | None = None,
                    optimizer_factory=None) -> tuple[Denoiser, dict, torch.optim.Optimizer | None]:
    """Rebuild the model (and optimizer when a factory is given) from bytes."""
    header, tensors = read_checkpoint(data, expected_K)
    cfg = DenoiserConfig.from_dict(header["config"])
    model = Denoiser(cfg)
    params = dict(model.named_parameters())
    with torch.no_grad():
        for name, p in params.items():
            if name not in tensors:
                raise CheckpointError(f"missing tensor {name}")
            if tuple(tensors[name].shape) != tuple(p.shape):
                raise CheckpointError(f"shape mismatch for {name}: {tensors[name].shape} vs {tuple(p.shape)}")
            p.copy_(torch.from_numpy(tensors[name]))
    optimizer = None
    if optimizer_factory is not None:
        optimizer = optimizer_factory(model)
        meta = header.get("optimizer")
        if meta:
            for name, step in meta["steps"].items():
                p = params[name]
                optimizer.state[p] = {
                    "step": torch.tensor(step, dtype=torch.get_default_dtype()),
                    "exp_avg": torch.from_numpy(tensors[f"adam.exp_avg.{name}"]),
                    "exp_avg_sq": torch.from_numpy(tensors[f"adam.exp_avg_sq.{name}"]),
                }
            for group, lr in zip(optimizer.param_groups, meta["lr"]):
                group["lr"] = lr
    return model, header.get("extra", {}), optimizer
