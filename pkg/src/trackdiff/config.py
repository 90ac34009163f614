"""Run configuration and corpus manifest."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .denoiser import PRESETS

SPLITS = (("train", 0.8), ("valid", 0.9), ("test", 1.0))


@dataclass
class RunConfig:
    seed: int
    manifest: str = "corpus/manifest.json"
    vocab: str = "vocab.json"
    preset: str = "toy"
    model: dict = field(default_factory=dict)  # per-field preset overrides
    lam: float = 0.001
    lr: float = 1e-4
    warmup: int = 1000
    weight_decay: float = 0.01
    batch_size: int = 3
    epochs: int = 50
    steps: int | None = None  # overrides epochs when set
    valid_every: int = 1000
    checkpoint_dir: str = "checkpoints"

    def __post_init__(self):
        if not isinstance(self.seed, int):
            raise ValueError("seed must be an integer")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @classmethod
    def load(cls, path: str | Path, **overrides) -> "RunConfig":
        doc = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
        doc.update({k: v for k, v in overrides.items() if v is not None})
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        if "seed" not in doc:
            raise ValueError("seed is required")
        return cls(**doc)

    def total_steps(self, n_train: int) -> int:
        if self.steps is not None:
            return self.steps
        return self.epochs * max(1, -(-n_train // self.batch_size))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"


def assign_split(path: str, fragment: int, seed: int) -> str:
    """Deterministic 80/10/10 split from a hash of (seed, path, fragment)."""
    digest = hashlib.sha256(f"{seed}:{path}:{fragment}".encode()).digest()
    u = int.from_bytes(digest[:8], "big") / 2**64
    for name, upper in SPLITS:
        if u < upper:
            return name
    return "test"


@dataclass
class ManifestEntry:
    source: str
    fragment: int
    score: str
    bars: int
    tracks: list[str]
    split: str


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry]
    seed: int

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def to_json(self) -> str:
        doc = {"seed": self.seed, "entries": [asdict(e) for e in self.entries]}
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CorpusManifest":
        doc = json.loads(text)
        return cls([ManifestEntry(**e) for e in doc["entries"]], doc["seed"])
