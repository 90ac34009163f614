"""Memorization harness: train the toy denoiser on a few synthetic scores and
check that conditional generation reproduces them."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .codec import ScoreGrid, Track, Vocabulary, build_vocabulary, encode
from .denoiser import Denoiser, preset
from .diffusion import RoleMask, generate, make_schedule
from .synthetic import random_song
from .training import OptimConfig, lr_at, make_optimizer, train_step


@dataclass(frozen=True)
class OverfitConfig:
    n_scores: int = 8
    bars: int = 4
    density: float = 0.2
    max_group: int = 2
    pitch_choices: int = 6
    steps: int = 4000
    batch_size: int = 4
    lr: float = 3e-3
    warmup: int = 100
    lam: float = 0.001
    seed: int = 0
    time_limit: float = 1800.0  # seconds of training before giving up


@dataclass
class OverfitResult:
    steps: int
    train_seconds: float
    accuracy: float  # pooled over every (score, held-out track) target cell
    per_track: dict[str, float]
    losses: list[float] = field(default_factory=list)


def make_corpus(cfg: OverfitConfig) -> tuple[list[ScoreGrid], Vocabulary]:
    rng = np.random.default_rng(cfg.seed)
    songs = [random_song(rng, bars=cfg.bars, density=cfg.density, max_group=cfg.max_group,
                         pitch_choices=cfg.pitch_choices) for _ in range(cfg.n_scores)]
    vocab = build_vocabulary(songs)
    return [encode(s, vocab) for s in songs], vocab


def held_out_accuracy(model: Denoiser, scores: list[ScoreGrid], vocab: Vocabulary,
                      temperature: float = 0.0) -> tuple[float, dict[str, float]]:
    """Generate each involved instrument track given all the others and compare token by token."""
    schedule = make_schedule(model.cfg.T)
    support = vocab.row_support()
    hits: dict[str, int] = {}
    totals: dict[str, int] = {}
    for i, score in enumerate(scores):
        for track in score.involved():
            if track == Track.CHORD:
                continue
            roles = RoleMask.from_lists([t for t in score.involved() if t != track], [track])
            out = generate(model.predict, score, roles, schedule, seed=i, temperature=temperature, support=support)
            rows = score.rows(track)
            hits[track.label] = hits.get(track.label, 0) + int((out.grid[rows] == score.grid[rows]).sum())
            totals[track.label] = totals.get(track.label, 0) + score.grid[rows].size
    per_track = {k: hits[k] / totals[k] for k in totals}
    return sum(hits.values()) / sum(totals.values()), per_track


def run_overfit(cfg: OverfitConfig = OverfitConfig(), log=None) -> OverfitResult:
    scores, vocab = make_corpus(cfg)
    model = Denoiser(preset("toy", vocab.K), seed=cfg.seed)
    ocfg = OptimConfig(lr=cfg.lr, warmup=cfg.warmup, total_steps=cfg.steps, weight_decay=0.0)
    optimizer = make_optimizer(model, ocfg)
    schedule = make_schedule(model.cfg.T)
    support = torch.from_numpy(vocab.row_support())
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    losses = []
    start = time.perf_counter()
    step = 0
    for step in range(cfg.steps):
        if time.perf_counter() - start > cfg.time_limit:
            break
        idx = np.sort(rng.choice(len(scores), size=min(cfg.batch_size, len(scores)), replace=False))
        terms = train_step(model, optimizer, [scores[i] for i in idx], schedule, rng, cfg.lam, support,
                           lr=lr_at(step, ocfg))
        losses.append(terms.as_floats()["total"])
        if log and (step + 1) % 500 == 0:
            log(f"step {step + 1} loss {np.mean(losses[-100:]):.5f} {time.perf_counter() - start:.0f}s")
    else:
        step = cfg.steps
    seconds = time.perf_counter() - start
    accuracy, per_track = held_out_accuracy(model, scores, vocab)
    return OverfitResult(step, seconds, accuracy, per_track, losses)

