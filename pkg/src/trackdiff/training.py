"""Training step, learning-rate schedule and gradient checking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .codec import ScoreGrid
from .denoiser import Denoiser
from .diffusion import LossTerms, RoleMask, Schedule, corrupt, loss, sample_roles


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    warmup: int = 1000
    total_steps: int = 100_000


def make_optimizer(model: Denoiser, cfg: OptimConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)


def lr_at(step: int, cfg: OptimConfig) -> float:
    """Linear warmup over cfg.warmup steps, then linear decay to zero at total_steps."""
    if cfg.warmup and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    span = max(cfg.total_steps - cfg.warmup, 1)
    return cfg.lr * max(0.0, 1.0 - (step - cfg.warmup) / span)


@dataclass
class Example:
    """One corrupted training example."""

    x0: np.ndarray
    x_t: np.ndarray
    t: int
    roles: RoleMask

    @property
    def target(self) -> np.ndarray:
        return self.roles.cell_mask("tgt", self.x0.shape[1])


def draw_example(score: ScoreGrid, schedule: Schedule, rng: np.random.Generator,
                 roles: RoleMask | None = None, t: int | None = None) -> Example:
    roles = roles or sample_roles(score.involved(), rng)
    t = int(rng.integers(1, schedule.T + 1)) if t is None else t
    x_t = corrupt(score, t, roles, rng, schedule)
    x0 = score.grid.copy()
    x0[roles.row_mask("empty")] = x_t[roles.row_mask("empty")]
    return Example(x0, x_t, t, roles)


def example_loss(model: Denoiser, ex: Example, schedule: Schedule, lam: float,
                 support: torch.Tensor | None) -> LossTerms:
    logits = model(ex.x_t, ex.t, ex.roles.flags(ex.x_t.shape[1]))[0]
    row_support = None if support is None else support[:, None, :]
    return loss(logits, ex.x0, ex.x_t, ex.t, ex.target, schedule, lam, support=row_support)


def batch_loss(model: Denoiser, examples: list[Example], schedule: Schedule, lam: float,
               support: torch.Tensor | None = None) -> LossTerms:
    """Mean of per-example losses, accumulated in list order."""
    vlb = aux = None
    for ex in examples:
        terms = example_loss(model, ex, schedule, lam, support)
        vlb = terms.vlb if vlb is None else vlb + terms.vlb
        aux = terms.aux if aux is None else aux + terms.aux
    n = len(examples)
    return LossTerms(vlb / n, aux / n, lam)


def train_step(model: Denoiser, optimizer: torch.optim.Optimizer, batch: list[ScoreGrid],
               schedule: Schedule, rng: np.random.Generator, lam: float = 0.001,
               support: torch.Tensor | None = None, lr: float | None = None,
               role_sampler=sample_roles) -> LossTerms:
    """Sample roles and t per example, corrupt, backpropagate and apply one update.

    ``role_sampler(involved, rng)`` picks the role split; the default is uniform
    over all valid splits.
    """
    if not batch:
        raise ValueError("empty batch")
    examples = [draw_example(score, schedule, rng, roles=role_sampler(score.involved(), rng))
                for score in batch]
    model.train()
    optimizer.zero_grad(set_to_none=True)
    terms = batch_loss(model, examples, schedule, lam, support)
    total = terms.total
    if not torch.isfinite(total):
        raise FloatingPointError(
            f"non-finite loss: vlb={float(terms.vlb)}, aux={float(terms.aux)}, "
            f"t={[ex.t for ex in examples]}"
        )
    total.backward()
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    optimizer.step()
    return terms


# --------------------------------------------------------------------------
# gradient checking


def grad_check(model: torch.nn.Module, loss_fn, n_params: int = 200, eps: float = 1e-4,
               seed: int = 0, floor: float = 1e-7) -> tuple[float, np.ndarray]:
    """Compare autograd against central differences on randomly chosen scalars.

    `loss_fn(model)` must return a scalar tensor. Relative error per scalar is
    |a - n| / max(|a|, |n|, floor). Returns (max error, per-scalar errors).
    """
    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad(set_to_none=True)
    loss_fn(model).backward()
    analytic = [p.grad.detach().clone() for p in params]
    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params])
    flat = rng.choice(sizes.sum(), size=min(n_params, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    errors = []
    with torch.no_grad():
        for index in np.sort(flat):
            which = int(np.searchsorted(bounds, index, side="right"))
            offset = int(index - (bounds[which - 1] if which else 0))
            view = params[which].view(-1)
            original = view[offset].item()
            view[offset] = original + eps
            up = float(loss_fn(model))
            view[offset] = original - eps
            down = float(loss_fn(model))
            view[offset] = original
            numeric = (up - down) / (2 * eps)
            a = float(analytic[which].view(-1)[offset])
            errors.append(abs(a - numeric) / max(abs(a), abs(numeric), floor))
    return float(max(errors)), np.array(errors)


# --------------------------------------------------------------------------
# training loop


@dataclass
class FitResult:
    step: int
    best_valid: float | None
    history: list[tuple[int, float, float | None]]


def validation_loss(model: Denoiser, scores: list[ScoreGrid], schedule: Schedule, lam: float,
                    support: torch.Tensor | None, seed: int) -> float:
    """Loss over a fixed draw of roles and t, identical at every validation."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A11D]))
    examples = [draw_example(s, schedule, rng) for s in scores]
    model.eval()
    with torch.no_grad():
        return float(batch_loss(model, examples, schedule, lam, support).total)


def fit(model: Denoiser, optimizer: torch.optim.Optimizer, train: list[ScoreGrid], valid: list[ScoreGrid],
        schedule: Schedule, ocfg: OptimConfig, rng: np.random.Generator, *, batch_size: int, lam: float,
        support: torch.Tensor | None = None, start_step: int = 0, valid_every: int = 1000, seed: int = 0,
        best_valid: float | None = None, on_log=None, on_best=None, on_checkpoint=None,
        stop_step: int | None = None) -> FitResult:
    """Run steps start_step .. ocfg.total_steps - 1, or only up to stop_step.

    on_log(step, train_loss, valid_loss or None) is called every step,
    on_best(step, valid_loss) when validation improves, and
    on_checkpoint(step) after every validation and at the end.
    """
    if not train:
        raise ValueError("no training scores")
    best = best_valid
    history = []
    step = start_step
    end = ocfg.total_steps if stop_step is None else min(stop_step, ocfg.total_steps)
    for step in range(start_step, end):
        idx = np.sort(rng.choice(len(train), size=min(batch_size, len(train)), replace=False))
        terms = train_step(model, optimizer, [train[i] for i in idx], schedule, rng, lam, support,
                           lr=lr_at(step, ocfg))
        valid_loss = None
        final = step == ocfg.total_steps - 1
        if valid and ((step + 1) % valid_every == 0 or final):
            valid_loss = validation_loss(model, valid, schedule, lam, support, seed)
            if best is None or valid_loss < best:
                best = valid_loss
                if on_best:
                    on_best(step + 1, valid_loss)
        history.append((step + 1, float(terms.total.detach()), valid_loss))
        if on_log:
            on_log(*history[-1])
        if on_checkpoint and (valid_loss is not None or step == end - 1):
            on_checkpoint(step + 1)
    return FitResult(step + 1, best, history)
