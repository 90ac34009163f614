"""Absorbing-state discrete diffusion over score grids.

Normal tokens are kept with probability alpha_t per step and otherwise
jump to MASK, which is absorbing. EMPTY never moves and is never reached.
Marginals and posteriors are computed in closed form; the explicit
transition matrices exist only as a reference for tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .codec import EMPTY, MASK, N_ROWS, ScoreGrid, Track

ROLES = ("src", "tgt", "empty")


@dataclass(frozen=True)
class Schedule:
    """Linear schedule: alpha_bar_t = 1 - t/T."""

    T: int
    alpha_bar: np.ndarray = field(repr=False)
    gamma_bar: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)  # index 0 unused (1.0)
    gamma: np.ndarray = field(repr=False)


def make_schedule(T: int) -> Schedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    t = np.arange(T + 1, dtype=np.float64)
    alpha_bar = 1.0 - t / T
    alpha_bar[T] = 0.0
    alpha = np.ones(T + 1)
    alpha[1:] = alpha_bar[1:] / alpha_bar[:-1]
    return Schedule(T, alpha_bar, 1.0 - alpha_bar, alpha, 1.0 - alpha)


def _check_t(schedule: Schedule, t: int) -> None:
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t={t} outside [1, {schedule.T}]")


def transition_matrix(schedule: Schedule, t: int, K: int) -> np.ndarray:
    """Q_t[m, n] = q(x_t = m | x_{t-1} = n). Reference only."""
    _check_t(schedule, t)
    Q = np.diag(np.full(K, schedule.alpha[t]))
    Q[MASK, :] += schedule.gamma[t]
    Q[:, MASK] = 0.0
    Q[MASK, MASK] = 1.0
    Q[:, EMPTY] = 0.0
    Q[EMPTY, EMPTY] = 1.0
    return Q


def cumulative_matrix(schedule: Schedule, t: int, K: int) -> np.ndarray:
    Qbar = np.eye(K)
    for s in range(1, t + 1):
        Qbar = transition_matrix(schedule, s, K) @ Qbar
    return Qbar


def marginal(x0: int, t: int, schedule: Schedule, K: int) -> np.ndarray:
    """q(x_t | x_0) as a length-K vector (t = 0 allowed)."""
    if not 0 <= t <= schedule.T:
        raise ValueError(f"t={t} outside [0, {schedule.T}]")
    out = np.zeros(K)
    if x0 in (MASK, EMPTY):
        out[x0] = 1.0
    else:
        out[x0] = schedule.alpha_bar[t]
        out[MASK] = schedule.gamma_bar[t]
    return out


def _posterior_pair(x_t: int, x0: int, t: int, schedule: Schedule) -> dict[int, float]:
    if x0 == EMPTY or x_t == EMPTY:
        if x0 == x_t == EMPTY:
            return {EMPTY: 1.0}
    elif x0 == MASK:
        if x_t == MASK:
            return {MASK: 1.0}
    elif x_t == x0:
        if schedule.alpha_bar[t] > 0:
            return {x0: 1.0}
    elif x_t == MASK:
        g = schedule.gamma_bar[t]
        keep = schedule.gamma[t] * schedule.alpha_bar[t - 1] / g
        stay = schedule.gamma_bar[t - 1] / g
        return {x0: keep, MASK: stay}
    raise ValueError(f"zero-probability conditioning: x_t={x_t}, x_0={x0}, t={t}")


def posterior(x_t: int, x0: int, t: int, schedule: Schedule, K: int) -> np.ndarray:
    """q(x_{t-1} | x_t, x_0) as a length-K vector."""
    _check_t(schedule, t)
    out = np.zeros(K)
    for token, p in _posterior_pair(x_t, x0, t, schedule).items():
        out[token] = p
    return out


def posterior_coefficients(t: int, schedule: Schedule) -> tuple[float, float]:
    """(P(x_{t-1} = x_0), P(x_{t-1} = MASK)) given x_t = MASK and a normal x_0."""
    _check_t(schedule, t)
    g = schedule.gamma_bar[t]
    return schedule.gamma[t] * schedule.alpha_bar[t - 1] / g, schedule.gamma_bar[t - 1] / g


# --------------------------------------------------------------------------
# roles and corruption


@dataclass
class RoleMask:
    """Per-track role: "src" is kept, "tgt" is generated, "empty" is blanked."""

    roles: dict[Track, str]

    def __post_init__(self):
        roles = {t: "empty" for t in Track}
        roles.update(self.roles)
        if any(r not in ROLES for r in roles.values()):
            raise ValueError(f"roles must be one of {ROLES}")
        if "tgt" not in roles.values():
            raise ValueError("at least one target track required")
        self.roles = roles

    @classmethod
    def from_lists(cls, source, target) -> "RoleMask":
        source, target = set(source), set(target)
        if source & target:
            raise ValueError("overlap between source and target tracks")
        roles = {t: "src" for t in source}
        roles.update({t: "tgt" for t in target})
        return cls(roles)

    def tracks(self, role: str) -> list[Track]:
        return [t for t in Track if self.roles[t] == role]

    def row_mask(self, role: str) -> np.ndarray:
        mask = np.zeros(N_ROWS, dtype=bool)
        for t in self.tracks(role):
            mask[2 * int(t) : 2 * int(t) + 2] = True
        return mask

    def cell_mask(self, role: str, L: int) -> np.ndarray:
        return np.repeat(self.row_mask(role)[:, None], L, axis=1)

    def flags(self, L: int) -> np.ndarray:
        """1 where the model may condition, 0 on cells to generate."""
        return (~self.cell_mask("tgt", L)).astype(np.int64)


def sample_roles(involved: list[Track], rng: np.random.Generator) -> RoleMask:
    """Uniform over the 3^k - 2^k valid assignments of involved instrument tracks.

    The chord track, when involved, is always a source.
    """
    instruments = [t for t in involved if t != Track.CHORD]
    if not instruments:
        raise ValueError("no instrument tracks to assign")
    while True:
        draws = rng.integers(0, 3, size=len(instruments))
        if (draws == 1).any():
            break
    roles = {t: ROLES[d] for t, d in zip(instruments, draws)}
    if Track.CHORD in involved:
        roles[Track.CHORD] = "src"
    return RoleMask(roles)


def prepare(score: ScoreGrid, roles: RoleMask) -> np.ndarray:
    """Ground truth with uninvolved rows emptied; validates roles against the score."""
    for track in roles.tracks("src") + roles.tracks("tgt"):
        if score.roles[track] == "empty":
            raise ValueError(f"track {track.label} is empty in the score")
    x = score.grid.copy()
    x[roles.row_mask("empty")] = EMPTY
    return x


def corrupt(score: ScoreGrid, t: int, roles: RoleMask, rng: np.random.Generator,
            schedule: Schedule) -> np.ndarray:
    """Sample x_t: target cells kept w.p. alpha_bar_t else MASK; sources copied; empties emptied."""
    if not 0 <= t <= schedule.T:
        raise ValueError(f"t={t} outside [0, {schedule.T}]")
    x = prepare(score, roles)
    target = roles.cell_mask("tgt", score.L)
    drop = rng.random(x.shape) >= schedule.alpha_bar[t]
    x[target & drop] = MASK
    return x


# --------------------------------------------------------------------------
# model step distribution and losses


def _masked_log_softmax(logits: torch.Tensor, support: torch.Tensor | None) -> torch.Tensor:
    if support is not None:
        logits = logits.masked_fill(~support, float("-inf"))
    return torch.log_softmax(logits, dim=-1)


def default_support(K: int) -> torch.Tensor:
    support = torch.ones(K, dtype=torch.bool)
    support[MASK] = False
    support[EMPTY] = False
    return support


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))


def model_step_distribution(x0_logits, x_t, t: int, schedule: Schedule,
                            support=None, temperature: float = 1.0) -> torch.Tensor:
    """p(x_{t-1} | x_t) = sum over x0 of q(x_{t-1} | x_t, x0) * softmax(x0_logits)[x0].

    `support` (broadcastable to the logits) limits which clean tokens the
    prediction may place mass on; MASK and EMPTY are always excluded.
    Unmasked cells map to deltas at their current token.
    """
    _check_t(schedule, t)
    logits = _as_tensor(x0_logits).to(torch.float64)
    x_t = _as_tensor(x_t).long()
    K = logits.shape[-1]
    base = default_support(K)
    support = base if support is None else _as_tensor(support).bool() & base
    if temperature == 0:
        masked = logits.masked_fill(~support, float("-inf"))
        probs = torch.nn.functional.one_hot(masked.argmax(-1), K).to(torch.float64)
    else:
        probs = torch.exp(_masked_log_softmax(logits / temperature, support))
    keep, stay = posterior_coefficients(t, schedule)
    masked_cells = (x_t == MASK).unsqueeze(-1)
    mixture = keep * probs
    mixture[..., MASK] = stay
    delta = torch.nn.functional.one_hot(x_t, K).to(torch.float64)
    return torch.where(masked_cells, mixture, delta)


@dataclass
class LossTerms:
    vlb: torch.Tensor
    aux: torch.Tensor
    lam: float

    @property
    def total(self) -> torch.Tensor:
        return self.vlb + self.lam * self.aux

    def as_floats(self) -> dict[str, float]:
        return {"vlb": float(self.vlb.detach()), "aux": float(self.aux.detach()), "total": float(self.total.detach())}


def loss(x0_logits, x0, x_t, t: int, target, schedule: Schedule, lam: float = 0.001,
         support=None) -> LossTerms:
    """Variational bound restricted to target cells plus lam * auxiliary cross-entropy.

    For t >= 2 each target cell contributes KL(q(x_{t-1}|x_t,x0) || p(x_{t-1}|x_t));
    at t = 1 it contributes -log p(x0 | x_1). The prior term is zero because
    q(x_T | x0) is the all-MASK prior exactly. Both terms are averaged: vlb over
    target cells, aux over masked target cells.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    _check_t(schedule, t)
    logits = _as_tensor(x0_logits)
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits")
    x0 = _as_tensor(x0).long()
    x_t = _as_tensor(x_t).long()
    target = _as_tensor(target).bool()
    K = logits.shape[-1]
    base = default_support(K)
    support = base if support is None else _as_tensor(support).bool() & base
    logp = _masked_log_softmax(logits, support)
    logp_x0 = logp.gather(-1, x0.unsqueeze(-1)).squeeze(-1)
    masked = target & (x_t == MASK)
    zero = logits.sum() * 0.0
    n_target = int(target.sum())
    if n_target == 0:
        return LossTerms(zero, zero, lam)

    if t == 1:
        per_cell = torch.where(masked, -logp_x0, torch.zeros_like(logp_x0))
    else:
        # q puts `keep` on x0 and `stay` on MASK; p puts keep * pi(x0) on x0 and
        # stay on MASK, so the MASK terms cancel and KL = -keep * log pi(x0).
        keep, _ = posterior_coefficients(t, schedule)
        log_q_x0 = float(np.log(keep))
        kl = keep * (log_q_x0 - (log_q_x0 + logp_x0))
        per_cell = torch.where(masked, kl, torch.zeros_like(logp_x0))
    vlb = per_cell[target].sum() / n_target
    n_masked = int(masked.sum())
    aux = -logp_x0[masked].sum() / n_masked if n_masked else zero
    return LossTerms(vlb, aux, lam)


# --------------------------------------------------------------------------
# sampling


def step_stream(seed: int, step: int, purpose: int = 0) -> np.random.Generator:
    """Independent generator for one denoising step.

    Each step draws one array covering every cell, so cell (r, c) always
    sees the same variates however the work is split.
    """
    return np.random.default_rng(np.random.SeedSequence([seed, step, purpose]))


def gumbel_sample(logits, temperature: float, rng: np.random.Generator) -> np.ndarray:
    """argmax(logits / temperature + Gumbel noise); temperature 0 is plain argmax."""
    logits = np.asarray(logits, dtype=np.float64)
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if temperature == 0:
        return logits.argmax(axis=-1)
    u = rng.random(logits.shape)
    noise = -np.log(-np.log(np.clip(u, 1e-300, None)))
    return (logits / temperature + noise).argmax(axis=-1)


def sample_categorical(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per row of probs (shape (..., K)) from uniforms u (shape (...))."""
    cdf = np.cumsum(probs, axis=-1)
    cdf[..., -1] = np.inf
    return (cdf <= u[..., None]).sum(axis=-1)


Model = Callable[[np.ndarray, int, np.ndarray], np.ndarray]


@dataclass
class GenerationTrace:
    masked_counts: list[int] = field(default_factory=list)


def denoise(model: Model, x_init: np.ndarray, generate_mask: np.ndarray, schedule: Schedule,
            seed: int, temperature: float = 1.0, support=None, sample_x0: bool = False,
            trace: GenerationTrace | None = None) -> np.ndarray:
    """Run the reverse chain from t = T down to 1 on the cells in generate_mask.

    Cells outside the mask are restored from x_init after every step.
    """
    generate_mask = np.asarray(generate_mask, dtype=bool)
    if not generate_mask.any():
        raise ValueError("nothing to generate")
    x = np.array(x_init, dtype=np.int64, copy=True)
    if (x[generate_mask] == EMPTY).any():
        raise ValueError("cannot generate EMPTY cells")
    x[generate_mask] = MASK
    flags = (~generate_mask).astype(np.int64)
    for t in range(schedule.T, 0, -1):
        logits = np.asarray(model(x, t, flags), dtype=np.float64)
        if logits.shape[:2] != x.shape:
            raise ValueError(f"model output shape {logits.shape} does not match score {x.shape}")
        rng = step_stream(seed, t)
        cells = generate_mask & (x == MASK)
        sub_logits = logits[cells]
        sub_support = None
        if support is not None:
            sub_support = np.broadcast_to(np.asarray(support)[:, None, :], logits.shape)[cells]
        if sample_x0:
            K = logits.shape[-1]
            allowed = default_support(K).numpy()
            if sub_support is not None:
                allowed = allowed & sub_support
            masked_logits = np.where(allowed, sub_logits, -np.inf)
            x0_hat = gumbel_sample(masked_logits, temperature, rng)
            keep, _ = posterior_coefficients(t, schedule)
            u = rng.random(len(x0_hat))
            new = np.where(u < keep, x0_hat, MASK)
        else:
            probs = model_step_distribution(
                sub_logits, np.full(len(sub_logits), MASK), t, schedule,
                support=sub_support, temperature=temperature,
            ).numpy()
            new = sample_categorical(probs, rng.random(len(sub_logits)))
        x[cells] = new
        x[~generate_mask] = np.asarray(x_init)[~generate_mask]
        if trace is not None:
            trace.masked_counts.append(int((x[generate_mask] == MASK).sum()))
    return x


def generate(model: Model, source_score: ScoreGrid, roles: RoleMask, schedule: Schedule,
             seed: int, temperature: float = 1.0, support=None, sample_x0: bool = False,
             trace: GenerationTrace | None = None) -> ScoreGrid:
    """Generate the target tracks of a score given its source tracks."""
    x_init = source_score.grid.copy()
    for track in roles.tracks("src"):
        if source_score.roles[track] == "empty":
            raise ValueError(f"source track {track.label} is empty in the score")
    x_init[roles.row_mask("empty")] = EMPTY
    target = roles.cell_mask("tgt", source_score.L)
    x_init[target] = MASK
    x = denoise(model, x_init, target, schedule, seed, temperature, support, sample_x0, trace)
    out_roles = {t: r for t, r in roles.roles.items()}
    return ScoreGrid(x, out_roles)


def infill(model: Model, score: ScoreGrid, mask_cells: np.ndarray, schedule: Schedule,
           seed: int, temperature: float = 1.0, support=None, sample_x0: bool = False,
           trace: GenerationTrace | None = None) -> ScoreGrid:
    """Regenerate an arbitrary cell set, trusting every other cell."""
    x = denoise(model, score.grid, mask_cells, schedule, seed, temperature, support, sample_x0, trace)
    return ScoreGrid(x, dict(score.roles))
