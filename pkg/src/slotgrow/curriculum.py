"""Slot-count schedules, slot error accounting, replica allocation and child spawning."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

SCHEDULE_KINDS = ("accelerated", "linear", "decelerated")
SPAWN_CRITERIA = ("total_error", "area_normalized")
# expansion points for up to four stages; three stages use the first two
DEFAULT_FRACTIONS = (0.10, 0.25, 0.40)


def default_stage_fractions(stages: int) -> tuple[float, ...]:
    if not 1 <= stages <= len(DEFAULT_FRACTIONS) + 1:
        raise ConfigError(f"no default expansion points for {stages} stages; pass stage_fractions")
    return DEFAULT_FRACTIONS[: stages - 1]


@dataclass(frozen=True)
class CurriculumSchedule:
    k_init: int = 2
    sigma_inc: int = 1
    stages: int = 3
    stage_fractions: tuple[float, ...] = (0.10, 0.25)
    kind: str = "accelerated"

    def validate(self) -> None:
        if self.k_init < 1:
            raise ConfigError(f"k_init must be >= 1, got {self.k_init}")
        if self.sigma_inc < 0:
            raise ConfigError(f"sigma_inc must be >= 0, got {self.sigma_inc}")
        if self.stages < 1:
            raise ConfigError(f"stages must be >= 1, got {self.stages}")
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"schedule kind must be one of {SCHEDULE_KINDS}, got {self.kind!r}")
        fr = self.stage_fractions
        if len(fr) != self.stages - 1:
            raise ConfigError(f"{self.stages} stages need {self.stages - 1} expansion fractions, got {len(fr)}")
        if any(not 0 < f < 1 for f in fr) or any(b <= a for a, b in zip(fr, fr[1:])):
            raise ConfigError(f"stage fractions must be strictly increasing in (0, 1), got {fr}")

    @property
    def k_final(self) -> int:
        return slots_at_stage(self, self.stages - 1)

    def boundaries(self, total_iters: int) -> list[int]:
        """Iterations at which each expansion fires (before that iteration's step)."""
        its = [math.floor(f * total_iters) for f in self.stage_fractions]
        if any(i < 1 for i in its) or any(b <= a for a, b in zip(its, its[1:])):
            raise ConfigError(f"{total_iters} iterations too few for distinct expansions at {self.stage_fractions}")
        return its


def _accelerated(k_init: int, sigma: int, m: int) -> int:
    return k_init + m * sigma + 3 * m * (m - 1) // 2


def slots_at_stage(sched: CurriculumSchedule, m: int) -> int:
    M = sched.stages
    if not 0 <= m < M:
        raise ContractError(f"stage {m} outside [0, {M})")
    k0 = sched.k_init
    if sched.kind == "accelerated":
        return _accelerated(k0, sched.sigma_inc, m)
    k_final = _accelerated(k0, sched.sigma_inc, M - 1)
    if sched.kind == "linear":
        if M == 1:
            return k0
        # round half up so the rule does not depend on banker's rounding
        return k0 + math.floor(m * (k_final - k0) / (M - 1) + 0.5)
    # decelerated: accelerated increments replayed in reverse order
    return k_final + k0 - _accelerated(k0, sched.sigma_inc, M - 1 - m)


@dataclass(frozen=True)
class SpawnConfig:
    beta: float = 0.2
    criterion: str = "total_error"
    ema_decay: float = 0.9
    strategy: str = "guided"  # "random": new rows keep their untrained initial values

    def validate(self) -> None:
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.criterion not in SPAWN_CRITERIA:
            raise ConfigError(f"criterion must be one of {SPAWN_CRITERIA}, got {self.criterion!r}")
        if not 0 <= self.ema_decay < 1:
            raise ConfigError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        if self.strategy not in ("guided", "random"):
            raise ConfigError(f"spawn strategy must be guided or random, got {self.strategy!r}")


@dataclass
class SlotErrorStats:
    delta: np.ndarray
    weights: np.ndarray
    frac: np.ndarray
    counts: np.ndarray
    remainder: int
    d_nearest: np.ndarray | None = None
    mu_norm: float | None = None


def slot_error_mass(alpha: np.ndarray, mse_map: np.ndarray, criterion: str = "total_error", eps: float = 1e-12) -> np.ndarray:
    """Per-slot share of reconstruction error.

    ``alpha`` is [..., T, K, N] and ``mse_map`` [..., T, N]; leading axes are
    summed together with time and location.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    mse_map = np.asarray(mse_map, dtype=np.float64)
    if alpha.ndim < 2 or alpha.shape[:-2] + alpha.shape[-1:] != mse_map.shape:
        raise ContractError(f"alpha {alpha.shape} does not match mse_map {mse_map.shape}")
    K = alpha.shape[-2]
    a = np.moveaxis(alpha, -2, 0).reshape(K, -1)
    delta = a @ mse_map.reshape(-1)
    if criterion == "total_error":
        return delta
    if criterion == "area_normalized":
        return delta / np.maximum(a.sum(axis=1), eps)
    raise ConfigError(f"unknown spawn criterion {criterion!r}")


def allocate_new_slots(delta, n_new: int) -> tuple[np.ndarray, SlotErrorStats]:
    """Split ``n_new`` children across parents in proportion to their error mass.

    Floors first, then the remainder goes one each to the largest fractional
    residues with ties resolved toward the lower slot index.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if delta.ndim != 1 or delta.size < 1:
        raise ContractError(f"delta must be a non-empty vector, got shape {delta.shape}")
    if n_new < 0:
        raise ContractError(f"n_new must be >= 0, got {n_new}")
    if np.any(delta < 0) or not np.all(np.isfinite(delta)):
        raise ContractError("slot error masses must be finite and non-negative")
    total = delta.sum()
    w = delta / total if total > 0 else np.full(delta.size, 1.0 / delta.size)
    frac = w * n_new
    counts = np.floor(frac).astype(np.int64)
    r = int(n_new - counts.sum())
    if r:
        order = np.argsort(-(frac - counts), kind="stable")
        counts[order[:r]] += 1
    return counts, SlotErrorStats(delta, w, frac, counts.copy(), r)


def placeholder_geometry(placeholders: np.ndarray) -> tuple[np.ndarray, float]:
    """Nearest-neighbour distance per row and the mean row norm."""
    x = np.asarray(placeholders, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    mu_norm = float(norms.mean())
    if x.shape[0] == 1:
        return np.array([mu_norm]), mu_norm
    dist = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=-1)
    np.fill_diagonal(dist, np.inf)
    return dist.min(axis=1), mu_norm


def spawn_children(placeholders, counts, cfg: SpawnConfig, rng: np.random.Generator) -> np.ndarray:
    """Append perturbed copies of each parent after the existing rows, in parent order."""
    x = np.asarray(placeholders, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.int64)
    if counts.shape != (x.shape[0],):
        raise ContractError(f"counts {counts.shape} do not match {x.shape[0]} parents")
    d_nearest, mu_norm = placeholder_geometry(x)
    children = []
    for k, n in enumerate(counts):
        scale = cfg.beta * d_nearest[k] * np.linalg.norm(x[k]) / mu_norm if mu_norm > 0 else 0.0
        for _ in range(n):
            v = rng.standard_normal(x.shape[1])
            v /= np.linalg.norm(v)
            children.append(x[k] + scale * v)
    if not children:
        return x.copy()
    return np.concatenate([x, np.stack(children)], axis=0)


@dataclass
class ExpansionEvent:
    iteration: int
    stage: int
    k_old: int
    k_new: int
    stats: SlotErrorStats

    def to_record(self) -> dict:
        s = self.stats
        return {
            "event": "expansion",
            "iter": self.iteration,
            "stage": self.stage,
            "k_old": self.k_old,
            "k_new": self.k_new,
            "delta": s.delta.tolist(),
            "w": s.weights.tolist(),
            "n": s.counts.tolist(),
            "d_nearest": None if s.d_nearest is None else s.d_nearest.tolist(),
            "mu_norm": s.mu_norm,
        }


@dataclass
class ErrorEMA:
    """Exponential moving average of per-batch slot error masses."""

    decay: float = 0.9
    value: np.ndarray | None = field(default=None)

    def update(self, delta: np.ndarray) -> None:
        if self.value is None or self.value.shape != delta.shape:
            self.value = delta.astype(np.float64).copy()
        else:
            self.value = self.decay * self.value + (1.0 - self.decay) * delta

    def reset(self) -> None:
        self.value = None


def expand(params, bank, optimizer, sched: CurriculumSchedule, cfg: SpawnConfig, delta, stage: int,
           rng: np.random.Generator, iteration: int = 0) -> ExpansionEvent:
    """Grow the slot bank from stage ``stage - 1`` to ``stage``.

    New placeholder rows are written into the bank's spare capacity and their
    optimizer moments zeroed.
    """
    if not 1 <= stage < sched.stages:
        raise ContractError(f"no expansion into stage {stage} for a {sched.stages}-stage schedule")
    k_old = slots_at_stage(sched, stage - 1)
    k_new = slots_at_stage(sched, stage)
    if bank.active_k != k_old:
        raise ContractError(f"bank holds {bank.active_k} slots, stage {stage - 1} expects {k_old}")
    if k_new > bank.k_max:
        raise ContractError(f"stage {stage} needs {k_new} slots, bank capacity is {bank.k_max}")
    if delta is None:
        delta = np.zeros(k_old)
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (k_old,):
        raise ContractError(f"error mass has shape {delta.shape}, expected ({k_old},)")
    ph = params["slots.placeholders"]
    current = ph.data[:k_old]
    if cfg.strategy == "random":
        # spare rows were never active, so they still hold their random initialisation
        counts = np.zeros(k_old, dtype=np.int64)
        stats = SlotErrorStats(delta, np.full(k_old, 1.0 / k_old), np.zeros(k_old), counts, k_new - k_old)
    else:
        counts, stats = allocate_new_slots(delta, k_new - k_old)
        ph.data[k_old:k_new] = spawn_children(current, counts, cfg, rng)[k_old:]
    stats.d_nearest, stats.mu_norm = placeholder_geometry(current)
    if optimizer is not None:
        optimizer.reset_rows("slots.placeholders", slice(k_old, k_new))
    bank.grow(k_new)
    return ExpansionEvent(iteration, stage, k_old, k_new, stats)
