"""Variance schedules for the forward diffusion process.

A schedule stores the per-step noise fractions ``betas`` (steps ``1..T``) and
the cumulative products ``alpha_bars`` (steps ``0..T``, with
``alpha_bars[0] == 1``). Index ``k`` of ``betas`` holds the beta of step
``k + 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, Mapping

import numpy as np

from .errors import ConfigError

DEFAULT_T = 1000


@dataclass(frozen=True)
class VarianceSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        betas = np.array(self.betas, dtype=np.float64)
        alpha_bars = np.array(self.alpha_bars, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ConfigError("betas must be a non-empty 1-D sequence")
        if alpha_bars.shape != (betas.size + 1,):
            raise ConfigError(
                f"alpha_bars must have length T+1={betas.size + 1}, got {alpha_bars.shape}"
            )
        if not np.all((betas > 0.0) & (betas < 1.0)):
            raise ConfigError("every beta must lie strictly inside (0, 1)")
        if alpha_bars[0] != 1.0:
            raise ConfigError("alpha_bars[0] must be exactly 1")
        if not np.all(np.diff(alpha_bars) < 0.0) or alpha_bars[-1] <= 0.0:
            raise ConfigError(
                "alpha_bars must be strictly decreasing and positive "
                "(betas too small to register in float64, or product underflowed)"
            )
        betas.setflags(write=False)
        alpha_bars.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def beta(self, step: int) -> float:
        """Beta of 1-based ``step``."""
        if not 1 <= step <= self.T:
            raise IndexError(f"step {step} outside [1, {self.T}]")
        return float(self.betas[step - 1])

    def alpha_bar(self, step: int) -> float:
        return float(self.alpha_bars[step])

    def to_config(self) -> Dict[str, Any]:
        return {"type": self.kind, "T": self.T, "beta_start": float(self.betas[0]), "beta_end": float(self.betas[-1])}


def _cumulative(betas: np.ndarray) -> np.ndarray:
    # Sequential left fold, so alpha_bars[k] == alpha_bars[k-1] * (1 - beta_k) bit for bit.
    alpha_bars = np.empty(betas.size + 1, dtype=np.float64)
    acc = 1.0
    alpha_bars[0] = acc
    for k, beta in enumerate(betas.tolist(), start=1):
        acc = acc * (1.0 - beta)
        alpha_bars[k] = acc
    return alpha_bars


def schedule_from_betas(betas, kind: str = "custom") -> VarianceSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    return VarianceSchedule(betas=betas, alpha_bars=_cumulative(betas), kind=kind)


def _check_bounds(T: int, beta_start: float, beta_end: float) -> None:
    if not isinstance(T, (int, np.integer)) or isinstance(T, bool) or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T!r}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> VarianceSchedule:
    """Betas linearly interpolated from ``beta_start`` (step 1) to ``beta_end`` (step T).

    Raises:
        ConfigError: if ``T < 1`` or the bounds are outside ``0 < start <= end < 1``.
    """
    _check_bounds(T, beta_start, beta_end)
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    return schedule_from_betas(betas, kind="linear")


def make_scaled_linear_schedule(T: int, beta_start: float, beta_end: float) -> VarianceSchedule:
    """Linear in sqrt(beta); the convention used by Stable-Diffusion-style latent models."""
    _check_bounds(T, beta_start, beta_end)
    betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), int(T), dtype=np.float64) ** 2
    return schedule_from_betas(betas, kind="scaled_linear")


def make_cosine_schedule(T: int, s: float = 0.008, max_beta: float = 0.999) -> VarianceSchedule:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T!r}")
    steps = np.arange(T + 1, dtype=np.float64) / T
    f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
    betas = np.clip(1.0 - f[1:] / f[:-1], 1e-8, max_beta)
    return schedule_from_betas(betas, kind="cosine")


SCHEDULE_FACTORIES: Dict[str, Callable[..., VarianceSchedule]] = {
    "linear": make_linear_schedule,
    "scaled_linear": make_scaled_linear_schedule,
}


def schedule_from_config(cfg: Mapping[str, Any]) -> VarianceSchedule:
    """Build a schedule from a ``schedule.*`` config mapping."""
    kind = cfg.get("type", "linear")
    T = int(cfg.get("T", DEFAULT_T))
    if kind == "cosine":
        return make_cosine_schedule(T)
    if kind not in SCHEDULE_FACTORIES:
        raise ConfigError(f"unknown schedule type {kind!r}")
    return SCHEDULE_FACTORIES[kind](T, float(cfg.get("beta_start", 1e-4)), float(cfg.get("beta_end", 0.02)))


def fraction_to_step(t_frac: float, T: int) -> int:
    """Map a noise fraction in [0, 1] to a step index, rounding halves away from zero."""
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T!r}")
    if not 0.0 <= t_frac <= 1.0:
        raise ConfigError(f"t_frac must lie in [0, 1], got {t_frac}")
    return int(math.floor(t_frac * T + 0.5))
