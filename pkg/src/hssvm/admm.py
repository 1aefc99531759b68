"""Closed-form ADMM for the box- and equality-constrained SVM dual.

Each iteration solves one system with the shifted kernel ``K~ + beta I``
through a cached factorization; the equality constraint is enforced by a
rank-one correction with the precomputed vector ``w = Y K_beta^{-1} e``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_MAX_IT = 10


class NotPositiveDefinite(ValueError):
    pass


def auto_beta(d: int) -> float:
    """Penalty schedule by training-set size."""
    if d >= 10**6:
        return 1e4
    if d >= 10**5:
        return 1e3
    return 1e2


@dataclass(frozen=True)
class AdmmConfig:
    beta: float
    C: float
    max_it: int = DEFAULT_MAX_IT

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not self.C > 0:
            raise ValueError("C must be positive")
        if self.max_it < 1:
            raise ValueError("max_it must be at least 1")


@dataclass
class AdmmState:
    x: np.ndarray
    z: np.ndarray
    mu: np.ndarray
    k: int = 0

    @classmethod
    def zeros(cls, d: int) -> "AdmmState":
        return cls(np.zeros(d), np.zeros(d), np.zeros(d), 0)


@dataclass(frozen=True)
class Precomputed:
    w: np.ndarray
    w1: float
    y: np.ndarray


def precompute(f, y) -> Precomputed:
    """``w = Y K_beta^{-1} e`` and ``w1 = e^T K_beta^{-1} e``."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (f.d,):
        raise ValueError(f"labels of shape {y.shape} for d={f.d}")
    s = f.solve(np.ones(f.d))
    w1 = float(s.sum())
    if not w1 > 0:
        raise NotPositiveDefinite(
            "shifted operator not positive definite; increase beta")
    return Precomputed(y * s, w1, y)


def x_update(f, p: Precomputed, state: AdmmState, beta: float) -> np.ndarray:
    q = 1.0 + state.mu + beta * state.z
    s = f.solve(p.y * q)
    return p.y * s - (p.w @ q / p.w1) * p.w


def z_update(state: AdmmState, x_new: np.ndarray, config: AdmmConfig) -> np.ndarray:
    return np.clip(x_new - state.mu / config.beta, 0.0, config.C)


def mu_update(state: AdmmState, x_new, z_new, config: AdmmConfig) -> np.ndarray:
    return state.mu - config.beta * (x_new - z_new)


def step(f, p: Precomputed, state: AdmmState, config: AdmmConfig) -> AdmmState:
    x = x_update(f, p, state, config.beta)
    z = z_update(state, x, config)
    mu = mu_update(state, x, z, config)
    return AdmmState(x, z, mu, state.k + 1)


def run(f, p: Precomputed, config: AdmmConfig, trace: list | None = None) -> AdmmState:
    """Exactly ``config.max_it`` iterations from the zero state.

    ``f`` must have been built with ``config.beta``.  If ``trace`` is given,
    every iterate is appended to it.
    """
    if getattr(f, "beta", config.beta) != config.beta:
        raise ValueError(f"factorization shift {f.beta} != ADMM beta {config.beta}")
    state = AdmmState.zeros(p.y.size)
    for _ in range(config.max_it):
        state = step(f, p, state, config)
        if trace is not None:
            trace.append(state)
    return state
