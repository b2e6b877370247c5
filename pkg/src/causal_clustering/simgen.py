"""Simulation designs with known treatment effects.

Every generator draws from a Philox counter-based stream seeded by the
config, so a config always yields the same dataset. Normal variates come
from numpy's ziggurat sampler.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .dataset import Dataset, ScalingParams

__all__ = [
    "RecoveryConfig",
    "AdversarialConfig",
    "gen_gaussian_clusters",
    "gen_adversarial",
    "recovery_propensity",
    "zeta",
    "adversarial_cate",
]

CIRCLE_RADIUS = 2.0
EFFECT_STEP = 2.0


def _rng(seed, stream=0):
    return np.random.Generator(np.random.Philox(key=int(seed), counter=[int(stream), 0, 0, 0]))


@dataclass(frozen=True)
class RecoveryConfig:
    n: int = 1200
    k_true: int = 4
    cluster_sd: float = 0.6
    noise_sd: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.k_true <= 6:
            raise ValueError(f"k_true must be in 2..6, got {self.k_true}")
        if self.n < 10 * self.k_true:
            raise ValueError(f"n={self.n} is below 10 samples per cluster")
        if self.cluster_sd <= 0:
            raise ValueError("cluster_sd must be positive")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")


@dataclass(frozen=True)
class AdversarialConfig:
    n: int = 1200
    p: int = 20
    sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.p < 2:
            raise ValueError("p must be at least 2")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.n < 1:
            raise ValueError("n must be positive")


def recovery_propensity(X):
    X = np.atleast_2d(X)
    return expit(1.5 * X[:, 1] - 0.5 * X[:, 0])


def gen_gaussian_clusters(cfg):
    """2-D Gaussian mixture with cluster-constant effects ``2 * component``.

    Component means sit evenly on a circle of radius 2; features are
    standardized after mixing, and the baseline, propensity and outcomes are
    computed on the standardized features.
    """
    rng = _rng(cfg.seed)
    labels = rng.integers(cfg.k_true, size=cfg.n)
    angles = 2.0 * np.pi * np.arange(cfg.k_true) / cfg.k_true
    centers = CIRCLE_RADIUS * np.column_stack([np.cos(angles), np.sin(angles)])
    raw = centers[labels] + cfg.cluster_sd * rng.standard_normal((cfg.n, 2))
    X = ScalingParams.fit(raw).transform(raw)
    tau = EFFECT_STEP * labels
    e = recovery_propensity(X)
    w = (rng.random(cfg.n) < e).astype(np.int64)
    y0 = X[:, 0] + cfg.noise_sd * rng.standard_normal(cfg.n)
    y = y0 + w * tau
    return Dataset(X, y, w, tau.astype(np.float64), labels, None, ("x1", "x2"))


def zeta(x):
    """Smooth step from 1 to 3 centred at 1/3."""
    return 1.0 + 2.0 * expit(20.0 * (np.asarray(x, dtype=np.float64) - 1.0 / 3.0))


def adversarial_cate(X):
    X = np.atleast_2d(X)
    return zeta(X[:, 0]) * zeta(X[:, 1])


def gen_adversarial(cfg):
    """Uniform features, e(x) = 0.5, zero baseline, tau = zeta(x1) * zeta(x2)."""
    rng = _rng(cfg.seed, stream=1)
    X = rng.random((cfg.n, cfg.p))
    tau = adversarial_cate(X)
    w = (rng.random(cfg.n) < 0.5).astype(np.int64)
    y = w * tau + cfg.sigma * rng.standard_normal(cfg.n)
    return Dataset(X, y, w, tau, None, None, tuple(f"x{j + 1}" for j in range(cfg.p)))
