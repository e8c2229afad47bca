"""Moment-based ambiguity sets built from forecast residuals.

A set is described by a center (the point forecast), a residual covariance
``Sigma`` and two thresholds: ``gamma1`` bounds the Mahalanobis distance of
the mean residual from zero, ``gamma2`` bounds the second moment
``E[delta delta^T] <= gamma2 * Sigma``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, EvdroError
from .forecasting import MIN_RESIDUAL_ROWS, ResidualSample

log = logging.getLogger(__name__)

EPS_SIGMA = 1e-8
_EIG_SLACK = 1e-6


def _sym_sqrt(S):
    w, V = np.linalg.eigh(S)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def _sym_inv_sqrt(S):
    w, V = np.linalg.eigh(S)
    if w.min() <= 0:
        raise EvdroError("covariance is singular")
    return (V / np.sqrt(w)) @ V.T


@dataclass(frozen=True)
class BootstrapConfig:
    NB: int = 1000
    alpha: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.NB < 10:
            raise ValueError(f"NB must be >= 10, got {self.NB}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")


@dataclass(frozen=True)
class AmbiguitySet:
    center: np.ndarray
    Sigma: np.ndarray
    gamma1: float
    gamma2: float
    alpha: float = 0.25
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        c = np.array(self.center, dtype=float).reshape(-1)
        S = np.array(self.Sigma, dtype=float)
        if S.shape != (c.size, c.size):
            raise DimensionError(f"Sigma shape {S.shape} does not match center length {c.size}")
        if not np.allclose(S, S.T, rtol=0, atol=1e-12 * max(1.0, np.abs(S).max())):
            raise ValueError("Sigma must be symmetric")
        S = 0.5 * (S + S.T)
        if np.linalg.eigvalsh(S).min() < EPS_SIGMA * (1 - _EIG_SLACK):
            raise ValueError(f"Sigma must have minimum eigenvalue >= {EPS_SIGMA}")
        if self.gamma1 < 0:
            raise ValueError("gamma1 must be nonnegative")
        if self.gamma2 < max(self.gamma1, EPS_SIGMA):
            raise ValueError(
                f"gamma2={self.gamma2} < gamma1={self.gamma1}: the second-moment bound must dominate "
                "the mean bound, otherwise no distribution satisfies both and the set is empty")
        for arr in (c, S):
            arr.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "Sigma", S)
        object.__setattr__(self, "gamma1", float(self.gamma1))
        object.__setattr__(self, "gamma2", float(self.gamma2))
        sqrt = _sym_sqrt(S)
        sqrt.setflags(write=False)
        object.__setattr__(self, "_sqrt", sqrt)

    @property
    def dim(self):
        return self.center.size

    @property
    def Sigma_sqrt(self):
        return self._sqrt

    def to_dict(self):
        return {
            "center": self.center.tolist(),
            "Sigma": self.Sigma.tolist(),
            "gamma1": self.gamma1,
            "gamma2": self.gamma2,
            "alpha": self.alpha,
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(center=d["center"], Sigma=d["Sigma"], gamma1=d["gamma1"], gamma2=d["gamma2"],
                   alpha=d.get("alpha", 0.25), metadata=d.get("metadata", {}))


def _deltas(residuals):
    return residuals.deltas if isinstance(residuals, ResidualSample) else np.atleast_2d(np.asarray(residuals, float))


def regularization(Sigma):
    """Ridge added to a sample covariance: 1e-8 scaled by the mean variance (at least 1e-8)."""
    n = Sigma.shape[0]
    return EPS_SIGMA * max(1.0, float(np.trace(Sigma)) / n)


def estimate_moments(residuals):
    """Sample mean and regularized sample covariance (divisor M-1) of residual rows."""
    D = _deltas(residuals)
    M = D.shape[0]
    if M < 2:
        raise ValueError(f"need at least 2 residual rows, got {M}")
    mu = D.mean(axis=0)
    Sigma = np.atleast_2d(np.cov(D, rowvar=False, ddof=1))
    Sigma = 0.5 * (Sigma + Sigma.T)
    Sigma = Sigma + regularization(Sigma) * np.eye(Sigma.shape[0])
    return mu, Sigma


def bootstrap_statistics(residuals, cfg: BootstrapConfig):
    """Per-resample mean statistic and scaled second-moment statistic."""
    D = _deltas(residuals)
    M = D.shape[0]
    mu, Sigma = estimate_moments(D)
    W = _sym_inv_sqrt(Sigma)
    stat1 = np.empty(cfg.NB)
    stat2 = np.empty(cfg.NB)
    for b in range(cfg.NB):
        # one stream per resample keeps results independent of execution order
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, b]))
        sample = D[rng.integers(0, M, size=M)]
        mu_b = sample.mean(axis=0)
        dev = mu_b - mu
        Sigma_b = np.atleast_2d(np.cov(sample, rowvar=False, ddof=1))
        white = W @ dev
        stat1[b] = white @ white
        stat2[b] = np.linalg.eigvalsh(W @ (Sigma_b + np.outer(dev, dev)) @ W)[-1]
    return stat1, stat2


def bootstrap_thresholds(residuals, cfg: BootstrapConfig):
    """Thresholds (gamma1, gamma2) as (1 - alpha/2) bootstrap quantiles.

    Splitting alpha evenly between the two moment conditions gives joint
    coverage of at least 1 - alpha by the union bound.  gamma2 is floored at 1.
    """
    D = _deltas(residuals)
    if D.shape[0] < MIN_RESIDUAL_ROWS:
        log.warning("only %d residual rows; thresholds may be unreliable (recommend >= %d)",
                    D.shape[0], MIN_RESIDUAL_ROWS)
    stat1, stat2 = bootstrap_statistics(D, cfg)
    level = 1.0 - cfg.alpha / 2.0
    gamma1 = float(np.quantile(stat1, level))
    gamma2 = max(float(np.quantile(stat2, level)), 1.0)
    return gamma1, max(gamma2, gamma1)


def build_set(center, Sigma, gamma1, gamma2, alpha=0.25, metadata=None) -> AmbiguitySet:
    return AmbiguitySet(center=center, Sigma=Sigma, gamma1=gamma1, gamma2=gamma2, alpha=alpha,
                        metadata=dict(metadata or {}))


def set_from_residuals(center, residuals, cfg: BootstrapConfig, **metadata) -> AmbiguitySet:
    """Moments plus bootstrap thresholds around a forecast ``center``."""
    D = _deltas(residuals)
    _, Sigma = estimate_moments(D)
    g1, g2 = bootstrap_thresholds(D, cfg)
    meta = {"NB": cfg.NB, "seed": cfg.seed, "M": int(D.shape[0]),
            "alpha_split": [cfg.alpha / 2, cfg.alpha / 2], **metadata}
    return build_set(center, Sigma, g1, g2, cfg.alpha, meta)


def singleton_set(center, eps=EPS_SIGMA):
    """Degenerate set whose only admissible mean is ``center``."""
    center = np.asarray(center, dtype=float)
    return build_set(center, eps * np.eye(center.size), 0.0, 1.0, metadata={"singleton": True})


def worst_case_linear(aset: AmbiguitySet, z) -> float:
    """Supremum of E[z^T xi] over the ambiguity set."""
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.size != aset.dim:
        raise DimensionError(f"direction has length {z.size}, set has dimension {aset.dim}")
    return float(z @ aset.center + np.sqrt(aset.gamma1) * np.linalg.norm(aset.Sigma_sqrt @ z))


def worst_case_coordinate_bounds(aset: AmbiguitySet):
    """Per-coordinate largest and smallest attainable expectations (lower floored at 0)."""
    half_width = np.sqrt(aset.gamma1) * np.linalg.norm(aset.Sigma_sqrt, axis=0)
    upper = aset.center + half_width
    lower = np.maximum(aset.center - half_width, 0.0)
    return upper, lower


def sample_ellipsoid_means(aset: AmbiguitySet, n, rng):
    """Draw ``n`` mean vectors uniformly from {mu : (mu-c)^T Sigma^-1 (mu-c) <= gamma1}."""
    d = aset.dim
    g = rng.normal(size=(n, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    radius = rng.uniform(size=(n, 1)) ** (1.0 / d)
    return aset.center + np.sqrt(aset.gamma1) * (g * radius) @ aset.Sigma_sqrt.T
