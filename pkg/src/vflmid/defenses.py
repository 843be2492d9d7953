"""Gradient-transform baselines (DP noise, sparsification, discretisation) and MID loss assembly."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Rng, Tensor
from .errors import ConfigError

DEFENSE_KINDS = ("none", "dp_gauss", "dp_laplace", "grad_sparse", "discrete", "mid")


@dataclass
class DefenseConfig:
    kind: str = "none"
    clip: float = 0.2
    sigma: float = 0.01
    scale: float = 0.01
    drop_rate: float = 0.9
    bins: int = 12
    clamp: float = 0.0          # discrete: <= 0 means 3x running std
    lam: float = 0.0            # MID weight, applied to every protected party
    placement: str = "active"   # MID: "active" | "passive"
    protected: list[int] = field(default_factory=lambda: [1])
    bottleneck_dim: int = 0     # MID: 0 means width of the protected output

    def validate(self):
        if self.kind not in DEFENSE_KINDS:
            raise ConfigError(f"unknown defense {self.kind!r}; expected one of {DEFENSE_KINDS}")
        if self.kind in ("dp_gauss", "dp_laplace"):
            if not self.clip > 0:
                raise ConfigError("dp clip must be > 0")
            if self.kind == "dp_gauss" and self.sigma < 0:
                raise ConfigError("dp sigma must be >= 0")
            if self.kind == "dp_laplace" and self.scale < 0:
                raise ConfigError("dp scale must be >= 0")
        if self.kind == "grad_sparse" and not 0 <= self.drop_rate < 1:
            raise ConfigError(f"drop_rate must lie in [0, 1), got {self.drop_rate}")
        if self.kind == "discrete" and self.bins < 2:
            raise ConfigError(f"bins must be >= 2, got {self.bins}")
        if self.kind == "mid":
            if self.lam < 0:
                raise ConfigError(f"MID lambda must be >= 0, got {self.lam}")
            if self.placement not in ("active", "passive"):
                raise ConfigError(f"MID placement must be active or passive, got {self.placement!r}")
        return self


def _as_array(g) -> np.ndarray:
    return np.array(g.data if isinstance(g, Tensor) else g, dtype=np.float64)


def clip_rows(g: np.ndarray, c: float) -> np.ndarray:
    g = np.atleast_2d(g)
    norms = np.sqrt(np.sum(g * g, axis=1, keepdims=True))
    factor = np.where(norms > c, c / np.where(norms > 0, norms, 1.0), 1.0)
    return g * factor


def apply_dp(g, cfg: DefenseConfig, rng: Rng, row_keys=None) -> np.ndarray:
    """Clip each row to 2-norm ``cfg.clip`` and add i.i.d. Gaussian or Laplace noise.

    With ``row_keys`` every row draws from its own named stream, so the result
    does not depend on the order of rows in the batch.
    """
    x = _as_array(g)
    squeeze = x.ndim == 1
    out = clip_rows(x, cfg.clip)
    gauss = cfg.kind == "dp_gauss"
    mag = cfg.sigma if gauss else cfg.scale
    if mag > 0:
        if row_keys is None:
            noise = rng.normal(out.shape, mag) if gauss else rng.laplace(out.shape, mag)
        else:
            noise = np.stack([
                (r.normal(out.shape[1], mag) if gauss else r.laplace(out.shape[1], mag))
                for r in (rng.child(f"row/{k}") for k in row_keys)
            ])
        out = out + noise
    return out[0] if squeeze else out


def apply_grad_sparse(g, drop_rate: float) -> np.ndarray:
    """Zero the ``floor(drop_rate * n)`` smallest-magnitude entries of each row.

    Ties drop the lower index first; kept entries are copied untouched.
    """
    x = _as_array(g)
    squeeze = x.ndim == 1
    x = np.atleast_2d(x)
    n = x.shape[1]
    k = math.floor(drop_rate * n + 1e-9)
    if k:
        idx = np.arange(n)
        for row in x:
            order = np.lexsort((idx, np.abs(row)))
            row[order[:k]] = 0.0
    return x[0] if squeeze else x


def apply_discrete_grad(g, bins: int, clamp: float) -> np.ndarray:
    """Clamp to ``[-clamp, clamp]`` then snap to the nearest of ``bins`` uniform bin centres."""
    if bins < 2 or not clamp > 0:
        raise ConfigError(f"discrete gradients need bins >= 2 and clamp > 0, got {bins}, {clamp}")
    x = np.clip(_as_array(g), -clamp, clamp)
    width = 2.0 * clamp / bins
    idx = np.clip(np.floor((x + clamp) / width), 0, bins - 1)
    return -clamp + (idx + 0.5) * width


def mid_total_loss(ce: Tensor, kls) -> Tensor:
    """``ce + sum(lam_k * kl_k)`` over ``(lam_k, kl_k)`` pairs."""
    total = ce
    for lam, kl in kls:
        if lam < 0:
            raise ConfigError(f"negative MID weight {lam}")
        total = total + dc.scale(kl, float(lam))
    return total


class GradientDefense:
    """Applies the configured baseline to outgoing per-sample gradient rows.

    Holds the running statistics the discrete variant needs when its clamp
    is left on auto.
    """

    def __init__(self, cfg: DefenseConfig):
        self.cfg = cfg.validate()
        self._clamp = cfg.clamp if cfg.clamp > 0 else None
        self._s = 0.0
        self._sq = 0.0
        self._n = 0

    @property
    def active(self) -> bool:
        return self.cfg.kind in ("dp_gauss", "dp_laplace", "grad_sparse", "discrete")

    def __call__(self, rows: np.ndarray, rng: Rng) -> np.ndarray:
        kind = self.cfg.kind
        if kind in ("dp_gauss", "dp_laplace"):
            return apply_dp(rows, self.cfg, rng)
        if kind == "grad_sparse":
            return apply_grad_sparse(rows, self.cfg.drop_rate)
        if kind == "discrete":
            self._s += float(np.sum(rows))
            self._sq += float(np.sum(rows * rows))
            self._n += rows.size
            clamp = self._clamp
            if clamp is None:
                clamp = 3.0 * float(np.std(rows)) or 1e-12
            return apply_discrete_grad(rows, self.cfg.bins, clamp)
        return rows

    def end_epoch(self):
        if self.cfg.kind == "discrete" and self.cfg.clamp <= 0 and self._n:
            m = self._s / self._n
            self._clamp = 3.0 * math.sqrt(max(self._sq / self._n - m * m, 0.0)) or 1e-12
            self._s, self._sq, self._n = 0.0, 0.0, 0
