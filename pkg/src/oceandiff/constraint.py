"""Hydrostatic-balance guidance: quadratic penalty on per-channel horizontal
means, its closed-form gradient, the step-dependent strength schedule, and
the wall-row fix-up for convolution boundary artifacts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .grid import OceanState


@dataclass(frozen=True)
class ConstraintConfig:
    """Targets and strength parameters for guided sampling.

    `mu` holds one target mean per channel (temperature levels then salinity
    levels, zeros in normalized space).  kappa(s) = eta * (1 + lam * exp(-k_exp*s/S))
    rises as the chain approaches s=1, so guidance is strongest at the end.
    """

    mu: np.ndarray
    eta: float = 1e-3
    lam: float = 40.0
    k_exp: float = 20.0

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        mu.flags.writeable = False
        object.__setattr__(self, "mu", mu)
        if mu.ndim != 1:
            raise ValidationError("mu must be a 1D per-channel array")
        if self.eta < 0 or self.lam < 0 or self.k_exp <= 0:
            raise ValidationError("need eta >= 0, lam >= 0, k_exp > 0")

    @classmethod
    def zeros(cls, n_channels: int, eta: float = 1e-3, lam: float = 40.0, k_exp: float = 20.0):
        return cls(mu=np.zeros(n_channels), eta=eta, lam=lam, k_exp=k_exp)


def _channel_means(x: np.ndarray, cfg: ConstraintConfig) -> np.ndarray:
    if x.shape[-3] != cfg.mu.size:
        raise ValidationError(
            f"tensor has {x.shape[-3]} channels but mu has length {cfg.mu.size}"
        )
    return x.mean(axis=(-2, -1))


def constraint_value(x: np.ndarray, cfg: ConstraintConfig):
    """C(x) = sum over channels of (mu_k - mean_k(x))^2.

    `x` is (C, W, H) or batched (B, C, W, H); batched input returns (B,).
    """
    m = _channel_means(x, cfg)
    c = ((cfg.mu - m) ** 2).sum(axis=-1)
    return float(c) if x.ndim == 3 else c


def constraint_gradient(x: np.ndarray, cfg: ConstraintConfig) -> np.ndarray:
    """dC/dx = (2/N) * (mean_k - mu_k), constant within each channel."""
    m = _channel_means(x, cfg)
    n = x.shape[-2] * x.shape[-1]
    per_channel = (2.0 / n) * (m - cfg.mu)
    return np.broadcast_to(per_channel[..., None, None], x.shape).copy()


def kappa(s: int, n_steps: int, cfg: ConstraintConfig) -> float:
    """Guidance strength at step s of an n_steps chain."""
    if not 1 <= s <= n_steps:
        raise ValidationError(f"step {s} outside [1, {n_steps}]")
    return float(cfg.eta * (1.0 + cfg.lam * np.exp(-cfg.k_exp * s / n_steps)))


def boundary_fixup(state: OceanState, walls: str = "latitude") -> OceanState:
    """Overwrite the two wall rows with their nearest interior rows.

    `walls="latitude"` (default) treats the extreme latitude rows as the solid
    walls; `walls="level"` instead copies across the shallowest/deepest levels.
    """
    t = state.temperature.copy()
    s = state.salinity.copy()
    if walls == "latitude":
        if state.dims[2] < 3:
            raise ValidationError("latitude fix-up needs H >= 3")
        for a in (t, s):
            a[:, :, 0] = a[:, :, 1]
            a[:, :, -1] = a[:, :, -2]
    elif walls == "level":
        if state.dims[0] < 3:
            raise ValidationError("level fix-up needs Z >= 3")
        for a in (t, s):
            a[0] = a[1]
            a[-1] = a[-2]
    else:
        raise ValidationError(f"unknown walls mode '{walls}'")
    return OceanState(temperature=t, salinity=s, normalized=state.normalized)
