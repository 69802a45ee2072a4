"""DDPM core: cosine noise schedule, forward noising, training loss,
and the (optionally constraint-guided) reverse sampling loop.

Step indices are 1-based: arrays of length S store the value for step s at
index s-1, with the convention alpha_bar_0 = 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .constraint import ConstraintConfig, boundary_fixup, constraint_gradient, constraint_value, kappa
from .denoiser import crop_channels
from .errors import NumericError, ValidationError
from .grid import NormStats, OceanState, channels_to_state, denormalize_state

# A denoiser is anything that maps (x, s) -> predicted noise of x's shape,
# with x either (C, W, H) or batched (B, C, W, H) and s an int or (B,) array.
DenoiseFn = Callable[[np.ndarray, "int | np.ndarray"], np.ndarray]


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    gamma: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        n = self.beta.size
        for name in ("alpha", "alpha_bar", "gamma", "sigma"):
            if getattr(self, name).shape != (n,):
                raise ValidationError("schedule arrays must share length S")
        if np.any(self.beta <= 0) or np.any(self.beta > 0.999):
            raise ValidationError("beta must lie in (0, 0.999]")
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise ValidationError("alpha_bar must be strictly decreasing")
        if np.max(np.abs(self.alpha - (1.0 - self.beta))) > 1e-12:
            raise ValidationError("alpha must equal 1 - beta")
        gamma = (1.0 - self.alpha) / np.sqrt(1.0 - self.alpha_bar)
        if np.max(np.abs(self.gamma - gamma)) > 1e-12:
            raise ValidationError("gamma does not satisfy its defining identity")
        bar_prev = np.concatenate(([1.0], self.alpha_bar[:-1]))
        sigma_sq = self.beta * (1.0 - bar_prev) / (1.0 - self.alpha_bar)
        sigma_sq[0] = 0.0
        if np.max(np.abs(self.sigma - np.sqrt(sigma_sq))) > 1e-12:
            raise ValidationError("sigma does not satisfy the posterior-variance identity")

    @property
    def n_steps(self) -> int:
        return self.beta.size

    def alpha_bar_prev(self, s: int) -> float:
        """alpha_bar at step s-1, with alpha_bar_0 = 1."""
        return 1.0 if s <= 1 else float(self.alpha_bar[s - 2])


def build_schedule(n_steps: int) -> NoiseSchedule:
    """squared-cosine schedule with beta clipped at 0.999.

    alpha_bar is recomputed as the running product of the clipped alphas so
    the product identity holds exactly.
    """
    if n_steps < 2:
        raise ValidationError("schedule needs at least 2 steps")
    s = np.arange(n_steps + 1, dtype=np.float64)
    f = np.cos(((s / n_steps + 0.008) / 1.008) * (np.pi / 2)) ** 2
    bar_raw = f / f[0]
    beta = np.minimum(1.0 - bar_raw[1:] / bar_raw[:-1], 0.999)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    bar_prev = np.concatenate(([1.0], alpha_bar[:-1]))
    gamma = (1.0 - alpha) / np.sqrt(1.0 - alpha_bar)
    sigma = np.sqrt(beta * (1.0 - bar_prev) / (1.0 - alpha_bar))
    sigma[0] = 0.0
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar, gamma=gamma, sigma=sigma)


def forward_noise(x0: np.ndarray, s: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """x_s = sqrt(alpha_bar_s) x_0 + sqrt(1 - alpha_bar_s) eps."""
    if not 1 <= s <= sched.n_steps:
        raise ValidationError(f"step {s} outside [1, {sched.n_steps}]")
    if eps.shape != x0.shape:
        raise ValidationError(f"noise shape {eps.shape} != data shape {x0.shape}")
    ab = sched.alpha_bar[s - 1]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def training_loss(net, params, x0_batch: np.ndarray, sched: NoiseSchedule, rng: np.random.Generator):
    """Denoising-score-matching MSE over a batch, with parameter gradients.

    Draws per-element s ~ U{1..S} and eps ~ N(0, I), noises the batch, and
    returns (loss, grads) where grads matches the net's parameter layout.
    """
    if x0_batch.ndim != 4 or x0_batch.shape[0] < 1:
        raise ValidationError("x0_batch must be (B, C, W, H) with B >= 1")
    b = x0_batch.shape[0]
    steps = rng.integers(1, sched.n_steps + 1, size=b)
    eps = rng.standard_normal(x0_batch.shape).astype(x0_batch.dtype)
    ab = sched.alpha_bar[steps - 1].astype(x0_batch.dtype)
    x_s = (
        np.sqrt(ab)[:, None, None, None] * x0_batch
        + np.sqrt(1.0 - ab)[:, None, None, None] * eps
    )
    pred, cache = net.forward_cached(params, x_s, steps)
    resid = pred - eps
    loss = float(np.mean(resid.astype(np.float64) ** 2))
    if not np.isfinite(loss):
        raise NumericError("training loss is non-finite")
    upstream = (2.0 / resid.size) * resid
    grads = net.backward_cached(params, cache, upstream.astype(x0_batch.dtype))
    return loss, grads


def _step_noise(
    shape, rng: Optional[np.random.Generator], z: Optional[np.ndarray]
) -> np.ndarray:
    if z is not None:
        return z
    if rng is None:
        raise ValidationError("reverse step needs either an rng or an explicit z")
    return rng.standard_normal(shape)


def reverse_step(
    x_s: np.ndarray,
    s: int,
    denoise: DenoiseFn,
    sched: NoiseSchedule,
    rng: Optional[np.random.Generator] = None,
    z: Optional[np.ndarray] = None,
) -> np.ndarray:
    """x_{s-1} = alpha_s^{-1/2} (x_s - gamma_s eps_theta(x_s, s)) + sigma_s z."""
    if not 1 <= s <= sched.n_steps:
        raise ValidationError(f"step {s} outside [1, {sched.n_steps}]")
    eps_hat = denoise(x_s, s)
    mean = (x_s - sched.gamma[s - 1] * eps_hat) / np.sqrt(sched.alpha[s - 1])
    return mean + sched.sigma[s - 1] * _step_noise(x_s.shape, rng, z)


def guided_reverse_step(
    x_s: np.ndarray,
    s: int,
    denoise: DenoiseFn,
    sched: NoiseSchedule,
    constraint: ConstraintConfig,
    rng: Optional[np.random.Generator] = None,
    z: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Reverse step minus kappa(s) * grad C evaluated at the noisy state x_s."""
    if not 1 <= s <= sched.n_steps:
        raise ValidationError(f"step {s} outside [1, {sched.n_steps}]")
    eps_hat = denoise(x_s, s)
    mean = (x_s - sched.gamma[s - 1] * eps_hat) / np.sqrt(sched.alpha[s - 1])
    mean = mean - kappa(s, sched.n_steps, constraint) * constraint_gradient(x_s, constraint)
    return mean + sched.sigma[s - 1] * _step_noise(x_s.shape, rng, z)


@dataclass
class SampleTrace:
    """Per-step ensemble diagnostics recorded at the pre-step state x_s."""

    steps: np.ndarray             # chain index s, descending from S to 1
    kappa: np.ndarray             # guidance strength used (0 when unconstrained)
    constraint_value: np.ndarray  # ensemble mean of C(x_s)
    mean_dev_norm: np.ndarray     # ensemble mean of sqrt(C(x_s))

    def value_at(self, s: int) -> float:
        idx = np.nonzero(self.steps == s)[0]
        if idx.size != 1:
            raise ValidationError(f"step {s} not in trace")
        return float(self.constraint_value[idx[0]])


def sample(
    denoise: DenoiseFn,
    sched: NoiseSchedule,
    grid_dims: tuple[int, int, int],
    padded_dims: tuple[int, int],
    stats: NormStats,
    constraint: Optional[ConstraintConfig] = None,
    n: int = 1,
    seed: int = 0,
    trace: bool = False,
    walls: str = "latitude",
) -> tuple[list[OceanState], Optional[SampleTrace]]:
    """Draw n states from noise: reverse diffusion at the padded resolution,
    crop, fix wall rows, and denormalize.

    Each sample uses its own counter-derived stream, so results do not depend
    on how the batch is grouped.
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    z_lev, w, h = grid_dims
    pw, ph = padded_dims
    c = 2 * z_lev
    if constraint is not None and constraint.mu.size != c:
        raise ValidationError(f"constraint mu has length {constraint.mu.size}, need {c}")
    rngs = [np.random.default_rng([seed, i]) for i in range(n)]
    x = np.stack([r.standard_normal((c, pw, ph)) for r in rngs])

    n_steps = sched.n_steps
    rec_steps = np.arange(n_steps, 0, -1)
    rec_kappa = np.zeros(n_steps)
    rec_c = np.zeros(n_steps)
    rec_norm = np.zeros(n_steps)

    for idx, s in enumerate(range(n_steps, 0, -1)):
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite sample tensor at step s={s}")
        if trace:
            cvals = constraint_value(x, constraint) if constraint is not None else (
                constraint_value(x, ConstraintConfig.zeros(c))
            )
            rec_c[idx] = float(np.mean(cvals))
            rec_norm[idx] = float(np.mean(np.sqrt(cvals)))
            rec_kappa[idx] = kappa(s, n_steps, constraint) if constraint is not None else 0.0
        z = np.stack([r.standard_normal((c, pw, ph)) for r in rngs])
        if constraint is not None:
            x = guided_reverse_step(x, s, denoise, sched, constraint, rng=None, z=z)
        else:
            x = reverse_step(x, s, denoise, sched, rng=None, z=z)
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite sample tensor after final step")

    x = crop_channels(x, w, h)
    states = []
    for i in range(n):
        normalized = channels_to_state(x[i], normalized=True)
        fixed = boundary_fixup(normalized, walls=walls)
        states.append(denormalize_state(fixed, stats))
    out_trace = (
        SampleTrace(steps=rec_steps, kappa=rec_kappa, constraint_value=rec_c, mean_dev_norm=rec_norm)
        if trace
        else None
    )
    return states, out_trace
