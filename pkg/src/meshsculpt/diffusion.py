"""Noise schedule, masked forward diffusion, and masked ancestral sampling.

The forward process only ever touches masked vertices; unmasked vertices
(including anchors) ride along untouched. The reverse sampler re-imposes
the conditioned values after every step, which is what makes the
localization guarantee exact rather than statistical.

Timesteps are 1-based: t ranges over [1, T] and indexes beta[t-1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, TopologyMismatch
from .mesh import MeshSample, RegionMask


@dataclass
class NoiseSchedule:
    """Variance schedule: beta_t, alpha_t = 1 - beta_t, and their running product."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        if self.T < 1 or len(self.beta) != self.T:
            raise ConfigError("schedule length mismatch")

    def sqrt_alpha_bar(self, t):
        return np.sqrt(self.alpha_bar[np.asarray(t) - 1])

    def sqrt_one_minus_alpha_bar(self, t):
        return np.sqrt(1.0 - self.alpha_bar[np.asarray(t) - 1])


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule; cumulative products taken in extended precision."""
    if T < 1:
        raise ConfigError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha.astype(np.longdouble)).astype(np.float64)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _check_t(schedule: NoiseSchedule, t: int) -> None:
    if not 1 <= t <= schedule.T:
        raise ConfigError(f"t={t} outside [1, {schedule.T}]")


def _check_shapes(x: np.ndarray, mask: RegionMask, noise: np.ndarray) -> None:
    if x.shape != noise.shape:
        raise ConfigError("noise shape does not match mesh")
    if mask.flags.shape[0] != x.shape[0]:
        raise ConfigError("mask length does not match mesh")


def forward_step(
    x_prev: MeshSample, t: int, mask: RegionMask, schedule: NoiseSchedule, noise: np.ndarray
) -> MeshSample:
    """One Markov step: masked vertices get sqrt(1-beta_t)*x + sqrt(beta_t)*eps."""
    _check_t(schedule, t)
    x = x_prev.positions
    noise = np.asarray(noise, dtype=np.float64)
    _check_shapes(x, mask, noise)
    b = schedule.beta[t - 1]
    out = x.copy()
    m = mask.flags
    out[m] = np.sqrt(1.0 - b) * x[m] + np.sqrt(b) * noise[m]
    return MeshSample(out)


def closed_form_diffuse(
    x0: MeshSample, t: int, mask: RegionMask, schedule: NoiseSchedule, noise: np.ndarray
) -> MeshSample:
    """Jump straight to step t: masked vertices get sqrt(abar_t)*x0 + sqrt(1-abar_t)*eps."""
    _check_t(schedule, t)
    x = x0.positions
    noise = np.asarray(noise, dtype=np.float64)
    _check_shapes(x, mask, noise)
    ab = schedule.alpha_bar[t - 1]
    out = x.copy()
    m = mask.flags
    out[m] = np.sqrt(ab) * x[m] + np.sqrt(1.0 - ab) * noise[m]
    return MeshSample(out)


def diffuse_batch(
    x0: np.ndarray, t: np.ndarray, mask_flags: np.ndarray, schedule: NoiseSchedule, noise: np.ndarray
) -> np.ndarray:
    """Vectorized closed-form diffusion for training batches.

    x0, noise: (B, N, 3); t: (B,) ints in [1, T]; mask_flags: (B, N) bool.
    """
    ab = schedule.alpha_bar[t - 1][:, None, None]
    xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise
    m = mask_flags[:, :, None]
    return np.where(m, xt, x0)


def reverse_sample(
    condition: MeshSample,
    mask: RegionMask,
    denoise_fn,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    progress_cb=None,
    progress_every: int = 50,
) -> MeshSample:
    """Masked ancestral sampling conditioned on the unmasked vertices.

    Anchor targets (if any) are written into the condition mesh before
    sampling starts, so anchors are conditioning vertices like the rest of
    the unmasked set. ``denoise_fn(x, t, flags) -> eps_hat`` predicts the
    noise. After every posterior step the unmasked vertices are overwritten
    with their conditioned values; the returned mesh is bit-identical to
    the (anchor-displaced) condition outside the mask.
    """
    cond = condition.positions.copy()
    for v, target in mask.anchors.items():
        if target is not None:
            cond[v] = target
    out = _reverse_batch(
        cond[None], mask.flags[None], denoise_fn, schedule, rng,
        progress_cb=progress_cb, progress_every=progress_every,
    )[0]
    return MeshSample(out)


def _reverse_batch(
    cond: np.ndarray,
    mask_flags: np.ndarray,
    denoise_fn,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    progress_cb=None,
    progress_every: int = 50,
) -> np.ndarray:
    """Batched sampler core; cond (B, N, 3), mask_flags (B, N).

    ``denoise_fn`` receives (B, N, 3) float32, t ints (B,), flags (B, N).
    """
    B, N, _ = cond.shape
    if mask_flags.shape != (B, N):
        raise TopologyMismatch("mask does not match the condition mesh")
    if not mask_flags.any():
        return cond.copy()

    T = schedule.T
    m3 = mask_flags[:, :, None]
    x = np.where(m3, rng.standard_normal(cond.shape), cond)
    steps_done = 0
    for t in range(T, 0, -1):
        eps = np.asarray(denoise_fn(x.astype(np.float32), np.full(B, t), mask_flags),
                         dtype=np.float64)
        b = schedule.beta[t - 1]
        a = schedule.alpha[t - 1]
        ab = schedule.alpha_bar[t - 1]
        mean = (x - (b / np.sqrt(1.0 - ab)) * eps) / np.sqrt(a)
        if t > 1:
            x = mean + np.sqrt(b) * rng.standard_normal(cond.shape)
        else:
            x = mean  # final step emits the posterior mean, no added noise
        x = np.where(m3, x, cond)
        steps_done += 1
        if progress_cb is not None and (steps_done % progress_every == 0) and steps_done < T:
            progress_cb(T - steps_done, steps_done / T)
    if progress_cb is not None:
        progress_cb(0, 1.0)
    return x
