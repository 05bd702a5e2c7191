"""Score distillation, per-field regularizers, and the analytic mock denoiser."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import diff as D


class DegenerateTimestepError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    acc: float = 0.01
    empty: float = 0.05
    rec: float = 0.05
    empty_margin: float = 0.1
    soft_bin_temperature: float = 0.01
    soft_bin_eps: float = 1e-7

    def __post_init__(self):
        for name in ("acc", "empty", "rec", "empty_margin", "soft_bin_temperature", "soft_bin_eps"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance-preserving cosine schedule: ``alpha = cos(pi t / 2)``, ``sigma = sin(pi t / 2)``."""

    t_min: float = 0.02
    t_max: float = 0.98

    def alpha(self, t):
        return np.cos(0.5 * np.pi * np.asarray(t, dtype=np.float64))

    def sigma(self, t):
        return np.sin(0.5 * np.pi * np.asarray(t, dtype=np.float64))

    def weight(self, t):
        """SDS weighting ``w(t) = sigma_t^2``."""
        return self.sigma(t) ** 2

    def sample_t(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.t_min, self.t_max))


class GuidanceProvider(Protocol):
    def denoise(self, z_t: np.ndarray, t: float, prompt, cfg: float) -> np.ndarray: ...

    def score(self, image: np.ndarray, text) -> float: ...


def mock_denoise(z_t, t: float, target, schedule: NoiseSchedule = NoiseSchedule(), cfg: float = 0.0):
    """Exact noise prediction for a world whose only clean image is ``target``.

    ``eps_c = (z_t - alpha_t target) / sigma_t``.  With ``cfg > 0`` the
    unconditional prediction uses the per-channel mean of ``target`` as its
    clean image and the two are blended as ``eps_c + cfg (eps_c - eps_u)``.
    """
    a, s = float(schedule.alpha(t)), float(schedule.sigma(t))
    if s < 1e-6:
        raise DegenerateTimestepError(f"sigma_t={s:.3g} too small at t={t}")
    z_t = np.asarray(z_t, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    eps_c = (z_t - a * target) / s
    if cfg == 0.0:
        return eps_c
    uncond = np.broadcast_to(target.reshape(-1, target.shape[-1]).mean(axis=0), target.shape)
    eps_u = (z_t - a * uncond) / s
    return eps_c + cfg * (eps_c - eps_u)


class MockGuidance:
    """Guidance provider backed by :func:`mock_denoise`.

    The "prompt" it receives is the clean target image for the current view;
    :meth:`condition` builds that image from ``target`` (an array, or a callable
    taking the :class:`View` being rendered).
    """

    def __init__(self, target, schedule: NoiseSchedule = NoiseSchedule(), cfg: float = 0.0):
        self.target = target
        self.schedule = schedule
        self.cfg = cfg

    def condition(self, prompt, view) -> np.ndarray:
        if callable(self.target):
            return np.asarray(self.target(view), dtype=np.float64)
        return np.asarray(self.target, dtype=np.float64)

    def denoise(self, z_t, t, prompt, cfg=None):
        return mock_denoise(z_t, t, prompt, self.schedule, self.cfg if cfg is None else cfg)

    def score(self, image, text) -> float:
        """``100 x`` cosine similarity between the image and a target image."""
        a = np.asarray(image, dtype=np.float64).ravel()
        b = np.asarray(text, dtype=np.float64).ravel()
        return float(100.0 * a @ b / max(np.linalg.norm(a) * np.linalg.norm(b), 1e-12))


def sds_pixel_gradient(x, prompt, provider, schedule: NoiseSchedule, rng: np.random.Generator,
                       cfg: float | None = None):
    """Image-space SDS gradient ``w(t) (eps_hat(z_t; y, t) - eps)``.

    ``t`` is drawn first, then ``eps``.  Returns ``(grad, t)``; the caller
    injects ``grad`` as the upstream gradient of the rendered image.

    ``eps`` is replaced by the noise actually present in the rounded ``z_t``,
    ``(z_t - alpha x) / sigma``, so a denoiser that recovers ``x`` exactly gives
    a gradient of exactly zero.
    """
    x = np.asarray(x, dtype=np.float64)
    t = schedule.sample_t(rng)
    a, s = schedule.alpha(t), schedule.sigma(t)
    z_t = a * x + s * rng.standard_normal(x.shape)
    eps = (z_t - a * x) / s
    eps_hat = np.asarray(provider.denoise(z_t, t, prompt, cfg), dtype=np.float64)
    if eps_hat.shape != x.shape:
        raise D.ContractError(f"guidance returned shape {eps_hat.shape}, expected {x.shape}")
    return schedule.weight(t) * (eps_hat - eps), t


def soft_binarize(alpha, temperature: float = 0.01, eps: float = 1e-7):
    """Scaled sigmoid around 0.5 followed by per-image min-max normalization."""
    b = D.sigmoid(D.div(D.sub(alpha, 0.5), temperature))
    lo = D.amin(b, axis=(-1, -2), keepdims=True)
    hi = D.amax(b, axis=(-1, -2), keepdims=True)
    return D.div(D.sub(b, lo), D.add(D.sub(hi, lo), eps))


def empty_loss(alpha, weights: LossWeights = LossWeights()):
    """Hinge on the soft-binarized coverage of one field's alpha map (unweighted).

    A constant map normalizes to all zeros, so it is charged the full margin
    even when fully opaque.
    """
    cover = D.mean(soft_binarize(alpha, weights.soft_bin_temperature, weights.soft_bin_eps), axis=(-1, -2))
    return D.maximum(D.sub(weights.empty_margin, cover), 0.0)


def acc_loss(alpha, weight: float = LossWeights.acc):
    """``weight * mean(alpha (1 - alpha))``: pushes accumulated alpha to 0 or 1."""
    return D.mul(weight, D.mean(D.mul(alpha, D.sub(1.0, alpha))))


def recon_loss(rgb, target, weight: float = LossWeights.rec):
    """``weight * MSE`` over pixels and channels."""
    if np.shape(D.value_of(rgb)) != np.shape(D.value_of(target)):
        raise D.ContractError(
            f"reconstruction shapes differ: {np.shape(D.value_of(rgb))} vs {np.shape(D.value_of(target))}"
        )
    d = D.sub(rgb, target)
    return D.mul(weight, D.mean(D.mul(d, d)))
