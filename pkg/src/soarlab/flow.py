"""Rectified-flow core: noise schedule, linear interpolation path, ground-truth
velocity, clean-endpoint map, noise weighting, and the base flow-matching loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics
from .errors import ContractViolation, DomainError

SIGMA_MIN = 1e-3  # operations dividing by sigma reject anything smaller


@dataclass(frozen=True)
class NoiseSchedule:
    """Monotone map t -> sigma on [0,1] with sigma(0)=0 and sigma(1)=1.

    kind "identity": sigma = t. kind "shifted": sigma = shift*t / (1+(shift-1)*t),
    the timestep-shifting family used by large-resolution systems.
    """

    kind: str = "identity"
    shift: float = 1.0

    def __post_init__(self):
        if self.kind not in ("identity", "shifted"):
            raise ContractViolation(f"unknown schedule kind {self.kind!r}")
        if self.kind == "shifted" and self.shift <= 0:
            raise ContractViolation("shift must be positive")


IDENTITY_SCHEDULE = NoiseSchedule("identity")


def sigma_of_t(schedule: NoiseSchedule, t: float) -> float:
    if t < -1e-12 or t > 1 + 1e-12:
        raise ContractViolation(f"t={t} outside [0, 1]")
    t = min(max(float(t), 0.0), 1.0)
    if schedule.kind == "identity":
        return t
    s = schedule.shift
    return s * t / (1.0 + (s - 1.0) * t)


def t_of_sigma(schedule: NoiseSchedule, sigma: float) -> float:
    """Inverse of sigma_of_t (exact for both kinds)."""
    if sigma < -1e-12 or sigma > 1 + 1e-12:
        raise ContractViolation(f"sigma={sigma} outside [0, 1]")
    sigma = min(max(float(sigma), 0.0), 1.0)
    if schedule.kind == "identity":
        return sigma
    s = schedule.shift
    return sigma / (s - (s - 1.0) * sigma)


@dataclass(frozen=True)
class LossWeighting:
    """Noise-dependent loss weight w(sigma).

    "uniform" (w=1) is the neutral default; "sigma-squared" (w=sigma^2) makes
    the velocity loss coincide with the squared clean-endpoint error.
    """

    kind: str = "uniform"

    def __post_init__(self):
        if self.kind not in ("uniform", "sigma-squared"):
            raise ContractViolation(f"unknown weighting kind {self.kind!r}")

    def weight(self, sigma) -> np.ndarray | float:
        if self.kind == "uniform":
            return np.ones_like(np.asarray(sigma, dtype=np.float64)) if np.ndim(sigma) else 1.0
        return np.asarray(sigma, dtype=np.float64) ** 2 if np.ndim(sigma) else float(sigma) ** 2


UNIFORM_WEIGHTING = LossWeighting("uniform")


def interpolate(z0, z1, sigma: float) -> np.ndarray:
    """(1 - sigma) * z0 + sigma * z1."""
    a = numerics.as_vector(z0)
    b = numerics.as_vector(z1, a.shape[0])
    if sigma < 0.0 or sigma > 1.0:
        raise ContractViolation(f"sigma={sigma} outside [0, 1]")
    return (1.0 - sigma) * a + sigma * b


def gt_velocity(z0, z1) -> np.ndarray:
    """Constant velocity of the straight ray from z0 to z1."""
    a = numerics.as_vector(z0)
    b = numerics.as_vector(z1, a.shape[0])
    return b - a


def clean_endpoint(z, sigma: float, v) -> np.ndarray:
    """Implied clean endpoint z - sigma * v of a state moving with velocity v."""
    if sigma <= 0.0:
        raise DomainError(f"clean_endpoint requires sigma > 0, got {sigma}")
    zv = numerics.as_vector(z)
    vv = numerics.as_vector(v, zv.shape[0])
    return zv - sigma * vv


@dataclass
class RaySample:
    """One supervised point on a transport ray.

    Invariant: z_t == (1 - sigma_t0) * z0 + sigma_t0 * z1 exactly.
    """

    z0: np.ndarray
    z1: np.ndarray
    cond: int | None
    t0: float
    sigma_t0: float
    z_t: np.ndarray


def make_ray_sample(z0, z1, cond, t0: float, schedule: NoiseSchedule = IDENTITY_SCHEDULE) -> RaySample:
    s = sigma_of_t(schedule, t0)
    return RaySample(
        z0=numerics.as_vector(z0),
        z1=numerics.as_vector(z1),
        cond=cond,
        t0=float(t0),
        sigma_t0=s,
        z_t=interpolate(z0, z1, s),
    )


def fm_loss_term(model, sample: RaySample, weighting: LossWeighting = UNIFORM_WEIGHTING):
    """Weighted flow-matching term for one ray sample.

    loss = w(sigma) * mean_dims ||v(z_t, c, sigma_t0) - (z1 - z0)||^2, with the
    gradient flowing only through the model prediction. Returns (loss, GradSet).
    """
    w = float(weighting.weight(sample.sigma_t0))
    pred, cache = numerics.forward_cached(model, sample.z_t, sample.cond, sample.sigma_t0)
    resid = pred - gt_velocity(sample.z0, sample.z1)
    d = resid.shape[0]
    loss = w * float(np.mean(resid**2))
    out_grad = (2.0 * w / d) * resid
    grads = numerics.backward(model, cache, out_grad)
    return loss, grads
