"""Inference-time rollout machinery: CFG velocity combination, Euler ODE and
stochastic one-step updates, full rollouts with trajectory recording.

Velocity sources are either a numerics.VelocityModel or any callable
(z, cond, sigma) -> velocity (used for analytic oracles in the diagnostics).
All CFG outputs are constants with respect to model parameters: nothing here
records activations, so no gradient can flow through a rollout.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import numerics
from .errors import ContractViolation, DomainError
from .flow import IDENTITY_SCHEDULE, SIGMA_MIN, NoiseSchedule, sigma_of_t


@dataclass(frozen=True)
class CfgParams:
    """Classifier-free guidance scale; 1.0 collapses to the conditional branch."""

    scale: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale < 0:
            raise ContractViolation(f"cfg scale must be finite and >= 0, got {self.scale}")


@dataclass(frozen=True)
class SdeParams:
    """Noise scale of the stochastic one-step operator; 0 recovers the ODE step."""

    eta: float

    def __post_init__(self):
        if not (0.0 <= self.eta <= 1.0):
            raise ContractViolation(f"eta must be in [0, 1], got {self.eta}")


@dataclass
class Trajectory:
    """Recorded rollout: (t, sigma, state) triples with t strictly decreasing 1 -> 0."""

    times: list
    sigmas: list
    states: list
    cond: int | None
    steps: int


def _predict(model, z, cond, sigma):
    if isinstance(model, numerics.VelocityModel):
        return numerics.forward(model, z, cond, sigma)
    return np.asarray(model(z, cond, sigma), dtype=np.float64)


def cfg_velocity(model, z, cond, sigma, cfg: CfgParams) -> np.ndarray:
    """v_uncond + scale * (v_cond - v_uncond), detached from parameters.

    cond must be a real condition id; the unconditional branch uses the null
    condition row.
    """
    if cond is None or cond == numerics.NULL_COND:
        raise ContractViolation("cfg_velocity requires a real condition id")
    v_cond = _predict(model, z, cond, sigma)
    if cfg.scale == 1.0:
        return v_cond
    v_uncond = _predict(model, z, None, sigma)
    return v_uncond + cfg.scale * (v_cond - v_uncond)


def euler_step(z, v, sigma_from: float, sigma_to: float) -> np.ndarray:
    """z + (sigma_to - sigma_from) * v."""
    zv = numerics.as_vector(z)
    vv = numerics.as_vector(v, zv.shape[0])
    return zv + (sigma_to - sigma_from) * vv


def sde_step(z, v, sigma_from: float, sigma_to: float, sde: SdeParams, rng: numerics.Rng) -> np.ndarray:
    """Stochastic one-step update that keeps the implied (data, noise) split.

    Decomposes the state into its implied endpoints z0_hat = z - sigma_from*v
    and z1_hat = z + (1-sigma_from)*v, partially resamples the noise endpoint
    with scale eta, and re-interpolates at sigma_to. eta=0 collapses exactly
    to euler_step; eta=1 fully replaces the implied noise. This concretization
    is one interpretation of coefficient-preserving stochastic sampling.
    """
    if sigma_from <= SIGMA_MIN:
        raise DomainError(f"sde_step requires sigma_from > {SIGMA_MIN}, got {sigma_from}")
    if sigma_to < 0.0:
        raise DomainError(f"sde_step requires sigma_to >= 0, got {sigma_to}")
    zv = numerics.as_vector(z)
    vv = numerics.as_vector(v, zv.shape[0])
    z0_hat = zv - sigma_from * vv
    z1_hat = zv + (1.0 - sigma_from) * vv
    if sde.eta == 0.0:
        return (1.0 - sigma_to) * z0_hat + sigma_to * z1_hat
    eps = numerics.gaussian(rng, zv.shape[0])
    mixed = np.sqrt(1.0 - sde.eta**2) * z1_hat + sde.eta * eps
    return (1.0 - sigma_to) * z0_hat + sigma_to * mixed


def time_grid(K: int) -> np.ndarray:
    """Uniform t grid from 1 down to 0 inclusive, K steps; endpoints exact."""
    if K < 1:
        raise ContractViolation(f"K must be >= 1, got {K}")
    ts = (K - np.arange(K + 1)) / K
    ts[0] = 1.0
    ts[-1] = 0.0
    return ts


def rollout(
    model,
    z1,
    cond,
    K: int,
    cfg: CfgParams = CfgParams(1.0),
    schedule: NoiseSchedule = IDENTITY_SCHEDULE,
    sde: SdeParams | None = None,
    rng: numerics.Rng | None = None,
) -> Trajectory:
    """Integrate the velocity field from pure noise (t=1) down to t=0.

    Uses Euler steps, or the stochastic one-step operator when sde is given
    (each draw from the caller's rng substream). Records every intermediate
    state.
    """
    if sde is not None and sde.eta > 0.0 and rng is None:
        raise ContractViolation("stochastic rollout needs an rng")
    z = numerics.as_vector(z1)
    ts = time_grid(K)
    sigmas = [sigma_of_t(schedule, t) for t in ts]
    states = [z.copy()]
    for k in range(K):
        if cond is None or cond == numerics.NULL_COND:
            v = _predict(model, z, None, sigmas[k])
        else:
            v = cfg_velocity(model, z, cond, sigmas[k], cfg)
        if sde is None:
            z = euler_step(z, v, sigmas[k], sigmas[k + 1])
        else:
            z = sde_step(z, v, sigmas[k], sigmas[k + 1], sde, rng)
        states.append(z.copy())
    return Trajectory(times=list(ts), sigmas=sigmas, states=states, cond=cond, steps=K)


def rollout_states(
    model,
    z1_batch,
    conds,
    K: int,
    cfg: CfgParams = CfgParams(1.0),
    schedule: NoiseSchedule = IDENTITY_SCHEDULE,
) -> np.ndarray:
    """Batched deterministic rollout; returns states with shape (K+1, n, dim).

    Row i follows exactly the trajectory rollout() would produce for
    (z1_batch[i], conds[i]); rows are independent.
    """
    Z = np.asarray(z1_batch, dtype=np.float64)
    if Z.ndim != 2:
        raise ContractViolation("z1_batch must be (n, dim)")
    n = Z.shape[0]
    conds = np.asarray(conds, dtype=np.int64)
    if conds.shape != (n,):
        raise ContractViolation("conds must be one id per row")
    ts = time_grid(K)
    sigmas = [sigma_of_t(schedule, t) for t in ts]
    out = np.empty((K + 1, n, Z.shape[1]))
    out[0] = Z
    z = Z.copy()
    for k in range(K):
        s_vec = np.full(n, sigmas[k])
        if isinstance(model, numerics.VelocityModel):
            v_cond, _ = numerics.forward_batch(model, z, conds, s_vec)
            if cfg.scale == 1.0:
                v = v_cond
            else:
                null = np.full(n, numerics.NULL_COND)
                v_unc, _ = numerics.forward_batch(model, z, null, s_vec)
                v = v_unc + cfg.scale * (v_cond - v_unc)
        else:
            v = np.stack(
                [
                    cfg_velocity(model, z[i], int(conds[i]), sigmas[k], cfg)
                    if conds[i] != numerics.NULL_COND
                    else _predict(model, z[i], None, sigmas[k])
                    for i in range(n)
                ]
            )
        z = z + (sigmas[k + 1] - sigmas[k]) * v
        out[k + 1] = z
    return out


def dump_trajectory_csv(path, trajectories) -> None:
    """Write trajectories as CSV: step_index, t, sigma, then latent coordinates."""
    trajs = [trajectories] if isinstance(trajectories, Trajectory) else list(trajectories)
    dim = trajs[0].states[0].shape[0]
    header = ["trajectory", "step_index", "t", "sigma"] + [f"x{i}" for i in range(dim)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for j, traj in enumerate(trajs):
            for k, (t, s, state) in enumerate(zip(traj.times, traj.sigmas, traj.states)):
                writer.writerow([j, k, repr(float(t)), repr(float(s))] + [repr(float(x)) for x in state])
