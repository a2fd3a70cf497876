"""The trajectory-correction objective: off-trajectory state construction via a
one-step stop-gradient rollout, same-noise re-noising, the closed-form
goal-consistency correction target, and the combined training step with
count-normalized loss aggregation.

The training step is organized around "supervised items": (state, condition,
time, target, weight) tuples built once per step with all rollout quantities
detached. The loss is a plain weighted regression over those items, so the
gradient provably contains no path through the rollout velocity.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics
from .errors import ContractViolation, DomainError
from .flow import (
    IDENTITY_SCHEDULE,
    UNIFORM_WEIGHTING,
    LossWeighting,
    NoiseSchedule,
    interpolate,
    sigma_of_t,
)
from .sampler import CfgParams, SdeParams, cfg_velocity, euler_step, sde_step

RENOISE_MODES = ("shared-z1", "fresh-z1")
T0_SAMPLING_MODES = ("uniform-0-1", "uniform-1overK-1")


@dataclass(frozen=True)
class SoarConfig:
    """Method hyperparameters.

    K: rollout step count (the one-step rollout spans 1/K in t).
    N: auxiliary re-noised points per branch; 0 disables the correction loss.
    M: branch count; 1 keeps only the deterministic ODE branch.
    lam: correction-loss weight; 0 reduces the step to plain flow matching.
    w_cfg: guidance scale of the stop-gradient rollout velocity.
    eta: noise scale of the stochastic branches (used when M > 1).
    renoise_mode: "shared-z1" reuses the base-loss noise endpoint,
        "fresh-z1" draws a new one per auxiliary point (ablation arm).
    sigma_min: validity floor for noise levels that end up in a denominator.
    t0_sampling: "uniform-1overK-1" keeps the rollout nondegenerate;
        "uniform-0-1" also exercises the t1 = 0 clamp.
    cond_dropout: probability of feeding the null condition to each
        supervised item's forward pass (keeps the unconditional branch trained).
    """

    K: int = 10
    N: int = 4
    M: int = 1
    lam: float = 1.0
    w_cfg: float = 1.0
    eta: float = 0.5
    renoise_mode: str = "shared-z1"
    sigma_min: float = 1e-3
    t0_sampling: str = "uniform-1overK-1"
    cond_dropout: float = 0.1

    def __post_init__(self):
        if self.K < 1:
            raise ContractViolation(f"K must be >= 1, got {self.K}")
        if self.N < 0:
            raise ContractViolation(f"N must be >= 0, got {self.N}")
        if self.M < 1:
            raise ContractViolation(f"M must be >= 1, got {self.M}")
        if self.lam < 0:
            raise ContractViolation(f"lambda must be >= 0, got {self.lam}")
        if not (0.0 <= self.eta <= 1.0):
            raise ContractViolation(f"eta must be in [0, 1], got {self.eta}")
        if self.renoise_mode not in RENOISE_MODES:
            raise ContractViolation(f"renoise_mode must be one of {RENOISE_MODES}")
        if not (0.0 < self.sigma_min < 0.1):
            raise ContractViolation(f"sigma_min must be in (0, 0.1), got {self.sigma_min}")
        if self.t0_sampling not in T0_SAMPLING_MODES:
            raise ContractViolation(f"t0_sampling must be one of {T0_SAMPLING_MODES}")
        if not (0.0 <= self.cond_dropout <= 1.0):
            raise ContractViolation("cond_dropout must be in [0, 1]")


@dataclass
class OffTrajectoryState:
    """A re-noised off-trajectory state plus everything needed to supervise it."""

    z_aux: np.ndarray
    sigma_aux: float
    branch: int
    alpha: float
    z0: np.ndarray
    z1: np.ndarray
    cond: int | None
    valid: bool
    z1_used: np.ndarray  # endpoint actually mixed in (== z1 in shared mode)


@dataclass
class LossBreakdown:
    """Base/correction loss sums with the supervised-item counts used to normalize."""

    loss_base_sum: float = 0.0
    loss_corr_sum: float = 0.0
    count_B: int = 0
    count_P: int = 0
    lam: float = 0.0

    @property
    def normalized_total(self) -> float:
        denom = self.count_B + self.lam * self.count_P
        if denom <= 0:
            return 0.0
        return (self.loss_base_sum + self.lam * self.loss_corr_sum) / denom


def one_step_rollout(
    model,
    z_t0,
    cond,
    t0: float,
    config: SoarConfig,
    schedule: NoiseSchedule = IDENTITY_SCHEDULE,
    rollout_velocity=None,
):
    """One detached guided Euler step from the on-trajectory state.

    Returns (z_hat_t1, t1, sigma_t1) with t1 = max(t0 - 1/K, 0). The velocity
    is a constant with respect to parameters (stop-gradient contract);
    rollout_velocity, when given, replaces the CFG evaluation and must be a
    callable (z, cond, sigma) -> velocity.
    """
    if not (0.0 < t0 <= 1.0):
        raise ContractViolation(f"t0 must be in (0, 1], got {t0}")
    if cond is None or cond == numerics.NULL_COND:
        raise ContractViolation("one_step_rollout requires a real condition id")
    s0 = sigma_of_t(schedule, t0)
    if rollout_velocity is None:
        v = cfg_velocity(model, z_t0, cond, s0, CfgParams(config.w_cfg))
    else:
        v = np.asarray(rollout_velocity(z_t0, cond, s0), dtype=np.float64)
    t1 = max(t0 - 1.0 / config.K, 0.0)
    s1 = sigma_of_t(schedule, t1)
    return euler_step(z_t0, v, s0, s1), t1, s1


def deviation(z_hat_t1, z0, z1, sigma_t1: float) -> np.ndarray:
    """Gap between the rolled-out state and the ideal state on the original ray."""
    zh = numerics.as_vector(z_hat_t1)
    ideal = interpolate(z0, z1, sigma_t1)
    if ideal.shape != zh.shape:
        raise ContractViolation("dimension mismatch")
    return zh - ideal


def renoise(
    z_hat_t1,
    z1,
    sigma_t1: float,
    sigma_aux: float,
    mode: str,
    rng: numerics.Rng | None = None,
    *,
    sigma_min: float = 1e-3,
    z0=None,
    cond=None,
    branch: int = 0,
) -> OffTrajectoryState:
    """Interpolate the off-trajectory state back toward a noise endpoint.

    alpha = (sigma_aux - sigma_t1) / (1 - sigma_t1). Shared mode mixes with the
    caller's z1 (the same endpoint the ray was built from); fresh mode draws a
    new Gaussian endpoint. States below sigma_min, or with sigma_t1 == 1, are
    marked invalid and carry no supervision.
    """
    if mode not in RENOISE_MODES:
        raise ContractViolation(f"unknown renoise mode {mode!r}")
    zh = numerics.as_vector(z_hat_t1)
    z1v = numerics.as_vector(z1, zh.shape[0])
    if sigma_t1 >= 1.0:
        return OffTrajectoryState(
            z_aux=zh.copy(), sigma_aux=float(sigma_aux), branch=branch, alpha=0.0,
            z0=z0, z1=z1v, cond=cond, valid=False, z1_used=z1v,
        )
    if not (sigma_t1 <= sigma_aux <= 1.0 + 1e-12):
        raise ContractViolation(
            f"sigma_aux={sigma_aux} outside [sigma_t1={sigma_t1}, 1]"
        )
    sigma_aux = min(float(sigma_aux), 1.0)
    alpha = (sigma_aux - sigma_t1) / (1.0 - sigma_t1)
    if mode == "shared-z1":
        endpoint = z1v
    else:
        if rng is None:
            raise ContractViolation("fresh-z1 renoising needs an rng")
        endpoint = numerics.gaussian(rng, zh.shape[0])
    z_aux = (1.0 - alpha) * zh + alpha * endpoint
    return OffTrajectoryState(
        z_aux=z_aux,
        sigma_aux=sigma_aux,
        branch=branch,
        alpha=alpha,
        z0=z0,
        z1=z1v,
        cond=cond,
        valid=sigma_aux >= sigma_min,
        z1_used=endpoint,
    )


def correction_target(z_aux, z0, sigma_aux: float, *, sigma_min: float = 1e-3) -> np.ndarray:
    """(z_aux - z0) / sigma_aux: the velocity that lands exactly on z0.

    For an on-ray state this is exactly the ground-truth ray velocity, so the
    correction loss generalizes the base flow-matching loss.
    """
    if sigma_aux < sigma_min:
        raise DomainError(f"correction target undefined below sigma_min={sigma_min}")
    za = numerics.as_vector(z_aux)
    z0v = numerics.as_vector(z0, za.shape[0])
    return (za - z0v) / sigma_aux


def corr_loss_term(
    model,
    state: OffTrajectoryState,
    weighting: LossWeighting = UNIFORM_WEIGHTING,
):
    """Weighted correction term for one auxiliary state: returns (loss, GradSet).

    Invalid states contribute nothing (returns (0.0, zero grads)); gradient
    flows only through the model's prediction at the auxiliary state.
    """
    if not state.valid:
        return 0.0, numerics.zero_grads(model.params)
    target = correction_target(state.z_aux, state.z0, state.sigma_aux)
    w = float(weighting.weight(state.sigma_aux))
    pred, cache = numerics.forward_cached(model, state.z_aux, state.cond, state.sigma_aux)
    resid = pred - target
    d = resid.shape[0]
    loss = w * float(np.mean(resid**2))
    grads = numerics.backward(model, cache, (2.0 * w / d) * resid)
    return loss, grads


# ---------------------------------------------------------------------------
# Training step
# ---------------------------------------------------------------------------


@dataclass
class SupervisedItem:
    """One regression item: model prediction at (z, cond, sigma) pulled to target."""

    z: np.ndarray
    cond: int          # id fed to the forward pass (NULL_COND for dropout)
    sigma: float
    target: np.ndarray
    weight: float


@dataclass
class StepItems:
    """All supervised items of one training step; every target is detached."""

    base: list = field(default_factory=list)
    corr: list = field(default_factory=list)


def _sample_t0(r: numerics.Rng, config: SoarConfig) -> float:
    if config.t0_sampling == "uniform-0-1":
        # flipped so the draw lands in (0, 1]: t0 = 0 has no valid rollout
        return 1.0 - float(r.uniform(0.0, 1.0))
    return float(r.uniform(1.0 / config.K, 1.0))


def _batched_rollout_velocity(model, Z, conds, sigmas, w_cfg: float, rollout_velocity):
    """Detached guided velocities for a whole batch of on-trajectory states."""
    if rollout_velocity is not None:
        return np.stack(
            [
                np.asarray(rollout_velocity(Z[i], int(conds[i]), float(sigmas[i])), dtype=np.float64)
                for i in range(Z.shape[0])
            ]
        )
    if isinstance(model, numerics.VelocityModel):
        v_cond, _ = numerics.forward_batch(model, Z, conds, sigmas)
        if w_cfg == 1.0:
            return v_cond
        null = np.full(Z.shape[0], numerics.NULL_COND)
        v_unc, _ = numerics.forward_batch(model, Z, null, sigmas)
        return v_unc + w_cfg * (v_cond - v_unc)
    return np.stack(
        [
            cfg_velocity(model, Z[i], int(conds[i]), float(sigmas[i]), CfgParams(w_cfg))
            for i in range(Z.shape[0])
        ]
    )


def build_step_items(
    model,
    batch,
    config: SoarConfig,
    rng: numerics.Rng,
    *,
    weighting: LossWeighting = UNIFORM_WEIGHTING,
    schedule: NoiseSchedule = IDENTITY_SCHEDULE,
    rollout_velocity=None,
    index_offset: int = 0,
) -> StepItems:
    """Construct the step's supervised items for a batch of (z0, cond) pairs.

    Each batch element draws from its own substream labeled by its global
    index (index_offset + position), so any partition of a batch into shards
    reproduces the unsharded draws exactly. Per-element draw order: z1, t0,
    base dropout, then branch noise and per-auxiliary (sigma', fresh endpoint,
    dropout) draws. Batch elements are objects with .z0 and .cond attributes,
    or (z0, cond) tuples.
    """
    items = StepItems()
    aux_active = config.lam > 0.0 and config.N > 0

    # phase 1: on-trajectory states and base items (all per-item rng draws
    # that precede the rollout)
    per_item = []
    for pos, pair in enumerate(batch):
        z0, cond = (pair.z0, pair.cond) if hasattr(pair, "z0") else pair
        z0 = numerics.as_vector(z0)
        cond = int(cond)
        r = rng.split(f"item-{index_offset + pos}")
        z1 = numerics.gaussian(r, z0.shape[0])
        t0 = _sample_t0(r, config)
        s0 = sigma_of_t(schedule, t0)
        z_t = interpolate(z0, z1, s0)
        drop_base = float(r.uniform()) < config.cond_dropout
        items.base.append(
            SupervisedItem(
                z=z_t,
                cond=numerics.NULL_COND if drop_base else cond,
                sigma=s0,
                target=z1 - z0,
                weight=float(weighting.weight(s0)),
            )
        )
        per_item.append((r, z0, z1, cond, t0, s0, z_t))
    if not aux_active:
        return items

    # phase 2: one batched stop-gradient CFG evaluation for all rollouts
    Z = np.stack([it[6] for it in per_item])
    conds = np.array([it[3] for it in per_item], dtype=np.int64)
    sigmas = np.array([it[5] for it in per_item])
    v_rolls = _batched_rollout_velocity(
        model, Z, conds, sigmas, config.w_cfg, rollout_velocity
    )

    # phase 3: branches, re-noising, and correction items (resumes each
    # item's substream exactly where phase 1 left it)
    for (r, z0, z1, cond, t0, s0, z_t), v_roll in zip(per_item, v_rolls):
        t1 = max(t0 - 1.0 / config.K, 0.0)
        s1 = sigma_of_t(schedule, t1)
        endpoints = [euler_step(z_t, v_roll, s0, s1)]
        if config.M > 1 and t1 > 0.0:
            for _ in range(config.M - 1):
                endpoints.append(
                    sde_step(z_t, v_roll, s0, s1, SdeParams(config.eta), r)
                )
        for m, endpoint in enumerate(endpoints):
            for _ in range(config.N):
                s_aux = float(r.uniform(s1, 1.0))
                state = renoise(
                    endpoint, z1, s1, s_aux, config.renoise_mode, r,
                    sigma_min=config.sigma_min, z0=z0, cond=cond, branch=m,
                )
                drop_aux = float(r.uniform()) < config.cond_dropout
                if not state.valid:
                    continue
                target = correction_target(
                    state.z_aux, z0, state.sigma_aux, sigma_min=config.sigma_min
                )
                items.corr.append(
                    SupervisedItem(
                        z=state.z_aux,
                        cond=numerics.NULL_COND if drop_aux else cond,
                        sigma=state.sigma_aux,
                        target=target,
                        weight=float(weighting.weight(state.sigma_aux)),
                    )
                )
    return items


def _items_loss_and_grads(model, item_list):
    """Sum of per-item weighted losses and the matching gradient sum (batched)."""
    if not item_list:
        return 0.0, numerics.zero_grads(model.params)
    Z = np.stack([it.z for it in item_list])
    conds = np.array([it.cond for it in item_list], dtype=np.int64)
    sig = np.array([it.sigma for it in item_list])
    targets = np.stack([it.target for it in item_list])
    weights = np.array([it.weight for it in item_list])
    preds, cache = numerics.forward_batch(model, Z, conds, sig, want_cache=True)
    resid = preds - targets
    d = resid.shape[1]
    per_item = weights * np.mean(resid**2, axis=1)
    out_grad = (2.0 * weights[:, None] / d) * resid
    grads = numerics.backward_batch(model, cache, out_grad)
    return float(np.sum(per_item)), grads


def items_loss_value(model, items: StepItems, lam: float) -> float:
    """Normalized loss of frozen items under the current parameters.

    Recomputes only the model forwards; targets and states stay fixed. This is
    the scalar the training-step gradient differentiates, which makes it the
    right oracle for finite-difference checks.
    """
    base_sum = 0.0
    for it in items.base:
        resid = numerics.forward(model, it.z, None if it.cond == numerics.NULL_COND else it.cond, it.sigma) - it.target
        base_sum += it.weight * float(np.mean(resid**2))
    corr_sum = 0.0
    for it in items.corr:
        resid = numerics.forward(model, it.z, None if it.cond == numerics.NULL_COND else it.cond, it.sigma) - it.target
        corr_sum += it.weight * float(np.mean(resid**2))
    denom = len(items.base) + lam * len(items.corr)
    return (base_sum + lam * corr_sum) / denom if denom > 0 else 0.0


def soar_training_step(
    model,
    batch,
    config: SoarConfig,
    rng: numerics.Rng,
    shard_sizes=None,
    *,
    weighting: LossWeighting = UNIFORM_WEIGHTING,
    schedule: NoiseSchedule = IDENTITY_SCHEDULE,
    rollout_velocity=None,
):
    """One full training step over a batch of (z0, cond) pairs.

    Accumulates the base flow-matching terms and, when lambda > 0 and N > 0,
    the correction terms from every valid auxiliary state across all branches.
    The loss and gradient are normalized once by (B + lambda * P) with the
    counts summed across shards before division, mirroring worker-synchronized
    aggregation. shard_sizes partitions the batch for that simulation; the
    result is shard-layout independent.

    Returns (LossBreakdown, GradSet).
    """
    batch = list(batch)
    if not batch:
        raise ContractViolation("batch must be nonempty")
    if shard_sizes is None:
        shard_sizes = [len(batch)]
    if sum(shard_sizes) != len(batch) or any(s < 0 for s in shard_sizes):
        raise ContractViolation("shard sizes must partition the batch")

    base_sum = 0.0
    corr_sum = 0.0
    count_B = 0
    count_P = 0
    g_base = numerics.zero_grads(model.params)
    g_corr = numerics.zero_grads(model.params)

    offset = 0
    for size in shard_sizes:
        shard = batch[offset : offset + size]
        if shard:
            items = build_step_items(
                model, shard, config, rng,
                weighting=weighting, schedule=schedule,
                rollout_velocity=rollout_velocity, index_offset=offset,
            )
            b_loss, b_grads = _items_loss_and_grads(model, items.base)
            c_loss, c_grads = _items_loss_and_grads(model, items.corr)
            base_sum += b_loss
            corr_sum += c_loss
            count_B += len(items.base)
            count_P += len(items.corr)
            numerics.add_grads(g_base, b_grads)
            numerics.add_grads(g_corr, c_grads)
        offset += size

    breakdown = LossBreakdown(
        loss_base_sum=base_sum,
        loss_corr_sum=corr_sum,
        count_B=count_B,
        count_P=count_P,
        lam=config.lam,
    )
    denom = count_B + config.lam * count_P
    grads = numerics.add_grads(g_base, g_corr, scale=config.lam)
    numerics.scale_grads(grads, 1.0 / denom if denom > 0 else 0.0)
    return breakdown, grads


def sft_training_step(
    model,
    batch,
    rng: numerics.Rng,
    weighting: LossWeighting = UNIFORM_WEIGHTING,
    *,
    schedule: NoiseSchedule = IDENTITY_SCHEDULE,
    config: SoarConfig | None = None,
    shard_sizes=None,
):
    """Plain flow-matching step: exactly soar_training_step with lambda = 0.

    Shares the code path (and random stream consumption) with the full step,
    so the two are bitwise identical for a shared seed.
    """
    base = config if config is not None else SoarConfig()
    return soar_training_step(
        model,
        batch,
        replace(base, lam=0.0),
        rng,
        shard_sizes,
        weighting=weighting,
        schedule=schedule,
    )
