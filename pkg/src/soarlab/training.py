"""Seeded training runs: dataset materialization, the optimization loop for
both plain flow matching and the corrected objective, periodic evaluation
hooks, and training-log records.

Seed policy: one master seed, with labeled substreams (data / init /
training / eval / rollout) so that, for example, changing evaluation
frequency never perturbs the training draws.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import data as data_mod
from . import numerics
from .errors import ContractViolation
from .flow import IDENTITY_SCHEDULE, UNIFORM_WEIGHTING, LossWeighting, NoiseSchedule
from .soar import SoarConfig, soar_training_step

METHODS = ("sft", "soar")

TRAINING_LOG_COLUMNS = (
    "step",
    "loss_base",
    "loss_corr",
    "loss_total",
    "count_B",
    "count_P",
    "grad_norm",
)


@dataclass(frozen=True)
class TrainSettings:
    """Optimization knobs independent of the objective itself."""

    steps: int = 3000
    batch_size: int = 64
    lr: float = 2e-3
    dataset_size: int = 4096
    hidden_width: int = 128
    hidden_depth: int = 3
    embed_dim: int = 8

    def __post_init__(self):
        if self.steps < 1:
            raise ContractViolation("steps must be >= 1")
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be >= 1")
        if self.lr <= 0:
            raise ContractViolation("lr must be positive")
        if self.dataset_size < 1:
            raise ContractViolation("dataset_size must be >= 1")


@dataclass
class StepRecord:
    step: int
    loss_base: float
    loss_corr: float
    loss_total: float
    count_B: int
    count_P: int
    grad_norm: float

    def row(self) -> list:
        return [
            self.step,
            self.loss_base,
            self.loss_corr,
            self.loss_total,
            self.count_B,
            self.count_P,
            self.grad_norm,
        ]


@dataclass
class TrainResult:
    model: numerics.VelocityModel
    adam: numerics.AdamState
    history: list = field(default_factory=list)
    diverged_at: int | None = None  # step index of the first non-finite loss


@dataclass
class Dataset:
    """Materialized training set: fixed arrays, index-sampled per step."""

    spec: data_mod.DatasetSpec
    z0: np.ndarray
    conds: np.ndarray

    @property
    def size(self) -> int:
        return self.z0.shape[0]


def materialize_dataset(spec: data_mod.DatasetSpec, size: int, rng: numerics.Rng) -> Dataset:
    z0, conds = data_mod.sample_arrays(spec, size, rng)
    return Dataset(spec=spec, z0=z0, conds=conds)


def init_model_for(spec: data_mod.DatasetSpec, settings: TrainSettings, rng: numerics.Rng):
    return numerics.init_velocity_model(
        spec.dim,
        spec.cond_count,
        embed_dim=settings.embed_dim,
        hidden_width=settings.hidden_width,
        hidden_depth=settings.hidden_depth,
        rng=rng,
    )


def train(
    spec: data_mod.DatasetSpec,
    method: str,
    config: SoarConfig,
    settings: TrainSettings,
    seed_rng: numerics.Rng,
    *,
    weighting: LossWeighting = UNIFORM_WEIGHTING,
    schedule: NoiseSchedule = IDENTITY_SCHEDULE,
    model: numerics.VelocityModel | None = None,
    eval_interval: int | None = None,
    eval_fn=None,
    checkpoint_interval: int | None = None,
    checkpoint_fn=None,
) -> TrainResult:
    """Run one full training job from a master rng.

    method "sft" forces lambda = 0 through the shared step implementation, so
    sft and soar(lambda=0) runs are identical under a shared seed. A non-finite
    loss stops the run immediately with the last finite parameters kept
    (diverged_at records the failing step). eval_fn(step, model) fires every
    eval_interval steps and after the final step; checkpoint_fn(step, model,
    adam) likewise.
    """
    if method not in METHODS:
        raise ContractViolation(f"method must be one of {METHODS}")
    step_config = config if method == "soar" else _as_sft(config)

    dataset = materialize_dataset(
        spec, settings.dataset_size, seed_rng.split("data")
    )
    if model is None:
        model = init_model_for(spec, settings, seed_rng.split("init"))
    adam = numerics.init_adam(model.params)
    train_rng = seed_rng.split("training")

    history = []
    result = TrainResult(model=model, adam=adam, history=history)
    for step in range(settings.steps):
        step_rng = train_rng.split(f"step-{step}")
        idx = step_rng.split("batch").integers(0, dataset.size, size=settings.batch_size)
        batch = [(dataset.z0[i], int(dataset.conds[i])) for i in idx]
        # overflow during a diverging run is detected below, not warned about
        with np.errstate(over="ignore", invalid="ignore"):
            breakdown, grads = soar_training_step(
                model,
                batch,
                step_config,
                step_rng.split("items"),
                weighting=weighting,
                schedule=schedule,
            )
        total = breakdown.normalized_total
        if not np.isfinite(total):
            result.diverged_at = step
            break
        numerics.adam_step(model.params, grads, adam, lr=settings.lr)
        history.append(
            StepRecord(
                step=step,
                loss_base=breakdown.loss_base_sum,
                loss_corr=breakdown.loss_corr_sum,
                loss_total=total,
                count_B=breakdown.count_B,
                count_P=breakdown.count_P,
                grad_norm=numerics.grad_norm(grads),
            )
        )
        done = step == settings.steps - 1
        if checkpoint_fn is not None and checkpoint_interval and (
            (step + 1) % checkpoint_interval == 0 or done
        ):
            checkpoint_fn(step, model, adam)
        if eval_fn is not None and eval_interval and (
            (step + 1) % eval_interval == 0 or done
        ):
            eval_fn(step, model)
    return result


def _as_sft(config: SoarConfig) -> SoarConfig:
    return replace(config, lam=0.0)


def write_training_log(path, history) -> None:
    """Training CSV: one row per step with the documented columns."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAINING_LOG_COLUMNS)
        for rec in history:
            writer.writerow(rec.row())
