"""Command-line entry point: train / sample / diagnose / ablate subcommands
over text configs, with run directories, checkpoint cadence, CSV/JSON metric
emission, and a JSON manifest per training or ablation run.

Exit codes: 0 success; 2 invalid config (offending key reported); 3 training
loss went non-finite (last good checkpoint kept); 4 corrupt checkpoint;
5 deviation-bound audit failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

import numpy as np

from . import __version__, diagnostics, numerics
from .config import RunConfig, config_to_text, load_config
from .data import sample_pairs
from .errors import CheckpointError, ConfigError
from .sampler import CfgParams, Trajectory, dump_trajectory_csv, rollout_states, time_grid
from .training import train, write_training_log

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_CHECKPOINT = 4
EXIT_AUDIT = 5


@dataclass
class RunManifest:
    """Everything needed to identify and reproduce a run."""

    config_text: str
    seed: int
    started: str
    finished: str = ""
    checkpoints: list = field(default_factory=list)
    files: list = field(default_factory=list)
    version: str = __version__

    def write(self, path) -> None:
        payload = {
            "config": self.config_text,
            "seed": self.seed,
            "started": self.started,
            "finished": self.finished,
            "checkpoints": self.checkpoints,
            "files": self.files,
            "version": self.version,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = args.out
    os.makedirs(out, exist_ok=True)
    manifest = RunManifest(
        config_text=config_to_text(cfg), seed=cfg.seed, started=_now()
    )

    spec = cfg.dataset_spec()

    def checkpoint_fn(step, model, adam):
        path = os.path.join(out, f"ckpt_{step + 1:06d}.ckpt")
        numerics.save_model(path, model, adam)
        manifest.checkpoints.append(path)

    result = train(
        spec,
        cfg.method,
        cfg.soar_config(),
        cfg.train_settings(),
        numerics.Rng(cfg.seed),
        weighting=cfg.loss_weighting(),
        schedule=cfg.noise_schedule(),
        checkpoint_interval=cfg.checkpoint_interval,
        checkpoint_fn=checkpoint_fn,
    )

    log_path = os.path.join(out, "training_log.csv")
    write_training_log(log_path, result.history)
    manifest.files.append(log_path)

    if result.diverged_at is not None:
        last_good = os.path.join(out, "model_lastgood.ckpt")
        numerics.save_model(last_good, result.model, result.adam)
        manifest.checkpoints.append(last_good)
        manifest.finished = _now()
        manifest_path = os.path.join(out, "manifest.json")
        manifest.files.append(manifest_path)
        manifest.write(manifest_path)
        print(
            f"loss became non-finite at step {result.diverged_at}; "
            f"last good checkpoint: {last_good}",
            file=sys.stderr,
        )
        return EXIT_DIVERGED

    final_path = os.path.join(out, "model_final.ckpt")
    numerics.save_model(final_path, result.model, result.adam)
    manifest.checkpoints.append(final_path)
    manifest.finished = _now()
    manifest_path = os.path.join(out, "manifest.json")
    manifest.files.append(manifest_path)
    manifest.write(manifest_path)
    print(f"trained {cfg.steps} steps; final checkpoint: {final_path}")
    return EXIT_OK


def cmd_sample(args) -> int:
    model, _ = numerics.load_model(args.checkpoint)
    out = args.out
    os.makedirs(out, exist_ok=True)
    rng = numerics.Rng(args.seed).split("rollout")
    n, K = args.n, args.K
    dim = model.latent_dim
    if args.cond is not None:
        conds = np.full(n, args.cond, dtype=np.int64)
    else:
        conds = np.arange(n, dtype=np.int64) % model.cond_count
    z1 = rng.standard_normal((n, dim))
    states = rollout_states(model, z1, conds, K, CfgParams(args.cfg_scale))

    endpoints_path = os.path.join(out, "endpoints.csv")
    with open(endpoints_path, "w", newline="") as fh:
        fh.write(f"# kind=generated dim={dim}\n")
        writer = csv.writer(fh)
        writer.writerow(["cond"] + [f"x{i}" for i in range(dim)])
        for i in range(n):
            writer.writerow([int(conds[i])] + [repr(float(x)) for x in states[-1][i]])
    written = [endpoints_path]

    if args.trajectories:
        ts = time_grid(K)
        sigmas = list(ts)  # sampling runs on the identity schedule
        trajs = [
            Trajectory(
                times=list(ts),
                sigmas=sigmas,
                states=[states[k][i] for k in range(K + 1)],
                cond=int(conds[i]),
                steps=K,
            )
            for i in range(n)
        ]
        traj_path = os.path.join(out, "trajectories.csv")
        dump_trajectory_csv(traj_path, trajs)
        written.append(traj_path)
    print(f"wrote {', '.join(written)}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    cfg = _resolve_config(args)
    model, _ = numerics.load_model(args.checkpoint)
    out = args.out
    os.makedirs(out, exist_ok=True)
    spec = cfg.dataset_spec()
    eval_rng = numerics.Rng(cfg.seed).split("eval")
    sample_cfg = CfgParams(args.cfg_scale)

    if args.mode == "gap":
        rays = diagnostics.make_eval_rays(spec, args.trials, eval_rng.split("rays"))
        report = diagnostics.teacher_forced_gap(
            model, rays, cfg.K, schedule=cfg.noise_schedule(), cfg=sample_cfg
        )
        curve_path = os.path.join(out, "gap.csv")
        diagnostics.write_bias_report_csv(curve_path, report)
        summary = {
            "final_mean_deviation": float(report.mean_deviation[-1]),
            "max_mean_deviation": float(np.max(report.mean_deviation)),
            "bound_gap": report.bound_gap,
            "rays": args.trials,
            "K": cfg.K,
        }
        summary_path = os.path.join(out, "gap_summary.json")
        with open(summary_path, "w") as fh:
            json.dump(summary, fh, indent=2)
            fh.write("\n")
        print(f"wrote {curve_path}, {summary_path}")
        return EXIT_OK

    if args.mode == "bound-audit":
        pairs = sample_pairs(spec, 64, eval_rng.split("pairs"))
        audit = diagnostics.deviation_bound_audit(
            model, pairs, cfg.soar_config(), args.trials, eval_rng.split("audit"),
            tolerance=args.tolerance, schedule=cfg.noise_schedule(),
        )
        payload = {
            "mode": audit.mode,
            "trials": audit.trials,
            "max_residual": audit.max_residual,
            "mean_residual": audit.mean_residual,
            "passed": audit.passed,
        }
        audit_path = os.path.join(out, "bound_audit.json")
        with open(audit_path, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
        print(f"wrote {audit_path}")
        if audit.passed is False:
            print(
                f"bound audit failed: max residual {audit.max_residual:.3e}",
                file=sys.stderr,
            )
            return EXIT_AUDIT
        return EXIT_OK

    # endpoint mode
    distance = diagnostics.endpoint_quality(
        model, spec, args.trials, cfg.K, sample_cfg, args.metric,
        eval_rng.split("endpoint"), schedule=cfg.noise_schedule(),
    )
    payload = {"endpoint_distance": distance, "metric": args.metric, "rollouts": args.trials}
    path = os.path.join(out, "endpoint_quality.json")
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    out = args.out
    os.makedirs(out, exist_ok=True)
    base = cfg.soar_config()
    if args.axis == "branches":
        methods = {
            "M1": ("soar", replace(base, M=1)),
            "M2": ("soar", replace(base, M=2)),
        }
    else:
        methods = {
            "shared-z1": ("soar", replace(base, renoise_mode="shared-z1")),
            "fresh-z1": ("soar", replace(base, renoise_mode="fresh-z1")),
        }
    seeds = [cfg.seed + i for i in range(args.seeds)]
    result = diagnostics.compare_methods(
        cfg.dataset_spec(),
        methods,
        steps=cfg.steps,
        eval_interval=cfg.checkpoint_interval,
        seeds=seeds,
        settings=cfg.train_settings(),
    )
    curves_path = os.path.join(out, "comparison.csv")
    diagnostics.write_comparison_csv(curves_path, result)
    summary_path = os.path.join(out, "comparison_summary.json")
    diagnostics.write_comparison_summary(summary_path, result, extra={"axis": args.axis})
    manifest = RunManifest(
        config_text=config_to_text(cfg),
        seed=cfg.seed,
        started=_now(),
        finished=_now(),
        files=[curves_path, summary_path],
    )
    manifest_path = os.path.join(out, "manifest.json")
    manifest.files.append(manifest_path)
    manifest.write(manifest_path)
    print(f"wrote {curves_path}, {summary_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="soarlab",
        description="Trajectory-corrected rectified-flow training lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="path to a key = value config file")
    common.add_argument("--out", default="run", help="output directory")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override a config key (repeatable)",
    )

    p_train = sub.add_parser("train", parents=[common], help="run a training job")
    p_train.set_defaults(func=cmd_train)

    p_sample = sub.add_parser("sample", help="roll out endpoints from a checkpoint")
    p_sample.add_argument("--checkpoint", required=True)
    p_sample.add_argument("--n", type=int, default=256)
    p_sample.add_argument("--K", type=int, default=20)
    p_sample.add_argument("--cfg-scale", type=float, default=1.0, dest="cfg_scale")
    p_sample.add_argument("--cond", type=int, default=None)
    p_sample.add_argument("--seed", type=int, default=0)
    p_sample.add_argument("--out", default="run")
    p_sample.add_argument("--trajectories", action="store_true")
    p_sample.set_defaults(func=cmd_sample)

    p_diag = sub.add_parser("diagnose", parents=[common], help="run a diagnostic")
    p_diag.add_argument("--checkpoint", required=True)
    p_diag.add_argument("--mode", choices=("gap", "bound-audit", "endpoint"), required=True)
    p_diag.add_argument("--trials", type=int, default=256)
    p_diag.add_argument("--tolerance", type=float, default=1e-10, help="bound-audit pass threshold")
    p_diag.add_argument("--cfg-scale", type=float, default=1.0, dest="cfg_scale")
    p_diag.add_argument("--metric", choices=("sliced-w2", "energy-distance"), default="sliced-w2")
    p_diag.set_defaults(func=cmd_diagnose)

    p_abl = sub.add_parser("ablate", parents=[common], help="run an ablation axis")
    p_abl.add_argument("--axis", choices=("branches", "renoise"), required=True)
    p_abl.add_argument("--seeds", type=int, default=3)
    p_abl.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        key = f" (key: {exc.key})" if exc.key else ""
        print(f"config error: {exc}{key}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
