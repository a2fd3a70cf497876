"""Acceptance checks: exact algebra, gradient and determinism contracts,
oracle convergence, and the seeded method comparisons.

Each check prints one [PASS]/[FAIL] line (run with -s to see them live).
The three statistical checks share one five-seed comparison run, so this
file takes roughly ten minutes end to end.
"""

from __future__ import annotations

import time
from dataclasses import replace

import numpy as np
import pytest

from soarlab import data, diagnostics, flow, numerics, soar, training
from soarlab.diagnostics import monotone_trend_ok, pooled_std
from soarlab.sampler import CfgParams, SdeParams, cfg_velocity, euler_step, rollout_states, sde_step

from conftest import tiny_model


def _report(num: int, ok: bool, detail: str):
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {num}: {detail}")
    assert ok, f"criterion {num}: {detail}"


def _norm(x) -> float:
    return float(np.linalg.norm(x))


# ---------------------------------------------------------------------------
# 1. algebraic identity suite
# ---------------------------------------------------------------------------


def test_01_algebraic_identity_suite():
    t_start = time.monotonic()
    model = tiny_model(seed=11)
    trials = 1000
    worst = {k: 0.0 for k in "abcdefg"}
    fresh_min = np.inf

    for i in range(trials):
        r = numerics.Rng(2026).split(f"trial-{i}")
        z0 = r.split("z0").standard_normal(3)
        z1 = r.split("z1").standard_normal(3)
        sigma = float(r.split("sigma").uniform(0.05, 1.0))
        z = flow.interpolate(z0, z1, sigma)
        v_gt = flow.gt_velocity(z0, z1)

        # a. exact velocity walks the state back to its clean endpoint
        worst["a"] = max(worst["a"], _norm(flow.clean_endpoint(z, sigma, v_gt) - z0))

        # b. on-ray correction target reduces to the ray velocity
        worst["b"] = max(worst["b"], _norm(soar.correction_target(z, z0, sigma) - v_gt))

        # c/d/h. re-noising contracts the rollout deviation by (1 - alpha)
        z_hat = r.split("zhat").standard_normal(3)
        delta = 0.5 * r.split("delta").standard_normal(3)
        sigma_t1 = float(r.split("s1").uniform(0.05, 0.9))
        sigma_aux = float(
            r.split("saux").uniform(sigma_t1 + 0.1 * (1.0 - sigma_t1), 1.0)
        )
        state = soar.renoise(z_hat, z1, sigma_t1, sigma_aux, "shared-z1")
        ideal = (1.0 - state.alpha) * (z_hat - delta) + state.alpha * z1
        lhs = _norm(state.z_aux - ideal)
        rhs = (1.0 - state.alpha) * _norm(delta)
        worst["c"] = max(worst["c"], abs(lhs - rhs))

        v_corr = soar.correction_target(state.z_aux, z0, state.sigma_aux)
        v_ideal = (ideal - z0) / state.sigma_aux
        want = (1.0 - state.alpha) * delta / state.sigma_aux
        worst["d"] = max(worst["d"], _norm((v_corr - v_ideal) - want))

        fresh = soar.renoise(
            z_hat, z1, sigma_t1, sigma_aux, "fresh-z1", r.split("fresh")
        )
        fresh_min = min(fresh_min, abs(_norm(fresh.z_aux - ideal) - rhs))

        # e. squared endpoint error is the sigma^2-scaled velocity error
        v_any = r.split("vany").standard_normal(3)
        lhs_e = _norm(flow.clean_endpoint(z, sigma, v_any) - z0) ** 2
        rhs_e = sigma**2 * _norm(v_any - (z - z0) / sigma) ** 2
        worst["e"] = max(worst["e"], abs(lhs_e - rhs_e))

        # f. the eta=0 stochastic step collapses to the deterministic step
        sigma_to = float(r.split("sto").uniform(0.0, sigma - 0.01)) if sigma > 0.02 else 0.0
        stepped = sde_step(z, v_any, sigma, sigma_to, SdeParams(0.0), r.split("sde"))
        worst["f"] = max(worst["f"], _norm(stepped - euler_step(z, v_any, sigma, sigma_to)))

        # g. guidance collapses at scale 1 (conditional) and 0 (unconditional)
        zg = r.split("state").standard_normal(2)
        cond = int(r.split("cond").integers(0, model.cond_count))
        sg = float(r.split("sg").uniform(0.0, 1.0))
        v_c = numerics.forward(model, zg, cond, sg)
        v_u = numerics.forward(model, zg, None, sg)
        worst["g"] = max(
            worst["g"],
            _norm(cfg_velocity(model, zg, cond, sg, CfgParams(1.0)) - v_c),
            _norm(cfg_velocity(model, zg, cond, sg, CfgParams(0.0)) - v_u),
        )

    elapsed = time.monotonic() - t_start
    ok = (
        worst["a"] <= 1e-10
        and worst["b"] <= 1e-10
        and worst["c"] <= 1e-10
        and worst["d"] <= 1e-10
        and worst["e"] <= 1e-9
        and worst["f"] <= 1e-12
        and worst["g"] <= 1e-10
        and fresh_min > 1e-9
        and elapsed < 10.0
    )
    detail = (
        f"algebra suite, {trials} trials/identity, max residuals "
        + " ".join(f"{k}={worst[k]:.1e}" for k in sorted(worst))
        + f", fresh-endpoint min violation h={fresh_min:.2e}, {elapsed:.1f}s"
    )
    _report(1, ok, detail)


# ---------------------------------------------------------------------------
# 2. training-step gradients vs central finite differences
# ---------------------------------------------------------------------------


def test_02_training_step_gradients_match_finite_differences():
    t_start = time.monotonic()
    model = tiny_model(seed=19)
    spec = data.gaussian_mixture_spec(cond_count=2)
    pairs = data.sample_pairs(spec, 6, numerics.Rng(3))
    batch = [(p.z0, p.cond) for p in pairs]
    config = soar.SoarConfig(K=5, N=2, M=2, lam=0.7, w_cfg=2.5, eta=0.5, cond_dropout=0.3)

    worst = {}
    for kind in ("sft", "soar"):
        if kind == "soar":
            _, grads = soar.soar_training_step(model, batch, config, numerics.Rng(55))
            lam, cfg_used = config.lam, config
        else:
            _, grads = soar.sft_training_step(model, batch, numerics.Rng(55), config=config)
            lam, cfg_used = 0.0, replace(config, lam=0.0)
        # split is pure, so a fresh generator rebuilds the exact step items
        items = soar.build_step_items(model, batch, cfg_used, numerics.Rng(55))

        h = 1e-5
        worst[kind] = 0.0
        for name in sorted(model.params):
            flat = model.params[name].ravel()
            g = grads[name].ravel()
            for idx in range(flat.shape[0]):
                orig = flat[idx]
                flat[idx] = orig + h
                up = soar.items_loss_value(model, items, lam)
                flat[idx] = orig - h
                dn = soar.items_loss_value(model, items, lam)
                flat[idx] = orig
                fd = (up - dn) / (2.0 * h)
                scale = max(abs(fd), abs(g[idx]), 1e-8)
                worst[kind] = max(worst[kind], abs(fd - g[idx]) / scale)

    elapsed = time.monotonic() - t_start
    ok = worst["sft"] <= 1e-5 and worst["soar"] <= 1e-5 and elapsed < 30.0
    _report(
        2,
        ok,
        f"finite-difference gradients, max rel err sft={worst['sft']:.2e} "
        f"soar={worst['soar']:.2e}, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 3. stop-gradient audit
# ---------------------------------------------------------------------------


def test_03_stop_gradient_audit():
    model = tiny_model(seed=19)
    frozen = tiny_model(seed=19)  # same parameters, separate object
    spec = data.gaussian_mixture_spec(cond_count=2)
    pairs = data.sample_pairs(spec, 8, numerics.Rng(5))
    batch = [(p.z0, p.cond) for p in pairs]
    config = soar.SoarConfig(N=3, M=2, w_cfg=3.0)

    def frozen_velocity(z, cond, sigma):
        return cfg_velocity(frozen, z, cond, sigma, CfgParams(config.w_cfg))

    b_live, g_live = soar.soar_training_step(model, batch, config, numerics.Rng(23))
    b_const, g_const = soar.soar_training_step(
        model, batch, config, numerics.Rng(23), rollout_velocity=frozen_velocity
    )
    worst = abs(b_live.normalized_total - b_const.normalized_total)
    for name in g_live:
        worst = max(worst, float(np.max(np.abs(g_live[name] - g_const[name]))))
    ok = worst <= 1e-12
    _report(3, ok, f"rollout velocity replaced by its constant value, max diff {worst:.2e}")


# ---------------------------------------------------------------------------
# 4. shard-normalization equivalence
# ---------------------------------------------------------------------------


def test_04_shard_normalization_equivalence():
    model = tiny_model(seed=19)
    spec = data.gaussian_mixture_spec(cond_count=2)
    pairs = data.sample_pairs(spec, 8, numerics.Rng(9))
    batch = [(p.z0, p.cond) for p in pairs]
    config = soar.SoarConfig(N=2, M=2, lam=1.0, w_cfg=2.0)

    b_ref, g_ref = soar.soar_training_step(model, batch, config, numerics.Rng(31))
    worst = 0.0
    layouts = ([8], [4, 4], [2, 3, 3], [1, 2, 2, 3])
    for layout in layouts:
        b, g = soar.soar_training_step(
            model, batch, config, numerics.Rng(31), shard_sizes=layout
        )
        worst = max(worst, abs(b.normalized_total - b_ref.normalized_total))
        assert (b.count_B, b.count_P) == (b_ref.count_B, b_ref.count_P)
        for name in g:
            worst = max(worst, float(np.max(np.abs(g[name] - g_ref[name]))))
    ok = worst <= 1e-12
    _report(4, ok, f"1-4 shard layouts {layouts}, max diff vs unsharded {worst:.2e}")


# ---------------------------------------------------------------------------
# 5. oracle convergence on a single-point dataset
# ---------------------------------------------------------------------------


def test_05_single_point_oracle_convergence():
    t_start = time.monotonic()
    point = np.array([0.5, -0.25])
    spec = data.single_point_spec(point, cond_count=1)
    settings = training.TrainSettings(
        steps=2000, batch_size=64, lr=3e-3, dataset_size=64,
        hidden_width=64, hidden_depth=2, embed_dim=4,
    )
    # low-sigma coverage so the last sampler steps are trained, not extrapolated
    config = soar.SoarConfig(t0_sampling="uniform-0-1")
    result = training.train(spec, "sft", config, settings, numerics.Rng(42))
    model = result.model

    rng = numerics.Rng(7).split("mse")
    n = 512
    sig = rng.split("sig").uniform(0.1, 1.0, size=n)
    z1 = rng.split("z1").standard_normal((n, 2))
    states = (1.0 - sig[:, None]) * point + sig[:, None] * z1
    oracle = (states - point) / sig[:, None]
    preds, _ = numerics.forward_batch(model, states, np.zeros(n, dtype=np.int64), sig)
    mse = float(np.mean((preds - oracle) ** 2))

    z1r = numerics.Rng(8).standard_normal((256, 2))
    ends = rollout_states(model, z1r, np.zeros(256, dtype=np.int64), 20, CfgParams(1.0))[-1]
    max_miss = float(np.max(np.linalg.norm(ends - point, axis=1)))

    elapsed = time.monotonic() - t_start
    ok = mse <= 1e-2 and max_miss <= 0.05 and elapsed < 120.0
    _report(
        5,
        ok,
        f"2000-step oracle fit, velocity mse={mse:.2e} (<=1e-2), "
        f"max endpoint miss={max_miss:.3f} (<=0.05), {elapsed:.0f}s",
    )


# ---------------------------------------------------------------------------
# 6/7/9. seeded method comparisons (one shared five-seed run)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def comparison():
    spec = data.gaussian_mixture_spec()  # four well-separated modes
    # rollouts and evaluation both run at inference-scale guidance, so the
    # correction supervises exactly the trajectories the sampler will take
    base = soar.SoarConfig(w_cfg=4.5)
    arms = {
        "sft": ("sft", base),
        "soar": ("soar", base),
        "soar-fresh": ("soar", replace(base, renoise_mode="fresh-z1")),
    }
    t_start = time.monotonic()
    result = diagnostics.compare_methods(
        spec,
        arms,
        steps=3000,
        eval_interval=500,
        seeds=[11, 12, 13, 14, 15],
        settings=training.TrainSettings(
            steps=3000, batch_size=64, lr=2e-3, dataset_size=4096
        ),
        eval_rollouts=512,
        eval_cfg=CfgParams(4.5),
    )
    return {"result": result, "wall": time.monotonic() - t_start}


def _per_seed(result, method: str, attr: str, step: int) -> np.ndarray:
    pts = sorted(
        (p for p in result.curves if p.method == method and p.step == step),
        key=lambda p: p.seed,
    )
    return np.array([getattr(p, attr) for p in pts])


def test_06_correction_beats_plain_training(comparison):
    result = comparison["result"]
    final = result.steps - 1
    end_sft = _per_seed(result, "sft", "endpoint_distance", final)
    end_soar = _per_seed(result, "soar", "endpoint_distance", final)
    gap_sft = _per_seed(result, "sft", "gap_final", final)
    gap_soar = _per_seed(result, "soar", "gap_final", final)
    assert end_sft.shape == (5,) and end_soar.shape == (5,)

    gap_slack = pooled_std(gap_sft, gap_soar)
    endpoint_ok = float(end_soar.mean()) <= float(end_sft.mean())
    gap_ok = float(gap_sft.mean()) - float(gap_soar.mean()) > gap_slack
    ok = endpoint_ok and gap_ok and comparison["wall"] < 900.0
    _report(
        6,
        ok,
        f"5 seeds x 3000 steps: endpoint sliced-W2 soar={end_soar.mean():.3f} "
        f"<= sft={end_sft.mean():.3f}; gap soar={gap_soar.mean():.3f} vs "
        f"sft={gap_sft.mean():.3f} (diff {gap_sft.mean() - gap_soar.mean():.3f} "
        f"> pooled std {gap_slack:.3f}), {comparison['wall']:.0f}s",
    )


def test_07_shared_endpoint_beats_fresh_endpoint(comparison):
    result = comparison["result"]
    final = result.steps - 1
    shared = _per_seed(result, "soar", "endpoint_distance", final)
    fresh = _per_seed(result, "soar-fresh", "endpoint_distance", final)
    ok = float(shared.mean()) <= float(fresh.mean())
    _report(
        7,
        ok,
        f"renoise endpoint choice: shared-z1 endpoint {shared.mean():.3f} <= "
        f"fresh-z1 {fresh.mean():.3f}",
    )


# ---------------------------------------------------------------------------
# 8. degenerate-config equivalence
# ---------------------------------------------------------------------------


def test_08_lambda_zero_checkpoint_equals_plain_training(tmp_path):
    spec = data.gaussian_mixture_spec(cond_count=2)
    settings = training.TrainSettings(
        steps=40, batch_size=8, lr=2e-3, dataset_size=64,
        hidden_width=16, hidden_depth=2, embed_dim=4,
    )
    config = soar.SoarConfig(lam=0.0)
    res_sft = training.train(spec, "sft", config, settings, numerics.Rng(5))
    res_soar = training.train(spec, "soar", config, settings, numerics.Rng(5))
    a_path = tmp_path / "sft.ckpt"
    b_path = tmp_path / "soar0.ckpt"
    numerics.save_model(a_path, res_sft.model, res_sft.adam)
    numerics.save_model(b_path, res_soar.model, res_soar.adam)
    ok = a_path.read_bytes() == b_path.read_bytes()
    _report(8, ok, "40-step runs, lambda=0 and plain training checkpoints byte-identical")


def test_09_no_eval_checkpoint_regresses(comparison):
    result = comparison["result"]
    checkpoints = sorted({p.step for p in result.curves})
    by_checkpoint = [
        _per_seed(result, "soar", "endpoint_distance", step) for step in checkpoints
    ]
    ok = monotone_trend_ok(by_checkpoint)
    means = " -> ".join(f"{np.mean(v):.3f}" for v in by_checkpoint)
    _report(9, ok, f"soar endpoint quality by checkpoint: {means}")


# ---------------------------------------------------------------------------
# 10. first-order deviation bound on the constant-perturbation family
# ---------------------------------------------------------------------------


def test_10_constant_perturbation_respects_deviation_bound():
    worst = -np.inf
    for K in (1, 5, 20, 50):
        for scale in (0.05, 0.5):
            for j in range(4):
                r = numerics.Rng(100 + j).split(f"K{K}-s{scale}")
                z0 = r.split("z0").standard_normal(2)
                z1 = r.split("z1").standard_normal(2)
                e = scale * numerics.gaussian(r.split("err"), 2)
                v = z1 - z0

                def field(z, cond, sigma, v=v, e=e):
                    return v + e

                report = diagnostics.teacher_forced_gap(field, [(z0, z1, 0)], K)
                worst = max(worst, report.bound_gap)
    ok = worst <= 1e-8
    _report(
        10,
        ok,
        f"constant-perturbation rollouts, K in (1, 5, 20, 50): "
        f"max (final deviation - bound) = {worst:.2e} <= 1e-8",
    )
