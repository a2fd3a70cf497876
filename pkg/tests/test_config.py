"""Config text parsing, validation, and canonical round-trips."""

import numpy as np
import pytest

from soarlab import config as config_mod
from soarlab import flow
from soarlab.config import RunConfig, config_from_text, config_to_text, load_config
from soarlab.errors import ConfigError


def test_empty_text_gives_defaults():
    cfg = config_from_text("")
    assert cfg == RunConfig()


def test_parse_keys_comments_and_blanks():
    text = """
# run setup
method = sft   # overridden from the default
steps = 12

lr = 0.01
"""
    cfg = config_from_text(text)
    assert cfg.method == "sft"
    assert cfg.steps == 12
    assert cfg.lr == 0.01
    # untouched keys keep defaults
    assert cfg.batch_size == RunConfig().batch_size


def test_lambda_key_maps_to_lam_field():
    cfg = config_from_text("lambda = 0.25\n")
    assert cfg.lam == 0.25
    assert "lambda = 0.25" in config_to_text(cfg)
    # the field name itself is not a key
    with pytest.raises(ConfigError):
        config_from_text("lam = 0.25\n")


def test_unknown_key_rejected_with_key():
    with pytest.raises(ConfigError) as exc:
        config_from_text("stepz = 10\n")
    assert exc.value.key == "stepz"


def test_duplicate_key_rejected():
    with pytest.raises(ConfigError) as exc:
        config_from_text("steps = 10\nsteps = 20\n")
    assert exc.value.key == "steps"
    assert "duplicate" in str(exc.value)


def test_missing_equals_rejected():
    with pytest.raises(ConfigError, match="key = value"):
        config_from_text("steps 10\n")


@pytest.mark.parametrize(
    "line,key",
    [
        ("steps = ten", "steps"),
        ("lr = fast", "lr"),
        ("lr = inf", "lr"),
        ("lr = nan", "lr"),
        ("method = bogus", "method"),
        ("renoise_mode = both", "renoise_mode"),
        ("weighting = cubic", "weighting"),
        ("schedule = cosine", "schedule"),
        ("dataset_kind = spiral", "dataset_kind"),
        ("t0_sampling = never", "t0_sampling"),
    ],
)
def test_bad_values_rejected_with_key(line, key):
    with pytest.raises(ConfigError) as exc:
        config_from_text(line + "\n")
    assert exc.value.key == key


@pytest.mark.parametrize(
    "line",
    ["K = 0", "N = -1", "eta = 1.5", "lambda = -0.5", "steps = 0", "sigma_min = 0.5"],
)
def test_invalid_combinations_surface_as_config_errors(line):
    # values parse fine but violate the derived objects' contracts
    with pytest.raises(ConfigError):
        config_from_text(line + "\n")


def test_overrides_win_over_text():
    cfg = config_from_text("steps = 10\n", overrides=["steps=77", "lambda=0.5"])
    assert cfg.steps == 77
    assert cfg.lam == 0.5


def test_override_must_be_key_value():
    with pytest.raises(ConfigError, match="key=value"):
        config_from_text("", overrides=["steps77"])
    with pytest.raises(ConfigError) as exc:
        config_from_text("", overrides=["stepz=1"])
    assert exc.value.key == "stepz"


def test_canonical_text_round_trips():
    cfg = config_from_text(
        "lr = 0.0012345678901234567\nlambda = 0.3333333333333333\nmethod = sft\n"
    )
    text = config_to_text(cfg)
    again = config_from_text(text)
    assert again == cfg
    # canonical form lists every key once, in declaration order
    keys = [line.split(" = ")[0] for line in text.strip().splitlines()]
    assert keys == list(config_mod.KEY_FIELDS)
    assert len(keys) == len(set(keys))
    assert keys[0] == "method"
    assert "lambda" in keys and "lam" not in keys


def test_round_trip_is_stable():
    text = config_to_text(RunConfig())
    assert config_to_text(config_from_text(text)) == text


def test_load_config_reads_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("steps = 5\nmethod = sft\n")
    cfg = load_config(path, ["steps=6"])
    assert cfg.steps == 6
    assert cfg.method == "sft"


def test_dataset_spec_construction():
    cfg = config_from_text(
        "dataset_kind = gaussian-mixture\ndataset_conditions = 3\n"
        "dataset_radius = 2.0\ndataset_std = 0.1\n"
    )
    spec = cfg.dataset_spec()
    assert spec.kind == "gaussian-mixture"
    assert spec.cond_count == 3
    assert np.allclose(spec.means[0], [2.0, 0.0])

    moons = config_from_text("dataset_kind = two-moons\ndataset_noise = 0.05\n")
    assert moons.dataset_spec().kind == "two-moons"

    board = config_from_text("dataset_kind = checkerboard\ndataset_conditions = 4\n")
    assert board.dataset_spec().kind == "checkerboard"


def test_single_point_spec_parses_point():
    cfg = config_from_text(
        "dataset_kind = single-point\ndataset_point = 1.5,-2.0\ndataset_conditions = 2\n"
    )
    spec = cfg.dataset_spec()
    assert spec.kind == "single-point"
    assert np.array_equal(spec.point, [1.5, -2.0])


def test_single_point_bad_point_rejected():
    with pytest.raises(ConfigError) as exc:
        config_from_text("dataset_kind = single-point\ndataset_point = 1.5;2.0\n")
    assert exc.value.key == "dataset_point"


def test_unknown_dataset_kind_direct():
    cfg = RunConfig()
    cfg.dataset_kind = "spiral"
    with pytest.raises(ConfigError) as exc:
        cfg.dataset_spec()
    assert exc.value.key == "dataset_kind"


def test_derived_objects_match_fields():
    cfg = config_from_text(
        "K = 8\nN = 2\nM = 2\nlambda = 0.5\nw_cfg = 4.5\neta = 0.25\n"
        "renoise_mode = fresh-z1\ncond_dropout = 0.2\n"
        "steps = 40\nbatch_size = 16\nlr = 0.001\ndataset_size = 256\n"
        "hidden_width = 32\nhidden_depth = 2\nembed_dim = 4\n"
        "weighting = sigma-squared\nschedule = shifted\nschedule_shift = 2.0\n"
    )
    sc = cfg.soar_config()
    assert (sc.K, sc.N, sc.M, sc.lam, sc.w_cfg, sc.eta) == (8, 2, 2, 0.5, 4.5, 0.25)
    assert sc.renoise_mode == "fresh-z1"
    ts = cfg.train_settings()
    assert (ts.steps, ts.batch_size, ts.lr) == (40, 16, 0.001)
    assert (ts.hidden_width, ts.hidden_depth, ts.embed_dim) == (32, 2, 4)
    assert cfg.loss_weighting().kind == "sigma-squared"
    sched = cfg.noise_schedule()
    assert sched.kind == "shifted"
    assert flow.sigma_of_t(sched, 0.5) == pytest.approx(2.0 * 0.5 / (1.0 + 1.0 * 0.5))
