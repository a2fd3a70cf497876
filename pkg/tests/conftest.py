"""Shared fixtures: small randomized models and common RNG streams."""

from __future__ import annotations

import numpy as np
import pytest

from soarlab import numerics


def tiny_model(seed: int = 7, *, latent_dim: int = 2, cond_count: int = 2,
               width: int = 16, depth: int = 2, randomize: bool = True):
    """A small velocity model; randomize fills the zero output layer too."""
    rng = numerics.Rng(seed)
    model = numerics.init_velocity_model(
        latent_dim, cond_count, rng,
        embed_dim=4, hidden_width=width, hidden_depth=depth, sigma_freqs=2,
    )
    if randomize:
        r = rng.split("perturb")
        for name in sorted(model.params):
            p = model.params[name]
            model.params[name] = p + 0.3 * r.standard_normal(p.shape)
    return model


@pytest.fixture
def rng():
    return numerics.Rng(1234)


@pytest.fixture
def model():
    return tiny_model()


def params_close(a: dict, b: dict, tol: float = 0.0) -> bool:
    if a.keys() != b.keys():
        return False
    for name in a:
        if tol == 0.0:
            if not np.array_equal(a[name], b[name]):
                return False
        elif np.max(np.abs(a[name] - b[name])) > tol:
            return False
    return True
