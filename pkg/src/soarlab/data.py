"""Synthetic conditional datasets standing in for paired real data: labeled
2-D (optionally higher-dim) mixtures with deterministic seeded sampling,
score-threshold subset filtering, and distributional distance metrics.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .errors import ContractViolation, DomainError

DATASET_KINDS = ("gaussian-mixture", "two-moons", "checkerboard", "single-point")
FILTER_KINDS = ("log-density-under-spec", "coordinate-threshold")
DISTANCE_METRICS = ("sliced-w2", "energy-distance")


@dataclass(frozen=True)
class DatasetSpec:
    """A fixed conditional distribution over (z0, cond) pairs.

    means/stds describe the per-condition components for gaussian-mixture;
    point is the sole atom of single-point; noise is the two-moons jitter;
    cells are the unit-square corners owned per condition by checkerboard.
    """

    kind: str
    dim: int
    cond_count: int
    means: np.ndarray | None = None
    stds: np.ndarray | None = None
    point: np.ndarray | None = None
    noise: float = 0.1
    cells: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ContractViolation(f"unknown dataset kind {self.kind!r}")
        if self.cond_count < 1:
            raise ContractViolation("condition count must be >= 1")
        if self.dim < 1:
            raise ContractViolation("dim must be >= 1")
        if self.kind == "gaussian-mixture":
            if self.means is None or self.stds is None:
                raise ContractViolation("gaussian-mixture needs means and stds")
            if self.means.shape != (self.cond_count, self.dim):
                raise ContractViolation("means must be (cond_count, dim)")
            if np.any(np.asarray(self.stds) <= 0):
                raise ContractViolation("stds must be positive")
        if self.kind in ("two-moons", "checkerboard") and self.dim != 2:
            raise ContractViolation(f"{self.kind} is 2-D only")
        if self.kind == "single-point" and (
            self.point is None or self.point.shape != (self.dim,)
        ):
            raise ContractViolation("single-point needs a dim-length point")
        if self.kind == "checkerboard" and (
            self.cells is None or self.cells.shape != (self.cond_count, 2)
        ):
            raise ContractViolation("checkerboard needs one cell corner per condition")


@dataclass(frozen=True)
class TrainingPair:
    z0: np.ndarray
    cond: int


def gaussian_mixture_spec(
    cond_count: int = 4, dim: int = 2, radius: float = 4.0, std: float = 0.3
) -> DatasetSpec:
    """Isotropic Gaussians with means equally spaced on a circle.

    For dim > 2 the circle lives in the first two coordinates and remaining
    means are zero; the component noise stays isotropic in all dims.
    """
    angles = 2.0 * np.pi * np.arange(cond_count) / cond_count
    means = np.zeros((cond_count, dim))
    means[:, 0] = radius * np.cos(angles)
    if dim > 1:
        means[:, 1] = radius * np.sin(angles)
    stds = np.full(cond_count, float(std))
    return DatasetSpec("gaussian-mixture", dim, cond_count, means=means, stds=stds)


def two_moons_spec(noise: float = 0.1) -> DatasetSpec:
    """Two interleaved half-circles; condition 0 is the upper moon."""
    return DatasetSpec("two-moons", 2, 2, noise=float(noise))


def checkerboard_spec(cond_count: int = 8, extent: int = 2) -> DatasetSpec:
    """Dark cells of a (2*extent)x(2*extent) unit checkerboard over
    [-extent, extent)^2; each condition owns one cell, row-major order.
    """
    corners = []
    for iy in range(-extent, extent):
        for ix in range(-extent, extent):
            if (ix + iy) % 2 == 0:
                corners.append((ix, iy))
    cells = np.asarray(corners, dtype=np.float64)
    if cond_count > len(cells):
        raise ContractViolation(
            f"checkerboard with extent {extent} has only {len(cells)} cells"
        )
    return DatasetSpec(
        "checkerboard", 2, cond_count, cells=cells[:cond_count].copy()
    )


def single_point_spec(point, cond_count: int = 1) -> DatasetSpec:
    p = numerics.as_vector(point)
    return DatasetSpec("single-point", p.shape[0], cond_count, point=p)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def _component_arrays(spec: DatasetSpec, conds: np.ndarray, rng: numerics.Rng) -> np.ndarray:
    """z0 rows for given condition ids; one vectorized draw block per call."""
    n = conds.shape[0]
    if spec.kind == "gaussian-mixture":
        noise = rng.standard_normal((n, spec.dim))
        return spec.means[conds] + spec.stds[conds][:, None] * noise
    if spec.kind == "two-moons":
        phi = rng.uniform(0.0, np.pi, size=n)
        jitter = spec.noise * rng.standard_normal((n, 2))
        upper = np.stack([np.cos(phi), np.sin(phi)], axis=1)
        lower = np.stack([1.0 - np.cos(phi), 0.5 - np.sin(phi)], axis=1)
        return np.where((conds == 0)[:, None], upper, lower) + jitter
    if spec.kind == "checkerboard":
        u = rng.uniform(0.0, 1.0, size=(n, 2))
        return spec.cells[conds] + u
    # single-point
    return np.tile(spec.point, (n, 1))


def sample_arrays(spec: DatasetSpec, n: int, rng: numerics.Rng):
    """(z0 array (n, dim), cond array (n,)) with uniform condition draws."""
    if n < 1:
        raise ContractViolation(f"n must be >= 1, got {n}")
    conds = np.asarray(rng.integers(0, spec.cond_count, size=n), dtype=np.int64)
    return _component_arrays(spec, conds, rng), conds


def sample_pairs(spec: DatasetSpec, n: int, rng: numerics.Rng) -> list:
    """n TrainingPairs; conditions uniform, z0 from that condition's component."""
    z0, conds = sample_arrays(spec, n, rng)
    return [TrainingPair(z0[i], int(conds[i])) for i in range(n)]


def sample_component(spec: DatasetSpec, cond: int, n: int, rng: numerics.Rng) -> np.ndarray:
    """n draws from one condition's component, as an (n, dim) array."""
    if not (0 <= cond < spec.cond_count):
        raise ContractViolation(f"condition {cond} out of range")
    conds = np.full(n, cond, dtype=np.int64)
    return _component_arrays(spec, conds, rng)


# ---------------------------------------------------------------------------
# Score filtering
# ---------------------------------------------------------------------------


def log_density(spec: DatasetSpec, z) -> float:
    """Log density of the dataset's marginal z0 distribution at z.

    two-moons has no closed form and is rejected; single-point returns 0 at
    the atom and -inf elsewhere (enough for thresholding).
    """
    zv = numerics.as_vector(z, spec.dim)
    if spec.kind == "gaussian-mixture":
        diffs = zv[None, :] - spec.means
        var = spec.stds**2
        logs = (
            -0.5 * np.sum(diffs**2, axis=1) / var
            - 0.5 * spec.dim * np.log(2.0 * np.pi * var)
            - np.log(spec.cond_count)
        )
        m = np.max(logs)
        return float(m + np.log(np.sum(np.exp(logs - m))))
    if spec.kind == "checkerboard":
        inside = np.all(
            (spec.cells <= zv[None, :]) & (zv[None, :] < spec.cells + 1.0), axis=1
        )
        return float(-np.log(spec.cond_count)) if np.any(inside) else -np.inf
    if spec.kind == "single-point":
        return 0.0 if np.array_equal(zv, spec.point) else -np.inf
    raise DomainError(f"{spec.kind} has no closed-form density")


@dataclass(frozen=True)
class ScoreFilter:
    """Keeps pairs whose score is >= threshold.

    log-density-under-spec scores z0 by log_density (requires spec);
    coordinate-threshold scores by the raw coordinate z0[coord].
    """

    kind: str
    threshold: float
    spec: DatasetSpec | None = None
    coord: int = 0

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise ContractViolation(f"unknown filter kind {self.kind!r}")
        if self.kind == "log-density-under-spec" and self.spec is None:
            raise ContractViolation("log-density filter needs the dataset spec")

    def score(self, pair: TrainingPair) -> float:
        if self.kind == "log-density-under-spec":
            return log_density(self.spec, pair.z0)
        return float(pair.z0[self.coord])


def filter_subset(pairs, filt: ScoreFilter) -> list:
    """Pairs scoring >= threshold, original order preserved. Idempotent."""
    return [p for p in pairs if filt.score(p) >= filt.threshold]


# ---------------------------------------------------------------------------
# Distribution distances
# ---------------------------------------------------------------------------


def _wasserstein2_1d(a: np.ndarray, b: np.ndarray) -> float:
    """Closed-form 1-D W2 between empirical distributions (quantile match)."""
    a = np.sort(a)
    b = np.sort(b)
    if a.shape[0] != b.shape[0]:
        k = max(a.shape[0], b.shape[0])
        q = (np.arange(k) + 0.5) / k
        a = np.quantile(a, q)
        b = np.quantile(b, q)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def _pairwise_mean_norm(a: np.ndarray, b: np.ndarray) -> float:
    d2 = np.sum(a**2, axis=1)[:, None] + np.sum(b**2, axis=1)[None, :] - 2.0 * a @ b.T
    return float(np.mean(np.sqrt(np.maximum(d2, 0.0))))


def dataset_distance(
    samples_a,
    samples_b,
    metric: str = "sliced-w2",
    projections: int = 64,
    rng: numerics.Rng | None = None,
) -> float:
    """Distance between two empirical distributions.

    sliced-w2 averages the 1-D Wasserstein-2 over `projections` random unit
    directions drawn from rng (required for dim > 1); energy-distance is the
    V-statistic 2 E|a-b| - E|a-a'| - E|b-b'|. Both are symmetric, nonnegative,
    and zero for identical sample multisets.
    """
    A = np.asarray(samples_a, dtype=np.float64)
    B = np.asarray(samples_b, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    if B.ndim == 1:
        B = B[:, None]
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ContractViolation("both sample sets must be nonempty")
    if A.shape[1] != B.shape[1]:
        raise ContractViolation("sample dims differ")
    if metric == "energy-distance":
        cross = _pairwise_mean_norm(A, B)
        within_a = _pairwise_mean_norm(A, A)
        within_b = _pairwise_mean_norm(B, B)
        return max(2.0 * cross - within_a - within_b, 0.0)
    if metric != "sliced-w2":
        raise ContractViolation(f"unknown metric {metric!r}")
    dim = A.shape[1]
    if dim == 1:
        return _wasserstein2_1d(A[:, 0], B[:, 0])
    if rng is None:
        raise ContractViolation("sliced-w2 in dim > 1 needs an rng for projections")
    if projections < 1:
        raise ContractViolation("projections must be >= 1")
    dirs = rng.standard_normal((projections, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    total = 0.0
    for u in dirs:
        total += _wasserstein2_1d(A @ u, B @ u)
    return total / projections


# ---------------------------------------------------------------------------
# CSV dump / load
# ---------------------------------------------------------------------------


def dump_pairs_csv(path, pairs, spec: DatasetSpec) -> None:
    """Rows of cond plus coordinates, preceded by a kind/dim comment line."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# kind={spec.kind} dim={spec.dim}\n")
        writer = csv.writer(fh)
        writer.writerow(["cond"] + [f"x{i}" for i in range(spec.dim)])
        for p in pairs:
            writer.writerow([p.cond] + [repr(float(x)) for x in p.z0])


def load_pairs_csv(path):
    """Returns (pairs, kind, dim) from a dump_pairs_csv file."""
    with open(path) as fh:
        head = fh.readline().strip()
        if not head.startswith("# kind="):
            raise ContractViolation("missing kind/dim header line")
        fields = dict(part.split("=") for part in head[2:].split())
        kind = fields["kind"]
        dim = int(fields["dim"])
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["cond"] + [f"x{i}" for i in range(dim)]:
            raise ContractViolation("unexpected dataset CSV header")
        pairs = []
        for row in reader:
            pairs.append(
                TrainingPair(np.array([float(x) for x in row[1:]]), int(row[0]))
            )
    return pairs, kind, dim
