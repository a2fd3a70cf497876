"""Numeric substrate: seeded splittable RNG, a small MLP velocity model with
explicit reverse-mode gradients, an Adam optimizer, and the binary checkpoint
format.

Everything is float64. Model instances are single-writer; batched evaluation
uses one deterministic reduction order, so results are reproducible bit for
bit under a fixed seed.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, ContractViolation

NULL_COND = -1  # public marker for the unconditional branch


def _label_words(label) -> tuple[int, int]:
    """Map an arbitrary label to two uint32 words (stable across runs)."""
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    a = int.from_bytes(digest[:4], "little")
    b = int.from_bytes(digest[4:8], "little")
    return a, b


class Rng:
    """Counter-based random stream, splittable into independent substreams.

    Identical (seed, split path) always reproduces the identical stream.
    `split(label)` derives a child stream whose draws are independent of the
    parent's and of any sibling's; the parent stream is not advanced.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._key = _key
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=_key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def split(self, label) -> "Rng":
        return Rng(self.seed, self._key + _label_words(label))

    def standard_normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size)

    def __repr__(self):
        return f"Rng(seed={self.seed}, key={self._key})"


def gaussian(rng: Rng, dim: int) -> np.ndarray:
    """dim i.i.d. standard-normal entries drawn from rng's stream."""
    if dim < 1:
        raise ContractViolation(f"gaussian dim must be >= 1, got {dim}")
    return rng.standard_normal(dim)


def as_vector(x, dim: int | None = None) -> np.ndarray:
    """Coerce to a finite 1-D float64 array, optionally checking its length."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ContractViolation(f"expected 1-D vector, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise ContractViolation(f"expected dim {dim}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ContractViolation("vector contains non-finite entries")
    return v


# ---------------------------------------------------------------------------
# Velocity model: MLP on [z, cond-embedding, sigma, sinusoidal(sigma)]
# ---------------------------------------------------------------------------


@dataclass
class VelocityModel:
    """Feed-forward velocity field v(z, cond, sigma) -> velocity.

    Parameters live in `params`, a name -> float64 array map iterated in
    lexicographic name order everywhere. The condition embedding table has
    one row per condition id plus a final reserved row for the null
    (unconditional) branch.
    """

    latent_dim: int
    cond_count: int
    embed_dim: int = 8
    hidden_width: int = 128
    hidden_depth: int = 3
    sigma_freqs: int = 4
    params: dict = field(default_factory=dict)

    @property
    def null_cond_row(self) -> int:
        return self.cond_count

    @property
    def input_dim(self) -> int:
        # latent + embedding + raw sigma + sin/cos features
        return self.latent_dim + self.embed_dim + 1 + 2 * self.sigma_freqs

    @property
    def layer_widths(self) -> list[int]:
        return [self.input_dim] + [self.hidden_width] * self.hidden_depth + [self.latent_dim]

    @property
    def n_layers(self) -> int:
        return self.hidden_depth + 1

    def predict(self, z, cond, sigma) -> np.ndarray:
        return forward(self, z, cond, sigma)


def init_velocity_model(
    latent_dim: int,
    cond_count: int,
    rng: Rng,
    *,
    embed_dim: int = 8,
    hidden_width: int = 128,
    hidden_depth: int = 3,
    sigma_freqs: int = 4,
) -> VelocityModel:
    """Build a model with uniform(-1/sqrt(fan_in)) init and a zero final layer.

    The zero-initialized output layer makes the initial velocity field exactly
    zero, which gives a checkable starting state.
    """
    if latent_dim < 1 or cond_count < 1:
        raise ContractViolation("latent_dim and cond_count must be >= 1")
    if hidden_depth < 0 or hidden_depth > 9:
        raise ContractViolation("hidden_depth must be in [0, 9]")
    model = VelocityModel(
        latent_dim=latent_dim,
        cond_count=cond_count,
        embed_dim=embed_dim,
        hidden_width=hidden_width,
        hidden_depth=hidden_depth,
        sigma_freqs=sigma_freqs,
    )
    widths = model.layer_widths
    r = rng.split("model-init")
    params: dict[str, np.ndarray] = {}
    scale_e = 1.0 / np.sqrt(embed_dim)
    params["embed.table"] = r.uniform(-scale_e, scale_e, (cond_count + 1, embed_dim))
    for i in range(model.n_layers):
        fan_in, fan_out = widths[i], widths[i + 1]
        if i == model.n_layers - 1:
            w = np.zeros((fan_out, fan_in))
        else:
            w = r.uniform(-1.0 / np.sqrt(fan_in), 1.0 / np.sqrt(fan_in), (fan_out, fan_in))
        params[f"layer{i}.w"] = w
        params[f"layer{i}.b"] = np.zeros(fan_out)
    model.params = params
    return model


def _sigmoid(x):
    # exp only of non-positive values, so no overflow for any finite input
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def _silu(x):
    return x * _sigmoid(x)


def _silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _cond_rows(model: VelocityModel, conds: np.ndarray) -> np.ndarray:
    rows = np.asarray(conds, dtype=np.int64).copy()
    rows[rows == NULL_COND] = model.null_cond_row
    if np.any(rows < 0) or np.any(rows > model.null_cond_row):
        raise ContractViolation(f"condition id out of range [0, {model.cond_count - 1}]")
    return rows


def _sigma_features(sigmas: np.ndarray, freqs: int) -> np.ndarray:
    """[sigma, sin(2^k pi sigma), cos(2^k pi sigma)] feature block, k < freqs."""
    cols = [sigmas[:, None]]
    for k in range(freqs):
        w = (2.0**k) * np.pi
        cols.append(np.sin(w * sigmas)[:, None])
        cols.append(np.cos(w * sigmas)[:, None])
    return np.concatenate(cols, axis=1)


@dataclass
class FwdCache:
    """Activations recorded by a cached forward pass, consumed by backward."""

    x: np.ndarray            # (n, input_dim)
    cond_rows: np.ndarray    # (n,)
    pre_acts: list           # per hidden layer, (n, width)
    hiddens: list            # inputs to each layer: hiddens[0] is x
    n: int


def forward_batch(model: VelocityModel, states, conds, sigmas, *, want_cache: bool = False):
    """Velocity predictions for a batch of (state, cond, sigma) rows.

    states: (n, latent_dim); conds: (n,) ints with NULL_COND for the
    unconditional row; sigmas: (n,) floats in [0, 1]. Returns (out, cache)
    with cache None unless requested.
    """
    z = np.asarray(states, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != model.latent_dim:
        raise ContractViolation(f"states must be (n, {model.latent_dim}), got {z.shape}")
    sig = np.asarray(sigmas, dtype=np.float64)
    if sig.shape != (z.shape[0],):
        raise ContractViolation("sigmas must be one scalar per state row")
    if not np.all(np.isfinite(sig)):
        raise ContractViolation("sigma contains non-finite entries")
    if np.any(sig < -1e-9) or np.any(sig > 1.0 + 1e-9):
        raise ContractViolation("sigma outside [0, 1]")
    sig = np.clip(sig, 0.0, 1.0)
    rows = _cond_rows(model, conds)

    table = model.params["embed.table"]
    x = np.concatenate([z, table[rows], _sigma_features(sig, model.sigma_freqs)], axis=1)

    h = x
    pre_acts = []
    hiddens = [x]
    for i in range(model.hidden_depth):
        a = h @ model.params[f"layer{i}.w"].T + model.params[f"layer{i}.b"]
        pre_acts.append(a)
        h = _silu(a)
        hiddens.append(h)
    last = model.n_layers - 1
    out = h @ model.params[f"layer{last}.w"].T + model.params[f"layer{last}.b"]

    cache = FwdCache(x=x, cond_rows=rows, pre_acts=pre_acts, hiddens=hiddens, n=z.shape[0]) if want_cache else None
    return out, cache


def forward(model: VelocityModel, z, cond, sigma) -> np.ndarray:
    """Single-state velocity prediction. cond may be an int id or None."""
    zv = as_vector(z, model.latent_dim)
    c = NULL_COND if cond is None else int(cond)
    out, _ = forward_batch(model, zv[None, :], np.array([c]), np.array([float(sigma)]))
    return out[0]


def forward_cached(model: VelocityModel, z, cond, sigma):
    """Like forward, but also returns the activation cache for backward."""
    zv = as_vector(z, model.latent_dim)
    c = NULL_COND if cond is None else int(cond)
    out, cache = forward_batch(
        model, zv[None, :], np.array([c]), np.array([float(sigma)]), want_cache=True
    )
    return out[0], cache


def backward_batch(model: VelocityModel, cache: FwdCache, out_grad) -> dict:
    """Parameter gradients of a scalar loss with d(loss)/d(output) = out_grad.

    out_grad: (n, latent_dim) matching the cached forward batch. Returns a
    GradSet: same key set and shapes as model.params.
    """
    if cache is None:
        raise ContractViolation("backward requires the cache from a cached forward pass")
    delta = np.asarray(out_grad, dtype=np.float64)
    if delta.shape != (cache.n, model.latent_dim):
        raise ContractViolation(
            f"out_grad must be ({cache.n}, {model.latent_dim}), got {delta.shape}"
        )
    grads = {name: np.zeros_like(p) for name, p in model.params.items()}

    last = model.n_layers - 1
    grads[f"layer{last}.w"] = delta.T @ cache.hiddens[last]
    grads[f"layer{last}.b"] = delta.sum(axis=0)
    delta = delta @ model.params[f"layer{last}.w"]
    for i in range(model.hidden_depth - 1, -1, -1):
        delta = delta * _silu_grad(cache.pre_acts[i])
        grads[f"layer{i}.w"] = delta.T @ cache.hiddens[i]
        grads[f"layer{i}.b"] = delta.sum(axis=0)
        delta = delta @ model.params[f"layer{i}.w"]

    # delta is now d(loss)/d(input features); embedding rows see their slice
    emb_grad = delta[:, model.latent_dim : model.latent_dim + model.embed_dim]
    np.add.at(grads["embed.table"], cache.cond_rows, emb_grad)
    return grads


def backward(model: VelocityModel, cache: FwdCache, output_gradient) -> dict:
    """Single-state wrapper over backward_batch."""
    g = as_vector(output_gradient, model.latent_dim)
    return backward_batch(model, cache, g[None, :])


# ---------------------------------------------------------------------------
# GradSet helpers
# ---------------------------------------------------------------------------


def zero_grads(params: dict) -> dict:
    return {name: np.zeros_like(p) for name, p in params.items()}


def add_grads(acc: dict, other: dict, scale: float = 1.0) -> dict:
    """acc += scale * other, in place. Key sets must match."""
    if acc.keys() != other.keys():
        raise ContractViolation("gradient key sets differ")
    for name in acc:
        acc[name] += scale * other[name]
    return acc


def scale_grads(grads: dict, scale: float) -> dict:
    for name in grads:
        grads[name] *= scale
    return grads


def grad_norm(grads: dict) -> float:
    total = 0.0
    for name in sorted(grads):
        total += float(np.sum(grads[name] ** 2))
    return float(np.sqrt(total))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0


def init_adam(params: dict) -> AdamState:
    return AdamState(m=zero_grads(params), v=zero_grads(params), step=0)


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    *,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    step: int | None = None,
) -> AdamState:
    """Bias-corrected Adam update, applied elementwise in place."""
    if params.keys() != grads.keys():
        raise ContractViolation("params/grads key sets differ")
    t = state.step + 1 if step is None else int(step)
    if t < 1:
        raise ContractViolation(f"step index must be >= 1, got {t}")
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name in sorted(params):
        g = grads[name]
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)
    state.step = t
    return state


# ---------------------------------------------------------------------------
# Checkpoint format (bit-exact)
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"SOARCKPT"
CKPT_VERSION = 1

# reserved name prefixes inside a checkpoint
META_PREFIX = "meta."
OPT_PREFIX = "opt.adam."


def save_checkpoint(path, tensors: dict) -> None:
    """Write named float64 tensors in the fixed little-endian layout.

    Layout: magic, u32 version, u32 tensor count, then per tensor (sorted by
    name): u32 name length + UTF-8 name + u32 rank + u32 dims + LE float64
    payload.
    """
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype=np.float64)
            if not arr.flags["C_CONTIGUOUS"]:
                # ascontiguousarray would also promote rank-0 to rank-1
                arr = np.ascontiguousarray(arr)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> dict:
    """Read a checkpoint written by save_checkpoint; validates magic/version."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    off = len(CKPT_MAGIC)

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = blob[off : off + n]
        off += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = [struct.unpack("<I", take(4))[0] for _ in range(rank)]
        n_items = int(np.prod(dims)) if dims else 1
        payload = take(8 * n_items)
        tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    if off != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after payload")
    return tensors


def model_to_tensors(model: VelocityModel, adam: AdamState | None = None) -> dict:
    """Flatten a model (and optionally its Adam buffers) into checkpoint tensors."""
    tensors = dict(model.params)
    tensors[META_PREFIX + "arch"] = np.array(
        [
            model.latent_dim,
            model.cond_count,
            model.embed_dim,
            model.hidden_width,
            model.hidden_depth,
            model.sigma_freqs,
        ],
        dtype=np.float64,
    )
    if adam is not None:
        for name, arr in adam.m.items():
            tensors[OPT_PREFIX + "m." + name] = arr
        for name, arr in adam.v.items():
            tensors[OPT_PREFIX + "v." + name] = arr
        tensors[OPT_PREFIX + "step"] = np.array([adam.step], dtype=np.float64)
    return tensors


def model_from_tensors(tensors: dict) -> tuple[VelocityModel, AdamState | None]:
    """Rebuild a model (and Adam buffers when present) from checkpoint tensors."""
    arch_key = META_PREFIX + "arch"
    if arch_key not in tensors:
        raise CheckpointError("checkpoint lacks the architecture record")
    arch = tensors[arch_key]
    model = VelocityModel(
        latent_dim=int(arch[0]),
        cond_count=int(arch[1]),
        embed_dim=int(arch[2]),
        hidden_width=int(arch[3]),
        hidden_depth=int(arch[4]),
        sigma_freqs=int(arch[5]),
    )
    params = {
        name: arr.copy()
        for name, arr in tensors.items()
        if not name.startswith(META_PREFIX) and not name.startswith(OPT_PREFIX)
    }
    model.params = params
    adam = None
    if OPT_PREFIX + "step" in tensors:
        adam = AdamState(
            m={n: tensors[OPT_PREFIX + "m." + n].copy() for n in params},
            v={n: tensors[OPT_PREFIX + "v." + n].copy() for n in params},
            step=int(tensors[OPT_PREFIX + "step"][0]),
        )
    return model, adam


def save_model(path, model: VelocityModel, adam: AdamState | None = None) -> None:
    save_checkpoint(path, model_to_tensors(model, adam))


def load_model(path) -> tuple[VelocityModel, AdamState | None]:
    return model_from_tensors(load_checkpoint(path))
