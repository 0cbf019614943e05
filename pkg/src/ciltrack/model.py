"""Learnable head: class logits and Re-ID embeddings from appearance
features, with exact analytic gradients and SGD with momentum.

Architecture: a shared 2-layer tanh perceptron F -> H -> H, a linear
classifier H -> (C+1) (the last output is background), and a linear
embedding head H -> N_d.  Embeddings are raw (no normalization here).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericalError, ShapeError

CHECKPOINT_MAGIC = b"CILCKPT1"

PARAM_FIELDS = ("w1", "b1", "w2", "b2", "wc", "bc", "we", "be")


@dataclass(frozen=True)
class ModelParams:
    w1: np.ndarray  # (H, F)
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (H, H)
    b2: np.ndarray  # (H,)
    wc: np.ndarray  # (C+1, H), last row = background
    bc: np.ndarray  # (C+1,)
    we: np.ndarray  # (N_d, H)
    be: np.ndarray  # (N_d,)

    def __post_init__(self):
        for name in PARAM_FIELDS:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ShapeError(f"non-finite entries in {name}")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def feature_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def n_classes(self) -> int:
        return self.wc.shape[0] - 1

    @property
    def embed_dim(self) -> int:
        return self.we.shape[0]

    def arrays(self):
        return tuple(getattr(self, name) for name in PARAM_FIELDS)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, flat: np.ndarray) -> "ModelParams":
        out, i = {}, 0
        for name in PARAM_FIELDS:
            shape = getattr(self, name).shape
            n = int(np.prod(shape))
            out[name] = flat[i : i + n].reshape(shape)
            i += n
        return ModelParams(**out)

    def zeros_like(self) -> "ModelParams":
        return ModelParams(**{n: np.zeros_like(getattr(self, n)) for n in PARAM_FIELDS})


def init_params(
    feature_dim: int,
    n_classes: int,
    hidden_dim: int = 64,
    embed_dim: int = 16,
    seed: int = 0,
) -> ModelParams:
    rng = np.random.default_rng(seed)

    def layer(n_out, n_in):
        return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_out, n_in))

    return ModelParams(
        w1=layer(hidden_dim, feature_dim),
        b1=np.zeros(hidden_dim),
        w2=layer(hidden_dim, hidden_dim),
        b2=np.zeros(hidden_dim),
        wc=layer(n_classes + 1, hidden_dim),
        bc=np.zeros(n_classes + 1),
        we=layer(embed_dim, hidden_dim),
        be=np.zeros(embed_dim),
    )


# ---------------------------------------------------------------------------
# Forward / backward


@dataclass(frozen=True)
class ForwardCache:
    x: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    logits: np.ndarray
    embed: np.ndarray


def forward_batch(p: ModelParams, feats: np.ndarray) -> ForwardCache:
    """Batched forward pass; keeps intermediates for backprop."""
    x = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    if x.shape[1] != p.feature_dim:
        raise ShapeError(
            f"feature dim {x.shape[1]} does not match model ({p.feature_dim})"
        )
    if not np.all(np.isfinite(x)):
        raise ShapeError("non-finite feature input")
    h1 = np.tanh(x @ p.w1.T + p.b1)
    h2 = np.tanh(h1 @ p.w2.T + p.b2)
    logits = h2 @ p.wc.T + p.bc
    embed = h2 @ p.we.T + p.be
    return ForwardCache(x=x, h1=h1, h2=h2, logits=logits, embed=embed)


def forward(p: ModelParams, feat: np.ndarray):
    """Single-sample forward: (logits, embed)."""
    cache = forward_batch(p, np.asarray(feat)[None, :])
    return cache.logits[0], cache.embed[0]


def backward_batch(
    p: ModelParams,
    cache: ForwardCache,
    dlogits: np.ndarray | None = None,
    dembed: np.ndarray | None = None,
) -> ModelParams:
    """Parameter gradients given upstream gradients on logits/embeddings."""
    B = cache.x.shape[0]
    if dlogits is None:
        dlogits = np.zeros((B, p.n_classes + 1))
    if dembed is None:
        dembed = np.zeros((B, p.embed_dim))
    if dlogits.shape != cache.logits.shape or dembed.shape != cache.embed.shape:
        raise ShapeError("upstream gradient shape mismatch")
    dwc = dlogits.T @ cache.h2
    dbc = dlogits.sum(axis=0)
    dwe = dembed.T @ cache.h2
    dbe = dembed.sum(axis=0)
    dh2 = dlogits @ p.wc + dembed @ p.we
    dz2 = dh2 * (1.0 - cache.h2**2)
    dw2 = dz2.T @ cache.h1
    db2 = dz2.sum(axis=0)
    dh1 = dz2 @ p.w2
    dz1 = dh1 * (1.0 - cache.h1**2)
    dw1 = dz1.T @ cache.x
    db1 = dz1.sum(axis=0)
    return ModelParams(w1=dw1, b1=db1, w2=dw2, b2=db2, wc=dwc, bc=dbc, we=dwe, be=dbe)


def add_grads(a: ModelParams, b: ModelParams) -> ModelParams:
    return ModelParams(
        **{n: getattr(a, n) + getattr(b, n) for n in PARAM_FIELDS}
    )


def scale_grads(a: ModelParams, s: float) -> ModelParams:
    return ModelParams(**{n: getattr(a, n) * s for n in PARAM_FIELDS})


def clip_grads(g: ModelParams, max_norm: float) -> ModelParams:
    """Rescale so the global L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float((arr**2).sum()) for arr in g.arrays())))
    if norm <= max_norm or norm == 0.0:
        return g
    return scale_grads(g, max_norm / norm)


# ---------------------------------------------------------------------------
# Classifier extension


def extend_classifier(
    p: ModelParams, n_new: int, seed: int = 0
) -> ModelParams:
    """Widen the classifier by ``n_new`` classes.

    Old class rows are copied verbatim, new rows start at N(0, 0.01^2),
    and the background row stays last, so old-class logits are preserved
    exactly on every input.
    """
    if n_new < 1:
        raise ValueError("n_new must be >= 1")
    rng = np.random.default_rng(seed)
    new_rows = rng.normal(0.0, 0.01, size=(n_new, p.hidden_dim))
    wc = np.vstack([p.wc[:-1], new_rows, p.wc[-1:]])
    bc = np.concatenate([p.bc[:-1], np.zeros(n_new), p.bc[-1:]])
    return replace(p, wc=wc, bc=bc)


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class OptState:
    velocity: ModelParams
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4

    @classmethod
    def fresh(cls, p: ModelParams, lr=0.02, momentum=0.9, weight_decay=1e-4):
        return cls(
            velocity=p.zeros_like(),
            lr=lr,
            momentum=momentum,
            weight_decay=weight_decay,
        )


def sgd_step(
    p: ModelParams, grads: ModelParams, state: OptState
) -> tuple[ModelParams, OptState]:
    """v <- m v + g + wd w;  w <- w - lr v."""
    new_params, new_vel = {}, {}
    for name in PARAM_FIELDS:
        w = getattr(p, name)
        g = getattr(grads, name)
        v = getattr(state.velocity, name)
        if g.shape != w.shape:
            raise ShapeError(f"gradient shape mismatch for {name}")
        v = state.momentum * v + g + state.weight_decay * w
        new_vel[name] = v
        new_params[name] = w - state.lr * v
    return ModelParams(**new_params), replace(state, velocity=ModelParams(**new_vel))


def lr_schedule(epoch: int, base_lr: float) -> float:
    """Step decay for 6-epoch stages: /10 at epoch 4, /100 from epoch 5."""
    if epoch < 4:
        return base_lr
    if epoch == 4:
        return base_lr / 10.0
    return base_lr / 100.0


# ---------------------------------------------------------------------------
# Finite-difference verification


def grad_check(loss_and_grad, p: ModelParams, eps: float = 1e-5) -> float:
    """Compare analytic gradients against central finite differences.

    ``loss_and_grad(p)`` must return ``(value, grads: ModelParams)``.
    Returns the max over parameters of
    ``|g_a - g_fd| / max(1e-8, |g_a| + |g_fd|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    value, grads = loss_and_grad(p)
    if not np.isfinite(value):
        raise NumericalError("loss is non-finite")
    g_a = grads.flat()
    flat = p.flat()
    g_fd = np.empty_like(g_a)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = eps
        lo, _ = loss_and_grad(p.with_flat(flat - bump))
        hi, _ = loss_and_grad(p.with_flat(flat + bump))
        if not (np.isfinite(lo) and np.isfinite(hi)):
            raise NumericalError("loss is non-finite under perturbation")
        g_fd[i] = (hi - lo) / (2.0 * eps)
    denom = np.maximum(1e-8, np.abs(g_a) + np.abs(g_fd))
    return float(np.max(np.abs(g_a - g_fd) / denom))


# ---------------------------------------------------------------------------
# Checkpoint format: magic, u64 metadata length, JSON metadata, little-endian
# float64 blob holding parameters followed by any extra state arrays.


def save_checkpoint(
    path: str,
    p: ModelParams,
    metadata: dict | None = None,
    extra_arrays: dict[str, np.ndarray] | None = None,
) -> None:
    metadata = dict(metadata or {})
    extra_arrays = extra_arrays or {}
    layout = [[name, list(getattr(p, name).shape)] for name in PARAM_FIELDS]
    extra_layout = [[name, list(np.asarray(a).shape)] for name, a in extra_arrays.items()]
    metadata.update(
        {
            "format_version": 1,
            "feature_dim": p.feature_dim,
            "hidden_dim": p.hidden_dim,
            "n_classes": p.n_classes,
            "embed_dim": p.embed_dim,
            "param_layout": layout,
            "extra_layout": extra_layout,
        }
    )
    blob = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes() for a in p.arrays()
    )
    blob += b"".join(
        np.ascontiguousarray(np.asarray(a, dtype=np.float64), dtype="<f8").tobytes()
        for a in extra_arrays.values()
    )
    meta_bytes = json.dumps(metadata, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(blob)


def load_checkpoint(path: str):
    """Returns (params, metadata, extra_arrays)."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ShapeError(f"{path}: not a checkpoint file")
        (meta_len,) = struct.unpack("<Q", f.read(8))
        metadata = json.loads(f.read(meta_len).decode())
        blob = f.read()
    offset = 0
    fields = {}
    for name, shape in metadata["param_layout"]:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape)
        fields[name] = arr.copy()
        offset += n * 8
    extras = {}
    for name, shape in metadata["extra_layout"]:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape)
        extras[name] = arr.copy()
        offset += n * 8
    return ModelParams(**fields), metadata, extras


def checkpoint_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        h.update(f.read())
    return h.hexdigest()
