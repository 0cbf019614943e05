"""Synthetic multi-class tracking world.

Stands in for a tracking dataset plus a frozen detector backbone: objects
move with constant velocity plus Gaussian noise inside the unit square,
and each observation carries an appearance feature

    x = B_c z + b_c + eps,

where ``z`` is a per-instance latent, ``B_c`` a per-class mixing matrix,
``b_c`` class base vectors separated by a configurable distance, and
``eps`` i.i.d. Gaussian noise.  A linear embedding head can in principle
recover instance identity while class identity stays linearly separable,
so both classification and Re-ID forgetting are observable.

``corrupt_detections`` adds detector noise: per-object drops, box jitter,
Poisson clutter, and a confidence model whose true/clutter supports
overlap (so a fixed confidence cut admits some clutter).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Annotation, BoundingBox, Frame, SequenceDataset
from .errors import ValidationError

# Default class skew echoing a long-tailed driving dataset.
DEFAULT_FREQUENCIES = (40.0, 25.0, 15.0, 10.0, 6.0, 4.0)


@dataclass(frozen=True)
class WorldConfig:
    n_classes: int = 6
    class_frequencies: tuple[float, ...] = DEFAULT_FREQUENCIES
    feature_dim: int = 32
    instance_latent_dim: int = 8
    frames_per_sequence: int = 40
    n_sequences: int = 16
    objects_per_sequence: int = 6
    motion_noise_std: float = 0.003
    appearance_noise_std: float = 0.05
    class_separation: float = 3.0
    seed: int = 0
    # The class mixing matrices and base vectors are part of the world
    # definition, not the sample: train and validation splits drawn with
    # different seeds must share them, so they get their own seed.
    appearance_seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValidationError("need at least 2 classes")
        if len(self.class_frequencies) != self.n_classes:
            raise ValidationError("class_frequencies length must equal n_classes")
        if any(f <= 0 for f in self.class_frequencies):
            raise ValidationError("class frequencies must be positive")


@dataclass(frozen=True)
class ConfidenceModel:
    """Clipped-Gaussian confidence assignment with overlapping supports."""

    true_mean: float = 0.85
    true_std: float = 0.1
    clutter_mean: float = 0.45
    clutter_std: float = 0.15


@dataclass(frozen=True)
class NoiseConfig:
    fn_prob: float = 0.15
    fp_rate: float = 2.0
    jitter_std: float = 0.005
    conf_model: ConfidenceModel = field(default_factory=ConfidenceModel)

    def __post_init__(self):
        if not 0.0 <= self.fn_prob <= 1.0:
            raise ValidationError("fn_prob must be in [0, 1]")
        if self.fp_rate < 0 or self.jitter_std < 0:
            raise ValidationError("fp_rate and jitter_std must be non-negative")


def class_basis(cfg: WorldConfig, rng: np.random.Generator):
    """Per-class mixing matrices B_c and base vectors b_c.

    Base vectors sit on a random orthonormal frame scaled so that the
    pairwise distance equals ``class_separation``.
    """
    F, L, C = cfg.feature_dim, cfg.instance_latent_dim, cfg.n_classes
    mixers = rng.normal(0.0, 1.0 / np.sqrt(L), size=(C, F, L))
    frame_q, _ = np.linalg.qr(rng.normal(size=(F, F)))
    bases = frame_q[:, :C].T * (cfg.class_separation / np.sqrt(2.0))
    return mixers, bases


def _sample_classes(cfg: WorldConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    """Class assignment for one sequence: a census pass covering every
    class once (keeps rare classes present in every sequence), remaining
    slots sampled proportional to the configured frequencies."""
    freqs = np.asarray(cfg.class_frequencies, dtype=np.float64)
    probs = freqs / freqs.sum()
    census = np.arange(cfg.n_classes)
    if n <= cfg.n_classes:
        out = census[:n]
    else:
        extra = rng.choice(cfg.n_classes, size=n - cfg.n_classes, p=probs)
        out = np.concatenate([census, extra])
    return rng.permutation(out)


def _clip_box(cx, cy, w, h):
    # Keep the center inside a margin so the box always overlaps [0,1]^2.
    cx = float(np.clip(cx, 0.02, 0.98))
    cy = float(np.clip(cy, 0.02, 0.98))
    return BoundingBox(cx, cy, w, h)


def generate_world(cfg: WorldConfig) -> SequenceDataset:
    """Generate ground-truth sequences; deterministic given ``cfg.seed``."""
    basis_rng = np.random.default_rng(np.random.SeedSequence(cfg.appearance_seed))
    mixers, bases = class_basis(cfg, basis_rng)

    root = np.random.SeedSequence(cfg.seed)
    seq_seeds = root.spawn(cfg.n_sequences)
    sequences = []
    next_instance = 0
    for s in range(cfg.n_sequences):
        rng = np.random.default_rng(seq_seeds[s])
        n_obj = cfg.objects_per_sequence
        classes = _sample_classes(cfg, n_obj, rng)
        latents = rng.normal(size=(n_obj, cfg.instance_latent_dim))
        pos = rng.uniform(0.1, 0.9, size=(n_obj, 2))
        vel = rng.uniform(-0.01, 0.01, size=(n_obj, 2))
        sizes = rng.uniform(0.05, 0.15, size=(n_obj, 2))
        instance_ids = [next_instance + i for i in range(n_obj)]
        next_instance += n_obj

        frames = []
        for t in range(cfg.frames_per_sequence):
            annotations = []
            for i in range(n_obj):
                c = int(classes[i])
                feat = (
                    mixers[c] @ latents[i]
                    + bases[c]
                    + rng.normal(0.0, cfg.appearance_noise_std, size=cfg.feature_dim)
                )
                annotations.append(
                    Annotation(
                        box=_clip_box(pos[i, 0], pos[i, 1], sizes[i, 0], sizes[i, 1]),
                        class_id=c,
                        instance_id=instance_ids[i],
                        confidence=None,
                        feature=feat,
                    )
                )
            frames.append(Frame(frame_index=t, annotations=tuple(annotations)))
            pos = pos + vel + rng.normal(0.0, cfg.motion_noise_std, size=pos.shape)
            # Bounce off the walls to keep objects visible.
            for i in range(n_obj):
                for d in range(2):
                    if pos[i, d] < 0.05 or pos[i, d] > 0.95:
                        vel[i, d] = -vel[i, d]
                        pos[i, d] = float(np.clip(pos[i, d], 0.05, 0.95))
        sequences.append((f"{s:03d}", tuple(frames)))

    class_names = {c: f"class_{c}" for c in range(cfg.n_classes)}
    return SequenceDataset(sequences=tuple(sequences), class_names=class_names)


def _clipped_normal(rng, mean, std, size=None):
    return np.clip(rng.normal(mean, std, size=size), 0.0, 1.0)


def corrupt_detections(
    ds: SequenceDataset, noise: NoiseConfig, seed: int
) -> SequenceDataset:
    """Fill each frame's proposals with detector-noise outputs.

    True-object proposals keep the source instance id so oracle-matched
    training targets remain possible; learning and tracking paths must
    assign targets by IoU and never read that id.
    """
    root = np.random.SeedSequence(seed)
    seq_seeds = root.spawn(len(ds.sequences))
    feat_dim = None
    for _, frames in ds.sequences:
        for frame in frames:
            for ann in frame.annotations:
                feat_dim = ann.feature.shape[0]
                break
            if feat_dim is not None:
                break
        if feat_dim is not None:
            break
    if feat_dim is None:
        feat_dim = 1

    cm = noise.conf_model
    sequences = []
    for (sid, frames), seq_seed in zip(ds.sequences, seq_seeds):
        rng = np.random.default_rng(seq_seed)
        new_frames = []
        for frame in frames:
            proposals = []
            for ann in frame.annotations:
                if rng.uniform() < noise.fn_prob:
                    continue
                jitter = rng.normal(0.0, noise.jitter_std, size=4)
                box = _clip_box(
                    ann.box.cx + jitter[0],
                    ann.box.cy + jitter[1],
                    max(ann.box.w + jitter[2], 0.01),
                    max(ann.box.h + jitter[3], 0.01),
                )
                proposals.append(
                    Annotation(
                        box=box,
                        class_id=ann.class_id,
                        instance_id=ann.instance_id,
                        confidence=float(
                            _clipped_normal(rng, cm.true_mean, cm.true_std)
                        ),
                        feature=ann.feature,
                    )
                )
            n_clutter = rng.poisson(noise.fp_rate)
            for _ in range(n_clutter):
                cx, cy = rng.uniform(0.05, 0.95, size=2)
                w, h = rng.uniform(0.05, 0.15, size=2)
                proposals.append(
                    Annotation(
                        box=BoundingBox(float(cx), float(cy), float(w), float(h)),
                        class_id=0,
                        instance_id=None,
                        confidence=float(
                            _clipped_normal(rng, cm.clutter_mean, cm.clutter_std)
                        ),
                        feature=rng.normal(size=feat_dim),
                    )
                )
            new_frames.append(
                Frame(
                    frame_index=frame.frame_index,
                    annotations=frame.annotations,
                    proposals=tuple(proposals),
                )
            )
        sequences.append((sid, tuple(new_frames)))
    return SequenceDataset(sequences=tuple(sequences), class_names=ds.class_names)
