"""Core domain types, dataset on-disk format, and label-set algebra.

A dataset is a list of video sequences; each frame holds annotations
(ground truth or pseudo-labels) and detector-noise proposals.  Boxes are
center/size normalized to [0, 1].  Every annotation carries an appearance
feature vector, the desk-scale stand-in for a backbone ROI feature.

Directory layout: ``manifest.json`` with class names and the sequence list,
plus one ``seq_<id>.jsonl`` per sequence with one JSON object per frame.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConflictError, FormatError, NotFoundError, PlanError

# Pseudo-label instance ids live in their own range so they can never
# collide with ground-truth ids.
PSEUDO_ID_BASE = 10**6


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box, center/size in normalized world coordinates."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise FormatError(f"box size must be positive, got w={self.w} h={self.h}")
        if (
            self.cx + self.w / 2 <= 0
            or self.cx - self.w / 2 >= 1
            or self.cy + self.h / 2 <= 0
            or self.cy - self.h / 2 >= 1
        ):
            raise FormatError("box does not intersect the unit square")

    def as_xyxy(self):
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ax1, ay1, ax2, ay2 = a.as_xyxy()
    bx1, by1, bx2, by2 = b.as_xyxy()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.w * a.h + b.w * b.h - inter)


@dataclass(frozen=True)
class Annotation:
    """A labeled or proposed object in one frame.

    Ground truth has ``confidence None`` and a concrete ``instance_id``;
    pseudo-labels carry a confidence in [0, 1].
    """

    box: BoundingBox
    class_id: int
    instance_id: int | None
    confidence: float | None
    feature: np.ndarray

    def __post_init__(self):
        if self.class_id < 0:
            raise FormatError(f"negative class_id {self.class_id}")
        if self.confidence is not None and not (0.0 <= self.confidence <= 1.0):
            raise FormatError(f"confidence {self.confidence} outside [0, 1]")
        feat = np.asarray(self.feature, dtype=np.float64)
        feat.flags.writeable = False
        object.__setattr__(self, "feature", feat)

    @property
    def is_ground_truth(self) -> bool:
        return self.confidence is None


@dataclass(frozen=True)
class Frame:
    frame_index: int
    annotations: tuple[Annotation, ...]
    proposals: tuple[Annotation, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "annotations", tuple(self.annotations))
        object.__setattr__(self, "proposals", tuple(self.proposals))
        seen = set()
        for ann in self.annotations:
            key = (ann.class_id, ann.instance_id)
            if ann.instance_id is not None and key in seen:
                raise FormatError(
                    f"frame {self.frame_index}: duplicate (class, instance) {key}"
                )
            seen.add(key)


@dataclass(frozen=True)
class SequenceDataset:
    sequences: tuple[tuple[str, tuple[Frame, ...]], ...]
    class_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(
            self,
            "sequences",
            tuple((sid, tuple(frames)) for sid, frames in self.sequences),
        )
        for sid, frames in self.sequences:
            last = -1
            inst_class: dict[int, int] = {}
            for frame in frames:
                if frame.frame_index <= last:
                    raise FormatError(
                        f"sequence {sid}: frame indices not strictly increasing"
                    )
                last = frame.frame_index
                for ann in frame.annotations:
                    if ann.instance_id is None:
                        continue
                    prev = inst_class.setdefault(ann.instance_id, ann.class_id)
                    if prev != ann.class_id:
                        raise FormatError(
                            f"sequence {sid}: instance {ann.instance_id} changes class"
                        )

    def classes_present(self) -> set[int]:
        return {
            ann.class_id
            for _, frames in self.sequences
            for frame in frames
            for ann in frame.annotations
        }

    def n_annotations(self) -> int:
        return sum(
            len(frame.annotations) for _, frames in self.sequences for frame in frames
        )


class Method(enum.Enum):
    """Incremental-training strategy for a protocol run."""

    TRACK_PL = "track_pl"  # tracker pseudo-labels + contrastive embedding terms
    FINETUNE = "finetune"
    DET_PL = "det_pl"
    ORACLE = "oracle"


@dataclass(frozen=True)
class StagePlan:
    stages: tuple[frozenset[int], ...]
    method: Method

    def __post_init__(self):
        object.__setattr__(
            self, "stages", tuple(frozenset(s) for s in self.stages)
        )
        seen: set[int] = set()
        for stage in self.stages:
            if stage & seen:
                raise PlanError(f"classes {sorted(stage & seen)} appear in two stages")
            seen |= stage

    def seen_classes(self, b: int) -> set[int]:
        return set().union(*self.stages[: b + 1])


# ---------------------------------------------------------------------------
# Serialization


def _ann_to_json(ann: Annotation) -> dict:
    return {
        "box": [ann.box.cx, ann.box.cy, ann.box.w, ann.box.h],
        "class": ann.class_id,
        "instance": ann.instance_id,
        "conf": ann.confidence,
        "feat": list(ann.feature),
    }


def _ann_from_json(obj: dict) -> Annotation:
    cx, cy, w, h = obj["box"]
    return Annotation(
        box=BoundingBox(cx, cy, w, h),
        class_id=obj["class"],
        instance_id=obj["instance"],
        confidence=obj["conf"],
        feature=np.array(obj["feat"], dtype=np.float64),
    )


def save_dataset(ds: SequenceDataset, path: str) -> None:
    """Write the dataset directory (manifest + one jsonl per sequence)."""
    os.makedirs(path, exist_ok=True)
    manifest = {
        "class_names": {str(c): name for c, name in sorted(ds.class_names.items())},
        "sequences": [sid for sid, _ in ds.sequences],
    }
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    for sid, frames in ds.sequences:
        with open(os.path.join(path, f"seq_{sid}.jsonl"), "w") as f:
            for frame in frames:
                record = {
                    "frame": frame.frame_index,
                    "annotations": [_ann_to_json(a) for a in frame.annotations],
                    "proposals": [_ann_to_json(a) for a in frame.proposals],
                }
                f.write(json.dumps(record) + "\n")


def load_dataset(path: str) -> SequenceDataset:
    """Load a dataset directory written by :func:`save_dataset`.

    Raises NotFoundError if the manifest is missing and FormatError naming
    the offending sequence/frame on any invariant violation.
    """
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise NotFoundError(f"no manifest.json in {path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    class_names = {int(c): name for c, name in manifest["class_names"].items()}
    sequences = []
    for sid in manifest["sequences"]:
        seq_path = os.path.join(path, f"seq_{sid}.jsonl")
        if not os.path.isfile(seq_path):
            raise NotFoundError(f"missing sequence file {seq_path}")
        frames = []
        with open(seq_path) as f:
            for line in f:
                obj = json.loads(line)
                try:
                    frames.append(
                        Frame(
                            frame_index=obj["frame"],
                            annotations=tuple(
                                _ann_from_json(a) for a in obj["annotations"]
                            ),
                            proposals=tuple(
                                _ann_from_json(a) for a in obj["proposals"]
                            ),
                        )
                    )
                except FormatError as err:
                    raise FormatError(f"sequence {sid}: {err}") from err
        sequences.append((sid, tuple(frames)))
    return SequenceDataset(sequences=tuple(sequences), class_names=class_names)


# ---------------------------------------------------------------------------
# Label-set algebra


def select_sequences(ds: SequenceDataset, classes: set[int]) -> SequenceDataset:
    """Keep only sequences holding at least one ground-truth object of
    any class in ``classes``; kept sequences retain all their frames."""
    if not classes:
        raise ValueError("classes must be non-empty")
    kept = []
    for sid, frames in ds.sequences:
        if any(
            ann.class_id in classes and ann.is_ground_truth
            for frame in frames
            for ann in frame.annotations
        ):
            kept.append((sid, frames))
    return SequenceDataset(sequences=tuple(kept), class_names=ds.class_names)


def strip_labels(ds: SequenceDataset, keep_classes: set[int]) -> SequenceDataset:
    """Drop every annotation outside ``keep_classes``; proposals untouched."""
    sequences = []
    for sid, frames in ds.sequences:
        new_frames = tuple(
            Frame(
                frame_index=frame.frame_index,
                annotations=tuple(
                    a for a in frame.annotations if a.class_id in keep_classes
                ),
                proposals=frame.proposals,
            )
            for frame in frames
        )
        sequences.append((sid, new_frames))
    return SequenceDataset(sequences=tuple(sequences), class_names=ds.class_names)


def merge_labels(
    gt_new: SequenceDataset, pl_old: SequenceDataset
) -> SequenceDataset:
    """Union per-frame annotation lists of new-class ground truth and
    old-class pseudo-labels.

    Pseudo-label instance ids are offset into the reserved range so they
    never collide with ground-truth ids.
    """
    if not pl_old.sequences:
        return gt_new
    new_classes = gt_new.classes_present()
    old_classes = pl_old.classes_present()
    overlap = new_classes & old_classes
    if overlap:
        raise ConflictError(f"classes {sorted(overlap)} present in both inputs")

    pl_by_sid = dict(pl_old.sequences)
    if set(pl_by_sid) != {sid for sid, _ in gt_new.sequences}:
        raise FormatError("sequence id sets differ between inputs")

    sequences = []
    for sid, gt_frames in gt_new.sequences:
        pl_frames = pl_by_sid[sid]
        if [f.frame_index for f in gt_frames] != [f.frame_index for f in pl_frames]:
            raise FormatError(f"sequence {sid}: frame ranges differ")
        merged = []
        for gt_frame, pl_frame in zip(gt_frames, pl_frames):
            shifted = tuple(
                Annotation(
                    box=a.box,
                    class_id=a.class_id,
                    instance_id=(
                        None
                        if a.instance_id is None
                        else a.instance_id % PSEUDO_ID_BASE + PSEUDO_ID_BASE
                    ),
                    confidence=a.confidence,
                    feature=a.feature,
                )
                for a in pl_frame.annotations
            )
            merged.append(
                Frame(
                    frame_index=gt_frame.frame_index,
                    annotations=gt_frame.annotations + shifted,
                    proposals=gt_frame.proposals,
                )
            )
        sequences.append((sid, tuple(merged)))
    return SequenceDataset(sequences=tuple(sequences), class_names=gt_new.class_names)
