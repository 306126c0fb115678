"""Synthetic classification tasks with a content x style structure.

``content_id`` fixes the class centres (and therefore the label semantics);
``style_id`` fixes an affine input transform applied after sampling. Every
task owns a block of columns ("slots") in the shared classification head,
chosen by its content id, so tasks that share content share output classes.

Content 0 is reserved for the control mixture. Target tasks use ids >= 1.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
from scipy.linalg import expm

CONTROL_CONTENT = 0
CONTROL_CLASSES = 16
TASK_CLASSES = 4
MAX_CONTENT = 12
HEAD_WIDTH = CONTROL_CLASSES + TASK_CLASSES * MAX_CONTENT

DEFAULT_DIM = 16
DEFAULT_SIGMA = 0.2

# content/style ids reserved for the built-in suites
BANK_CONTENTS = tuple(range(1, 9))
GRID_CONTENTS = (9, 10)
GRID_STYLES = (1, 2)
DOMAIN_CONTENT = 11
DOMAIN_STYLES = (3, 4)

# (rotation angle in radians, shift norm, scale) per style id; ids not listed
# fall back to DEFAULT_STYLE
STYLE_TABLE: dict[int, tuple[float, float, float]] = {
    0: (0.0, 0.0, 1.0),
}
DEFAULT_STYLE = (0.6, 1.0, 1.0)

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Splits:
    train: int = 512
    val: int = 128
    test: int = 512

    def __post_init__(self):
        if min(self.train, self.val, self.test) <= 0:
            raise ValueError("split sizes must be positive")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    task_id: str
    content_id: int
    style_id: int = 0
    num_classes: int = TASK_CLASSES
    dim: int = DEFAULT_DIM
    samples_per_split: Splits = field(default_factory=Splits)
    noise_sigma: float = DEFAULT_SIGMA
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.samples_per_split, dict):
            object.__setattr__(self, "samples_per_split", Splits(**self.samples_per_split))
        if self.num_classes <= 0 or self.dim <= 0:
            raise ValueError("num_classes and dim must be positive")
        if self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be positive")
        if min(self.content_id, self.style_id, self.seed) < 0:
            raise ValueError("content_id, style_id and seed are unsigned")
        class_slots(self.content_id, self.num_classes)

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "SyntheticTaskSpec":
        obj = dict(obj)
        if "samples_per_split" in obj:
            obj["samples_per_split"] = Splits(**obj["samples_per_split"])
        return cls(**obj)


def class_slots(content_id: int, num_classes: int) -> np.ndarray:
    """Head columns used by tasks with this content id."""
    if content_id == CONTROL_CONTENT:
        if num_classes > CONTROL_CLASSES:
            raise ValueError(f"control content supports at most {CONTROL_CLASSES} classes")
        return np.arange(num_classes)
    if not 1 <= content_id <= MAX_CONTENT:
        raise ValueError(f"content_id must lie in [1, {MAX_CONTENT}] for target tasks")
    if num_classes > TASK_CLASSES:
        raise ValueError(f"target tasks support at most {TASK_CLASSES} classes")
    start = CONTROL_CLASSES + TASK_CLASSES * (content_id - 1)
    return np.arange(start, start + num_classes)


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray | None
    split_tags: np.ndarray
    spec: SyntheticTaskSpec
    slots: np.ndarray

    @property
    def supervised(self) -> bool:
        return self.labels is not None

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray | None]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        mask = self.split_tags == name
        return self.inputs[mask], None if self.labels is None else self.labels[mask]

    def split_slots(self, name: str) -> np.ndarray:
        """Head columns for every row of a split, shape (rows, num_classes)."""
        n = int(np.sum(self.split_tags == name))
        return np.broadcast_to(self.slots, (n, self.slots.size))

    def unlabeled(self) -> "Dataset":
        return replace(self, labels=None)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None and other.labels is not None and np.array_equal(self.labels, other.labels)
        )
        return (
            self.spec == other.spec
            and self.inputs.tobytes() == other.inputs.tobytes()
            and same_labels
            and np.array_equal(self.split_tags, other.split_tags)
        )

    __hash__ = None  # type: ignore[assignment]

    def to_csv(self, path: str | Path) -> None:
        """Write ``split,label,x0..x{dim-1}``; label is empty for unlabeled data."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["split", "label"] + [f"x{i}" for i in range(self.inputs.shape[1])])
            for i, row in enumerate(self.inputs):
                label = "" if self.labels is None else int(self.labels[i])
                w.writerow([self.split_tags[i], label] + [repr(float(v)) for v in row])


def _rng(*keys: int | str) -> np.random.Generator:
    words = []
    for k in keys:
        if isinstance(k, str):
            k = int.from_bytes(hashlib.sha256(k.encode()).digest()[:4], "little")
        words.append(int(k))
    return np.random.default_rng(np.random.SeedSequence(words))


def class_centers(content_id: int, num_classes: int, dim: int) -> np.ndarray:
    """Cluster centres on the unit sphere, fixed by the content id."""
    g = _rng("content", content_id, num_classes, dim).standard_normal((num_classes, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


@dataclass(frozen=True)
class Style:
    rotation: np.ndarray
    shift: np.ndarray
    scale: float

    def __call__(self, raw: np.ndarray) -> np.ndarray:
        return self.scale * (raw @ self.rotation.T) + self.shift


def style_transform(style_id: int, dim: int) -> Style:
    """Affine map ``x -> scale * R x + shift`` fixed by the style id."""
    angle, shift_norm, scale = STYLE_TABLE.get(style_id, DEFAULT_STYLE)
    rng = _rng("style", style_id, dim)
    a = rng.standard_normal((dim, dim))
    skew = a - a.T
    skew /= np.linalg.norm(skew, 2)
    rotation = expm(angle * skew) if angle else np.eye(dim)
    direction = rng.standard_normal(dim)
    shift = shift_norm * direction / np.linalg.norm(direction)
    return Style(rotation, shift, scale)


def raw_samples(spec: SyntheticTaskSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Untransformed points, labels and split tags (style not yet applied)."""
    centers = class_centers(spec.content_id, spec.num_classes, spec.dim)
    xs, ys, tags = [], [], []
    for split_no, name in enumerate(SPLITS):
        n = getattr(spec.samples_per_split, name)
        rng = _rng("samples", spec.seed, spec.content_id, spec.num_classes, spec.dim, split_no)
        labels = rng.permutation(np.arange(n) % spec.num_classes)
        pts = centers[labels] + spec.noise_sigma * rng.standard_normal((n, spec.dim))
        xs.append(pts)
        ys.append(labels)
        tags.append(np.full(n, name))
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(tags)


def make_task(spec: SyntheticTaskSpec) -> Dataset:
    raw, labels, tags = raw_samples(spec)
    inputs = style_transform(spec.style_id, spec.dim)(raw)
    return Dataset(inputs, labels, tags, spec, class_slots(spec.content_id, spec.num_classes))


def control_spec(seed: int = 0) -> SyntheticTaskSpec:
    return SyntheticTaskSpec(
        task_id="control",
        content_id=CONTROL_CONTENT,
        style_id=0,
        num_classes=CONTROL_CLASSES,
        samples_per_split=Splits(2048, 512, 1024),
        seed=seed,
    )


def make_control(seed: int = 0) -> Dataset:
    """The broad control mixture: used for pre-training and as the control metric."""
    return make_task(control_spec(seed))


def bank_specs(n: int = 8, seed: int = 0) -> list[SyntheticTaskSpec]:
    if not 1 <= n <= len(BANK_CONTENTS):
        raise ValueError(f"bank size must lie in [1, {len(BANK_CONTENTS)}]")
    return [SyntheticTaskSpec(task_id=f"task{c}", content_id=c, seed=seed) for c in BANK_CONTENTS[:n]]


def make_grid(seed: int = 0) -> list[SyntheticTaskSpec]:
    """Four cells (content1,style1), (content2,style1), (content1,style2), (content2,style2)."""
    (c1, c2), (s1, s2) = GRID_CONTENTS, GRID_STYLES
    cells = [(c1, s1), (c2, s1), (c1, s2), (c2, s2)]
    return [
        SyntheticTaskSpec(task_id=f"grid.c{c}.s{s}", content_id=c, style_id=s, seed=seed)
        for c, s in cells
    ]


GRID_CELL_NAMES = ("content1,style1", "content2,style1", "content1,style2", "content2,style2")


def analogy_triple(heldout: int) -> tuple[int, int, int]:
    """Indices (A, B, C) of grid cells such that A:B :: C:heldout."""
    if heldout not in range(4):
        raise ValueError(f"held-out cell must be 0..3, got {heldout}")
    # cell index = 2 * style_bit + content_bit
    s, c = divmod(heldout, 2)
    other_c, other_s = 1 - c, 1 - s
    a = 2 * other_s + other_c
    b = 2 * other_s + c
    cc = 2 * s + other_c
    return a, b, cc


@dataclass(frozen=True, eq=False)
class DomainPair:
    aux_supervised: Dataset
    aux_unsup: Dataset
    target_unsup: Dataset
    target_supervised_eval: Dataset


def make_domain_pair(seed: int = 0) -> DomainPair:
    """Two styles of one content; labels exposed only for the auxiliary domain.

    The unsupervised sets are fresh draws (different sample seed) from the same
    generators, with labels stripped.
    """
    aux_style, tgt_style = DOMAIN_STYLES
    aux = SyntheticTaskSpec("domain.aux", DOMAIN_CONTENT, aux_style, seed=seed)
    tgt = SyntheticTaskSpec("domain.target", DOMAIN_CONTENT, tgt_style, seed=seed)
    unsup_seed = seed + 1_000_003
    return DomainPair(
        aux_supervised=make_task(aux),
        aux_unsup=make_task(replace(aux, task_id="domain.aux.unsup", seed=unsup_seed)).unlabeled(),
        target_unsup=make_task(replace(tgt, task_id="domain.target.unsup", seed=unsup_seed)).unlabeled(),
        target_supervised_eval=make_task(tgt),
    )


def subsample(data: Dataset, per_class: int, seed: int = 0) -> Dataset:
    """Keep ``per_class`` training samples of every class; val/test untouched."""
    if data.labels is None:
        raise ValueError("few-shot subsampling needs labels")
    rng = _rng("fewshot", seed, per_class, data.spec.content_id, data.spec.style_id)
    train_idx = np.flatnonzero(data.split_tags == "train")
    keep = []
    for c in range(data.num_classes):
        members = train_idx[data.labels[train_idx] == c]
        if len(members) < per_class:
            raise ValueError(f"class {c} has only {len(members)} training samples")
        keep.extend(rng.choice(members, per_class, replace=False).tolist())
    mask = data.split_tags != "train"
    mask[np.array(sorted(keep), dtype=np.intp)] = True
    return Dataset(data.inputs[mask], data.labels[mask], data.split_tags[mask], data.spec, data.slots)


@dataclass(frozen=True, eq=False)
class MultiTaskDataset:
    """Several labelled tasks stacked together, each row keeping its own head slots."""

    parts: tuple[Dataset, ...]

    def __post_init__(self):
        if not self.parts:
            raise ValueError("MultiTaskDataset needs at least one part")
        widths = {d.num_classes for d in self.parts}
        if len(widths) != 1 or any(not d.supervised for d in self.parts):
            raise ValueError("parts must be labelled and share a class count")

    @property
    def supervised(self) -> bool:
        return True

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = zip(*(d.split(name) for d in self.parts))
        return np.concatenate(xs), np.concatenate(ys)

    def split_slots(self, name: str) -> np.ndarray:
        return np.concatenate([d.split_slots(name) for d in self.parts])


def class_descriptions(content_id: int, num_classes: int, dim: int, blur: float = 1.5) -> np.ndarray:
    """Imperfect class prototypes: the true centres plus a fixed random offset.

    These play the part of class-name descriptions for building zero-shot
    heads; ``blur`` sets how misleading they are.
    """
    centers = class_centers(content_id, num_classes, dim)
    g = _rng("description", content_id, num_classes, dim).standard_normal(centers.shape)
    return centers + blur * g / np.linalg.norm(g, axis=1, keepdims=True)


def spec_to_json(spec: SyntheticTaskSpec) -> str:
    return json.dumps(spec.to_json(), sort_keys=True)
