"""Manufactures and caches the checkpoints every experiment needs.

The pre-trained model is built in two steps: joint training on the control
mixture (classification plus reconstruction of the control inputs), then
zero-shot heads for every target content, built from the pre-trained
features of imperfect class descriptions.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from ..arith import TaskVector, diff
from ..mininet import MlpSpec, TrainConfig, _params64, _trunk, fine_tune, init_model
from ..store import Checkpoint, TensorMap, content_hash
from .. import tasks as T


@dataclass(frozen=True)
class LabConfig:
    arch: MlpSpec = field(default_factory=lambda: MlpSpec(num_classes=T.HEAD_WIDTH, recon_dim=T.DEFAULT_DIM))
    pretrain: TrainConfig = field(
        default_factory=lambda: TrainConfig(steps=1500, warmup_steps=100, recon_weight=1.0)
    )
    finetune: TrainConfig = field(default_factory=TrainConfig)
    unsup: TrainConfig = field(default_factory=lambda: TrainConfig(objective="reconstruction"))
    init_seed: int = 0
    data_seed: int = 0
    zero_shot_scale: float = 5.0
    description_blur: float = 1.5

    def to_json(self) -> dict[str, Any]:
        return {
            "arch": self.arch.to_json(),
            "pretrain": self.pretrain.to_json(),
            "finetune": self.finetune.to_json(),
            "unsup": self.unsup.to_json(),
            "init_seed": self.init_seed,
            "data_seed": self.data_seed,
            "zero_shot_scale": self.zero_shot_scale,
            "description_blur": self.description_blur,
        }

    def digest(self) -> str:
        raw = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(raw.encode()).hexdigest()


def attach_zero_shot_heads(ckpt: Checkpoint, spec: MlpSpec, contents, scale: float = 5.0,
                           blur: float = 1.5) -> Checkpoint:
    """Overwrite the head rows of each target content with description prototypes.

    Row for class j = ``scale`` * unit(feature(desc_j) - mean_k feature(desc_k)),
    bias zero. No labelled target data is used.
    """
    p = _params64(ckpt.weights)
    w = p["head.cls.weight"].copy()
    b = p["head.cls.bias"].copy()
    for c in contents:
        desc = T.class_descriptions(c, T.TASK_CLASSES, spec.input_dim, blur)
        feats, _ = _trunk(p, spec, desc)
        feats = feats - feats.mean(axis=0)
        feats /= np.linalg.norm(feats, axis=1, keepdims=True)
        slots = T.class_slots(c, T.TASK_CLASSES)
        w[slots] = scale * feats
        b[slots] = 0.0
    arrays = {k: v.copy() for k, v in ckpt.weights.items()}
    arrays["head.cls.weight"] = w.astype(np.float32)
    arrays["head.cls.bias"] = b.astype(np.float32)
    return Checkpoint(TensorMap._trusted(arrays), ckpt.meta)


def _data_key(data) -> str:
    h = hashlib.sha256()
    x, y = data.split("train")
    h.update(np.ascontiguousarray(x).tobytes())
    if y is not None:
        h.update(np.ascontiguousarray(y).tobytes())
        h.update(np.ascontiguousarray(data.split_slots("train")).tobytes())
    return h.hexdigest()


class Zoo:
    """Lazily trains and memoises checkpoints for one LabConfig."""

    def __init__(self, config: LabConfig | None = None):
        self.config = config or LabConfig()
        self.spec = self.config.arch
        self._cache: dict[tuple, Checkpoint] = {}
        self._lock = threading.Lock()
        self._pre: Checkpoint | None = None
        self.control = T.make_control(self.config.data_seed)

    def pretrained(self) -> Checkpoint:
        if self._pre is None:
            cfg = self.config
            init = init_model(self.spec, cfg.init_seed, model_id="init")
            base = fine_tune(init, self.spec, self.control, cfg.pretrain, model_id="control").final
            zs = attach_zero_shot_heads(
                base, self.spec, range(1, T.MAX_CONTENT + 1), cfg.zero_shot_scale, cfg.description_blur
            )
            self._pre = zs.with_meta(model_id="pretrained", note="control pre-training + zero-shot heads")
        return self._pre

    def finetuned(self, data, *, seed: int | None = None, peak_lr: float | None = None,
                  objective: str | None = None, start: Checkpoint | None = None,
                  cfg: TrainConfig | None = None, snapshot_every: int | None = None,
                  model_id: str | None = None):
        """Fine-tune ``start`` (default: the pre-trained model) on ``data``; cached.

        Returns the TrainResult when ``snapshot_every`` is given, else the final checkpoint.
        """
        if cfg is None:
            cfg = self.config.unsup if objective == "reconstruction" else self.config.finetune
        changes: dict[str, Any] = {}
        if seed is not None:
            changes["seed"] = seed
        if peak_lr is not None:
            changes["peak_lr"] = peak_lr
        if objective is not None:
            changes["objective"] = objective
        if snapshot_every is not None:
            changes["snapshot_every"] = snapshot_every
        cfg = replace(cfg, **changes)
        start = start or self.pretrained()
        key = (content_hash(start.weights), _data_key(data), json.dumps(cfg.to_json(), sort_keys=True))
        tid = model_id or getattr(getattr(data, "spec", None), "task_id", "multitask")
        if snapshot_every is not None:
            return fine_tune(start, self.spec, data, cfg, model_id=tid)
        with self._lock:
            hit = self._cache.get(key)
        if hit is None:
            hit = fine_tune(start, self.spec, data, cfg, model_id=tid).final
            with self._lock:
                self._cache[key] = hit
        return hit

    def vector(self, data, **kw) -> TaskVector:
        ft = self.finetuned(data, **kw)
        return diff(ft, kw.get("start") or self.pretrained(), task_id=ft.meta.model_id)

    def bank(self, n: int = 8) -> list[T.Dataset]:
        return [T.make_task(s) for s in T.bank_specs(n, self.config.data_seed)]
