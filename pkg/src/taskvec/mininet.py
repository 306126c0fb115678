"""A small deterministic MLP with hand-written backprop and an AdamW trainer.

Parameters follow a fixed naming scheme::

    trunk.{k}.weight  (out, in)     trunk.{k}.bias  (out,)
    head.cls.weight   (classes, h)  head.cls.bias   (classes,)
    head.recon.weight (recon, h)    head.recon.bias (recon,)

Forward and backward passes run in float64; weights are stored as float32.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from .store import Checkpoint, CheckpointMeta, TensorMap, content_hash, save_checkpoint

OBJECTIVES = ("cross_entropy", "negated_cross_entropy", "reconstruction")
ACTIVATIONS = ("tanh", "relu")


class ArchMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int = 16
    trunk_widths: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    num_classes: int = 64
    recon_dim: int = 16

    def __post_init__(self):
        object.__setattr__(self, "trunk_widths", tuple(int(w) for w in self.trunk_widths))
        if self.input_dim <= 0 or self.num_classes <= 0 or self.recon_dim < 0:
            raise ValueError("MlpSpec dimensions must be positive (recon_dim may be 0)")
        if not self.trunk_widths or any(w <= 0 for w in self.trunk_widths):
            raise ValueError("trunk_widths must be a non-empty list of positive integers")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    def to_json(self) -> dict[str, Any]:
        d = asdict(self)
        d["trunk_widths"] = list(self.trunk_widths)
        return d

    @property
    def digest(self) -> str:
        raw = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(raw.encode("utf-8")).hexdigest()

    @property
    def feature_dim(self) -> int:
        return self.trunk_widths[-1]

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        fan_in = self.input_dim
        for k, w in enumerate(self.trunk_widths):
            shapes[f"trunk.{k}.weight"] = (w, fan_in)
            shapes[f"trunk.{k}.bias"] = (w,)
            fan_in = w
        shapes["head.cls.weight"] = (self.num_classes, fan_in)
        shapes["head.cls.bias"] = (self.num_classes,)
        if self.recon_dim:
            shapes["head.recon.weight"] = (self.recon_dim, fan_in)
            shapes["head.recon.bias"] = (self.recon_dim,)
        return shapes


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 32
    peak_lr: float = 1e-2
    warmup_steps: int = 50
    weight_decay: float = 1e-4
    objective: str = "cross_entropy"
    recon_weight: float = 0.0
    seed: int = 0
    snapshot_every: int = 0
    freeze: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "freeze", frozenset(self.freeze))
        if self.steps < 0 or self.batch_size <= 0 or self.peak_lr <= 0:
            raise ValueError("steps must be >= 0; batch_size and peak_lr must be positive")
        if not 0 <= self.warmup_steps <= max(self.steps, 0):
            raise ValueError("warmup_steps must lie in [0, steps]")
        if self.weight_decay < 0 or self.snapshot_every < 0 or self.seed < 0 or self.recon_weight < 0:
            raise ValueError("weight_decay, snapshot_every, seed and recon_weight must be non-negative")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")

    def to_json(self) -> dict[str, Any]:
        d = asdict(self)
        d["freeze"] = sorted(self.freeze)
        return d


def _stream(seed: int, *keys: int | str) -> np.random.Generator:
    words = [int(seed)]
    for k in keys:
        if isinstance(k, str):
            k = int.from_bytes(hashlib.sha256(k.encode()).digest()[:4], "little")
        words.append(int(k))
    return np.random.default_rng(np.random.SeedSequence(words))


def init_model(spec: MlpSpec, seed: int, model_id: str = "init") -> Checkpoint:
    """Glorot-uniform weights, zero biases; one RNG stream per weight tensor."""
    arrays = {}
    for name, shape in spec.layer_shapes().items():
        if name.endswith(".bias"):
            arrays[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_out, fan_in = shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            arrays[name] = _stream(seed, name).uniform(-bound, bound, size=shape).astype(np.float32)
    meta = CheckpointMeta(model_id=model_id, arch_digest=spec.digest, seed=seed, step=0, note="init")
    return Checkpoint(TensorMap._trusted(arrays), meta)


# --- forward / backward ------------------------------------------------------


def _check_arch(ckpt: Checkpoint, spec: MlpSpec) -> None:
    if ckpt.meta.arch_digest != spec.digest:
        raise ArchMismatchError(
            f"checkpoint {ckpt.meta.model_id!r} was built for arch {ckpt.meta.arch_digest[:12]}, "
            f"not {spec.digest[:12]}"
        )


def _params64(weights: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.asarray(v, dtype=np.float64) for k, v in weights.items()}


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0.0)


def _act_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    return 1.0 - a * a if kind == "tanh" else (z > 0).astype(np.float64)


def _trunk(p: Mapping[str, np.ndarray], spec: MlpSpec, x: np.ndarray):
    cache = []
    h = x
    for k in range(len(spec.trunk_widths)):
        z = h @ p[f"trunk.{k}.weight"].T + p[f"trunk.{k}.bias"]
        a = _act(z, spec.activation)
        cache.append((h, z, a))
        h = a
    return h, cache


@dataclass
class ForwardResult:
    logits: np.ndarray
    recon: np.ndarray | None


def _as_inputs(inputs, spec: MlpSpec) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"inputs must have shape (rows, {spec.input_dim}), got {x.shape}")
    return x


def forward(ckpt: Checkpoint, spec: MlpSpec, inputs) -> ForwardResult:
    _check_arch(ckpt, spec)
    return forward_params(_params64(ckpt.weights), spec, _as_inputs(inputs, spec))


def forward_params(p: Mapping[str, np.ndarray], spec: MlpSpec, x: np.ndarray) -> ForwardResult:
    h, _ = _trunk(p, spec, x)
    logits = h @ p["head.cls.weight"].T + p["head.cls.bias"]
    recon = h @ p["head.recon.weight"].T + p["head.recon.bias"] if spec.recon_dim else None
    return ForwardResult(logits, recon)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _row_slots(slots, n: int, num_classes: int) -> np.ndarray:
    if slots is None:
        idx = np.arange(num_classes)
    else:
        idx = np.asarray(slots, dtype=np.intp)
    if idx.ndim == 1:
        idx = np.broadcast_to(idx, (n, idx.size))
    if idx.shape[0] != n:
        raise ValueError("per-row slots must have one row per input")
    if idx.min() < 0 or idx.max() >= num_classes:
        raise ValueError("class slot outside the classification head")
    return idx


def loss_and_grads_params(
    p: Mapping[str, np.ndarray],
    spec: MlpSpec,
    inputs: np.ndarray,
    labels: np.ndarray | None,
    objective: str,
    slots=None,
    recon_weight: float = 0.0,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and exact gradients for float64 parameters ``p``.

    For the cross-entropy objectives the softmax runs over the head columns in
    ``slots`` (one shared 1-D set, or a 2-D array with one set per row) and
    ``labels`` index into those columns. ``recon_weight > 0`` adds a weighted
    reconstruction term to a cross-entropy objective.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    x = np.asarray(inputs, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    h, cache = _trunk(p, spec, x)
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    dh = np.zeros_like(h)
    loss = 0.0

    w_recon = 1.0 if objective == "reconstruction" else float(recon_weight)
    if w_recon:
        if not spec.recon_dim:
            raise ValueError("reconstruction objective needs a recon head (recon_dim > 0)")
        if spec.recon_dim != spec.input_dim:
            raise ValueError("reconstruction targets are the inputs; recon_dim must equal input_dim")
        err = h @ p["head.recon.weight"].T + p["head.recon.bias"] - x
        loss += w_recon * float(np.mean(err * err))
        d_out = w_recon * 2.0 * err / err.size
        grads["head.recon.weight"] = d_out.T @ h
        grads["head.recon.bias"] = d_out.sum(axis=0)
        dh += d_out @ p["head.recon.weight"]

    if objective != "reconstruction":
        idx = _row_slots(slots, n, spec.num_classes)
        y = np.asarray(labels, dtype=np.intp)
        if y.shape != (n,):
            raise ValueError("labels must be a vector with one entry per input row")
        if y.min() < 0 or y.max() >= idx.shape[1]:
            raise ValueError(f"label out of range for {idx.shape[1]} classes")
        full = h @ p["head.cls.weight"].T + p["head.cls.bias"]
        logp = log_softmax(np.take_along_axis(full, idx, axis=1))
        ce = float(-np.mean(logp[np.arange(n), y]))
        d_sub = np.exp(logp)
        d_sub[np.arange(n), y] -= 1.0
        d_sub /= n
        if objective == "negated_cross_entropy":
            ce, d_sub = -ce, -d_sub
        loss += ce
        d_full = np.zeros_like(full)
        np.put_along_axis(d_full, idx, d_sub, axis=1)
        grads["head.cls.weight"] = d_full.T @ h
        grads["head.cls.bias"] = d_full.sum(axis=0)
        dh += d_full @ p["head.cls.weight"]

    for k in reversed(range(len(spec.trunk_widths))):
        h_in, z, a = cache[k]
        dz = dh * _act_grad(z, a, spec.activation)
        grads[f"trunk.{k}.weight"] = dz.T @ h_in
        grads[f"trunk.{k}.bias"] = dz.sum(axis=0)
        if k:
            dh = dz @ p[f"trunk.{k}.weight"]
    return loss, grads


def loss_and_grads(
    ckpt: Checkpoint,
    spec: MlpSpec,
    batch: tuple[Any, Any],
    objective: str,
    slots=None,
    recon_weight: float = 0.0,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean batch loss and its per-tensor gradients (float64, keyed like the weights)."""
    _check_arch(ckpt, spec)
    inputs, labels = batch
    x = _as_inputs(inputs, spec)
    return loss_and_grads_params(_params64(ckpt.weights), spec, x, labels, objective, slots, recon_weight)


# --- optimisation ------------------------------------------------------------


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` then cosine decay to zero."""
    if not 0 <= step < cfg.steps:
        raise ValueError(f"step {step} outside [0, {cfg.steps})")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * (step + 1) / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.steps - cfg.warmup_steps)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """AdamW with bias correction and decoupled weight decay."""

    def __init__(self, shapes: Mapping[str, tuple[int, ...]], weight_decay: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}

    def updates(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                lr: float, frozen: Iterable[str] = ()) -> dict[str, np.ndarray]:
        """Advance the moments and return the additive update for each parameter."""
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        frozen = set(frozen)
        out = {}
        for k, g in grads.items():
            if k in frozen:
                continue
            m = self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            v = self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            out[k] = -lr * (m / c1) / (np.sqrt(v / c2) + self.eps) - lr * self.wd * params[k]
        return out


def batch_indices(n: int, batch_size: int, steps: int, seed: int) -> list[np.ndarray]:
    """Minibatch index lists from per-epoch seeded permutations with wraparound."""
    rng = _stream(seed, "batches")
    need = steps * batch_size
    chunks = []
    while need > 0:
        perm = rng.permutation(n)
        chunks.append(perm)
        need -= n
    stream = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.intp)
    return [stream[i * batch_size : (i + 1) * batch_size] for i in range(steps)]


@dataclass
class TrainResult:
    final: Checkpoint
    snapshots: list[tuple[int, Checkpoint]]
    losses: list[float]


def fine_tune(start: Checkpoint, spec: MlpSpec, data, cfg: TrainConfig, model_id: str | None = None) -> TrainResult:
    """Run ``cfg.steps`` AdamW steps on ``data``'s train split.

    ``data`` is a task-suite Dataset (anything with ``split`` and
    ``split_slots`` works). Snapshots are taken at step 0, every
    ``snapshot_every`` steps and at the final step.
    """
    _check_arch(start, spec)
    x, y = data.split("train")
    if len(x) == 0:
        raise ValueError("empty train split")
    x = np.asarray(x, dtype=np.float64)
    slots = data.split_slots("train") if cfg.objective != "reconstruction" else None
    if cfg.objective != "reconstruction" and y is None:
        raise ValueError(f"objective {cfg.objective} needs labelled data")
    unknown = set(cfg.freeze) - set(start.weights)
    if unknown:
        raise ValueError(f"freeze names unknown tensors: {sorted(unknown)}")
    model_id = model_id or f"{start.meta.model_id}/ft"

    def snap(step: int, p: Mapping[str, np.ndarray]) -> Checkpoint:
        weights = TensorMap._trusted({k: v.astype(np.float32) for k, v in p.items()})
        meta = CheckpointMeta(
            model_id=model_id,
            arch_digest=spec.digest,
            seed=cfg.seed,
            step=start.meta.step + step,
            parent_hash=content_hash(start.weights),
            note=f"fine_tune objective={cfg.objective}",
        )
        return Checkpoint(weights, meta)

    if cfg.steps == 0 or set(cfg.freeze) >= set(start.weights):
        return TrainResult(start, [(0, start)] if cfg.snapshot_every else [], [])

    # float32 weights round-trip through float64 exactly, so step-0 state is `start`
    p = _params64(start.weights)
    opt = AdamW({k: v.shape for k, v in p.items()}, cfg.weight_decay)
    snapshots = [(0, start)] if cfg.snapshot_every else []
    losses = []
    for step, idx in enumerate(batch_indices(len(x), cfg.batch_size, cfg.steps, cfg.seed)):
        loss, g = loss_and_grads_params(
            p, spec, x[idx], None if y is None else y[idx], cfg.objective,
            None if slots is None else slots[idx], cfg.recon_weight,
        )
        losses.append(loss)
        for k, u in opt.updates(p, g, lr_at(step, cfg), cfg.freeze).items():
            # keep the float32 storage grid so checkpoints equal the trained state
            p[k] = (p[k] + u).astype(np.float32).astype(np.float64)
        done = step + 1
        if cfg.snapshot_every and done % cfg.snapshot_every == 0 and done != cfg.steps:
            snapshots.append((done, snap(done, p)))
    final = snap(cfg.steps, p)
    if cfg.snapshot_every:
        snapshots.append((cfg.steps, final))
    return TrainResult(final, snapshots, losses)


def write_run(result: TrainResult, out_dir: str | Path, run_id: str, spec: MlpSpec, cfg: TrainConfig,
              extra: Mapping[str, Any] | None = None) -> dict[str, Any]:
    """Write final/snapshot TVKP files plus a JSON manifest; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for step, ck in result.snapshots:
        name = f"{run_id}.step{step}.tvkp"
        save_checkpoint(ck, out / name)
        files[name] = content_hash(ck.weights)
    save_checkpoint(result.final, out / "final.tvkp")
    files["final.tvkp"] = content_hash(result.final.weights)
    manifest = {
        "run_id": run_id,
        "arch": spec.to_json(),
        "arch_digest": spec.digest,
        "train": cfg.to_json(),
        "seeds": {"train": cfg.seed, "init": result.final.meta.seed},
        "outputs": files,
        "final_loss": result.losses[-1] if result.losses else None,
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
