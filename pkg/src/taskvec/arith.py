"""Task-vector arithmetic: differences, negation, sums, analogies and edits.

All reductions (norms, dot products) accumulate in float64 even though the
stored tensors are float32.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence, Union

import numpy as np

from .store import (
    Checkpoint,
    CheckpointMeta,
    TensorMap,
    content_hash,
    decode_tvkp,
    encode_tvkp,
    validate_compat,
)

KINDS = ("finetune_diff", "random_matched", "composite")


@dataclass(frozen=True)
class Provenance:
    pre_hash: str
    ft_hash: str | None = None
    task_id: str = ""
    kind: str = "composite"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task vector kind {self.kind!r}")


@dataclass(frozen=True)
class TaskVector:
    delta: TensorMap
    provenance: Provenance

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TaskVector):
            return NotImplemented
        return self.delta == other.delta

    __hash__ = None  # type: ignore[assignment]

    @property
    def task_id(self) -> str:
        return self.provenance.task_id

    def norm(self) -> float:
        flat = self.delta.flatten()
        return float(np.sqrt(np.dot(flat, flat)))


def _composite(delta: TensorMap, pre_hash: str, task_id: str) -> TaskVector:
    return TaskVector(delta, Provenance(pre_hash=pre_hash, task_id=task_id, kind="composite"))


def _elementwise(ts: Sequence[TaskVector], fn) -> TensorMap:
    first = ts[0].delta
    for t in ts[1:]:
        validate_compat(first, t.delta)
    return TensorMap._trusted(
        {name: np.asarray(fn([t.delta[name] for t in ts]), dtype=np.float32) for name in first}
    )


def diff(ft: Checkpoint, pre: Checkpoint, task_id: str | None = None) -> TaskVector:
    """Task vector ``ft - pre``."""
    validate_compat(ft.weights, pre.weights)
    delta = TensorMap._trusted({k: (ft.weights[k] - pre.weights[k]).astype(np.float32) for k in pre.weights})
    prov = Provenance(
        pre_hash=content_hash(pre.weights),
        ft_hash=content_hash(ft.weights),
        task_id=ft.meta.model_id if task_id is None else task_id,
        kind="finetune_diff",
    )
    return TaskVector(delta, prov)


def negate(t: TaskVector) -> TaskVector:
    return _composite(t.delta.map(np.negative), t.provenance.pre_hash, f"neg({t.task_id})")


def scale(t: TaskVector, coeff: float) -> TaskVector:
    c = np.float32(coeff)
    return _composite(t.delta.map(lambda a: a * c), t.provenance.pre_hash, f"{coeff:g}*{t.task_id}")


def sum_vectors(ts: Sequence[TaskVector]) -> TaskVector:
    """Elementwise sum, accumulated left to right in float64 and rounded once."""
    ts = list(ts)
    if not ts:
        raise ValueError("sum of an empty list of task vectors")

    def add(arrs):
        out = arrs[0].astype(np.float64)
        for a in arrs[1:]:
            out += a
        return out

    tid = "+".join(t.task_id for t in ts)
    return _composite(_elementwise(ts, add), ts[0].provenance.pre_hash, f"sum({tid})")


def analogy(ta: TaskVector, tb: TaskVector, tc: TaskVector) -> TaskVector:
    """``tc + (tb - ta)``: the vector that should move A->B applied to C."""
    # same float64 fold as sum_vectors([tc, tb, -ta]), so both spellings agree bitwise
    delta = _elementwise([ta, tb, tc], lambda a: a[2].astype(np.float64) + a[1] - a[0])
    return _composite(delta, tc.provenance.pre_hash, f"{tc.task_id}+({tb.task_id}-{ta.task_id})")


def per_layer_norms(t: TaskVector) -> dict[str, float]:
    out = {}
    for name, arr in t.delta.items():
        flat = arr.ravel().astype(np.float64)
        out[name] = float(np.sqrt(np.dot(flat, flat)))
    return out


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def random_matched(t: TaskVector, seed: int) -> TaskVector:
    """Gaussian noise rescaled to match ``t``'s norm tensor by tensor.

    Each tensor draws from its own stream keyed by ``seed ^ hash(name)``, so the
    result does not depend on iteration order. All-zero tensors stay zero.
    """
    norms = per_layer_norms(t)
    out = {}
    for name, arr in t.delta.items():
        target = norms[name]
        if target == 0.0:
            out[name] = np.zeros(arr.shape, dtype=np.float32)
            continue
        rng = np.random.default_rng((int(seed) ^ _name_key(name)) & (2**64 - 1))
        noise = rng.standard_normal(arr.shape)
        noise *= target / np.sqrt(np.sum(noise * noise))
        out[name] = noise.astype(np.float32)
    prov = Provenance(pre_hash=t.provenance.pre_hash, task_id=f"rand[{seed}]({t.task_id})", kind="random_matched")
    return TaskVector(TensorMap._trusted(out), prov)


def cosine(t1: TaskVector, t2: TaskVector) -> float:
    """Cosine similarity of the two flattened vectors (every tensor included)."""
    validate_compat(t1.delta, t2.delta)
    a, b = t1.delta.flatten(), t2.delta.flatten()
    na, nb = np.sqrt(np.dot(a, a)), np.sqrt(np.dot(b, b))
    if na == 0.0 or nb == 0.0:
        raise ZeroDivisionError("zero-norm task vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


# --- expressions -------------------------------------------------------------


@dataclass(frozen=True)
class Leaf:
    vector: TaskVector


@dataclass(frozen=True)
class Neg:
    child: "Expr"


@dataclass(frozen=True)
class Sum:
    children: tuple["Expr", ...] = field(default_factory=tuple)

    def __init__(self, children: Iterable["Expr"]):
        kids = tuple(children)
        if not kids:
            raise ValueError("Sum needs at least one child")
        object.__setattr__(self, "children", kids)


@dataclass(frozen=True)
class Scaled:
    coeff: float
    child: "Expr"


Expr = Union[Leaf, Neg, Sum, Scaled]


def as_expr(x: Union[Expr, TaskVector]) -> Expr:
    return Leaf(x) if isinstance(x, TaskVector) else x


def leaves(expr: Expr) -> list[TaskVector]:
    if isinstance(expr, Leaf):
        return [expr.vector]
    if isinstance(expr, (Neg, Scaled)):
        return leaves(expr.child)
    return [v for c in expr.children for v in leaves(c)]


def eval_expr(expr: Expr) -> TaskVector:
    if isinstance(expr, Leaf):
        return expr.vector
    if isinstance(expr, Neg):
        return negate(eval_expr(expr.child))
    if isinstance(expr, Scaled):
        return scale(eval_expr(expr.child), expr.coeff)
    if isinstance(expr, Sum):
        return sum_vectors([eval_expr(c) for c in expr.children])
    raise TypeError(f"not an expression node: {type(expr).__name__}")


def describe(expr: Expr) -> str:
    if isinstance(expr, Leaf):
        return expr.vector.task_id or "tv"
    if isinstance(expr, Neg):
        return f"-({describe(expr.child)})"
    if isinstance(expr, Scaled):
        return f"{expr.coeff:g}*({describe(expr.child)})"
    return "(" + " + ".join(describe(c) for c in expr.children) + ")"


def apply(base: Checkpoint, expr: Union[Expr, TaskVector], coeff: float = 1.0) -> Checkpoint:
    """Edited checkpoint ``base + coeff * eval(expr)``.

    The update is computed in float64 and rounded to float32 once.
    """
    expr = as_expr(expr)
    tau = eval_expr(expr)
    validate_compat(base.weights, tau.delta)
    if coeff == 0:
        # exact no-op; the arithmetic path would turn -0.0 into +0.0
        weights = base.weights
    else:
        with np.errstate(over="ignore"):
            new = {
                k: (base.weights[k].astype(np.float64) + float(coeff) * tau.delta[k]).astype(np.float32)
                for k in base.weights
            }
        weights = TensorMap._trusted(new)
        weights.check_finite()
    meta = CheckpointMeta(
        model_id=f"{base.meta.model_id}+edit",
        arch_digest=base.meta.arch_digest,
        seed=base.meta.seed,
        step=base.meta.step,
        parent_hash=content_hash(base.weights),
        note=f"apply {describe(expr)} coeff={float(coeff)!r}",
    )
    return Checkpoint(weights, meta)


def apply_vector(base: Checkpoint, delta: TensorMap) -> Checkpoint:
    """``base + delta`` without an expression, for multi-coefficient sweeps."""
    validate_compat(base.weights, delta)
    new = {k: (base.weights[k].astype(np.float64) + delta[k]).astype(np.float32) for k in base.weights}
    return Checkpoint(TensorMap._trusted(new), base.meta)


# --- serialization -----------------------------------------------------------


def save_task_vector(t: TaskVector, path: str | Path) -> None:
    meta = CheckpointMeta(model_id=t.task_id, parent_hash=t.provenance.pre_hash, note="taskvector")
    prov = {
        "pre_hash": t.provenance.pre_hash,
        "ft_hash": t.provenance.ft_hash,
        "task_id": t.provenance.task_id,
        "kind": t.provenance.kind,
    }
    Path(path).write_bytes(encode_tvkp(t.delta, meta.to_json(), {"provenance": prov}))


def load_task_vector(path: str | Path) -> TaskVector:
    delta, header = decode_tvkp(Path(path).read_bytes())
    prov: dict[str, Any] | None = header.get("provenance")
    if header["meta"].get("note") != "taskvector" or not isinstance(prov, dict):
        raise ValueError(f"{path} is not a task vector file")
    return TaskVector(delta, Provenance(**prov))


def provenance_json(t: TaskVector) -> str:
    return json.dumps(t.provenance.__dict__, sort_keys=True)
