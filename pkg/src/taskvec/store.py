"""In-memory weight containers and the TVKP checkpoint file format.

A TVKP file is laid out as (little-endian throughout)::

    0..4    magic b"TVKP"
    4..8    format version, u32 (currently 1)
    8..16   header length H, u64
    16..16+H  UTF-8 JSON header {"meta": {...}, "tensors": {...}, ...}
    rest    raw float32 payload, tensors contiguous in name order

Tensor offsets in the header are relative to the start of the payload.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterator, Mapping

import numpy as np

MAGIC = b"TVKP"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")
_F32 = np.dtype("<f4")


class TvkpFormatError(ValueError):
    """Raised when a checkpoint file is malformed."""


class CompatibilityError(ValueError):
    """Raised when two weight maps do not share names and shapes."""


class NonFiniteError(ValueError):
    """Raised when a tensor holds NaN or Inf."""


def _as_tensor(name: str, value: Any) -> np.ndarray:
    if not isinstance(name, str) or not name:
        raise ValueError("tensor names must be non-empty strings")
    arr = np.array(value, dtype=np.float32, copy=True)
    if arr.ndim == 0:
        raise ValueError(f"tensor {name} must have at least one dimension")
    if any(d <= 0 for d in arr.shape):
        raise ValueError(f"tensor {name} has a non-positive dimension: {list(arr.shape)}")
    arr.setflags(write=False)
    return arr


class TensorMap(Mapping[str, np.ndarray]):
    """Immutable name -> float32 array map iterated in lexicographic name order."""

    __slots__ = ("_data",)

    def __init__(self, entries: Mapping[str, Any] | None = None):
        entries = entries or {}
        self._data = {name: _as_tensor(name, entries[name]) for name in sorted(entries)}

    @classmethod
    def _trusted(cls, arrays: dict[str, np.ndarray]) -> "TensorMap":
        # arrays must already be fresh float32 buffers owned by the caller
        tm = cls.__new__(cls)
        data = {}
        for name in sorted(arrays):
            arr = arrays[name]
            arr.setflags(write=False)
            data[name] = arr
        tm._data = data
        return tm

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}: {list(v.shape)}" for k, v in self._data.items())
        return f"TensorMap({{{inner}}})"

    def __eq__(self, other: object) -> bool:
        # bit-exact equality, so -0.0 != 0.0 and shapes must match
        if not isinstance(other, TensorMap):
            return NotImplemented
        if list(self) != list(other):
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self._data.values(), other._data.values())
        )

    __hash__ = None  # type: ignore[assignment]

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._data.items()}

    def num_params(self) -> int:
        return sum(v.size for v in self._data.values())

    def map(self, fn) -> "TensorMap":
        """Apply ``fn`` to every array, keeping names."""
        return TensorMap._trusted(
            {k: np.asarray(fn(v), dtype=np.float32).copy() for k, v in self._data.items()}
        )

    def flatten(self, dtype=np.float64) -> np.ndarray:
        """Concatenate every tensor, in canonical order, into one vector."""
        if not self._data:
            return np.zeros(0, dtype=dtype)
        return np.concatenate([v.ravel().astype(dtype) for v in self._data.values()])

    def check_finite(self) -> None:
        for name, arr in self._data.items():
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError(f"non-finite value in tensor {name}")


def zeros_like(tm: TensorMap) -> TensorMap:
    return TensorMap._trusted({k: np.zeros(v.shape, dtype=np.float32) for k, v in tm.items()})


@dataclass(frozen=True)
class CheckpointMeta:
    model_id: str = ""
    arch_digest: str = ""
    seed: int = 0
    step: int = 0
    parent_hash: str | None = None
    note: str = ""

    def to_json(self) -> dict[str, Any]:
        return {
            "model_id": self.model_id,
            "arch_digest": self.arch_digest,
            "seed": int(self.seed),
            "step": int(self.step),
            "parent_hash": self.parent_hash,
            "note": self.note,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "CheckpointMeta":
        expected = {"model_id", "arch_digest", "seed", "step", "parent_hash", "note"}
        if set(obj) != expected:
            raise TvkpFormatError(f"header meta keys {sorted(obj)} != {sorted(expected)}")
        seed, step = obj["seed"], obj["step"]
        if not (isinstance(seed, int) and seed >= 0 and isinstance(step, int) and step >= 0):
            raise TvkpFormatError("meta seed/step must be unsigned integers")
        return cls(
            model_id=str(obj["model_id"]),
            arch_digest=str(obj["arch_digest"]),
            seed=seed,
            step=step,
            parent_hash=obj["parent_hash"],
            note=str(obj["note"]),
        )


@dataclass(frozen=True)
class Checkpoint:
    weights: TensorMap
    meta: CheckpointMeta = field(default_factory=CheckpointMeta)

    def with_meta(self, **changes: Any) -> "Checkpoint":
        return Checkpoint(self.weights, replace(self.meta, **changes))

    @property
    def hash(self) -> str:
        return content_hash(self.weights)


def content_hash(tm: TensorMap) -> str:
    """SHA-256 over names, shapes and little-endian float32 data in canonical order."""
    h = hashlib.sha256()
    h.update(struct.pack("<Q", len(tm)))
    for name, arr in tm.items():
        raw = name.encode("utf-8")
        h.update(struct.pack("<Q", len(raw)))
        h.update(raw)
        h.update(struct.pack("<Q", arr.ndim))
        h.update(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        h.update(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    return h.hexdigest()


def validate_compat(a: TensorMap, b: TensorMap) -> None:
    """Raise CompatibilityError unless ``a`` and ``b`` share names and shapes."""
    for name in sorted(set(a) ^ set(b)):
        raise CompatibilityError(f"missing tensor {name}")
    for name in a:
        if a[name].shape != b[name].shape:
            raise CompatibilityError(
                f"shape mismatch at {name}: {list(a[name].shape)} vs {list(b[name].shape)}"
            )


# --- file format -----------------------------------------------------------


def encode_tvkp(tm: TensorMap, meta: Mapping[str, Any], extra: Mapping[str, Any] | None = None) -> bytes:
    tm.check_finite()
    tensors = {}
    offset = 0
    for name, arr in tm.items():
        nbytes = arr.size * 4
        tensors[name] = {"dtype": "f32", "shape": list(arr.shape), "offset": offset, "nbytes": nbytes}
        offset += nbytes
    header: dict[str, Any] = {"meta": dict(meta), "tensors": tensors}
    if extra:
        header.update(extra)
    raw_header = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(arr, dtype=_F32).tobytes() for arr in tm.values())
    return _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(raw_header)) + raw_header + payload


def decode_tvkp(blob: bytes) -> tuple[TensorMap, dict[str, Any]]:
    """Parse a TVKP byte string into weights and the full JSON header."""
    if len(blob) < _PREAMBLE.size:
        raise TvkpFormatError("truncated preamble")
    magic, version, hlen = _PREAMBLE.unpack_from(blob, 0)
    if magic != MAGIC:
        raise TvkpFormatError("bad magic")
    if version != FORMAT_VERSION:
        raise TvkpFormatError(f"unsupported version {version}")
    start = _PREAMBLE.size
    if start + hlen > len(blob):
        raise TvkpFormatError("truncated header")
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TvkpFormatError(f"unreadable header: {exc}") from None
    if not isinstance(header, dict) or "meta" not in header or "tensors" not in header:
        raise TvkpFormatError("header must contain 'meta' and 'tensors'")
    payload = memoryview(blob)[start + hlen :]

    entries = header["tensors"]
    if not isinstance(entries, dict):
        raise TvkpFormatError("'tensors' must be an object")
    spans = []
    for name, info in entries.items():
        if not name:
            raise TvkpFormatError("empty tensor name")
        if not isinstance(info, dict) or info.get("dtype") != "f32":
            raise TvkpFormatError(f"tensor {name}: unsupported dtype")
        shape = info.get("shape")
        if not isinstance(shape, list) or not shape or not all(isinstance(d, int) and d > 0 for d in shape):
            raise TvkpFormatError(f"tensor {name}: invalid shape {shape}")
        off, nbytes = info.get("offset"), info.get("nbytes")
        if not all(isinstance(v, int) and v >= 0 for v in (off, nbytes)):
            raise TvkpFormatError(f"tensor {name}: invalid offset/nbytes")
        if nbytes != 4 * math.prod(shape):
            raise TvkpFormatError(f"tensor {name}: nbytes {nbytes} does not match shape {shape}")
        spans.append((off, nbytes, name, tuple(shape)))

    spans.sort()
    for (o1, n1, a, _), (o2, _, b, _) in zip(spans, spans[1:]):
        if o1 + n1 > o2:
            raise TvkpFormatError(f"overlapping offsets: {a} and {b}")
    end = 0
    for off, nbytes, name, _ in spans:
        if off != end:
            raise TvkpFormatError(f"gap before tensor {name}")
        end = off + nbytes
    if [s[2] for s in spans] != sorted(entries):
        raise TvkpFormatError("tensors not stored in lexicographic name order")
    if end > len(payload):
        raise TvkpFormatError("truncated payload")
    if end < len(payload):
        raise TvkpFormatError(f"{len(payload) - end} trailing bytes after payload")

    arrays = {
        name: np.frombuffer(payload, dtype=_F32, count=nbytes // 4, offset=off)
        .astype(np.float32)
        .reshape(shape)
        for off, nbytes, name, shape in spans
    }
    tm = TensorMap._trusted(arrays)
    tm.check_finite()
    return tm, header


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write ``ckpt`` as TVKP; refuses to write non-finite weights."""
    blob = encode_tvkp(ckpt.weights, ckpt.meta.to_json())
    Path(path).write_bytes(blob)


def load_checkpoint(path: str | Path) -> Checkpoint:
    weights, header = decode_tvkp(Path(path).read_bytes())
    if "provenance" in header:
        raise ValueError(f"{path} holds a task vector, not a checkpoint")
    return Checkpoint(weights, CheckpointMeta.from_json(header["meta"]))
