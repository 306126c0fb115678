from __future__ import annotations

import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_ckpt, random_map
from taskvec.store import (
    Checkpoint,
    CheckpointMeta,
    CompatibilityError,
    NonFiniteError,
    TensorMap,
    TvkpFormatError,
    content_hash,
    decode_tvkp,
    encode_tvkp,
    load_checkpoint,
    save_checkpoint,
    validate_compat,
)

# sha256 of eight zero bytes (the tensor count), computed with coreutils sha256sum
EMPTY_HASH = "af5570f5a1810b7af78caf4bc70a660f0df51e42baf91d4de5b2328de0e83dfc"


def test_tensormap_is_immutable_and_sorted():
    tm = TensorMap({"z": [1.0], "a": [[1, 2], [3, 4]]})
    assert list(tm) == ["a", "z"]
    assert tm["a"].dtype == np.float32
    with pytest.raises(ValueError):
        tm["a"][0, 0] = 5.0


def test_tensormap_copies_input():
    src = np.ones(3, dtype=np.float32)
    tm = TensorMap({"w": src})
    src[0] = 7
    assert tm["w"][0] == 1.0


@pytest.mark.parametrize("bad", [{"": [1.0]}, {"s": 1.0}, {"e": np.zeros((0, 2))}])
def test_tensormap_rejects_bad_entries(bad):
    with pytest.raises(ValueError):
        TensorMap(bad)


def test_tensormap_equality_is_bit_exact():
    assert TensorMap({"w": [0.0]}) != TensorMap({"w": [-0.0]})
    assert TensorMap({"w": [1.0, 2.0]}) == TensorMap({"w": np.array([1.0, 2.0])})
    assert TensorMap({"w": [1.0, 2.0]}) != TensorMap({"w": [[1.0, 2.0]]})


def test_check_finite_names_tensor():
    tm = TensorMap({"ok": [1.0], "bad": [np.nan]})
    with pytest.raises(NonFiniteError, match="bad"):
        tm.check_finite()


def test_empty_hash_golden():
    assert content_hash(TensorMap()) == EMPTY_HASH


def test_small_hash_golden():
    # oracle: the byte stream below, hashed by coreutils sha256sum:
    # u64 count=1 | u64 len=1 "w" | u64 ndim=2 | u64 1, u64 2 | f32 1.0, 2.0 (all little-endian)
    assert content_hash(TensorMap({"w": [[1.0, 2.0]]})) == (
        "4d5c949e8ee97046f39a5d8529590d217064bef47c68ec09364c17ea8636be1a"
    )


def test_hash_ignores_insertion_order_and_detects_change():
    rng = np.random.default_rng(0)
    tm = random_map(rng)
    shuffled = TensorMap({k: tm[k] for k in reversed(list(tm))})
    assert content_hash(tm) == content_hash(shuffled)
    changed = dict(tm)
    w = tm["a.bias"].copy()
    w[0] = np.nextafter(w[0], np.float32(np.inf))
    changed["a.bias"] = w
    assert content_hash(TensorMap(changed)) != content_hash(tm)
    plus = dict(tm)
    plus["a.bias"] = tm["a.bias"] + np.float32(1e-7)
    assert content_hash(TensorMap(plus)) != content_hash(tm)


def test_validate_compat_messages():
    a = TensorMap({"w": np.zeros((4, 3))})
    validate_compat(a, a)
    with pytest.raises(CompatibilityError, match="missing tensor extra"):
        validate_compat(a, TensorMap({"w": np.zeros((4, 3)), "extra": [1.0]}))
    with pytest.raises(CompatibilityError, match=r"shape mismatch at w: \[4, 3\] vs \[3, 4\]"):
        validate_compat(a, TensorMap({"w": np.zeros((3, 4))}))


def test_validate_compat_symmetric():
    a = TensorMap({"w": [1.0]})
    b = TensorMap({"v": [1.0]})
    for x, y in [(a, b), (b, a)]:
        with pytest.raises(CompatibilityError):
            validate_compat(x, y)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    ck = make_ckpt(random_map(rng), seed=3, step=7, parent_hash="ab" * 32, note="hello")
    path = tmp_path / "c.tvkp"
    save_checkpoint(ck, path)
    back = load_checkpoint(path)
    assert back == ck
    assert back.hash == ck.hash


@settings(max_examples=40, deadline=None)
@given(
    st.dictionaries(
        st.text("abcdefgh.", min_size=1, max_size=6),
        arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 3)),
               elements=st.floats(-1e6, 1e6, width=32)),
        max_size=4,
    )
)
def test_roundtrip_property(entries):
    tm = TensorMap(entries)
    tm2, header = decode_tvkp(encode_tvkp(tm, CheckpointMeta("x").to_json()))
    assert tm2 == tm
    assert header["meta"]["model_id"] == "x"


def test_layout_matches_hand_built_file():
    # independently assemble a file following the documented layout
    header = {
        "meta": CheckpointMeta("hand").to_json(),
        "tensors": {
            "a": {"dtype": "f32", "shape": [2], "offset": 0, "nbytes": 8},
            "b": {"dtype": "f32", "shape": [1, 1], "offset": 8, "nbytes": 4},
        },
    }
    raw = json.dumps(header).encode()
    blob = b"TVKP" + struct.pack("<IQ", 1, len(raw)) + raw + struct.pack("<3f", 1.5, -2.0, 0.25)
    tm, _ = decode_tvkp(blob)
    assert tm == TensorMap({"a": [1.5, -2.0], "b": [[0.25]]})
    ours = encode_tvkp(tm, CheckpointMeta("hand").to_json())
    assert ours[:4] == b"TVKP" and struct.unpack_from("<I", ours, 4)[0] == 1
    assert ours.endswith(struct.pack("<3f", 1.5, -2.0, 0.25))


def _valid_blob():
    return encode_tvkp(TensorMap({"a": [1.0, 2.0], "b": [3.0]}), CheckpointMeta("m").to_json())


def _rewrite_header(blob, fn):
    hlen = struct.unpack_from("<Q", blob, 8)[0]
    header = json.loads(blob[16 : 16 + hlen])
    fn(header)
    raw = json.dumps(header).encode()
    return blob[:8] + struct.pack("<Q", len(raw)) + raw + blob[16 + hlen :]


def test_corrupt_bad_magic():
    blob = b"XXXX" + _valid_blob()[4:]
    with pytest.raises(TvkpFormatError, match="bad magic"):
        decode_tvkp(blob)


def test_corrupt_version():
    blob = bytearray(_valid_blob())
    blob[4:8] = struct.pack("<I", 2)
    with pytest.raises(TvkpFormatError, match="unsupported version 2"):
        decode_tvkp(bytes(blob))


def test_corrupt_truncated_payload():
    with pytest.raises(TvkpFormatError, match="truncated payload"):
        decode_tvkp(_valid_blob()[:-2])


def test_corrupt_truncated_header():
    with pytest.raises(TvkpFormatError, match="truncated header"):
        decode_tvkp(_valid_blob()[:20])


def test_corrupt_overlapping_offsets():
    def clobber(h):
        h["tensors"]["b"]["offset"] = 4
    with pytest.raises(TvkpFormatError, match="overlapping offsets"):
        decode_tvkp(_rewrite_header(_valid_blob(), clobber))


def test_corrupt_gap():
    def gap(h):
        h["tensors"]["b"]["offset"] = 12
    with pytest.raises(TvkpFormatError, match="gap before tensor b"):
        decode_tvkp(_rewrite_header(_valid_blob() + b"\0" * 4, gap))


def test_corrupt_trailing_bytes():
    with pytest.raises(TvkpFormatError, match="trailing bytes"):
        decode_tvkp(_valid_blob() + b"\0")


def test_corrupt_order_and_nbytes():
    def swap(h):
        h["tensors"]["a"]["offset"], h["tensors"]["b"]["offset"] = 4, 0
    with pytest.raises(TvkpFormatError, match="lexicographic"):
        decode_tvkp(_rewrite_header(_valid_blob(), swap))

    def nbytes(h):
        h["tensors"]["b"]["nbytes"] = 8
    with pytest.raises(TvkpFormatError, match="does not match shape"):
        decode_tvkp(_rewrite_header(_valid_blob(), nbytes))


def test_nonfinite_rejected_at_io():
    tm = TensorMap._trusted({"w": np.array([np.inf], dtype=np.float32)})
    with pytest.raises(NonFiniteError):
        encode_tvkp(tm, CheckpointMeta("m").to_json())
    blob = bytearray(_valid_blob())
    blob[-4:] = struct.pack("<f", float("nan"))
    with pytest.raises(NonFiniteError):
        decode_tvkp(bytes(blob))


def test_meta_strict_and_with_meta():
    meta = CheckpointMeta("m", seed=1)
    assert CheckpointMeta.from_json(meta.to_json()) == meta
    with pytest.raises(ValueError):
        CheckpointMeta.from_json({**meta.to_json(), "extra": 1})
    ck = Checkpoint(TensorMap({"w": [1.0]}), meta).with_meta(note="n")
    assert ck.meta.note == "n" and ck.meta.seed == 1
