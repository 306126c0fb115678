from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_ckpt, random_map
from taskvec.arith import (
    Leaf,
    Neg,
    Provenance,
    Scaled,
    Sum,
    TaskVector,
    analogy,
    apply,
    cosine,
    diff,
    eval_expr,
    leaves,
    load_task_vector,
    negate,
    per_layer_norms,
    random_matched,
    save_task_vector,
    scale,
    sum_vectors,
)
from taskvec.store import CompatibilityError, NonFiniteError, TensorMap, content_hash, zeros_like


def tv(**arrays_) -> TaskVector:
    return TaskVector(TensorMap(arrays_), Provenance(pre_hash="0" * 64, task_id="t"))


def ulp_at_operands(out, ft, pre):
    """Error of ``out`` vs ``ft`` measured in ULPs of the larger operand."""
    scale_ = np.spacing(np.maximum(np.abs(ft), np.abs(pre)).astype(np.float32))
    return np.abs(out.astype(np.float64) - ft) / scale_


finite32 = st.floats(-1e4, 1e4, width=32, allow_subnormal=False)
vec_arrays = arrays(np.float32, st.integers(1, 12), elements=finite32)


# --- hand examples -------------------------------------------------------------


def test_diff_examples():
    pre = make_ckpt(TensorMap({"w": [1.0, 2.0]}))
    ft = make_ckpt(TensorMap({"w": [3.0, 5.0]}), model_id="ft")
    t = diff(ft, pre)
    assert t.delta == TensorMap({"w": [2.0, 3.0]})
    assert t.provenance.kind == "finetune_diff"
    assert t.provenance.pre_hash == content_hash(pre.weights)
    assert t.provenance.ft_hash == content_hash(ft.weights)
    assert t.task_id == "ft"
    assert diff(pre, pre).delta == zeros_like(pre.weights)


def test_diff_incompatible():
    a = make_ckpt(TensorMap({"w": [1.0]}))
    b = make_ckpt(TensorMap({"w": [1.0, 2.0]}))
    with pytest.raises(CompatibilityError, match="shape mismatch"):
        diff(a, b)


def test_negate_examples():
    t = tv(w=[2.0, -3.0])
    assert negate(t).delta == TensorMap({"w": [-2.0, 3.0]})
    assert negate(negate(t)) == t
    z = tv(w=[0.0])
    assert negate(z).delta.flatten().tolist() == [0.0]
    assert negate(t).provenance.kind == "composite"


def test_sum_examples():
    a, b = tv(w=[1.0, 0.0]), tv(w=[0.5, 2.0])
    assert sum_vectors([a, b]).delta == TensorMap({"w": [1.5, 2.0]})
    assert sum_vectors([a]) == a
    with pytest.raises(ValueError):
        sum_vectors([])
    with pytest.raises(CompatibilityError):
        sum_vectors([a, tv(v=[1.0, 0.0])])


def test_analogy_examples():
    ta, tb, tc = tv(w=[1.0]), tv(w=[4.0]), tv(w=[2.0])
    assert analogy(ta, tb, tc).delta == TensorMap({"w": [5.0]})
    assert analogy(tb, tb, tc) == tc
    zero = tv(w=[0.0])
    assert analogy(zero, tb, tc) == sum_vectors([tb, tc])


def test_eval_expr_examples():
    rng = np.random.default_rng(3)
    ta, tb, tc = (TaskVector(random_map(rng), Provenance("0" * 64)) for _ in range(3))
    assert eval_expr(Neg(Leaf(ta))) == negate(ta)
    assert eval_expr(Scaled(2, Leaf(ta))) == sum_vectors([ta, ta])
    assert eval_expr(Sum([Leaf(tc), Leaf(tb), Neg(Leaf(ta))])) == analogy(ta, tb, tc)
    assert leaves(Sum([Leaf(ta), Scaled(0.5, Neg(Leaf(tb)))])) == [ta, tb]
    with pytest.raises(ValueError):
        Sum([])


def test_apply_examples():
    rng = np.random.default_rng(4)
    pre = make_ckpt(random_map(rng), model_id="pre")
    ft = make_ckpt(random_map(rng), model_id="ft")
    t = diff(ft, pre)
    same = apply(pre, Leaf(t), 0.0)
    assert same.weights == pre.weights
    assert same.meta.parent_hash == pre.hash
    assert "coeff=0.0" in same.meta.note
    back = apply(pre, Leaf(t), 1.0)
    for k in ft.weights:
        assert ulp_at_operands(back.weights[k], ft.weights[k], pre.weights[k]).max() <= 1.0
    assert apply(pre, t, -1.0).weights == apply(pre, negate(t), 1.0).weights


def test_apply_nonfinite():
    pre = make_ckpt(TensorMap({"w": [3e38]}))
    with pytest.raises(NonFiniteError):
        apply(pre, tv(w=[3e38]), 1.0)


def test_uniform_average_identity():
    rng = np.random.default_rng(5)
    pre, f1, f2 = (make_ckpt(random_map(rng)) for _ in range(3))
    avg = apply(pre, Sum([Leaf(diff(f1, pre)), Leaf(diff(f2, pre))]), 0.5)
    for k in avg.weights:
        expect = 0.5 * (f1.weights[k].astype(np.float64) + f2.weights[k])
        assert np.max(np.abs(avg.weights[k] - expect)) <= 1e-6


def test_random_matched_norms_and_determinism():
    rng = np.random.default_rng(6)
    t = TaskVector(TensorMap({"a": rng.normal(size=(5, 4)), "b": rng.normal(size=7), "c": np.zeros(3)}),
                   Provenance("0" * 64, task_id="x"))
    r = random_matched(t, 11)
    n_in, n_out = per_layer_norms(t), per_layer_norms(r)
    for k in ("a", "b"):
        assert n_out[k] == pytest.approx(n_in[k], rel=1e-6)
    assert not np.any(r.delta["c"])
    assert random_matched(t, 11).delta == r.delta
    assert random_matched(t, 12).delta != r.delta
    assert r.provenance.kind == "random_matched"


def test_per_layer_norms():
    assert per_layer_norms(tv(w=[3.0, 4.0])) == {"w": 5.0}
    assert per_layer_norms(tv(w=[0.0, 0.0])) == {"w": 0.0}


def test_cosine_examples():
    t1, t2 = tv(w=[1.0, 0.0]), tv(w=[1.0, 1.0])
    # 1 / sqrt(2)
    assert abs(cosine(t1, t2) - 0.7071067811865475) < 1e-12
    assert abs(cosine(t2, t2) - 1.0) < 1e-12
    assert abs(cosine(t2, negate(t2)) + 1.0) < 1e-12
    with pytest.raises(ZeroDivisionError, match="zero-norm task vector"):
        cosine(t1, tv(w=[0.0, 0.0]))


def test_cosine_uses_64bit_accumulation():
    # 1e5 near-orthogonal entries: a float32 dot product visibly drifts
    rng = np.random.default_rng(7)
    a = rng.normal(size=100_000).astype(np.float32)
    b = rng.normal(size=100_000).astype(np.float32)
    a64, b64 = a.astype(np.float64), b.astype(np.float64)
    ref = math.fsum(a64 * b64) / math.sqrt(math.fsum(a64 * a64) * math.fsum(b64 * b64))
    assert abs(cosine(tv(w=a), tv(w=b)) - ref) < 1e-12


def test_task_vector_file_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    pre, ft = make_ckpt(random_map(rng)), make_ckpt(random_map(rng), model_id="task9")
    t = diff(ft, pre)
    save_task_vector(t, tmp_path / "t.tvkp")
    back = load_task_vector(tmp_path / "t.tvkp")
    assert back == t
    assert back.provenance == t.provenance


# --- properties ------------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_property_double_negation_and_inverse(data):
    a = data.draw(vec_arrays)
    t = tv(w=a)
    assert negate(negate(t)) == t
    s = sum_vectors([t, negate(t)]).delta["w"]
    assert np.all(np.abs(s) <= np.spacing(np.abs(a)))


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_property_sum_commutative_associative(data):
    n = data.draw(st.integers(1, 10))
    xs = [data.draw(arrays(np.float32, n, elements=st.floats(-100, 100, width=32))) for _ in range(3)]
    a, b, c = (tv(w=x) for x in xs)
    ab_c = sum_vectors([sum_vectors([a, b]), c]).delta["w"]
    a_bc = sum_vectors([a, sum_vectors([b, c])]).delta["w"]
    cba = sum_vectors([c, b, a]).delta["w"]
    assert np.max(np.abs(ab_c.astype(np.float64) - a_bc)) <= 1e-6 * max(1.0, np.abs(ab_c).max())
    assert np.max(np.abs(cba.astype(np.float64) - ab_c)) <= 1e-6 * max(1.0, np.abs(ab_c).max())


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_property_lambda_one_recovery(data):
    n = data.draw(st.integers(1, 16))
    p = data.draw(arrays(np.float32, n, elements=finite32))
    f = data.draw(arrays(np.float32, n, elements=finite32))
    pre, ft = make_ckpt(TensorMap({"w": p})), make_ckpt(TensorMap({"w": f}))
    out = apply(pre, Leaf(diff(ft, pre)), 1.0).weights["w"]
    assert ulp_at_operands(out, f, p).max() <= 1.0
    assert apply(pre, Leaf(diff(ft, pre)), 0.0).weights == pre.weights


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_property_linearity(data):
    n = data.draw(st.integers(1, 8))
    p = data.draw(arrays(np.float32, n, elements=st.floats(-10, 10, width=32)))
    d = data.draw(arrays(np.float32, n, elements=st.floats(-10, 10, width=32)))
    a = data.draw(st.floats(0, 1))
    b = data.draw(st.floats(0, 1))
    pre, t = make_ckpt(TensorMap({"w": p})), tv(w=d)
    once = apply(pre, t, a + b).weights["w"]
    twice = apply(apply(pre, t, a), t, b).weights["w"]
    assert np.max(np.abs(once.astype(np.float64) - twice)) <= 1e-6 * max(1.0, np.abs(once).max())


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_property_cosine(data):
    n = data.draw(st.integers(2, 10))
    x = data.draw(arrays(np.float32, n, elements=st.floats(-10, 10, width=32)))
    y = data.draw(arrays(np.float32, n, elements=st.floats(-10, 10, width=32)))
    if not (np.any(x) and np.any(y)):
        return
    a, b = tv(w=x), tv(w=y)
    c = cosine(a, b)
    assert abs(c) <= 1.0 + 1e-12
    assert c == cosine(b, a)
    k = data.draw(st.sampled_from([0.5, 2.0, 4.0]))
    assert abs(cosine(scale(a, k), b) - c) < 1e-12
