from __future__ import annotations

import csv
import math

import numpy as np
import pytest

from taskvec import tasks as T
from taskvec.arith import Leaf, Provenance, TaskVector, apply, diff, negate
from taskvec.coeff import CoeffGrid
from taskvec.lab import (
    EvalReport,
    ReportRow,
    Zoo,
    accuracy,
    cosine_matrix,
    ensemble_accuracy,
    normalized_accuracy,
    pearson,
    run_addition,
    run_analogy_grid,
    run_domain_generalization,
    run_ensemble_study,
    run_forgetting,
    run_lr_seed_study,
    spearman,
)
from taskvec.lab.metrics import trajectory_cosines
from taskvec.lab.zoo import LabConfig
from taskvec.store import Checkpoint, TensorMap


def tv(**a):
    return TaskVector(TensorMap(a), Provenance("0" * 64))


def _with_bias(ck: Checkpoint, bias: np.ndarray) -> Checkpoint:
    arrays = {k: np.array(v) for k, v in ck.weights.items()}
    arrays["head.cls.bias"] = bias.astype(np.float32)
    return Checkpoint(TensorMap(arrays), ck.meta)


# --- metrics ---------------------------------------------------------------------


def test_accuracy_constant_predictor(zoo):
    pre = zoo.pretrained()
    arrays = {k: np.zeros(v.shape) for k, v in pre.weights.items()}
    bias = np.zeros(T.HEAD_WIDTH)
    bias[17] = 1.0
    arrays["head.cls.bias"] = bias
    const = Checkpoint(TensorMap(arrays), pre.meta)
    assert accuracy(const, zoo.spec, zoo.bank(1)[0]) == 0.25
    # all-zero logits: ties go to the lowest slot, which is class 0
    zero = Checkpoint(TensorMap({k: np.zeros(v.shape) for k, v in pre.weights.items()}), pre.meta)
    assert accuracy(zero, zoo.spec, zoo.bank(1)[0]) == 0.25


def test_accuracy_shift_invariance_and_perfect(zoo):
    data = zoo.bank(1)[0]
    ft = zoo.finetuned(data)
    shifted = _with_bias(ft, ft.weights["head.cls.bias"] + 3.0)
    assert accuracy(shifted, zoo.spec, data) == accuracy(ft, zoo.spec, data)
    easy = T.make_task(T.SyntheticTaskSpec("easy", 1, noise_sigma=1e-6))
    assert accuracy(ft, zoo.spec, easy) == 1.0


def test_accuracy_needs_labels(zoo):
    with pytest.raises(ValueError):
        accuracy(zoo.pretrained(), zoo.spec, zoo.bank(1)[0].unlabeled())


def test_normalized_accuracy():
    assert normalized_accuracy(0.9, 0.9) == 1.0
    assert normalized_accuracy(0.45, 0.90) == 0.5
    with pytest.raises(ZeroDivisionError):
        normalized_accuracy(0.5, 0.0)


def test_ensemble_accuracy_endpoints(zoo):
    d1, d2 = zoo.bank(2)
    f1, f2 = zoo.finetuned(d1), zoo.finetuned(d2)
    union = T.MultiTaskDataset((d1, d2))
    assert ensemble_accuracy(f1, f2, 0.0, zoo.spec, union) == accuracy(f1, zoo.spec, union)
    assert ensemble_accuracy(f1, f2, 1.0, zoo.spec, union) == accuracy(f2, zoo.spec, union)
    for a in (0.2, 0.5, 0.9):
        assert ensemble_accuracy(f1, f1, a, zoo.spec, union) == accuracy(f1, zoo.spec, union)
    with pytest.raises(ValueError):
        ensemble_accuracy(f1, f2, 1.5, zoo.spec, union)


def test_cosine_matrix_examples():
    t = tv(w=[1.0, 2.0, 0.0])
    assert cosine_matrix([t]).tolist() == [[1.0]]
    m = cosine_matrix([t, negate(t)])
    assert abs(m[0, 1] + 1.0) < 1e-12 and m[0, 1] == m[1, 0]
    disjoint = cosine_matrix([tv(w=[1.0, 0.0, 0.0]), tv(w=[0.0, 3.0, -2.0])])
    assert disjoint[0, 1] == 0.0
    with pytest.raises(ZeroDivisionError):
        cosine_matrix([t, tv(w=[0.0, 0.0, 0.0])])


def test_pearson_and_spearman():
    # closed forms by hand: y=[2,4,7] gives 5 / sqrt(2 * 114/9) = 15 / sqrt(228);
    # y=[2,4,5] gives 3 / sqrt(2 * 42/9) = 9 / sqrt(84) = 0.9819805060619656
    assert abs(pearson([1, 2, 3], [2, 4, 7]) - 15 / math.sqrt(228)) < 1e-9
    assert abs(pearson([1, 2, 3], [2, 4, 5]) - 0.9819805060619656) < 1e-9
    xs = [0.3, -1.0, 2.5, 4.0]
    assert abs(pearson(xs, xs) - 1.0) < 1e-12
    assert abs(pearson(xs, [-x for x in xs]) + 1.0) < 1e-12
    with pytest.raises(ValueError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson([1], [2])
    assert spearman([1, 2, 3, 4], [1, 10, 100, 1000]) == 1.0


def test_trajectory_cosines_flags_zero_vectors(zoo):
    data = zoo.bank(1)[0]
    res = zoo.finetuned(data, snapshot_every=100)
    pre = zoo.pretrained()
    traj = trajectory_cosines(res.snapshots, pre, diff(res.final, pre))
    assert traj[0] == (0, None)
    assert abs(traj[-1][1] - 1.0) < 1e-6
    with pytest.raises(ValueError):
        trajectory_cosines([], pre, diff(res.final, pre))


# --- reports ---------------------------------------------------------------------


def test_report_roundtrip(tmp_path):
    rep = EvalReport(
        experiment_id="demo",
        rows=[ReportRow("a", {"t": 0.5}, {"t": 1.0}, [0.3], {"pre": 0.1}, {"size": 2, "nested": {"x": 1}})],
        references=[ReportRow("ref", {"t": 0.9})],
        config_digest="d" * 64,
        seeds=[0, 1],
        summary={"k": 1.5},
        notes=["n"],
        plots={"curve": [(0.0, 0.5, "s"), (1.0, 0.7, "s")]},
    )
    paths = rep.write(tmp_path)
    assert EvalReport.load(paths["json"]) == rep
    flat = list(csv.DictReader(open(paths["csv"])))
    assert flat[0]["acc:t"] == "0.5" and flat[0]["x:size"] == "2" and flat[1]["section"] == "reference"
    plot = list(csv.reader(open(paths["plot"])))
    assert plot[0] == ["figure", "x", "y", "series"] and len(plot) == 3


# --- experiment structure ------------------------------------------------------------


def test_forgetting_rows(zoo):
    rep = run_forgetting(zoo, n_tasks=2)
    assert [r.edit for r in rep.rows] == ["pretrained", "finetuned", "gradient_ascent", "random_vector",
                                          "negative_task_vector"]
    by = {r.edit: r for r in rep.rows}
    for tid in ("task1", "task2"):
        assert by["finetuned"].accuracy[f"target:{tid}"] >= by["pretrained"].accuracy[f"target:{tid}"]
        sel = by["negative_task_vector"].extra["selection"][tid]
        assert sel["warning"] or sel["val_control"] >= 0.95 * by["pretrained"].baselines["pretrained_control_val"]
    assert by["random_vector"].coeffs == by["negative_task_vector"].coeffs


def test_forgetting_is_reproducible(zoo):
    fresh = Zoo(LabConfig())
    a = run_forgetting(zoo, n_tasks=1)
    b = run_forgetting(fresh, n_tasks=1)
    assert a.config_digest == b.config_digest
    assert [r.accuracy for r in a.rows] == [r.accuracy for r in b.rows]


def test_addition_pairs_structure(zoo):
    rep = run_addition(zoo, "pairs", joint_baseline=True)
    assert len(rep.rows) == 28
    refs = {r.edit: r for r in rep.references}
    for tid in (f"task{c}" for c in range(1, 9)):
        assert refs[f"finetuned:{tid}"].normalized[tid] == 1.0
    assert "multitask_joint" in refs
    assert set(rep.summary["bucket_mean_normalized_all"]) == {2}
    with pytest.raises(ValueError):
        run_addition(zoo, subsets=[()])
    with pytest.raises(ValueError):
        run_addition(zoo, "triples")


def test_singleton_at_lambda_one_is_the_finetuned_model(zoo):
    data = zoo.bank(1)[0]
    ft = zoo.finetuned(data)
    edited = apply(zoo.pretrained(), Leaf(zoo.vector(data)), 1.0)
    acc = accuracy(edited, zoo.spec, data)
    assert abs(normalized_accuracy(acc, accuracy(ft, zoo.spec, data)) - 1.0) < 1e-6


def test_analogy_structure(zoo):
    rep = run_analogy_grid(zoo, heldouts=(3,), seeds=(0,), fewshot=(1, 2), grid=CoeffGrid.parse("0:1:0.5"))
    edits = [(r.edit, r.extra["budget"], r.extra["start"]) for r in rep.rows]
    assert edits == [("pretrained", 0, "pretrained"), ("analogy", 0, "edited"),
                     ("fewshot:pretrained", 1, "pretrained"), ("fewshot:edited", 1, "edited"),
                     ("fewshot:pretrained", 2, "pretrained"), ("fewshot:edited", 2, "edited")]
    analogy_row = rep.rows[1]
    assert analogy_row.extra["lambda0_val"] == accuracy(zoo.pretrained(), zoo.spec,
                                                        T.make_task(T.make_grid(0)[3]), "val")
    with pytest.raises(ValueError):
        run_analogy_grid(zoo, heldouts=(5,), seeds=(0,), fewshot=())


def test_domain_structure(zoo):
    rep = run_domain_generalization(zoo, 0, grid_sup=CoeffGrid.parse("0:1:0.5"), grid_unsup=CoeffGrid((0.0,)))
    assert [r.edit for r in rep.rows] == ["pretrained", "finetuned_auxiliary", "task_analogy", "finetuned_target"]
    assert rep.summary["lambda_unsup"] == 0.0


def test_ensemble_identity_and_identical_pairs(zoo):
    rep = run_ensemble_study(zoo, pairs=[(0, 0), (1, 1), (0, 1)])
    assert len(rep.rows) == 3
    assert rep.summary["max_dev_from_uniform_average"] <= 1e-6
    bank = zoo.bank(2)
    for r, d in zip(rep.rows[:2], bank):
        ft_acc = accuracy(zoo.finetuned(d), zoo.spec, d)
        assert abs(r.accuracy["weight_average"] - ft_acc) < 1e-6
    with pytest.raises(ValueError):
        run_ensemble_study(zoo, pairs=[(0, 1)])


def test_lr_seed_rows(zoo):
    assert len(run_lr_seed_study(zoo).rows) == 1
    rep = run_lr_seed_study(zoo, lrs=(1e-2, 3e-3), seeds=(0, 1), grid=CoeffGrid.parse("0:1:0.25"))
    assert len(rep.rows) == 8
    assert set(rep.summary["per_lr"]) == {"0.01", "0.003"}
    with pytest.raises(ValueError):
        run_lr_seed_study(zoo, seeds=())

