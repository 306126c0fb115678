"""Desk-scale versions of the task-arithmetic experimental protocols.

Each ``run_*`` function takes a :class:`Zoo` (which trains checkpoints on
demand) and returns an :class:`EvalReport`. Coefficients are always picked on
validation splits and accuracies are reported on test splits.
"""

from __future__ import annotations

import itertools
import logging
from typing import Iterable, Sequence

import numpy as np

from .. import tasks as T
from ..arith import Leaf, Neg, Scaled, Sum, apply, diff, random_matched, sum_vectors
from ..coeff import (
    COARSE_GRID,
    FINE_GRID,
    CoeffGrid,
    Metrics,
    select_best_row,
    select_negation,
    sweep,
    sweep_three,
    sweep_two,
)
from .metrics import (
    accuracy,
    cosine_matrix,
    ensemble_accuracy,
    normalized_accuracy,
    pearson,
    spearman,
    trajectory_cosines,
)
from .report import EvalReport, ReportRow, config_digest
from .zoo import Zoo

log = logging.getLogger(__name__)

EXPERIMENTS = ("forget", "add", "analogy", "domain", "cosim", "trajectory", "ensemble", "lr-seed")


def _digest(zoo: Zoo, name: str, params: dict) -> str:
    return config_digest({"experiment": name, "params": params, "lab": zoo.config.to_json()})


def _val_acc(zoo: Zoo, data):
    def ev(ck):
        return Metrics(accuracy(ck, zoo.spec, data, "val"))
    return ev


def _mean_val_acc(zoo: Zoo, datasets):
    def ev(ck):
        return Metrics(float(np.mean([accuracy(ck, zoo.spec, d, "val") for d in datasets])))
    return ev


# --- forgetting ----------------------------------------------------------------

FORGET_METHODS = ("pretrained", "finetuned", "gradient_ascent", "random_vector", "negative_task_vector")


def run_forgetting(zoo: Zoo, n_tasks: int = 4, grid: CoeffGrid = FINE_GRID, random_seed: int = 12345,
                   keep: float = 0.95) -> EvalReport:
    """Negate task vectors to forget target tasks while holding the control task."""
    spec, pre, control = zoo.spec, zoo.pretrained(), zoo.control
    bank = zoo.bank(n_tasks)
    pre_ctrl_val = accuracy(pre, spec, control, "val")
    pre_ctrl = accuracy(pre, spec, control, "test")

    per_method: dict[str, dict[str, float]] = {m: {} for m in FORGET_METHODS}
    coeffs: dict[str, list[float]] = {"random_vector": [], "negative_task_vector": []}
    selection: dict[str, dict] = {}
    sweeps = []
    for data in bank:
        tid = data.spec.task_id
        ft = zoo.finetuned(data)
        ga = zoo.finetuned(data, objective="negated_cross_entropy")
        tv = diff(ft, pre)

        def ev(ck, data=data):
            return Metrics(accuracy(ck, spec, data, "val"), accuracy(ck, spec, control, "val"))

        sw = sweep(pre, Neg(Leaf(tv)), grid, ev)
        choice = select_negation(sw, pre_ctrl_val, keep)
        lam = choice.coeff
        models = {
            "pretrained": pre,
            "finetuned": ft,
            "gradient_ascent": ga,
            "random_vector": apply(pre, Neg(Leaf(random_matched(tv, random_seed))), lam),
            "negative_task_vector": apply(pre, Neg(Leaf(tv)), lam),
        }
        for m, ck in models.items():
            per_method[m][f"target:{tid}"] = accuracy(ck, spec, data, "test")
            per_method[m][f"control:{tid}"] = accuracy(ck, spec, control, "test")
        coeffs["random_vector"].append(lam)
        coeffs["negative_task_vector"].append(lam)
        selection[tid] = {
            "lambda": lam,
            "warning": choice.warning,
            "val_control": None if choice.row is None else choice.row.control_metric,
            "val_target": None if choice.row is None else choice.row.target_metric,
        }
        sweeps.append((tid, sw))

    rows = []
    for m in FORGET_METHODS:
        acc = per_method[m]
        acc["target_mean"] = float(np.mean([v for k, v in acc.items() if k.startswith("target:")]))
        acc["control_mean"] = float(np.mean([v for k, v in acc.items() if k.startswith("control:")]))
        rows.append(
            ReportRow(
                edit=m,
                accuracy=dict(acc),
                coeffs=coeffs.get(m, []),
                baselines={"pretrained_control": pre_ctrl, "pretrained_control_val": pre_ctrl_val},
                extra={"selection": selection} if m == "negative_task_vector" else {},
            )
        )
    by = {r.edit: r.accuracy for r in rows}
    summary = {
        "target_drop_negation": by["pretrained"]["target_mean"] - by["negative_task_vector"]["target_mean"],
        "target_drop_random": by["pretrained"]["target_mean"] - by["random_vector"]["target_mean"],
        "control_ratio_negation": by["negative_task_vector"]["control_mean"] / pre_ctrl,
        "control_ratio_gradient_ascent": by["gradient_ascent"]["control_mean"] / pre_ctrl,
        "keep": keep,
    }
    plots = {
        "forget_sweep": [
            (r.coeffs[0], r.target_metric, f"target:{tid}") for tid, sw in sweeps for r in sw.rows
        ] + [(r.coeffs[0], r.control_metric, f"control:{tid}") for tid, sw in sweeps for r in sw.rows],
    }
    params = {"n_tasks": n_tasks, "grid": list(grid.values), "random_seed": random_seed, "keep": keep}
    return EvalReport(
        experiment_id="forget",
        rows=rows,
        config_digest=_digest(zoo, "forget", params),
        seeds=[zoo.config.init_seed, zoo.config.data_seed, zoo.config.finetune.seed, random_seed],
        summary=summary,
        notes=["coefficients chosen on validation splits; accuracies reported on test splits"],
        plots=plots,
    )


# --- addition --------------------------------------------------------------------


def run_addition(zoo: Zoo, subset_mode: str = "pairs", n_tasks: int = 8, grid: CoeffGrid = FINE_GRID,
                 joint_baseline: bool = False, subsets: Iterable[Sequence[int]] | None = None) -> EvalReport:
    """Add task vectors over pairs or all non-empty subsets of the task bank."""
    spec, pre = zoo.spec, zoo.pretrained()
    bank = zoo.bank(n_tasks)
    ids = [d.spec.task_id for d in bank]
    fts = [zoo.finetuned(d) for d in bank]
    tvs = [diff(ft, pre) for ft in fts]
    ft_acc = {tid: accuracy(ft, spec, d, "test") for tid, ft, d in zip(ids, fts, bank)}
    pre_acc = {tid: accuracy(pre, spec, d, "test") for tid, d in zip(ids, bank)}

    if subsets is None:
        if subset_mode == "pairs":
            subsets = list(itertools.combinations(range(n_tasks), 2))
        elif subset_mode == "all_subsets":
            subsets = [c for k in range(1, n_tasks + 1) for c in itertools.combinations(range(n_tasks), k)]
        else:
            raise ValueError(f"subset_mode must be 'pairs' or 'all_subsets', got {subset_mode!r}")
    subsets = [tuple(s) for s in subsets]
    if any(len(s) == 0 for s in subsets):
        raise ValueError("empty subset")

    rows = []
    for s in subsets:
        expr = Sum([Leaf(tvs[i]) for i in s])
        sw = sweep(pre, expr, grid, _mean_val_acc(zoo, [bank[i] for i in s]))
        lam = select_best_row(sw).coeffs[0]
        edited = apply(pre, expr, lam)
        acc = {tid: accuracy(edited, spec, d, "test") for tid, d in zip(ids, bank)}
        norm = {tid: normalized_accuracy(acc[tid], ft_acc[tid]) for tid in ids}
        members = [ids[i] for i in s]
        rows.append(
            ReportRow(
                edit="+".join(members),
                accuracy=acc,
                normalized=norm,
                coeffs=[lam],
                baselines={f"zeroshot:{t}": pre_acc[t] for t in ids},
                extra={
                    "subset": members,
                    "size": len(s),
                    "mean_normalized_subset": float(np.mean([norm[t] for t in members])),
                    "mean_normalized_all": float(np.mean([norm[t] for t in ids])),
                },
            )
        )

    refs = [ReportRow(edit="pretrained", accuracy=dict(pre_acc),
                      normalized={t: normalized_accuracy(pre_acc[t], ft_acc[t]) for t in ids})]
    for tid, d in zip(ids, bank):
        refs.append(ReportRow(edit=f"finetuned:{tid}", accuracy={tid: ft_acc[tid]},
                              normalized={tid: normalized_accuracy(ft_acc[tid], ft_acc[tid])}))
    if joint_baseline:
        joint = zoo.finetuned(T.MultiTaskDataset(tuple(bank)), model_id="multitask")
        jacc = {tid: accuracy(joint, spec, d, "test") for tid, d in zip(ids, bank)}
        refs.append(ReportRow(edit="multitask_joint", accuracy=jacc,
                              normalized={t: normalized_accuracy(jacc[t], ft_acc[t]) for t in ids}))

    sizes = sorted({r.extra["size"] for r in rows})
    bucket_all = {k: float(np.mean([r.extra["mean_normalized_all"] for r in rows if r.extra["size"] == k]))
                  for k in sizes}
    bucket_subset = {k: float(np.mean([r.extra["mean_normalized_subset"] for r in rows if r.extra["size"] == k]))
                     for k in sizes}
    summary = {
        "mean_normalized_subset": float(np.mean([r.extra["mean_normalized_subset"] for r in rows])),
        "bucket_mean_normalized_all": bucket_all,
        "bucket_mean_normalized_subset": bucket_subset,
    }
    if joint_baseline:
        summary["multitask_joint_mean_normalized"] = float(np.mean(list(refs[-1].normalized.values())))
    plots = {
        "pair_addition": [(float(r.normalized[r.extra["subset"][0]]), float(r.normalized[r.extra["subset"][1]]),
                        r.edit) for r in rows if r.extra["size"] == 2],
        "subset_size_all_tasks": [(float(k), v, "all_tasks") for k, v in bucket_all.items()],
        "subset_size_subset_tasks": [(float(k), v, "subset_tasks") for k, v in bucket_subset.items()],
        "optimal_lambda": [(float(r.extra["size"]), r.coeffs[0], "lambda") for r in rows],
    }
    params = {"subset_mode": subset_mode, "n_tasks": n_tasks, "grid": list(grid.values),
              "joint_baseline": joint_baseline, "subsets": [list(s) for s in subsets]}
    return EvalReport(
        experiment_id=f"add-{subset_mode}",
        rows=rows,
        references=refs,
        config_digest=_digest(zoo, "add", params),
        seeds=[zoo.config.init_seed, zoo.config.data_seed, zoo.config.finetune.seed],
        summary=summary,
        notes=["the empty subset is skipped", "mean_normalized_all averages over every bank task, "
               "mean_normalized_subset only over the tasks whose vectors were added"],
        plots=plots,
    )


# --- analogies ---------------------------------------------------------------------


def run_analogy_grid(zoo: Zoo, heldouts: Sequence[int] = (0, 1, 2, 3), seeds: Sequence[int] = (0, 1, 2),
                     fewshot: Sequence[int] = (1, 2, 4), grid: CoeffGrid = FINE_GRID,
                     independent: bool = False) -> EvalReport:
    """Predict a held-out content x style cell from the other three cells' vectors."""
    spec, pre = zoo.spec, zoo.pretrained()
    rows: list[ReportRow] = []
    for seed in seeds:
        cells = [T.make_task(s) for s in T.make_grid(seed)]
        tvs = [zoo.vector(c, seed=seed) for c in cells]
        for h in heldouts:
            if h not in range(4):
                raise ValueError(f"held-out cell {h} not in grid")
            target = cells[h]
            a, b, c = T.analogy_triple(h)
            expr = Sum([Leaf(tvs[c]), Leaf(tvs[b]), Neg(Leaf(tvs[a]))])
            sw = sweep(pre, expr, grid, _val_acc(zoo, target))
            lam = select_best_row(sw).coeffs[0]
            edited = apply(pre, expr, lam)
            key = {"seed": seed, "heldout": h, "cell": T.GRID_CELL_NAMES[h], "triple": [a, b, c]}
            pre_acc = accuracy(pre, spec, target, "test")
            zero = accuracy(edited, spec, target, "test")
            rows.append(ReportRow("pretrained", {"heldout": pre_acc}, extra={**key, "budget": 0, "start": "pretrained"}))
            rows.append(ReportRow("analogy", {"heldout": zero}, coeffs=[lam], baselines={"pretrained": pre_acc},
                                  extra={**key, "budget": 0, "start": "edited",
                                         "lambda0_val": sw.rows[0].target_metric}))
            if independent:
                sw3 = sweep_three(pre, tvs[a], tvs[b], tvs[c], COARSE_GRID, _val_acc(zoo, target))
                best = select_best_row(sw3).coeffs
                la, lb, lc = best
                ind = apply(pre, Sum([Scaled(lc, Leaf(tvs[c])), Scaled(lb, Leaf(tvs[b])),
                                      Neg(Scaled(la, Leaf(tvs[a])))]), 1.0)
                rows.append(ReportRow("analogy_independent", {"heldout": accuracy(ind, spec, target, "test")},
                                      coeffs=list(best), extra={**key, "budget": 0, "start": "edited"}))
            for budget in fewshot:
                few = T.subsample(target, budget, seed)
                for start_name, start in (("pretrained", pre), ("edited", edited)):
                    ck = zoo.finetuned(few, seed=seed, start=start)
                    rows.append(ReportRow(f"fewshot:{start_name}", {"heldout": accuracy(ck, spec, target, "test")},
                                          extra={**key, "budget": budget, "start": start_name}))

    def mean_of(edit, budget):
        vals = [r.accuracy["heldout"] for r in rows if r.edit == edit and r.extra["budget"] == budget]
        return float(np.mean(vals))

    summary = {
        "zero_shot_pretrained": mean_of("pretrained", 0),
        "zero_shot_analogy": mean_of("analogy", 0),
        "zero_shot_gain": mean_of("analogy", 0) - mean_of("pretrained", 0),
        "fewshot": {
            str(b): {"pretrained": mean_of("fewshot:pretrained", b), "edited": mean_of("fewshot:edited", b)}
            for b in fewshot
        },
    }
    if independent:
        summary["zero_shot_independent"] = mean_of("analogy_independent", 0)
    plots = {"fewshot_curves": []}
    for start_name in ("pretrained", "edited"):
        plots["fewshot_curves"].append((0.0, summary["zero_shot_pretrained" if start_name == "pretrained"
                                                    else "zero_shot_analogy"], start_name))
        for b in fewshot:
            plots["fewshot_curves"].append((float(b), summary["fewshot"][str(b)][start_name], start_name))
    params = {"heldouts": list(heldouts), "seeds": list(seeds), "fewshot": list(fewshot),
              "grid": list(grid.values), "independent": independent}
    return EvalReport(
        experiment_id="analogy",
        rows=rows,
        config_digest=_digest(zoo, "analogy", params),
        seeds=list(seeds),
        summary=summary,
        notes=["single shared coefficient chosen on the held-out cell's validation split",
               "multi-coefficient selection is a pure validation argmax (no control constraint)"],
        plots=plots,
    )


def run_domain_generalization(zoo: Zoo, seed: int = 0, grid_sup: CoeffGrid = COARSE_GRID,
                              grid_unsup: CoeffGrid = COARSE_GRID) -> EvalReport:
    """Transfer a supervised vector to an unlabelled domain via reconstruction vectors."""
    spec, pre = zoo.spec, zoo.pretrained()
    pair = T.make_domain_pair(seed)
    target = pair.target_supervised_eval
    t_sup = zoo.vector(pair.aux_supervised, seed=seed)
    t_aux_u = zoo.vector(pair.aux_unsup, seed=seed, objective="reconstruction")
    t_tgt_u = zoo.vector(pair.target_unsup, seed=seed, objective="reconstruction")
    sw = sweep_two(pre, t_sup, t_tgt_u, t_aux_u, grid_sup, grid_unsup, _val_acc(zoo, target))
    ls, lu = select_best_row(sw).coeffs
    edited = apply(pre, Sum([Scaled(ls, Leaf(t_sup)), Scaled(lu, Sum([Leaf(t_tgt_u), Neg(Leaf(t_aux_u))]))]), 1.0)
    ft_aux = zoo.finetuned(pair.aux_supervised, seed=seed)
    ft_tgt = zoo.finetuned(target, seed=seed)
    models = [("pretrained", pre, []), ("finetuned_auxiliary", ft_aux, []),
              ("task_analogy", edited, [ls, lu]), ("finetuned_target", ft_tgt, [])]
    rows = [ReportRow(name, {"target": accuracy(ck, spec, target, "test")}, coeffs=c) for name, ck, c in models]
    acc = {r.edit: r.accuracy["target"] for r in rows}
    summary = {
        "lambda_sup": ls,
        "lambda_unsup": lu,
        "lambda_sup_ge_unsup": ls >= lu,
        "ordering": [r.edit for r in sorted(rows, key=lambda r: r.accuracy["target"])],
        **{f"acc_{k}": v for k, v in acc.items()},
    }
    plots = {"domain_sweep": [(r.coeffs[0], r.target_metric, f"lambda_unsup={r.coeffs[1]:g}") for r in sw.rows]}
    params = {"seed": seed, "grid_sup": list(grid_sup.values), "grid_unsup": list(grid_unsup.values)}
    return EvalReport(
        experiment_id="domain",
        rows=rows,
        config_digest=_digest(zoo, "domain", params),
        seeds=[seed],
        summary=summary,
        notes=["coefficients chosen on the target domain's validation split; "
               "accuracies on its test split; no target labels are used for training"],
        plots=plots,
    )


# --- analysis ------------------------------------------------------------------------


def run_ensemble_study(zoo: Zoo, pairs: Sequence[tuple[int, int]] | None = None, n_tasks: int = 8,
                       alpha: float = 0.5) -> EvalReport:
    """Weight averaging (λ=0.5 sum) versus logit ensembling over task pairs."""
    spec, pre = zoo.spec, zoo.pretrained()
    bank = zoo.bank(n_tasks)
    if pairs is None:
        pairs = list(itertools.combinations(range(n_tasks), 2))
    if len(pairs) < 2:
        raise ValueError("need at least two pairs for a correlation")
    fts = [zoo.finetuned(d) for d in bank]
    tvs = [diff(ft, pre) for ft in fts]
    rows = []
    for i, j in pairs:
        union = T.MultiTaskDataset((bank[i], bank[j]))
        avg = apply(pre, Sum([Leaf(tvs[i]), Leaf(tvs[j])]), 0.5)
        dev = max(
            float(np.max(np.abs(avg.weights[k].astype(np.float64)
                                - 0.5 * (fts[i].weights[k].astype(np.float64) + fts[j].weights[k]))))
            for k in avg.weights
        )
        rows.append(ReportRow(
            edit=f"{bank[i].spec.task_id}&{bank[j].spec.task_id}",
            accuracy={"weight_average": accuracy(avg, spec, union, "test"),
                      "ensemble": ensemble_accuracy(fts[i], fts[j], alpha, spec, union, "test")},
            coeffs=[0.5],
            extra={"max_dev_from_uniform_average": dev},
        ))
    wa = [r.accuracy["weight_average"] for r in rows]
    en = [r.accuracy["ensemble"] for r in rows]
    summary = {
        "pearson": pearson(wa, en),
        "mean_weight_average": float(np.mean(wa)),
        "mean_ensemble": float(np.mean(en)),
        "max_dev_from_uniform_average": max(r.extra["max_dev_from_uniform_average"] for r in rows),
    }
    params = {"pairs": [list(p) for p in pairs], "alpha": alpha}
    return EvalReport(
        experiment_id="ensemble",
        rows=rows,
        config_digest=_digest(zoo, "ensemble", params),
        seeds=[zoo.config.init_seed, zoo.config.data_seed, zoo.config.finetune.seed],
        summary=summary,
        plots={"ensemble_vs_average": [(e, w, r.edit) for e, w, r in zip(en, wa, rows)]},
    )


def run_cosine(zoo: Zoo, n_tasks: int = 8, seeds: Sequence[int] = (0, 1)) -> EvalReport:
    """Cosine similarity between task vectors, and between seeds of the same task."""
    bank = zoo.bank(n_tasks)
    ids = [d.spec.task_id for d in bank]
    tvs = [zoo.vector(d, seed=seeds[0]) for d in bank]
    m = cosine_matrix(tvs)
    rows = [ReportRow(ids[i], {ids[j]: float(m[i, j]) for j in range(n_tasks)}) for i in range(n_tasks)]
    same = []
    for d, tv in zip(bank, tvs):
        for s in seeds[1:]:
            same.append(float(cosine_matrix([tv, zoo.vector(d, seed=s)])[0, 1]))
    off = np.abs(m[~np.eye(n_tasks, dtype=bool)])
    summary = {
        "mean_abs_offdiag": float(off.mean()) if off.size else 0.0,
        "max_abs_offdiag": float(off.max()) if off.size else 0.0,
        "mean_same_task_cross_seed": float(np.mean(same)) if same else None,
        "flattening": "all tensors, canonical name order",
    }
    plots = {"cosine_matrix": [(float(i), float(j), f"{m[i, j]:.6f}") for i in range(n_tasks) for j in range(n_tasks)]}
    return EvalReport(
        experiment_id="cosim",
        rows=rows,
        config_digest=_digest(zoo, "cosim", {"n_tasks": n_tasks, "seeds": list(seeds)}),
        seeds=list(seeds),
        summary=summary,
        references=[ReportRow("same_task_cross_seed", {ids[k]: v for k, v in enumerate(same[: n_tasks])})],
        notes=["cosines use the full flattened vector, frozen or untouched tensors included"],
        plots=plots,
    )


def run_trajectory(zoo: Zoo, task_index: int = 0, partner_index: int = 1, snapshot_every: int = 25,
                   grid: CoeffGrid = FINE_GRID) -> EvalReport:
    """How intermediate task vectors approach the final one, and how useful they are when added."""
    spec, pre = zoo.spec, zoo.pretrained()
    bank = zoo.bank(max(task_index, partner_index) + 1)
    d1, d2 = bank[task_index], bank[partner_index]
    r1 = zoo.finetuned(d1, snapshot_every=snapshot_every)
    r2 = zoo.finetuned(d2, snapshot_every=snapshot_every)
    final1 = diff(r1.final, pre)
    traj = trajectory_cosines(r1.snapshots, pre, final1)
    rows = []
    snaps2 = dict(r2.snapshots)
    for (step, ck1), (_, cos) in zip(r1.snapshots, traj):
        extra = {"step": step, "undefined": cos is None}
        acc = {}
        ck2 = snaps2.get(step)
        if ck2 is not None and step > 0:
            expr = Sum([Leaf(diff(ck1, pre)), Leaf(diff(ck2, pre))])
            sw = sweep(pre, expr, grid, _mean_val_acc(zoo, [d1, d2]))
            lam = select_best_row(sw).coeffs[0]
            edited = apply(pre, expr, lam)
            acc = {d.spec.task_id: accuracy(edited, spec, d, "test") for d in (d1, d2)}
            extra["lambda"] = lam
        rows.append(ReportRow(f"step{step}", accuracy=acc,
                              baselines={} if cos is None else {"cosine_to_final": cos}, extra=extra))
    defined = [(s, c) for s, c in traj if c is not None]
    summary = {
        "spearman_step_vs_cosine": spearman([s for s, _ in defined], [c for _, c in defined]),
        "final_cosine": defined[-1][1],
        "undefined_steps": [s for s, c in traj if c is None],
    }
    plots = {
        "trajectory_cosine": [(float(s), c, d1.spec.task_id) for s, c in defined],
        "trajectory_added_accuracy": [(float(r.extra["step"]), float(np.mean(list(r.accuracy.values()))), "mean")
                                for r in rows if r.accuracy],
    }
    params = {"task_index": task_index, "partner_index": partner_index, "snapshot_every": snapshot_every}
    return EvalReport(
        experiment_id="trajectory",
        rows=rows,
        config_digest=_digest(zoo, "trajectory", params),
        seeds=[zoo.config.finetune.seed],
        summary=summary,
        plots=plots,
    )


def run_lr_seed_study(zoo: Zoo, pair: tuple[int, int] = (0, 1), lrs: Sequence[float] = (1e-2,),
                      seeds: Sequence[int] = (0,), grid: CoeffGrid = FINE_GRID) -> EvalReport:
    """Added-model accuracy across learning rates and all seed combinations."""
    if not lrs or not seeds:
        raise ValueError("lrs and seeds must be non-empty")
    spec, pre = zoo.spec, zoo.pretrained()
    bank = zoo.bank(max(pair) + 1)
    d1, d2 = bank[pair[0]], bank[pair[1]]
    rows = []
    for lr in lrs:
        for s1, s2 in itertools.product(seeds, seeds):
            ft1 = zoo.finetuned(d1, seed=s1, peak_lr=lr)
            ft2 = zoo.finetuned(d2, seed=s2, peak_lr=lr)
            expr = Sum([Leaf(diff(ft1, pre)), Leaf(diff(ft2, pre))])
            sw = sweep(pre, expr, grid, _mean_val_acc(zoo, [d1, d2]))
            lam = select_best_row(sw).coeffs[0]
            edited = apply(pre, expr, lam)
            acc = {d.spec.task_id: accuracy(edited, spec, d, "test") for d in (d1, d2)}
            indiv = {d1.spec.task_id: accuracy(ft1, spec, d1, "test"), d2.spec.task_id: accuracy(ft2, spec, d2, "test")}
            rows.append(ReportRow(
                edit=f"lr={lr:g} seeds=({s1},{s2})",
                accuracy=acc,
                normalized={k: normalized_accuracy(acc[k], indiv[k]) for k in acc},
                coeffs=[lam],
                baselines={f"finetuned:{k}": v for k, v in indiv.items()},
                extra={"lr": lr, "seed_a": s1, "seed_b": s2,
                       "mean_added": float(np.mean(list(acc.values()))),
                       "mean_individual": float(np.mean(list(indiv.values())))},
            ))
    per_lr = {}
    for lr in lrs:
        sub = [r for r in rows if r.extra["lr"] == lr]
        added = [r.extra["mean_added"] for r in sub]
        per_lr[f"{lr:g}"] = {
            "mean_added": float(np.mean(added)),
            "mean_individual": float(np.mean([r.extra["mean_individual"] for r in sub])),
            "seed_spread": float(max(added) - min(added)),
        }
    plots = {
        "lr_study": [(lr, per_lr[f"{lr:g}"]["mean_added"], "added") for lr in lrs]
        + [(lr, per_lr[f"{lr:g}"]["mean_individual"], "individual") for lr in lrs],
        "seed_study": [(float(r.extra["seed_a"]), r.extra["mean_added"], f"lr={r.extra['lr']:g}") for r in rows],
    }
    params = {"pair": list(pair), "lrs": list(lrs), "seeds": list(seeds), "grid": list(grid.values)}
    return EvalReport(
        experiment_id="lr-seed",
        rows=rows,
        config_digest=_digest(zoo, "lr-seed", params),
        seeds=list(seeds),
        summary={"per_lr": per_lr},
        notes=["seed spread (max - min of mean added accuracy) is reported, not asserted"],
        plots=plots,
    )


def sum_identity_deviation(zoo: Zoo, i: int = 0, j: int = 1) -> float:
    """Largest elementwise gap between apply(pre, t_i + t_j, 0.5) and the weight average."""
    pre = zoo.pretrained()
    bank = zoo.bank(max(i, j) + 1)
    f1, f2 = zoo.finetuned(bank[i]), zoo.finetuned(bank[j])
    avg = apply(pre, sum_vectors([diff(f1, pre), diff(f2, pre)]), 0.5)
    return max(float(np.max(np.abs(avg.weights[k] - 0.5 * (f1.weights[k].astype(np.float64) + f2.weights[k]))))
               for k in avg.weights)
