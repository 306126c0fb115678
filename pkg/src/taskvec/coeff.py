"""Scaling-coefficient grids, exhaustive sweeps and selection rules."""

from __future__ import annotations

import csv
import itertools
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .arith import Expr, Leaf, TaskVector, apply, as_expr, eval_expr
from .store import Checkpoint, TensorMap, validate_compat

log = logging.getLogger(__name__)


class Metrics(NamedTuple):
    target: float
    control: float | None = None


Evaluator = Callable[[Checkpoint], Metrics]


class SweepError(RuntimeError):
    def __init__(self, coeffs: tuple[float, ...], cause: BaseException):
        super().__init__(f"evaluation failed at coefficients {coeffs}: {cause}")
        self.coeffs = coeffs


@dataclass(frozen=True)
class CoeffGrid:
    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise ValueError("empty coefficient grid")
        if any(v < 0 for v in vals):
            raise ValueError("coefficients must be non-negative")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError("grid values must be strictly ascending")
        object.__setattr__(self, "values", vals)

    @classmethod
    def linspace(cls, start: float, stop: float, step: float) -> "CoeffGrid":
        """Inclusive range ``start, start+step, ..., stop`` without float drift."""
        if step <= 0:
            raise ValueError("step must be positive")
        n = int(round((stop - start) / step))
        if not np.isclose(start + n * step, stop):
            raise ValueError(f"{stop} is not reachable from {start} in steps of {step}")
        return cls(tuple(round(start + i * step, 10) for i in range(n + 1)))

    @classmethod
    def parse(cls, text: str) -> "CoeffGrid":
        """Parse ``"a:b:step"`` (inclusive) or a comma-separated list."""
        if ":" in text:
            a, b, s = (float(v) for v in text.split(":"))
            return cls.linspace(a, b, s)
        return cls(tuple(float(v) for v in text.split(",")))

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self):
        return iter(self.values)


# λ ∈ {0, 0.05, ..., 1} for single-coefficient edits, {0, 0.1, ..., 1} per axis for multi-coefficient ones
FINE_GRID = CoeffGrid.linspace(0.0, 1.0, 0.05)
COARSE_GRID = CoeffGrid.linspace(0.0, 1.0, 0.1)


@dataclass(frozen=True)
class SweepRow:
    coeffs: tuple[float, ...]
    target_metric: float
    control_metric: float | None = None


@dataclass
class SweepResult:
    rows: list[SweepRow] = field(default_factory=list)
    axes: tuple[str, ...] = ("lambda",)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(self.axes) + ["target_metric", "control_metric"])
            for r in self.rows:
                ctrl = "" if r.control_metric is None else repr(r.control_metric)
                w.writerow([repr(c) for c in r.coeffs] + [repr(r.target_metric), ctrl])

    def row_for(self, coeffs: Sequence[float]) -> SweepRow:
        key = tuple(float(c) for c in coeffs)
        for r in self.rows:
            if r.coeffs == key:
                return r
        raise KeyError(key)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("TASKVEC_THREADS", "1")))
    except ValueError:
        return 1


def _run(points: Sequence[tuple[float, ...]], build: Callable[[tuple[float, ...]], Checkpoint],
         evaluator: Evaluator, axes: tuple[str, ...]) -> SweepResult:
    def one(coeffs):
        try:
            m = evaluator(build(coeffs))
        except Exception as exc:
            raise SweepError(coeffs, exc) from exc
        if not isinstance(m, Metrics):
            m = Metrics(*m) if isinstance(m, tuple) else Metrics(float(m))
        return SweepRow(coeffs, float(m.target), None if m.control is None else float(m.control))

    n = _workers()
    if n == 1:
        rows = [one(c) for c in points]
    else:
        with ThreadPoolExecutor(n) as pool:
            rows = list(pool.map(one, points))
    return SweepResult(rows, axes)


def sweep(base: Checkpoint, expr: Expr | TaskVector, grid: CoeffGrid, evaluator: Evaluator) -> SweepResult:
    """Evaluate ``apply(base, expr, λ)`` for every λ in ``grid``, in grid order."""
    tau = Leaf(eval_expr(as_expr(expr)))
    return _run([(lam,) for lam in grid], lambda c: apply(base, tau, c[0]), evaluator, ("lambda",))


def _linear_combo(base: Checkpoint, vectors: Sequence[TaskVector], signs: Sequence[float]):
    for v in vectors:
        validate_compat(base.weights, v.delta)
    base64 = {k: a.astype(np.float64) for k, a in base.weights.items()}
    vecs64 = [{k: a.astype(np.float64) for k, a in v.delta.items()} for v in vectors]

    def build(coeffs: tuple[float, ...]) -> Checkpoint:
        out = {}
        for k, a in base64.items():
            acc = a.copy()
            for c, s, v in zip(coeffs, signs, vecs64):
                if c:
                    acc += (s * c) * v[k]
            out[k] = acc.astype(np.float32)
        return Checkpoint(TensorMap._trusted(out), base.meta)

    return build


def sweep_two(base: Checkpoint, supervised: TaskVector, target_unsup: TaskVector, aux_unsup: TaskVector,
              grid_sup: CoeffGrid, grid_unsup: CoeffGrid, evaluator: Evaluator) -> SweepResult:
    """Sweep ``θ + λ_sup τ_sup + λ_unsup (τ_target_unsup - τ_aux_unsup)`` over the full grid."""
    build3 = _linear_combo(base, [supervised, target_unsup, aux_unsup], [1.0, 1.0, -1.0])
    points = list(itertools.product(grid_sup, grid_unsup))
    return _run(points, lambda c: build3((c[0], c[1], c[1])), evaluator, ("lambda_sup", "lambda_unsup"))


def sweep_three(base: Checkpoint, ta: TaskVector, tb: TaskVector, tc: TaskVector,
                grid: CoeffGrid = COARSE_GRID, evaluator: Evaluator | None = None) -> SweepResult:
    """Sweep ``θ + λ_C τ_C + λ_B τ_B - λ_A τ_A`` with independent coefficients."""
    if evaluator is None:
        raise ValueError("sweep_three needs an evaluator")
    build = _linear_combo(base, [ta, tb, tc], [-1.0, 1.0, 1.0])
    points = list(itertools.product(grid, grid, grid))
    return _run(points, build, evaluator, ("lambda_a", "lambda_b", "lambda_c"))


@dataclass(frozen=True)
class NegationChoice:
    coeff: float
    warning: bool
    row: SweepRow | None

    def __float__(self) -> float:
        return self.coeff


def select_negation(sw: SweepResult, pretrained_control: float, keep: float = 0.95) -> NegationChoice:
    """Largest λ whose control metric keeps ``keep`` x the pre-trained control.

    Falls back to λ = 0 with ``warning=True`` when no row qualifies.
    """
    if any(r.control_metric is None for r in sw.rows):
        raise ValueError("negation selection needs control metrics on every row")
    ok = [r for r in sw.rows if r.control_metric >= keep * pretrained_control]
    if not ok:
        log.warning("no coefficient keeps %.0f%% of control accuracy; falling back to 0", keep * 100)
        return NegationChoice(0.0, True, None)
    best = max(ok, key=lambda r: r.coeffs)
    return NegationChoice(best.coeffs[0], False, best)


def select_best_row(sw: SweepResult) -> SweepRow:
    if not sw.rows:
        raise ValueError("empty sweep")
    top = max(r.target_metric for r in sw.rows)
    return min((r for r in sw.rows if r.target_metric == top), key=lambda r: r.coeffs)


def select_max(sw: SweepResult) -> float | tuple[float, ...]:
    """Coefficient(s) with the best target metric; ties go to the smallest (lexicographic) tuple."""
    coeffs = select_best_row(sw).coeffs
    return coeffs[0] if len(coeffs) == 1 else coeffs


def grid_from(values: Iterable[float]) -> CoeffGrid:
    return CoeffGrid(tuple(values))
