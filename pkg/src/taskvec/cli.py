"""``taskvec`` command-line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 training error,
4 compatibility error, 5 experiment error.
"""

from __future__ import annotations

import argparse
import inspect
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import tasks as T
from .arith import (
    Leaf,
    Neg,
    Scaled,
    Sum,
    analogy,
    apply,
    describe,
    diff,
    load_task_vector,
    negate,
    random_matched,
    save_task_vector,
    sum_vectors,
)
from .coeff import Metrics, sweep
from .config import ConfigError, RunConfig, parse_grid, resolve_task
from .lab import experiments as E
from .lab.metrics import accuracy
from .lab.report import EvalReport
from .lab.zoo import LabConfig, Zoo
from .mininet import ArchMismatchError, fine_tune, init_model, write_run
from .store import CompatibilityError, NonFiniteError, TvkpFormatError, load_checkpoint, save_checkpoint

log = logging.getLogger("taskvec")

EXIT_OK, EXIT_CONFIG, EXIT_TRAIN, EXIT_COMPAT, EXIT_EXPERIMENT = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


RUNNERS: dict[str, Callable[..., EvalReport]] = {
    "forget": E.run_forgetting,
    "add": E.run_addition,
    "analogy": E.run_analogy_grid,
    "domain": E.run_domain_generalization,
    "cosim": E.run_cosine,
    "trajectory": E.run_trajectory,
    "ensemble": E.run_ensemble_study,
    "lr-seed": E.run_lr_seed_study,
}


# --- helpers ---------------------------------------------------------------------


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "grid", None) is not None:
        cfg.grid = parse_grid(args.grid)
    return cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    out = args.out or cfg.output_dir
    if not out:
        raise ConfigError("no output directory: pass --out or set output_dir")
    return Path(out)


def _read(loader, path: str):
    try:
        return loader(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"no such file: {path}") from exc
    except (TvkpFormatError, NonFiniteError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except CompatibilityError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _ckpt(path: str):
    return _read(load_checkpoint, path)


def _vec(path: str):
    return _read(load_task_vector, path)


def lab_config(cfg: RunConfig) -> LabConfig:
    if cfg.arch.num_classes != T.HEAD_WIDTH or cfg.arch.input_dim != T.DEFAULT_DIM:
        raise ConfigError(
            f"experiments need arch.num_classes = {T.HEAD_WIDTH} and arch.input_dim = {T.DEFAULT_DIM}"
        )
    base = LabConfig()
    return LabConfig(
        arch=cfg.arch,
        pretrain=cfg.experiment.pretrain or base.pretrain,
        finetune=cfg.train,
        unsup=replace(cfg.train, objective="reconstruction"),
        init_seed=cfg.experiment.init_seed,
        data_seed=cfg.experiment.data_seed,
    )


def parse_expr(obj: Any, root: Path):
    """Build an expression tree from the JSON syntax; leaf paths are relative to ``root``."""
    if not isinstance(obj, dict) or len(obj) != 1:
        raise ConfigError(f"expression node must be a one-key object, got {obj!r}")
    (kind, arg), = obj.items()
    if kind == "leaf":
        return Leaf(_vec(str(root / arg)))
    if kind == "neg":
        return Neg(parse_expr(arg, root))
    if kind == "sum":
        if not isinstance(arg, list) or not arg:
            raise ConfigError("'sum' needs a non-empty list")
        return Sum([parse_expr(a, root) for a in arg])
    if kind == "scaled":
        if not isinstance(arg, list) or len(arg) != 2 or not isinstance(arg[0], (int, float)):
            raise ConfigError("'scaled' needs [coefficient, expression]")
        return Scaled(float(arg[0]), parse_expr(arg[1], root))
    raise ConfigError(f"unknown expression node {kind!r}")


def _build_expr(inputs: Sequence[str], lambdas: Sequence[float]):
    """Returns (expr, coeff). Several lambdas scale the top-level terms independently."""
    if len(inputs) == 1 and inputs[0].endswith(".json"):
        path = Path(inputs[0])
        try:
            obj = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"no such file: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        expr = parse_expr(obj, path.parent)
        terms = expr.children if isinstance(expr, Sum) else [expr]
    else:
        terms = [Leaf(_vec(p)) for p in inputs]
        expr = terms[0] if len(terms) == 1 else Sum(terms)
    if len(lambdas) <= 1:
        return expr, (lambdas[0] if lambdas else 1.0)
    if len(lambdas) != len(terms):
        raise ConfigError(f"{len(lambdas)} --lambda values for {len(terms)} top-level terms")
    return Sum([Scaled(lam, t) for lam, t in zip(lambdas, terms)]), 1.0


def _single_task(cfg: RunConfig, name: str | None):
    entry = name if name is not None else (cfg.tasks[0] if cfg.tasks else None)
    if entry is None:
        raise ConfigError("no task: pass --task or list one under 'tasks'")
    spec = resolve_task(entry) if isinstance(entry, str) else entry
    if isinstance(spec, str):
        raise ConfigError(f"{spec!r} names a whole suite; pick a single task")
    return spec


# --- commands ----------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    spec = _single_task(cfg, args.task)
    data = T.make_task(spec)
    if int(T.class_slots(spec.content_id, spec.num_classes).max()) >= cfg.arch.num_classes:
        raise ConfigError(f"arch.num_classes = {cfg.arch.num_classes} is too small for task {spec.task_id}")
    if spec.dim != cfg.arch.input_dim:
        raise ConfigError(f"task dim {spec.dim} does not match arch.input_dim {cfg.arch.input_dim}")
    if args.start == "pretrained":
        start = Zoo(lab_config(cfg)).pretrained()
    elif args.start == "init":
        start = init_model(cfg.arch, cfg.experiment.init_seed)
    else:
        start = _ckpt(args.start)
    try:
        with np.errstate(all="ignore"):
            result = fine_tune(start, cfg.arch, data, cfg.train, model_id=spec.task_id)
        result.final.weights.check_finite()
    except ArchMismatchError as exc:
        raise CliError(EXIT_COMPAT, str(exc)) from exc
    except (ValueError, FloatingPointError) as exc:
        raise CliError(EXIT_TRAIN, f"training failed: {exc}") from exc
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(start, out / "start.tvkp")
    manifest = write_run(result, out, spec.task_id, cfg.arch, cfg.train,
                         extra={"task": spec.to_json(), "start_hash": start.hash, "start": args.start})
    cfg.tasks = [spec]
    cfg.write_resolved(out)
    print(f"final {out / 'final.tvkp'} hash={manifest['outputs']['final.tvkp']} loss={manifest['final_loss']:.6g}")
    return EXIT_OK


def cmd_vector(args) -> int:
    out = Path(args.out)
    op = args.op
    if op == "diff":
        ft, pre = _ckpt(args.inputs[0]), _ckpt(args.inputs[1])
        t = diff(ft, pre, task_id=args.task_id)
    elif op == "negate":
        t = negate(_vec(args.inputs[0]))
    elif op == "add":
        t = sum_vectors([_vec(p) for p in args.inputs])
    elif op == "analogy":
        ta, tb, tc = (_vec(p) for p in args.inputs)
        t = analogy(ta, tb, tc)
    else:
        t = random_matched(_vec(args.inputs[0]), args.seed if args.seed is not None else 0)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_task_vector(t, out)
    print(f"wrote {out} kind={t.provenance.kind} task={t.provenance.task_id} norm={t.norm():.6g}")
    return EXIT_OK


_VECTOR_ARITY = {"diff": (2, 2), "negate": (1, 1), "add": (1, None), "analogy": (3, 3), "random": (1, 1)}


def cmd_apply(args) -> int:
    base = _ckpt(args.base)
    expr, coeff = _build_expr(args.inputs, args.lambdas or [])
    try:
        edited = apply(base, expr, coeff)
    except NonFiniteError as exc:
        raise ConfigError(f"edited weights are not finite: {exc}") from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(edited, out)
    m = edited.meta
    print(f"wrote {out} model_id={m.model_id} parent_hash={m.parent_hash} hash={edited.hash} note={m.note!r}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    grid = cfg.grid or parse_grid("0:1:0.05")
    base = _ckpt(args.base)
    expr, coeff = _build_expr(args.inputs, [])
    data = T.make_task(_single_task(cfg, args.task))
    control = T.make_control(cfg.experiment.data_seed) if args.control else None

    def ev(ck):
        return Metrics(accuracy(ck, cfg.arch, data, "val"),
                       None if control is None else accuracy(ck, cfg.arch, control, "val"))

    try:
        result = sweep(base, expr, grid, ev)
    except ArchMismatchError as exc:
        raise CliError(EXIT_COMPAT, str(exc)) from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result.to_csv(out)
    print(f"wrote {out} ({len(result.rows)} rows) expr={describe(expr)}")
    return EXIT_OK


def experiment_kwargs(name: str, cfg: RunConfig) -> dict[str, Any]:
    runner = RUNNERS[name]
    sig = inspect.signature(runner)
    allowed = [p for p in sig.parameters if p != "zoo"]
    params = dict(cfg.experiment.params)
    unknown = sorted(set(params) - set(allowed))
    if unknown:
        raise ConfigError(f"experiment {name}: unknown parameter(s) {', '.join(unknown)}; "
                          f"accepted: {', '.join(allowed)}")
    for key in ("grid", "grid_sup", "grid_unsup"):
        if key in params:
            params[key] = parse_grid(params[key])
        elif key in allowed and cfg.grid is not None:
            params[key] = cfg.grid
    for key in ("pairs", "subsets"):
        if params.get(key) is not None:
            params[key] = [tuple(p) for p in params[key]]
    return params


def cmd_experiment(args) -> int:
    cfg = _load_config(args)
    name = args.name or cfg.experiment.name
    if name not in RUNNERS:
        raise ConfigError(f"unknown experiment {name!r}; valid names: {', '.join(RUNNERS)}")
    cfg.experiment.name = name
    out = _out_dir(args, cfg)
    kwargs = experiment_kwargs(name, cfg)
    lab = lab_config(cfg)
    stage = "pretrain"
    try:
        zoo = Zoo(lab)
        zoo.pretrained()
        stage = "run"
        report = RUNNERS[name](zoo, **kwargs)
        stage = "write"
        paths = report.write(out)
        cfg.write_resolved(out)
    except Exception as exc:
        log.debug("experiment failure", exc_info=True)
        raise CliError(EXIT_EXPERIMENT, f"experiment {name} failed at stage {stage}: "
                                        f"{type(exc).__name__}: {exc}") from exc
    print(f"{name}: wrote {paths['json']}")
    print(json.dumps(report.summary, sort_keys=True, default=str))
    return EXIT_OK


def cmd_plot_data(args) -> int:
    path = Path(args.report)
    try:
        report = EvalReport.load(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"no such file: {path}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: not a report ({exc})") from exc
    out = Path(args.out) if args.out else path.with_name(f"{report.experiment_id}.plot.csv")
    report.write_plot_data(out)
    print(f"wrote {out} ({len(report.plot_triples())} points)")
    return EXIT_OK


# --- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="taskvec", description="Task-vector arithmetic on small MLPs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, grid=False):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--out", help="output directory or file")
        if seed:
            sp.add_argument("--seed", type=int, help="override train.seed")
        if grid:
            sp.add_argument("--grid", help='coefficient grid "a:b:step" or comma list')

    sp = sub.add_parser("train", help="fine-tune a checkpoint on one task")
    common(sp)
    sp.add_argument("--task", help="task preset (e.g. task3, grid.c9.s1); default: first config task")
    sp.add_argument("--start", default="pretrained", help="'pretrained', 'init' or a .tvkp path")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("vector", help="task-vector algebra on files")
    sp.add_argument("op", choices=sorted(_VECTOR_ARITY))
    sp.add_argument("inputs", nargs="+", help="checkpoints (diff: FT PRE) or task-vector files")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, help="seed for 'random'")
    sp.add_argument("--task-id", help="task id recorded by 'diff'")
    sp.set_defaults(func=cmd_vector)

    sp = sub.add_parser("apply", help="add a scaled task vector or expression to a checkpoint")
    sp.add_argument("base")
    sp.add_argument("inputs", nargs="+", help="task-vector files or one .json expression")
    sp.add_argument("--lambda", dest="lambdas", type=float, action="append",
                    help="scaling coefficient; repeat once per top-level term")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_apply)

    sp = sub.add_parser("sweep", help="validation accuracy over a coefficient grid")
    common(sp, seed=False, grid=True)
    sp.add_argument("base")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--task")
    sp.add_argument("--control", action="store_true", help="also report control accuracy")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("experiment", help="run a named experiment suite")
    sp.add_argument("name", nargs="?", help=f"one of {', '.join(RUNNERS)}")
    common(sp, grid=True)
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("plot-data", help="export plot data from a report JSON")
    sp.add_argument("report")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_plot_data)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "vector":
        lo, hi = _VECTOR_ARITY[args.op]
        n = len(args.inputs)
        if n < lo or (hi is not None and n > hi):
            parser.error(f"vector {args.op} takes {lo if lo == hi else f'at least {lo}'} input file(s), got {n}")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"taskvec: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CompatibilityError as exc:
        print(f"taskvec: incompatible inputs: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except CliError as exc:
        print(f"taskvec: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
