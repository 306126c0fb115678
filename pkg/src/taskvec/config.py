"""Strict JSON run configuration shared by the command-line entry point.

A config document has at most these top-level sections::

    {"arch": {...MlpSpec fields...},
     "train": {...TrainConfig fields...},
     "tasks": ["task3", "grid.c9.s1", {...SyntheticTaskSpec fields...}],
     "grid": "0:1:0.05",
     "experiment": {"name": "forget", "params": {...}, "pretrain": {...},
                    "init_seed": 0, "data_seed": 0},
     "output_dir": "runs/forget"}

Unknown keys anywhere are an error.
"""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from . import tasks as T
from .coeff import CoeffGrid
from .mininet import MlpSpec, TrainConfig


class ConfigError(ValueError):
    pass


SECTIONS = ("arch", "train", "tasks", "grid", "experiment", "output_dir")
EXPERIMENT_KEYS = ("name", "params", "pretrain", "init_seed", "data_seed")


def _strict(cls, obj: Any, where: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        if cls is T.SyntheticTaskSpec:
            return T.SyntheticTaskSpec.from_json(obj)
        return cls(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_GRID_CELL = re.compile(r"grid\.c(\d+)\.s(\d+)$")


def resolve_task(entry: Any, seed: int = 0) -> T.SyntheticTaskSpec | str:
    """Turn a preset name or an explicit spec object into a task spec.

    Presets: ``control``, ``task<c>`` (bank content c), ``grid.c<c>.s<s>``,
    ``domain.aux`` and ``domain.target``. Names ``bank`` / ``grid`` / ``domain``
    expand to whole suites and are returned unchanged.
    """
    if isinstance(entry, dict):
        return _strict(T.SyntheticTaskSpec, entry, "tasks[]")
    if not isinstance(entry, str):
        raise ConfigError(f"task entry must be a name or an object, got {entry!r}")
    if entry in ("bank", "grid", "domain"):
        return entry
    if entry == "control":
        return T.control_spec(seed)
    if entry.startswith("task") and entry[4:].isdigit():
        c = int(entry[4:])
        if c not in T.BANK_CONTENTS:
            raise ConfigError(f"unknown bank task {entry!r}")
        return T.SyntheticTaskSpec(task_id=entry, content_id=c, seed=seed)
    m = _GRID_CELL.match(entry)
    if m:
        return T.SyntheticTaskSpec(task_id=entry, content_id=int(m[1]), style_id=int(m[2]), seed=seed)
    if entry in ("domain.aux", "domain.target"):
        style = T.DOMAIN_STYLES[0 if entry == "domain.aux" else 1]
        return T.SyntheticTaskSpec(task_id=entry, content_id=T.DOMAIN_CONTENT, style_id=style, seed=seed)
    raise ConfigError(f"unknown task preset {entry!r}")


@dataclass
class ExperimentSection:
    name: str | None = None
    params: dict[str, Any] = field(default_factory=dict)
    pretrain: TrainConfig | None = None
    init_seed: int = 0
    data_seed: int = 0

    def to_json(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "params": self.params,
            "pretrain": None if self.pretrain is None else self.pretrain.to_json(),
            "init_seed": self.init_seed,
            "data_seed": self.data_seed,
        }


@dataclass
class RunConfig:
    arch: MlpSpec = field(default_factory=lambda: MlpSpec(num_classes=T.HEAD_WIDTH, recon_dim=T.DEFAULT_DIM))
    train: TrainConfig = field(default_factory=TrainConfig)
    tasks: list[Any] = field(default_factory=list)
    grid: CoeffGrid | None = None
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    output_dir: str | None = None

    @classmethod
    def from_dict(cls, obj: Any) -> "RunConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config root must be a JSON object")
        unknown = sorted(set(obj) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown section(s) {', '.join(unknown)}")
        cfg = cls()
        if "arch" in obj:
            cfg.arch = _strict(MlpSpec, obj["arch"], "arch")
        if "train" in obj:
            cfg.train = _strict(TrainConfig, obj["train"], "train")
        if "tasks" in obj:
            if not isinstance(obj["tasks"], list):
                raise ConfigError("tasks: expected a list")
            cfg.tasks = [resolve_task(t) for t in obj["tasks"]]
        if obj.get("grid") is not None:
            cfg.grid = parse_grid(obj["grid"])
        if "experiment" in obj:
            ex = obj["experiment"]
            if not isinstance(ex, dict):
                raise ConfigError("experiment: expected an object")
            unknown = sorted(set(ex) - set(EXPERIMENT_KEYS))
            if unknown:
                raise ConfigError(f"experiment: unknown key(s) {', '.join(unknown)}")
            params = ex.get("params", {})
            if not isinstance(params, dict):
                raise ConfigError("experiment.params: expected an object")
            pre = ex.get("pretrain")
            cfg.experiment = ExperimentSection(
                name=ex.get("name"),
                params=dict(params),
                pretrain=None if pre is None else _strict(TrainConfig, pre, "experiment.pretrain"),
                init_seed=_uint(ex.get("init_seed", 0), "experiment.init_seed"),
                data_seed=_uint(ex.get("data_seed", 0), "experiment.data_seed"),
            )
        if obj.get("output_dir") is not None:
            if not isinstance(obj["output_dir"], str):
                raise ConfigError("output_dir: expected a string")
            cfg.output_dir = obj["output_dir"]
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc.strerror or exc}") from exc
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
        return cls.from_dict(obj)

    def to_json(self) -> dict[str, Any]:
        return {
            "arch": self.arch.to_json(),
            "train": self.train.to_json(),
            "tasks": [t if isinstance(t, str) else t.to_json() for t in self.tasks],
            "grid": None if self.grid is None else list(self.grid.values),
            "experiment": self.experiment.to_json(),
            "output_dir": self.output_dir,
        }

    def write_resolved(self, out_dir: str | Path, name: str = "config.resolved.json") -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / name
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        return path

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, train=replace(self.train, seed=seed))


def _uint(v: Any, where: str) -> int:
    if not isinstance(v, int) or isinstance(v, bool) or v < 0:
        raise ConfigError(f"{where}: expected a non-negative integer")
    return v


def parse_grid(v: Any) -> CoeffGrid:
    try:
        if isinstance(v, str):
            return CoeffGrid.parse(v)
        if isinstance(v, list):
            return CoeffGrid(tuple(float(x) for x in v))
    except ValueError as exc:
        raise ConfigError(f"grid: {exc}") from exc
    raise ConfigError("grid: expected \"a:b:step\" or a list of numbers")
