from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any


@dataclass
class ReportRow:
    edit: str
    accuracy: dict[str, float] = field(default_factory=dict)
    normalized: dict[str, float] = field(default_factory=dict)
    coeffs: list[float] = field(default_factory=list)
    baselines: dict[str, float] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)


@dataclass
class EvalReport:
    experiment_id: str
    rows: list[ReportRow]
    config_digest: str
    seeds: list[int]
    references: list[ReportRow] = field(default_factory=list)
    summary: dict[str, Any] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    # figure name -> list of (x, y, series)
    plots: dict[str, list[tuple[float, float, str]]] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EvalReport":
        d = dict(d)
        d["rows"] = [ReportRow(**r) for r in d["rows"]]
        d["references"] = [ReportRow(**r) for r in d.get("references", [])]
        d["plots"] = {k: [tuple(p) for p in v] for k, v in d.get("plots", {}).items()}
        return cls(**d)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_jsonable))

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def flat_rows(self) -> list[dict[str, Any]]:
        out = []
        for section, rows in (("row", self.rows), ("reference", self.references)):
            for r in rows:
                flat: dict[str, Any] = {"section": section, "edit": r.edit,
                                        "coeffs": " ".join(f"{c:g}" for c in r.coeffs)}
                flat.update({f"acc:{k}": v for k, v in r.accuracy.items()})
                flat.update({f"norm:{k}": v for k, v in r.normalized.items()})
                flat.update({f"base:{k}": v for k, v in r.baselines.items()})
                flat.update({f"x:{k}": v for k, v in r.extra.items() if not isinstance(v, (dict, list))})
                out.append(flat)
        return out

    def to_csv(self, path: str | Path) -> None:
        rows = self.flat_rows()
        cols: list[str] = []
        for r in rows:
            cols.extend(k for k in r if k not in cols)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            w.writerows(rows)

    def plot_triples(self) -> list[tuple[str, float, float, str]]:
        return [(fig, x, y, s) for fig, pts in sorted(self.plots.items()) for x, y, s in pts]

    def write_plot_data(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["figure", "x", "y", "series"])
            for row in self.plot_triples():
                w.writerow(row)

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "json": out / f"{self.experiment_id}.report.json",
            "csv": out / f"{self.experiment_id}.report.csv",
            "plot": out / f"{self.experiment_id}.plot.csv",
        }
        self.to_json(paths["json"])
        self.to_csv(paths["csv"])
        self.write_plot_data(paths["plot"])
        return paths


def _jsonable(o):
    if hasattr(o, "item"):
        return o.item()
    if hasattr(o, "tolist"):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def config_digest(obj: Any) -> str:
    raw = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(raw.encode()).hexdigest()
