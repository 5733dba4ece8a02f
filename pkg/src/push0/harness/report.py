"""Experiment reports: samples, summary statistics and verdicts, written as JSON + CSV."""

from __future__ import annotations

import csv
import json
import math
import platform
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable


def percentile(xs: Iterable[float], q: float) -> float:
    """Linear-interpolated percentile, ``q`` in [0, 100]."""
    data = sorted(xs)
    if not data:
        return math.nan
    if len(data) == 1:
        return data[0]
    pos = (len(data) - 1) * q / 100
    lo = math.floor(pos)
    hi = min(lo + 1, len(data) - 1)
    return data[lo] + (data[hi] - data[lo]) * (pos - lo)


def describe(xs: Iterable[float]) -> dict[str, float]:
    data = list(xs)
    if not data:
        return {"n": 0, "p50": math.nan, "p99": math.nan, "mean": math.nan, "std": math.nan,
                "min": math.nan, "max": math.nan}
    return {
        "n": len(data),
        "p50": percentile(data, 50),
        "p99": percentile(data, 99),
        "mean": statistics.fmean(data),
        "std": statistics.stdev(data) if len(data) > 1 else 0.0,
        "min": min(data),
        "max": max(data),
    }


@dataclass
class ExperimentReport:
    name: str
    parameters: dict[str, Any] = field(default_factory=dict)
    samples: list[dict[str, Any]] = field(default_factory=list)
    summary: dict[str, Any] = field(default_factory=dict)
    verdicts: dict[str, bool] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    started_at: float = field(default_factory=time.time)
    duration: float = 0.0

    @property
    def passed(self) -> bool:
        return all(self.verdicts.values())

    def check(self, name: str, ok: bool) -> bool:
        self.verdicts[name] = bool(ok)
        return bool(ok)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "parameters": self.parameters,
            "summary": self.summary,
            "verdicts": self.verdicts,
            "passed": self.passed,
            "notes": self.notes,
            "samples": self.samples,
            "started_at": self.started_at,
            "duration": self.duration,
            "host": {"python": platform.python_version(), "machine": platform.machine()},
        }

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_jsonable))
        write_csv(out / "report.csv", self.samples)
        return out

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        failed = [k for k, v in self.verdicts.items() if not v]
        extra = f" failed={failed}" if failed else ""
        return f"{status} {self.name} ({self.duration:.1f}s){extra}"


def _jsonable(obj):
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    if hasattr(obj, "__dict__"):
        return obj.__dict__
    return str(obj)


def write_csv(path: str | Path, rows: list[dict[str, Any]]) -> None:
    cols: list[str] = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (json.dumps(v, default=_jsonable) if isinstance(v, (dict, list)) else v)
                        for k, v in r.items()})


def merge(name: str, reports: list[ExperimentReport]) -> ExperimentReport:
    """Combine sub-reports; sample rows are tagged with the sub-report name."""
    out = ExperimentReport(name)
    for r in reports:
        out.parameters[r.name] = r.parameters
        out.summary[r.name] = r.summary
        for k, v in r.verdicts.items():
            out.verdicts[f"{r.name}.{k}"] = v
        out.samples.extend({"experiment": r.name, **s} for s in r.samples)
        out.notes.extend(r.notes)
        out.duration += r.duration
    return out
