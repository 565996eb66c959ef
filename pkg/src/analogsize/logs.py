"""Line-per-record JSON results log and the CSV plot tables derived from it.

Each line is one JSON object:

    {"schema": 1, "kind": "train", "timestamp": "...", "payload": {...}, "timing": {...}}

``timing`` holds wall-clock quantities (``wall_ms``, ``t_sim``,
``fom_deploy``). Together with ``timestamp`` it is dropped by
``canonical_lines`` so that two runs with the same seed compare equal.
"""

from __future__ import annotations

import csv
import datetime as _dt
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

SCHEMA_VERSION = 1
KINDS = ("bo", "train", "deploy", "failure", "parasitic", "pareto")

# plot table headers
PLOT_HEADERS = {
    "reward_vs_evals.csv": ["env_evals", "mean_episode_reward"],
    "success_vs_evals.csv": ["env_evals", "success_rate"],
    "pareto_frontier.csv": ["power", "gbw"],
    "deploy_steps.csv": ["steps", "count"],
}


class LogFormatError(ConfigError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


@dataclass
class ResultRecord:
    kind: str
    payload: dict
    timing: dict = field(default_factory=dict)
    timestamp: str = ""
    schema: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown record kind {self.kind!r}")
        if not self.timestamp:
            self.timestamp = _dt.datetime.now(_dt.timezone.utc).isoformat()

    def to_line(self) -> str:
        d = dict(schema=self.schema, kind=self.kind, timestamp=self.timestamp,
                 payload=_plain(self.payload), timing=_plain(self.timing))
        return json.dumps(d, sort_keys=True, allow_nan=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ResultRecord":
        return cls(d["kind"], d["payload"], d.get("timing", {}), d["timestamp"], d["schema"])


class ResultsLog:
    """Append-only writer; a single writer per file."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, kind: str, payload: dict, **timing) -> ResultRecord:
        rec = ResultRecord(kind, payload, timing)
        with self.path.open("a", encoding="utf-8") as f:
            f.write(rec.to_line() + "\n")
        return rec

    def extend(self, kind: str, payloads) -> None:
        with self.path.open("a", encoding="utf-8") as f:
            for p in payloads:
                f.write(ResultRecord(kind, p).to_line() + "\n")


def read_log(path, strict: bool = False) -> tuple[list[ResultRecord], str | None]:
    """Parse a results log.

    A malformed line in the middle raises LogFormatError with its line
    number. A malformed *final* line without a trailing newline is taken to
    be a truncated write: the earlier records are returned together with a
    warning string (or an error when ``strict``).
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.split("\n")
    truncated_tail = not text.endswith("\n") and text != ""
    if lines and lines[-1] == "":
        lines.pop()
    out, warning = [], None
    for i, line in enumerate(lines, start=1):
        try:
            d = json.loads(line)
            if not isinstance(d, dict):
                raise ValueError("not an object")
            if d.get("schema") != SCHEMA_VERSION:
                raise ValueError(f"unsupported schema {d.get('schema')!r}")
            rec = ResultRecord.from_dict(d)
        except (ValueError, KeyError, TypeError, ConfigError) as e:
            if i == len(lines) and truncated_tail and not strict:
                warning = f"{path}:{i}: truncated final record ignored"
                break
            raise LogFormatError(path, i, str(e)) from e
        out.append(rec)
    return out, warning


def canonical_lines(path) -> list[str]:
    """Log lines without timestamp and timing, for determinism checks."""
    recs, _ = read_log(path)
    return [json.dumps(dict(schema=r.schema, kind=r.kind, payload=r.payload), sort_keys=True) for r in recs]


def emit_plot_data(log_path, out_dir) -> dict[str, Path]:
    """Write the CSV tables listed in PLOT_HEADERS.

    reward_vs_evals / success_vs_evals: one row per ``train`` record.
    pareto_frontier: one row per ``pareto`` record, sorted by power.
    deploy_steps: histogram of per-goal ``deploy`` steps; counts sum to the
    number of per-goal deploy records (the run summary record has no steps).
    """
    recs, _ = read_log(log_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = [r.payload for r in recs if r.kind == "train"]
    pareto = sorted(((r.payload["power"], r.payload["gbw"]) for r in recs if r.kind == "pareto"))
    steps = Counter(int(r.payload["steps"]) for r in recs if r.kind == "deploy" and "steps" in r.payload)
    rows = {
        "reward_vs_evals.csv": [(p["env_evals"], p["mean_episode_reward"]) for p in train],
        "success_vs_evals.csv": [(p["env_evals"], p["success_rate"]) for p in train],
        "pareto_frontier.csv": pareto,
        "deploy_steps.csv": sorted(steps.items()),
    }
    paths = {}
    for name, header in PLOT_HEADERS.items():
        p = out / name
        with p.open("w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows[name])
        paths[name] = p
    return paths
