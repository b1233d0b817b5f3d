"""Run metrics and their fixed JSON layout."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import jsonschema

_NUM = {"type": "number"}
_STEP_FIELDS = ("e2e_s", "rollout_s", "train_s", "other_s", "tokens", "throughput_tps")
_PAIR = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}

REPORT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["mode", "steps", "queue_traces", "utilization", "version_ledger"],
    "properties": {
        "mode": {"enum": ["colocated-sync", "disagg-sync", "one-step-async", "micro-batch-async"]},
        "steps": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": list(_STEP_FIELDS),
                "properties": {**{k: _NUM for k in _STEP_FIELDS}, "tokens": {"type": "integer", "minimum": 0}},
            },
        },
        "queue_traces": {"type": "object", "additionalProperties": {"type": "array", "items": _PAIR}},
        "utilization": {"type": "array", "items": _PAIR},
        "version_ledger": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["agent", "version", "update_time", "sync_time"],
                "properties": {
                    "agent": {"type": "string"},
                    "version": {"type": "integer", "minimum": 1},
                    "update_time": _NUM,
                    "sync_time": {"type": ["number", "null"]},
                },
            },
        },
    },
}


@dataclass
class StepMetrics:
    e2e_s: float
    rollout_s: float
    train_s: float
    other_s: float
    tokens: int
    throughput_tps: float

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in _STEP_FIELDS}


@dataclass
class MetricsReport:
    mode: str
    steps: list[StepMetrics] = field(default_factory=list)
    queue_traces: dict[str, list[tuple[float, int]]] = field(default_factory=dict)
    utilization: list[tuple[float, float]] = field(default_factory=list)
    version_ledger: list[dict] = field(default_factory=list)

    @property
    def total_e2e(self) -> float:
        return sum(s.e2e_s for s in self.steps)

    @property
    def total_tokens(self) -> int:
        return sum(s.tokens for s in self.steps)

    @property
    def throughput(self) -> float:
        e2e = self.total_e2e
        return self.total_tokens / e2e if e2e > 0 else 0.0

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "steps": [s.to_dict() for s in self.steps],
            "queue_traces": {a: [[t, n] for t, n in tr] for a, tr in self.queue_traces.items()},
            "utilization": [[t, u] for t, u in self.utilization],
            "version_ledger": [dict(e) for e in self.version_ledger],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def queue_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["agent", "t", "queue_len"])
        for agent, trace in self.queue_traces.items():
            for t, n in trace:
                w.writerow([agent, repr(float(t)), n])
        return buf.getvalue()

    def utilization_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "utilization"])
        for t, u in self.utilization:
            w.writerow([repr(float(t)), repr(float(u))])
        return buf.getvalue()


def validate_report(data: dict) -> None:
    """Raise jsonschema.ValidationError unless ``data`` has exactly the report layout."""
    jsonschema.validate(data, REPORT_SCHEMA)


SUMMARY_HEADER = ("mode", "e2e_s", "speedup_vs_colocated", "throughput_tps")


def summary_csv(reports: list[MetricsReport]) -> str:
    base = next((r.total_e2e for r in reports if r.mode == "colocated-sync"), None)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for r in reports:
        speedup = base / r.total_e2e if base is not None and r.total_e2e > 0 else float("nan")
        w.writerow([r.mode, f"{r.total_e2e:.6f}", f"{speedup:.6f}", f"{r.throughput:.6f}"])
    return buf.getvalue()
