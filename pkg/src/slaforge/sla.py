"""SLO threshold rules and the aggregate SLA state.

A rule is breached at a timestamp when, on at least one VNFC, every one of its
SLI expressions is breached at that same VNFC. The SLA is breached when any
rule is. Each expression's ``op`` names the breach condition, so
``cpu.idle_perc < 10`` reads "breached when idle drops below 10".
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .errors import BadConfig, MissingMetric
from .telemetry import METRIC_INDEX, N_METRICS, TelemetryTable

COMPARATORS = ("<", "<=", ">", ">=", "outside")


@dataclass(frozen=True)
class SliExpr:
    metrics: tuple[str, ...]  # summed to form the indicator
    op: str
    threshold: float | tuple[float, float]

    def __post_init__(self):
        if self.op not in COMPARATORS:
            raise BadConfig(f"unknown comparator {self.op!r}")
        if not self.metrics:
            raise BadConfig("SLI needs at least one metric")
        if self.op == "outside":
            lo, hi = self.threshold
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo >= hi:
                raise BadConfig(f"'outside' bounds must be finite with lo < hi, got {self.threshold}")
        elif not math.isfinite(self.threshold):
            raise BadConfig(f"threshold must be finite, got {self.threshold}")

    @property
    def label(self) -> str:
        return " + ".join(self.metrics)

    def breached(self, sli: np.ndarray) -> np.ndarray:
        th = self.threshold
        if self.op == "<":
            return sli < th
        if self.op == "<=":
            return sli <= th
        if self.op == ">":
            return sli > th
        if self.op == ">=":
            return sli >= th
        lo, hi = th
        return (sli < lo) | (sli > hi)

    def to_dict(self) -> dict[str, Any]:
        th = list(self.threshold) if self.op == "outside" else self.threshold
        return {"metric": self.label, "op": self.op, "threshold": th}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SliExpr":
        extra = set(d) - {"metric", "op", "threshold"}
        if extra:
            raise BadConfig(f"unknown SLI keys {sorted(extra)}")
        try:
            metrics = tuple(m.strip() for m in str(d["metric"]).split("+"))
            op = d["op"]
            th = d["threshold"]
        except KeyError as exc:
            raise BadConfig(f"SLI missing key {exc}") from None
        for m in metrics:
            if m not in METRIC_INDEX:
                raise BadConfig(f"unknown metric {m!r} in SLI")
        th = (float(th[0]), float(th[1])) if op == "outside" else float(th)
        return cls(metrics, op, th)


@dataclass(frozen=True)
class SloRule:
    id: str
    exprs: tuple[SliExpr, ...]

    def __post_init__(self):
        if len(self.exprs) < 2:
            raise BadConfig(f"SLO {self.id!r} must combine at least two SLIs")

    def metrics(self) -> set[str]:
        return {m for e in self.exprs for m in e.metrics}

    def violations(self, cube: np.ndarray) -> np.ndarray:
        """Boolean per row of a ``T x nodes x metrics`` raw-space cube."""
        cube = np.asarray(cube)
        if cube.ndim == 2:
            cube = cube[None]
        if cube.shape[-1] != N_METRICS:
            raise MissingMetric(f"cube has {cube.shape[-1]} metric columns, expected {N_METRICS}")
        at_node = np.ones(cube.shape[:2], dtype=bool)
        for e in self.exprs:
            sli = sum(cube[..., METRIC_INDEX[m]] for m in e.metrics)
            at_node &= e.breached(sli)
        return at_node.any(axis=1)

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "exprs": [e.to_dict() for e in self.exprs]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SloRule":
        extra = set(d) - {"id", "exprs"}
        if extra:
            raise BadConfig(f"unknown SLO keys {sorted(extra)}")
        if "id" not in d or "exprs" not in d:
            raise BadConfig("SLO rule needs 'id' and 'exprs'")
        return cls(str(d["id"]), tuple(SliExpr.from_dict(e) for e in d["exprs"]))


def _expr(metric: str, op: str, threshold: float) -> SliExpr:
    return SliExpr(tuple(m.strip() for m in metric.split("+")), op, threshold)


# Illustrative defaults; the concrete thresholds behind the original SLOs are not published here.
DEFAULT_RULES: tuple[SloRule, ...] = (
    SloRule("load", (_expr("load.avg_1_min", ">", 1.5), _expr("load.avg_5_min", ">", 1.0))),
    SloRule("computation", (_expr("cpu.idle_perc", "<", 10.0), _expr("load.avg_1_min", ">", 1.5))),
    SloRule("disk", (_expr("disk.space_used_perc", ">", 90.0), _expr("disk.inode_used_perc", ">", 80.0))),
    SloRule(
        "io",
        (_expr("io.read_time_sec + io.write_time_sec", ">", 1.0), _expr("io.write_req_sec", ">", 100.0)),
    ),
)


def rules_to_yaml(rules: Sequence[SloRule]) -> str:
    return yaml.safe_dump({"slo_rules": [r.to_dict() for r in rules]}, sort_keys=False)


def rules_from_yaml(text: str) -> tuple[SloRule, ...]:
    data = yaml.safe_load(text)
    if isinstance(data, Mapping):
        data = data.get("slo_rules")
    if not isinstance(data, list) or not data:
        raise BadConfig("expected a non-empty 'slo_rules' list")
    rules = tuple(SloRule.from_dict(d) for d in data)
    ids = [r.id for r in rules]
    if len(set(ids)) != len(ids):
        raise BadConfig(f"duplicate SLO ids in {ids}")
    return rules


def load_rules(path: str | Path) -> tuple[SloRule, ...]:
    return rules_from_yaml(Path(path).read_text())


@dataclass(frozen=True)
class SlaState:
    slo_states: tuple[bool, ...]
    sla: bool

    def __post_init__(self):
        if self.sla != any(self.slo_states):
            raise ValueError("sla must equal OR(slo_states)")


def _frame_cube(frame, rules: Sequence[SloRule], node_names: Sequence[str] | None) -> np.ndarray:
    if isinstance(frame, Mapping):
        if node_names is None:
            node_names = sorted({k.split(".", 1)[0] for k in frame})
        cube = np.full((len(node_names), N_METRICS), np.nan)
        needed = set().union(*(r.metrics() for r in rules))
        for i, node in enumerate(node_names):
            for metric in needed:
                key = f"{node}.{metric}"
                if key not in frame:
                    raise MissingMetric(f"frame lacks {key}")
                cube[i, METRIC_INDEX[metric]] = frame[key]
        return cube
    cube = np.asarray(frame, dtype=float)
    if cube.ndim == 1:
        if cube.size % N_METRICS:
            raise MissingMetric(f"flat frame of length {cube.size} is not nodes x {N_METRICS}")
        cube = cube.reshape(-1, N_METRICS)
    if cube.ndim != 2 or cube.shape[1] != N_METRICS:
        raise MissingMetric(f"frame shape {cube.shape} does not cover the metric catalog")
    return cube


def evaluate_slo(rule: SloRule, frame, node_names: Sequence[str] | None = None) -> bool:
    """``frame`` is a ``nodes x metrics`` array, a flat row, or a ``{"<vnfc>.<metric>": value}`` mapping."""
    return bool(rule.violations(_frame_cube(frame, [rule], node_names))[0])


def evaluate_sla(rules: Sequence[SloRule], frame, node_names: Sequence[str] | None = None) -> SlaState:
    cube = _frame_cube(frame, rules, node_names)
    states = tuple(bool(r.violations(cube)[0]) for r in rules)
    return SlaState(states, any(states))


@dataclass(frozen=True)
class SlaLabels:
    """Per-timestamp SLO breach flags (``T x rules``) and their OR."""

    rule_ids: tuple[str, ...]
    slo: np.ndarray
    sla: np.ndarray

    def __len__(self) -> int:
        return len(self.sla)

    def state(self, t: int) -> SlaState:
        return SlaState(tuple(bool(v) for v in self.slo[t]), bool(self.sla[t]))

    @property
    def violation_rate(self) -> float:
        return float(self.sla.mean()) if len(self.sla) else 0.0


def label_dataset(table: TelemetryTable, rules: Sequence[SloRule] = DEFAULT_RULES) -> SlaLabels:
    """Label raw-space rows; call before any scaling so thresholds keep their units."""
    cube = table.cube
    slo = np.stack([r.violations(cube) for r in rules], axis=1) if len(table) else np.zeros((0, len(rules)), bool)
    return SlaLabels(tuple(r.id for r in rules), slo, slo.any(axis=1))
