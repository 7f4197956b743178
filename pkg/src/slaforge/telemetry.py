"""Telemetry tables: ingest, synthesis, chronological splits, quantile scaling, windows.

Column layout is node-major / metric-minor: column ``node * 21 + metric``.
Timestamps are integer epoch seconds on a 30 s grid; a jump larger than one
step marks a segment boundary and windows never straddle one.
"""
from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.signal import lfilter

from .errors import BadConfig, EmptyInput, NotFitted, TooShort, UnknownMetric, UnknownNode, UnparsableRow
from .topology import NODE_NAMES, ServiceGraph, build_default_graph

log = logging.getLogger(__name__)

STEP_SECONDS = 30
MAX_FILL = 4

METRIC_GROUPS: dict[str, tuple[str, ...]] = {
    "cpu": ("cpu.idle_perc", "cpu.system_perc", "cpu.wait_perc"),
    "disk": (
        "disk.inode_used_perc",
        "disk.space_used_perc",
        "io.read_kbytes_sec",
        "io.read_req_sec",
        "io.read_time_sec",
        "io.write_kbytes_sec",
        "io.write_req_sec",
        "io.write_time_sec",
    ),
    "load": ("load.avg_1_min", "load.avg_15_min", "load.avg_5_min"),
    "memory": ("mem.free_mb", "mem.usable_mb", "mem.usable_perc"),
    "network": ("net.in_bytes_sec", "net.in_packets_sec", "net.out_bytes_sec", "net.out_packets_sec"),
}

METRIC_SEMANTICS: dict[str, str] = {
    "cpu.idle_perc": "Percentage of time the CPU is idle when no IO requests are in progress",
    "cpu.system_perc": "Percentage of time the CPU is used at the system level",
    "cpu.wait_perc": "Percentage of time the CPU is idle AND there is at least one IO request in progress",
    "disk.inode_used_perc": "The percentage of inodes that are used on a device",
    "disk.space_used_perc": "The percentage of disk space that is being used on a device",
    "io.read_kbytes_sec": "Kbytes/sec read by an IO device",
    "io.read_req_sec": "Number of read requests/sec to an IO device",
    "io.read_time_sec": "Amount of read time in seconds to an IO device",
    "io.write_kbytes_sec": "Kbytes/sec written by an IO device",
    "io.write_req_sec": "Number of write requests/sec to an IO device",
    "io.write_time_sec": "Amount of write time in seconds to an IO device",
    "load.avg_1_min": "The normalized (by number of logical cores) average system load over a 1 minute period",
    "load.avg_15_min": "The normalized (by number of logical cores) average system load over a 15 minute period",
    "load.avg_5_min": "The normalized (by number of logical cores) average system load over a 5 minute period",
    "mem.free_mb": "Mbytes of free memory",
    "mem.usable_mb": "Total Mbytes of usable memory",
    "mem.usable_perc": "Percentage of total memory that is usable",
    "net.in_bytes_sec": "Number of network bytes received per second",
    "net.in_packets_sec": "Number of network packets received per second",
    "net.out_bytes_sec": "Number of network bytes sent per second",
    "net.out_packets_sec": "Number of network packets sent per second",
}

METRICS: tuple[str, ...] = tuple(m for group in METRIC_GROUPS.values() for m in group)
METRIC_INDEX = {m: i for i, m in enumerate(METRICS)}
N_METRICS = len(METRICS)


def column_names(node_names: Sequence[str] = NODE_NAMES) -> list[str]:
    return [f"{node}.{metric}" for node in node_names for metric in METRICS]


@dataclass(frozen=True)
class TelemetryTable:
    timestamps: np.ndarray
    values: np.ndarray
    provenance: str = "synthetic"
    node_names: tuple[str, ...] = NODE_NAMES
    ingest_warnings: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape != (len(self.timestamps), self.n_nodes * N_METRICS):
            raise ValueError(f"values shape {self.values.shape} does not match {len(self.timestamps)} x {self.n_nodes * N_METRICS}")

    @property
    def n_nodes(self) -> int:
        return len(self.node_names)

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def cube(self) -> np.ndarray:
        """``T x nodes x metrics`` view of the values."""
        return self.values.reshape(len(self), self.n_nodes, N_METRICS)

    def columns(self) -> list[str]:
        return column_names(self.node_names)

    def series(self, node: str, metric: str) -> np.ndarray:
        return self.cube[:, self.node_names.index(node), METRIC_INDEX[metric]]

    def segments(self) -> list[tuple[int, int]]:
        """Half-open row ranges with uniform 30 s spacing."""
        if len(self) == 0:
            return []
        breaks = np.flatnonzero(np.diff(self.timestamps) != STEP_SECONDS) + 1
        edges = [0, *breaks.tolist(), len(self)]
        return list(zip(edges[:-1], edges[1:]))

    def rows(self, start: int, stop: int) -> "TelemetryTable":
        return TelemetryTable(
            self.timestamps[start:stop], self.values[start:stop], self.provenance, self.node_names
        )

    def with_values(self, values: np.ndarray) -> "TelemetryTable":
        return TelemetryTable(self.timestamps, values, self.provenance, self.node_names)


def iso(ts: int) -> str:
    return datetime.fromtimestamp(int(ts), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_iso(text: str) -> int:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(round(dt.timestamp()))


# ingest -------------------------------------------------------------------


def ingest_csv(
    paths: str | Path | Iterable[str | Path],
    node_names: Sequence[str] = NODE_NAMES,
    strict_metrics: bool = False,
) -> TelemetryTable:
    """Pivot long-form ``timestamp,vnfc,metric,value`` rows onto the 30 s grid.

    Gaps of at most ``MAX_FILL`` steps are forward filled; rows still missing a
    cell are dropped, which splits the table into segments. Metrics outside the
    catalog are skipped and counted unless ``strict_metrics`` is set.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    node_index = {n: i for i, n in enumerate(node_names)}
    cells: dict[tuple[int, int], float] = {}
    counts: Counter[str] = Counter()
    for path in paths:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                continue
            if [h.strip() for h in header] != ["timestamp", "vnfc", "metric", "value"]:
                raise UnparsableRow(1, f"{path}: bad header {header!r}")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 4:
                    raise UnparsableRow(lineno, f"{path}: expected 4 fields, got {len(row)}")
                ts_text, vnfc, metric, value_text = (c.strip() for c in row)
                try:
                    ts = parse_iso(ts_text)
                except ValueError:
                    raise UnparsableRow(lineno, f"{path}: bad timestamp {ts_text!r}") from None
                try:
                    value = float(value_text)
                except ValueError:
                    raise UnparsableRow(lineno, f"{path}: bad value {value_text!r}") from None
                if not math.isfinite(value):
                    raise UnparsableRow(lineno, f"{path}: non-finite value {value_text!r}")
                if vnfc not in node_index:
                    raise UnknownNode(f"{path}:{lineno}: unknown vnfc {vnfc!r}")
                if metric not in METRIC_INDEX:
                    if strict_metrics:
                        raise UnknownMetric(f"{path}:{lineno}: unknown metric {metric!r}")
                    counts[f"ignored_metric:{metric}"] += 1
                    continue
                slot = int(round(ts / STEP_SECONDS))
                key = (slot, node_index[vnfc] * N_METRICS + METRIC_INDEX[metric])
                if key in cells:
                    counts["duplicate"] += 1
                cells[key] = value
    if not cells:
        raise EmptyInput("no telemetry rows")
    for name, n in sorted(counts.items()):
        log.warning("ingest: %s x%d", name, n)

    slots = np.fromiter((k[0] for k in cells), dtype=np.int64, count=len(cells))
    cols = np.fromiter((k[1] for k in cells), dtype=np.int64, count=len(cells))
    vals = np.fromiter(cells.values(), dtype=np.float64, count=len(cells))
    first = slots.min()
    n_rows = int(slots.max() - first + 1)
    grid = np.full((n_rows, len(node_names) * N_METRICS), np.nan)
    grid[slots - first, cols] = vals
    _fill_short_gaps(grid, MAX_FILL)
    keep = ~np.isnan(grid).any(axis=1)
    if not keep.any():
        raise EmptyInput("no timestamp has every (vnfc, metric) cell after alignment")
    timestamps = (np.arange(n_rows, dtype=np.int64) + first)[keep] * STEP_SECONDS
    return TelemetryTable(timestamps, grid[keep], "ingested", tuple(node_names), dict(counts))


def _fill_short_gaps(grid: np.ndarray, limit: int) -> None:
    """Forward fill interior NaN runs of length <= ``limit``, in place."""
    for c in range(grid.shape[1]):
        col = grid[:, c]
        missing = np.isnan(col)
        if not missing.any():
            continue
        edges = np.diff(np.concatenate(([0], missing.astype(np.int8), [0])))
        starts = np.flatnonzero(edges == 1)
        stops = np.flatnonzero(edges == -1)
        for a, b in zip(starts, stops):
            if a > 0 and b - a <= limit:
                col[a:b] = col[a - 1]


def write_wide_csv(table: TelemetryTable, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp", *table.columns()])
        for ts, row in zip(table.timestamps, table.values):
            writer.writerow([iso(ts), *(repr(float(v)) for v in row)])


def read_wide_csv(path: str | Path, provenance: str = "ingested") -> TelemetryTable:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyInput(f"{path} is empty")
        if header[0] != "timestamp" or len(header) < 1 + N_METRICS:
            raise UnparsableRow(1, f"{path}: not a wide telemetry file")
        nodes = []
        for name in header[1::N_METRICS]:
            nodes.append(name.split(".", 1)[0])
        if header[1:] != column_names(nodes):
            raise UnparsableRow(1, f"{path}: columns are not <vnfc>.<metric> in catalog order")
        ts, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise UnparsableRow(lineno, f"{path}: expected {len(header)} fields")
            try:
                ts.append(parse_iso(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise UnparsableRow(lineno, f"{path}: {exc}") from None
    if not rows:
        raise EmptyInput(f"{path} has no rows")
    return TelemetryTable(np.asarray(ts, dtype=np.int64), np.asarray(rows), provenance, tuple(nodes))


def write_long_csv(table: TelemetryTable, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp", "vnfc", "metric", "value"])
        cube = table.cube
        for t, ts in enumerate(table.timestamps):
            stamp = iso(ts)
            for i, node in enumerate(table.node_names):
                for m, metric in enumerate(METRICS):
                    writer.writerow([stamp, node, metric, repr(float(cube[t, i, m]))])


# synthesis ----------------------------------------------------------------

DAY_STEPS = 24 * 3600 // STEP_SECONDS
DEFAULT_START = 1619827200  # 2021-05-01T00:00:00Z


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    steps: int = 20_000
    burst_rate: float = 0.0035
    burst_magnitude: float = 1.0
    burst_duration: tuple[int, int] = (20, 60)
    burst_nodes: tuple[str, ...] | None = None
    self_coupling: float = 0.55
    neighbor_coupling: float = 0.35
    start: int = DEFAULT_START

    def validate(self, graph: ServiceGraph) -> None:
        if self.steps < 64:
            raise BadConfig("synthetic telemetry needs steps >= 64")
        if self.burst_rate < 0 or not math.isfinite(self.burst_rate):
            raise BadConfig("burst_rate must be a finite non-negative rate")
        if self.burst_magnitude < 0 or not math.isfinite(self.burst_magnitude):
            raise BadConfig("burst_magnitude must be finite and non-negative")
        if self.self_coupling < 0 or self.neighbor_coupling < 0 or self.self_coupling + self.neighbor_coupling >= 1:
            raise BadConfig("need non-negative couplings with self_coupling + neighbor_coupling < 1")
        lo, hi = self.burst_duration
        if not 1 <= lo <= hi:
            raise BadConfig("burst_duration must satisfy 1 <= min <= max")
        for name in self.burst_nodes or ():
            if name not in graph.node_names:
                raise BadConfig(f"unknown burst node {name!r}")


@dataclass(frozen=True)
class Burst:
    node: str
    start: int
    stop: int


def _ar1(rng: np.random.Generator, n: int, phi: float, sigma: float) -> np.ndarray:
    shocks = rng.normal(0.0, sigma, size=n)
    shocks[0] /= math.sqrt(1.0 - phi * phi)
    return lfilter([1.0], [1.0, -phi], shocks)


def graph_ar1(
    rng: np.random.Generator, graph: ServiceGraph, T: int, phi: float, coupling: float, sigma: float
) -> np.ndarray:
    """``a_t = phi * a_{t-1} + coupling * mean_{neighbours}(a_{t-1}) + noise``, one column per node."""
    deg = graph.adjacency.sum(axis=1, keepdims=True)
    transition = phi * np.eye(graph.n) + coupling * graph.adjacency / np.maximum(deg, 1.0)
    shocks = rng.normal(0.0, sigma, size=(T, graph.n))
    out = np.empty_like(shocks)
    prev = np.zeros(graph.n)
    step_t = transition.T
    for t in range(T):
        prev = prev @ step_t + shocks[t]
        out[t] = prev
    return out


def _ema(x: np.ndarray, alpha: float) -> np.ndarray:
    out, _ = lfilter([alpha], [1.0, alpha - 1.0], x, zi=[(1.0 - alpha) * x[0]])
    return out


def burst_intensity(graph: ServiceGraph, bursts: Sequence[Burst], steps: int, magnitude: float) -> np.ndarray:
    """Per-node stress level: full at the seed node, half and one step later at its neighbours."""
    level = np.zeros((steps, graph.n))
    for b in bursts:
        i = graph.node_names.index(b.node)
        seg = level[b.start : b.stop, i]
        np.maximum(seg, magnitude, out=seg)
        for j in graph.neighbors(i):
            seg = level[b.start + 1 : b.stop + 1, j]
            np.maximum(seg, 0.5 * magnitude, out=seg)
    return level


def synthesize(
    config: SynthConfig = SynthConfig(), graph: ServiceGraph | None = None
) -> tuple[TelemetryTable, list[Burst]]:
    """Generate a seeded telemetry table with stress bursts that spread over the graph.

    Each node has a latent utilisation (shared diurnal cycle plus AR(1) noise).
    Bursts arrive as a Poisson process; the stressed node loses idle CPU and
    gains load and IO, and each neighbour sees half of that one step later.
    """
    graph = graph or build_default_graph()
    config.validate(graph)
    rng = np.random.default_rng(config.seed)
    T = config.steps
    n = graph.n

    candidates = list(config.burst_nodes or graph.node_names)
    count = rng.poisson(config.burst_rate * T)
    starts = np.sort(rng.integers(0, T, size=count))
    lo, hi = config.burst_duration
    bursts = []
    for s in starts:
        dur = int(rng.integers(lo, hi + 1))
        bursts.append(Burst(candidates[int(rng.integers(len(candidates)))], int(s), int(min(T, s + dur))))
    level = burst_intensity(graph, bursts, T, config.burst_magnitude)

    t = np.arange(T)
    diurnal = np.sin(2.0 * np.pi * (t / DAY_STEPS))
    cube = np.empty((T, n, N_METRICS))

    def noise(sigma: float) -> np.ndarray:
        return np.exp(sigma * rng.standard_normal(T))

    latent = graph_ar1(rng, graph, T, config.self_coupling, config.neighbor_coupling, 0.04)
    for i in range(n):
        u = np.clip(0.25 + 0.04 * i / n + 0.06 * diurnal + latent[:, i], 0.02, 0.95)
        b = level[:, i]
        inst_load = (1.6 * u + 2.8 * b) * noise(0.05)
        free = 3000.0 * (1.0 - 0.6 * u) * (1.0 - 0.4 * np.minimum(b, 1.0)) * noise(0.03)
        usable = free + 1500.0 * (1.0 - 0.3 * np.minimum(b, 1.0)) * noise(0.02)
        in_bytes = 2e5 * (0.5 + 2.0 * u) * (1.0 + 1.5 * b) * noise(0.3)
        out_bytes = 1.5e5 * (0.5 + 2.0 * u) * (1.0 + 1.2 * b) * noise(0.3)
        values = {
            "cpu.idle_perc": 100.0 * (1.0 - u) * (1.0 - 0.93 * np.minimum(b, 1.0)) * noise(0.03),
            "cpu.system_perc": (8.0 + 20.0 * u + 25.0 * b) * noise(0.15),
            "cpu.wait_perc": (1.0 + 4.0 * u + 20.0 * b) * noise(0.2),
            "disk.inode_used_perc": 35.0 + 2.0 * i + _ar1(rng, T, 0.999, 0.02) + 0.2 * rng.standard_normal(T),
            "disk.space_used_perc": 55.0 + 3.0 * i + _ar1(rng, T, 0.999, 0.03) + 0.3 * rng.standard_normal(T),
            "io.read_kbytes_sec": (150.0 + 300.0 * u + 2500.0 * b) * noise(0.3),
            "io.read_req_sec": (8.0 + 30.0 * u + 120.0 * b) * noise(0.25),
            "io.read_time_sec": (0.02 + 0.1 * u + 0.6 * b) * noise(0.1),
            "io.write_kbytes_sec": (300.0 + 500.0 * u + 3000.0 * b) * noise(0.3),
            "io.write_req_sec": (25.0 + 60.0 * u + 180.0 * b) * noise(0.12),
            "io.write_time_sec": (0.03 + 0.15 * u + 0.7 * b) * noise(0.1),
            "load.avg_1_min": _ema(inst_load, 1.0 - math.exp(-0.5)),
            "load.avg_5_min": _ema(inst_load, 1.0 - math.exp(-0.1)),
            "load.avg_15_min": _ema(inst_load, 1.0 - math.exp(-1.0 / 30.0)),
            "mem.free_mb": free,
            "mem.usable_mb": usable,
            "mem.usable_perc": 100.0 * usable / 8192.0,
            "net.in_bytes_sec": in_bytes,
            "net.in_packets_sec": in_bytes / 900.0 * noise(0.15),
            "net.out_bytes_sec": out_bytes,
            "net.out_packets_sec": out_bytes / 700.0 * noise(0.15),
        }
        for m, metric in enumerate(METRICS):
            cube[:, i, m] = values[metric]

    timestamps = config.start + STEP_SECONDS * np.arange(T, dtype=np.int64)
    table = TelemetryTable(timestamps, cube.reshape(T, n * N_METRICS), "synthetic", graph.node_names)
    return table, bursts


# splits -------------------------------------------------------------------


def split_sizes(T: int) -> tuple[int, int, int]:
    """Rows for (train, val, test): 20% test off the end, then 20% of the rest for val.

    Integer floors: test = floor(T/5), train = floor(4/5 * (T - test)), val takes the rest.
    """
    if T < 20:
        raise TooShort(f"need at least 20 rows to split, got {T}")
    test = T // 5
    rest = T - test
    train = rest * 4 // 5
    return train, rest - train, test


def chronological_split(table: TelemetryTable) -> tuple[TelemetryTable, TelemetryTable, TelemetryTable]:
    train, val, _ = split_sizes(len(table))
    return table.rows(0, train), table.rows(train, train + val), table.rows(train + val, len(table))


# quantile transform -------------------------------------------------------


class QuantileTransform:
    """Per-column empirical CDF mapping onto [0, 1].

    Fitted on training rows only. Between reference quantiles the map is
    linear; inputs outside the training range clamp to 0 or 1. Tied reference
    quantiles are handled by averaging the forward and reversed interpolation.
    """

    def __init__(self, n_quantiles: int = 1000):
        if n_quantiles < 2:
            raise BadConfig("n_quantiles must be >= 2")
        self.n_quantiles = n_quantiles
        self.references = np.linspace(0.0, 1.0, n_quantiles)
        self.quantiles: np.ndarray | None = None
        self.constant_columns: list[int] = []

    def fit(self, train_values: np.ndarray) -> "QuantileTransform":
        x = np.asarray(train_values, dtype=float)
        if x.ndim != 2 or x.shape[0] == 0:
            raise EmptyInput("fit needs a non-empty 2-D array")
        q = np.quantile(x, self.references, axis=0)
        self.quantiles = np.maximum.accumulate(q, axis=0)
        self.constant_columns = np.flatnonzero(self.quantiles[0] == self.quantiles[-1]).tolist()
        if self.constant_columns:
            log.warning("quantile transform: %d constant column(s) map to 0.5", len(self.constant_columns))
        return self

    @classmethod
    def from_quantiles(cls, quantiles: np.ndarray) -> "QuantileTransform":
        obj = cls(quantiles.shape[0])
        obj.quantiles = np.asarray(quantiles, dtype=float)
        obj.constant_columns = np.flatnonzero(obj.quantiles[0] == obj.quantiles[-1]).tolist()
        return obj

    def _check(self, values: np.ndarray) -> np.ndarray:
        if self.quantiles is None:
            raise NotFitted("quantile transform used before fit")
        values = np.asarray(values, dtype=float)
        if values.shape[-1] != self.quantiles.shape[1]:
            raise ValueError(f"expected {self.quantiles.shape[1]} columns, got {values.shape[-1]}")
        return values

    def transform(self, values: np.ndarray) -> np.ndarray:
        values = self._check(values)
        flat = values.reshape(-1, values.shape[-1])
        out = np.empty_like(flat)
        refs = self.references
        for c in range(flat.shape[1]):
            q = self.quantiles[:, c]
            x = flat[:, c]
            if q[0] == q[-1]:
                out[:, c] = np.where(x > q[0], 1.0, np.where(x < q[0], 0.0, 0.5))
                continue
            fwd = np.interp(x, q, refs)
            bwd = -np.interp(-x, -q[::-1], -refs[::-1])
            out[:, c] = 0.5 * (fwd + bwd)
        return np.clip(out, 0.0, 1.0).reshape(values.shape)

    def inverse(self, values: np.ndarray) -> np.ndarray:
        values = self._check(values)
        flat = np.clip(values.reshape(-1, values.shape[-1]), 0.0, 1.0)
        out = np.empty_like(flat)
        for c in range(flat.shape[1]):
            out[:, c] = np.interp(flat[:, c], self.references, self.quantiles[:, c])
        return out.reshape(values.shape)

    def transform_table(self, table: TelemetryTable) -> TelemetryTable:
        return table.with_values(self.transform(table.values))


# windows ------------------------------------------------------------------


@dataclass(frozen=True)
class WindowSet:
    """Stacked ``(X, Y)`` windows: ``X`` is ``N x H x nodes x metrics``, ``Y`` is ``N x F x nodes x metrics``.

    ``target_rows[i]`` is the source-table row of ``Y[i, 0]``.
    """

    X: np.ndarray
    Y: np.ndarray
    target_rows: np.ndarray

    def __len__(self) -> int:
        return len(self.X)

    @property
    def H(self) -> int:
        return self.X.shape[1]

    @property
    def F(self) -> int:
        return self.Y.shape[1]

    def subset(self, idx) -> "WindowSet":
        return WindowSet(self.X[idx], self.Y[idx], self.target_rows[idx])


def window_count(length: int, H: int = 4, F: int = 4) -> int:
    return max(0, length - H - F + 1)


def make_windows(table: TelemetryTable, H: int = 4, F: int = 4) -> WindowSet:
    """Stride-1 windows inside each contiguous segment; ``X`` ends at ``t-1`` and ``Y`` starts at ``t``."""
    if H < 1 or F < 1:
        raise BadConfig("H and F must be >= 1")
    cube = table.cube
    xs, ys, rows = [], [], []
    for a, b in table.segments():
        count = window_count(b - a, H, F)
        if count == 0:
            continue
        seg = cube[a:b]
        view = np.lib.stride_tricks.sliding_window_view(seg, H + F, axis=0)
        view = np.moveaxis(view, -1, 1)[:count]
        xs.append(view[:, :H])
        ys.append(view[:, H:])
        rows.append(np.arange(a + H, a + H + count))
    if not xs:
        raise TooShort(f"no segment has length >= H+F={H + F}")
    return WindowSet(np.concatenate(xs), np.concatenate(ys), np.concatenate(rows))
