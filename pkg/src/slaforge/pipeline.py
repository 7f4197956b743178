"""Stage functions shared by the CLI and the end-to-end tests.

Each stage takes in-memory objects and returns in-memory objects; the CLI is
responsible for reading and writing artifacts around them.
"""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import checkpoint
from .agent import AgentConfig, PolicyEvaluation, QNetwork, SlaEnv, TrainingLog, evaluate_policy, rolling_mean, train_dqn
from .config import RunConfig
from .errors import DataError
from .forecaster import EpochRecord, EvalReport, ForecastModel, evaluate, persistence_baseline, train
from .sla import SlaLabels, SloRule, label_dataset
from .telemetry import (
    METRICS,
    QuantileTransform,
    TelemetryTable,
    WindowSet,
    chronological_split,
    ingest_csv,
    make_windows,
    split_sizes,
    synthesize,
)
from .topology import ServiceGraph, SpectralBasis, scaled_laplacian

SPLITS = ("train", "val", "test")


def fmt(x: float) -> str:
    """Shortest round-trip text for a float; blank for NaN."""
    return "" if x != x else repr(float(x))


# data ----------------------------------------------------------------------


def load_telemetry(cfg: RunConfig, graph: ServiceGraph) -> TelemetryTable:
    tcfg = cfg.telemetry
    if tcfg.source == "csv":
        if not tcfg.paths:
            raise DataError("telemetry.source is 'csv' but no paths are configured")
        return ingest_csv(tcfg.paths, graph.node_names, strict_metrics=tcfg.strict_metrics)
    table, _ = synthesize(tcfg.synth_config(cfg.seed), graph)
    return table


def split_record(table: TelemetryTable) -> dict:
    n_train, n_val, n_test = split_sizes(len(table))
    bounds = {}
    start = 0
    for name, size in zip(SPLITS, (n_train, n_val, n_test)):
        bounds[name] = {
            "start_row": start,
            "stop_row": start + size,
            "rows": size,
            "first_timestamp": int(table.timestamps[start]),
            "last_timestamp": int(table.timestamps[start + size - 1]),
        }
        start += size
    return bounds


def labels_csv(table: TelemetryTable, labels: SlaLabels) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["timestamp", *(f"slo_{r}" for r in labels.rule_ids), "sla"])
    for ts, slo, sla in zip(table.timestamps, labels.slo, labels.sla):
        w.writerow([int(ts), *(int(v) for v in slo), int(sla)])
    return buf.getvalue()


def read_labels_csv(text: str) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(timestamps, sla)`` from a label CSV."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][0] != "timestamp" or rows[0][-1] != "sla":
        raise DataError("label CSV must start with 'timestamp' and end with 'sla'")
    body = rows[1:]
    ts = np.array([int(r[0]) for r in body], dtype=np.int64)
    sla = np.array([int(r[-1]) for r in body], dtype=bool)
    return ts, sla


@dataclass
class Prepared:
    """Raw splits, the fitted transform, and windows in transformed space."""

    table: TelemetryTable
    labels: SlaLabels
    transform: QuantileTransform
    windows: dict[str, WindowSet]
    offsets: dict[str, int]

    def target_sla(self, split: str, sla: np.ndarray | None = None) -> np.ndarray:
        """SLA flag at the first forecast row of each window in ``split``."""
        sla = self.labels.sla if sla is None else sla
        return sla[self.windows[split].target_rows + self.offsets[split]]


def prepare(
    table: TelemetryTable,
    rules: Sequence[SloRule],
    H: int = 4,
    F: int = 4,
    n_quantiles: int = 1000,
    transform: QuantileTransform | None = None,
) -> Prepared:
    labels = label_dataset(table, rules)
    parts = chronological_split(table)
    if transform is None:
        transform = QuantileTransform(n_quantiles).fit(parts[0].values)
    windows, offsets, start = {}, {}, 0
    for name, part in zip(SPLITS, parts):
        windows[name] = make_windows(transform.transform_table(part), H, F)
        offsets[name] = start
        start += len(part)
    return Prepared(table, labels, transform, windows, offsets)


# forecaster ----------------------------------------------------------------


@dataclass
class ForecastResult:
    model: ForecastModel
    history: list[EpochRecord]
    report: EvalReport
    seconds: float


def train_forecaster(
    data: Prepared, basis: SpectralBasis, cfg: RunConfig, hidden: int | None = None
) -> ForecastResult:
    f = cfg.forecaster
    t0 = time.perf_counter()
    model = ForecastModel.init(basis, hidden or f.hidden, f.H, f.F, f.mode, seed=cfg.seed)
    model, history = train(model, data.windows["train"], data.windows["val"], f.train_config(cfg.seed))
    report = evaluate(model, data.windows["test"])
    return ForecastResult(model, history, report, time.perf_counter() - t0)


def k1_basis(basis: SpectralBasis) -> SpectralBasis:
    return SpectralBasis(basis.scaled_laplacian, basis.lambda_max, 1)


def baseline_reports(
    data: Prepared, basis: SpectralBasis, cfg: RunConfig, which: Sequence[str]
) -> tuple[dict[str, EvalReport], dict[str, ForecastResult]]:
    reports, models = {}, {}
    for name in which:
        if name == "persistence":
            reports[name] = persistence_baseline(data.windows["test"])
        elif name == "k1":
            models[name] = train_forecaster(data, k1_basis(basis), cfg)
            reports[name] = models[name].report
        else:
            raise ValueError(f"unknown baseline {name!r}")
    return reports, models


def report_csv(rows: dict[str, EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = None
    for name, rep in rows.items():
        row = rep.row()
        if header is None:
            header = ["model", *row]
            w.writerow(header)
        w.writerow([name, *(fmt(v) for v in row.values())])
    return buf.getvalue()


def history_csv(history: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_mse", "val_mse"])
    for h in history:
        w.writerow([h.epoch, fmt(h.train_mse), fmt(h.val_mse)])
    return buf.getvalue()


def forecaster_metadata(model: ForecastModel, graph: ServiceGraph, transform: QuantileTransform, cfg: RunConfig) -> dict:
    return {
        "kind": "forecaster",
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "graph": {"nodes": list(graph.node_names), "edges": [list(e) for e in graph.named_edges()]},
        "K": model.K,
        "hidden": model.hidden,
        "H": model.H,
        "F": model.F,
        "mode": model.mode,
        "lambda_max": model.basis.lambda_max,
        "metrics": list(METRICS),
        "transform": {"n_quantiles": transform.n_quantiles, "quantiles": transform.quantiles.T.tolist()},
    }


def save_forecaster(path, model: ForecastModel, graph: ServiceGraph, transform: QuantileTransform, cfg: RunConfig) -> None:
    checkpoint.save(path, forecaster_metadata(model, graph, transform, cfg), model.state_dict())


def load_forecaster(path) -> tuple[ForecastModel, ServiceGraph, QuantileTransform, dict]:
    meta, arrays = checkpoint.load(path)
    if meta.get("kind") != "forecaster":
        raise checkpoint.CheckpointError(f"{path} is not a forecaster checkpoint")
    g = meta["graph"]
    graph = ServiceGraph.from_named_edges([tuple(e) for e in g["edges"]], tuple(g["nodes"]))
    basis = scaled_laplacian(graph, meta["K"])
    model = ForecastModel.init(basis, meta["hidden"], meta["H"], meta["F"], meta["mode"])
    model.load_state_dict(arrays)
    transform = QuantileTransform.from_quantiles(np.asarray(meta["transform"]["quantiles"]).T)
    return model, graph, transform, meta


# agent ---------------------------------------------------------------------


def forecast_observations(model: ForecastModel, windows: WindowSet, observation: str = "first") -> np.ndarray:
    pred = model.predict(windows.X)
    if observation == "first":
        return pred[:, 0].reshape(len(pred), -1)
    return pred.reshape(len(pred), -1)


def agent_env(
    model: ForecastModel, data: Prepared, split: str, cfg: RunConfig, sla: np.ndarray | None = None, seed: int | None = None
) -> SlaEnv:
    obs = forecast_observations(model, data.windows[split], cfg.agent.observation)
    return SlaEnv(obs, data.target_sla(split, sla), seed=cfg.seed if seed is None else seed)


def agent_log_csv(log: TrainingLog, window: int = 100) -> str:
    reward_mean = rolling_mean(log.episode_reward, window)
    loss_mean = rolling_mean(log.loss, window)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "epsilon", "loss", "episode_reward", "reward_rolling_mean", "loss_rolling_mean"])
    for i in range(len(log.step)):
        w.writerow(
            [log.step[i], fmt(log.epsilon[i]), fmt(log.loss[i]), fmt(log.episode_reward[i]),
             fmt(reward_mean[i]), fmt(loss_mean[i])]
        )
    return buf.getvalue()


def eval_csv(result: PolicyEvaluation) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["episode", "reward", "action", "sla"])
    for i, (r, a, s) in enumerate(zip(result.rewards, result.actions, result.labels)):
        w.writerow([i, fmt(r), int(a), int(s)])
    return buf.getvalue()


def agent_metadata(q: QNetwork, agent_cfg: AgentConfig, cfg: RunConfig, obs_dim: int) -> dict:
    return {
        "kind": "agent",
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "obs_dim": obs_dim,
        "hidden": list(agent_cfg.hidden),
        "observation": cfg.agent.observation,
    }


def save_agent(path, q: QNetwork, agent_cfg: AgentConfig, cfg: RunConfig) -> None:
    obs_dim = q.layers[0][0].shape[0]
    checkpoint.save(path, agent_metadata(q, agent_cfg, cfg, obs_dim), q.state_dict())


def load_agent(path) -> tuple[QNetwork, dict]:
    meta, arrays = checkpoint.load(path)
    if meta.get("kind") != "agent":
        raise checkpoint.CheckpointError(f"{path} is not an agent checkpoint")
    q = QNetwork(meta["obs_dim"], tuple(meta["hidden"]))
    q.load_state_dict(arrays)
    return q, meta


def train_agent(env: SlaEnv, agent_cfg: AgentConfig, batch_hook=None) -> tuple[QNetwork, TrainingLog]:
    return train_dqn(env, agent_cfg, batch_hook=batch_hook)


def evaluate_agent(q: QNetwork, env: SlaEnv, episodes: int = 100) -> PolicyEvaluation:
    return evaluate_policy(q, env, episodes)
