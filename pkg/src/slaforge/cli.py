"""Command-line entry point.

Exit codes: 0 ok, 1 configuration error, 2 I/O error, 3 data error,
4 training diverged.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Callable

import numpy as np

from . import pipeline as pl
from .checkpoint import atomic_open
from .config import RunConfig, RunManifest, load_config
from .errors import ConfigError, DataError, Diverged, SlaforgeError
from .telemetry import read_wide_csv, write_wide_csv
from .topology import scaled_laplacian

log = logging.getLogger("slaforge")

EXIT_CONFIG, EXIT_IO, EXIT_DATA, EXIT_DIVERGED = 1, 2, 3, 4

TELEMETRY = "telemetry.csv"
LABELS = "labels.csv"
SPLITS = "splits.json"
FORECASTER = "forecaster.ckpt"
FORECASTER_K1 = "forecaster_k1.ckpt"
REPORT = "report.csv"
EVAL_REPORT = "eval_report.csv"
HISTORY = "history.csv"
AGENT = "agent.ckpt"
AGENT_LOG = "agent_log.csv"
AGENT_EVAL = "agent_eval.csv"
RESOLVED = "config.resolved.yaml"
MANIFEST = "manifest.json"


def write_text(path: Path, text: str) -> None:
    with atomic_open(path, "w", newline="") as fh:
        fh.write(text)


class Run:
    """Resolved config plus the bookkeeping every command shares."""

    def __init__(self, cfg: RunConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.started = time.perf_counter()
        self.artifacts: dict[str, str] = {}
        self.metrics: dict[str, float] = {}
        self.graph = cfg.graph.build()

    def path(self, name: str) -> Path:
        return self.out / name

    def write(self, name: str, text: str) -> Path:
        p = self.path(name)
        write_text(p, text)
        self.artifacts[name] = str(p)
        return p

    def write_via(self, name: str, writer: Callable[[Path], None]) -> Path:
        """Let ``writer`` fill a temp file, then rename it into place."""
        p = self.path(name)
        tmp = p.with_name(f".{p.name}.partial")
        try:
            writer(tmp)
            os.replace(tmp, p)
        except BaseException:
            tmp.unlink(missing_ok=True)
            raise
        self.artifacts[name] = str(p)
        return p

    def need(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise FileNotFoundError(f"missing {p}; run the earlier stage first")
        return p

    def finish(self) -> None:
        write_text(self.path(RESOLVED), self.cfg.to_yaml())
        manifest = RunManifest(
            command=self.command,
            config_hash=self.cfg.config_hash(),
            seed=self.cfg.seed,
            artifacts=self.artifacts,
            wall_clock_seconds=round(time.perf_counter() - self.started, 3),
            metrics=self.metrics,
        )
        existing = {}
        mp = self.path(MANIFEST)
        if mp.exists():
            try:
                existing = json.loads(mp.read_text())
            except json.JSONDecodeError:
                existing = {}
        existing[self.command] = manifest.model_dump()
        write_text(mp, json.dumps(existing, indent=2, sort_keys=True) + "\n")


# commands ------------------------------------------------------------------


def _write_data(run: Run, table) -> None:
    labels = pl.label_dataset(table, run.cfg.rules())
    run.write_via(TELEMETRY, lambda p: write_wide_csv(table, p))
    run.write(LABELS, pl.labels_csv(table, labels))
    run.write(SPLITS, json.dumps(pl.split_record(table), indent=2, sort_keys=True) + "\n")
    run.metrics.update(rows=float(len(table)), violation_rate=labels.violation_rate)
    print(f"rows={len(table)} violation_rate={labels.violation_rate:.4f}")


def cmd_synth(run: Run, args) -> None:
    cfg = run.cfg
    if args.steps is not None:
        cfg.telemetry.steps = args.steps
    cfg.telemetry.source = "synthetic"
    _write_data(run, pl.load_telemetry(cfg, run.graph))


def cmd_ingest(run: Run, args) -> None:
    cfg = run.cfg
    if args.inputs:
        cfg.telemetry.paths = list(args.inputs)
    cfg.telemetry.source = "csv"
    _write_data(run, pl.load_telemetry(cfg, run.graph))


def _prepared(run: Run, transform=None) -> pl.Prepared:
    table = read_wide_csv(run.need(TELEMETRY))
    f = run.cfg.forecaster
    return pl.prepare(table, run.cfg.rules(), f.H, f.F, run.cfg.transform.n_quantiles, transform)


def _apply_arch(run: Run, args) -> None:
    if getattr(args, "arch", None):
        run.cfg.forecaster.arch = args.arch
        run.cfg = RunConfig.model_validate(run.cfg.resolved())


def cmd_train_forecaster(run: Run, args) -> None:
    _apply_arch(run, args)
    data = _prepared(run)
    basis = scaled_laplacian(run.graph, run.cfg.forecaster.K)
    result = pl.train_forecaster(data, basis, run.cfg)
    pl.save_forecaster(run.path(FORECASTER), result.model, run.graph, data.transform, run.cfg)
    run.artifacts[FORECASTER] = str(run.path(FORECASTER))
    run.write(HISTORY, pl.history_csv(result.history))

    rows = {"model": result.report}
    baselines, models = pl.baseline_reports(data, basis, run.cfg, args.baseline or [])
    rows.update(baselines)
    if "k1" in models:
        pl.save_forecaster(run.path(FORECASTER_K1), models["k1"].model, run.graph, data.transform, run.cfg)
        run.artifacts[FORECASTER_K1] = str(run.path(FORECASTER_K1))
    run.write(REPORT, pl.report_csv(rows))
    for name, rep in rows.items():
        run.metrics[f"{name}_mae"] = rep.mae
        print(f"{name}: mse={rep.mse:.6f} mae={rep.mae:.6f} rmse={rep.rmse:.6f}")
    run.metrics["epochs"] = float(len(result.history))


def cmd_eval_forecaster(run: Run, args) -> None:
    model, _, transform, _ = pl.load_forecaster(run.need(FORECASTER))
    data = _prepared(run, transform)
    rows = {"model": pl.evaluate(model, data.windows["test"])}
    for name in args.baseline or []:
        if name == "persistence":
            rows[name] = pl.persistence_baseline(data.windows["test"])
        else:
            k1, _, _, _ = pl.load_forecaster(run.need(FORECASTER_K1))
            rows[name] = pl.evaluate(k1, data.windows["test"])
    run.write(EVAL_REPORT, pl.report_csv(rows))
    for name, rep in rows.items():
        run.metrics[f"{name}_mae"] = rep.mae
        print(f"{name}: mse={rep.mse:.6f} mae={rep.mae:.6f} rmse={rep.rmse:.6f}")


def _agent_inputs(run: Run):
    model, _, transform, _ = pl.load_forecaster(run.need(FORECASTER))
    data = _prepared(run, transform)
    ts, sla = pl.read_labels_csv(run.need(LABELS).read_text())
    if len(ts) != len(data.table) or not np.array_equal(ts, data.table.timestamps):
        raise DataError(f"{LABELS} does not line up with {TELEMETRY}")
    return model, data, sla


def cmd_train_agent(run: Run, args) -> None:
    if args.steps is not None:
        run.cfg.agent.total_timesteps = args.steps
    model, data, sla = _agent_inputs(run)
    env = pl.agent_env(model, data, "train", run.cfg, sla)
    agent_cfg = run.cfg.agent.agent_config(run.cfg.seed)
    q, tlog = pl.train_agent(env, agent_cfg)
    pl.save_agent(run.path(AGENT), q, agent_cfg, run.cfg)
    run.artifacts[AGENT] = str(run.path(AGENT))
    run.write(AGENT_LOG, pl.agent_log_csv(tlog, run.cfg.agent.rolling_window))
    tail = pl.rolling_mean(tlog.episode_reward, run.cfg.agent.rolling_window)[-1]
    run.metrics.update(updates=float(tlog.updates), final_reward_rolling_mean=float(tail))
    print(f"steps={len(tlog.step)} updates={tlog.updates} reward_rolling_mean={tail:.4f}")


def cmd_eval_agent(run: Run, args) -> None:
    episodes = args.episodes if args.episodes is not None else run.cfg.agent.episodes
    run.cfg.agent.episodes = episodes
    q, _ = pl.load_agent(run.need(AGENT))
    model, data, sla = _agent_inputs(run)
    env = pl.agent_env(model, data, "test", run.cfg, sla, seed=run.cfg.seed + 1)
    result = pl.evaluate_agent(q, env, episodes)
    run.write(AGENT_EVAL, pl.eval_csv(result))
    run.metrics.update(
        positive_fraction=result.positive_fraction,
        nonnegative_fraction=result.nonnegative_fraction,
        violation_rate=result.violation_rate,
    )
    print(
        f"positive_fraction={result.positive_fraction:.4f} "
        f"nonnegative_fraction={result.nonnegative_fraction:.4f} "
        f"violation_rate={result.violation_rate:.4f} episodes={episodes}"
    )


def cmd_pipeline(run: Run, args) -> None:
    stages: list[tuple[str, Callable]] = [
        ("ingest" if run.cfg.telemetry.source == "csv" else "synth", _data_stage),
        ("train-forecaster", cmd_train_forecaster),
        ("eval-forecaster", cmd_eval_forecaster),
        ("train-agent", cmd_train_agent),
        ("eval-agent", cmd_eval_agent),
    ]
    for name, fn in stages:
        log.info("pipeline stage %s", name)
        stage = Run(run.cfg, name)
        fn(stage, args)
        stage.finish()
        run.cfg = stage.cfg
        run.artifacts.update(stage.artifacts)
        run.metrics.update(stage.metrics)


def _data_stage(run: Run, args) -> None:
    _write_data(run, pl.load_telemetry(run.cfg, run.graph))


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train-forecaster": cmd_train_forecaster,
    "eval-forecaster": cmd_eval_forecaster,
    "train-agent": cmd_train_agent,
    "eval-agent": cmd_eval_agent,
    "pipeline": cmd_pipeline,
}


# argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def global_flags(default):
        p = argparse.ArgumentParser(add_help=False)
        p.add_argument("--config", default=default, help="YAML run configuration")
        p.add_argument("--seed", type=int, default=default, help="override the config seed")
        p.add_argument("--out", default=default, help="output directory (overrides the config)")
        return p

    # flags may come before or after the subcommand; the subcommand copy must not reset them
    common = global_flags(argparse.SUPPRESS)
    parser = argparse.ArgumentParser(
        prog="slaforge", description=__doc__.splitlines()[0], parents=[global_flags(None)]
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic telemetry and labels")
    p.add_argument("--steps", type=int, help="number of 30 s rows")

    p = sub.add_parser("ingest", parents=[common], help="ingest long-form telemetry CSVs")
    p.add_argument("inputs", nargs="*", help="CSV files (default: telemetry.paths from the config)")

    baseline = argparse.ArgumentParser(add_help=False)
    baseline.add_argument(
        "--baseline", action="append", choices=("persistence", "k1"), help="add a comparator row (repeatable)"
    )
    p = sub.add_parser("train-forecaster", parents=[common, baseline], help="train the graph forecaster")
    p.add_argument("--arch", choices=("table2-small", "table2-large"), help="preset hidden size and K")
    sub.add_parser("eval-forecaster", parents=[common, baseline], help="evaluate a saved forecaster on the test split")

    p = sub.add_parser("train-agent", parents=[common], help="train the DQN scaling agent")
    p.add_argument("--steps", type=int, help="total environment steps")
    p = sub.add_parser("eval-agent", parents=[common], help="greedy evaluation of a saved agent")
    p.add_argument("--episodes", type=int, help="number of test episodes (default 100)")

    p = sub.add_parser("pipeline", parents=[common, baseline], help="run every stage in order")
    p.add_argument("--steps", type=int, default=None, help=argparse.SUPPRESS)
    p.add_argument("--episodes", type=int, default=None, help=argparse.SUPPRESS)
    p.add_argument("--arch", choices=("table2-small", "table2-large"), help="preset hidden size and K")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("SLAFORGE_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out)
        run = Run(cfg, args.command)
        COMMANDS[args.command](run, args)
        if args.command != "pipeline":
            run.finish()
    except Diverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConfigError as exc:
        print(f"error: bad configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DataError, SlaforgeError, ValueError) as exc:
        print(f"error: bad data: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
