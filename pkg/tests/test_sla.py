from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slaforge.errors import BadConfig, MissingMetric
from slaforge.sla import (
    DEFAULT_RULES,
    SlaState,
    SliExpr,
    SloRule,
    evaluate_sla,
    evaluate_slo,
    label_dataset,
    load_rules,
    rules_from_yaml,
    rules_to_yaml,
)
from slaforge.telemetry import METRIC_INDEX, METRICS, N_METRICS, NODE_NAMES, SynthConfig, TelemetryTable, synthesize

OPS = {"<": lambda a, b: a < b, "<=": lambda a, b: a <= b, ">": lambda a, b: a > b, ">=": lambda a, b: a >= b}


def loop_oracle(rule: SloRule, frame: dict[str, float], nodes=NODE_NAMES) -> bool:
    """Plain-Python reading of a rule: some node breaches every SLI."""
    for node in nodes:
        ok = True
        for e in rule.exprs:
            value = sum(frame[f"{node}.{m}"] for m in e.metrics)
            if e.op == "outside":
                hit = value < e.threshold[0] or value > e.threshold[1]
            else:
                hit = OPS[e.op](value, e.threshold)
            ok = ok and hit
        if ok:
            return True
    return False


def _frame(cube: np.ndarray) -> dict[str, float]:
    return {f"{n}.{m}": float(cube[i, j]) for i, n in enumerate(NODE_NAMES) for j, m in enumerate(METRICS)}


def _quiet_cube() -> np.ndarray:
    cube = np.zeros((6, N_METRICS))
    cube[:, METRIC_INDEX["cpu.idle_perc"]] = 80.0
    return cube


def test_default_rules_inventory():
    assert [r.id for r in DEFAULT_RULES] == ["load", "computation", "disk", "io"]
    assert all(len(r.exprs) >= 2 for r in DEFAULT_RULES)


def test_quiet_frame_is_compliant():
    state = evaluate_sla(DEFAULT_RULES, _quiet_cube())
    assert state == SlaState((False, False, False, False), False)


@pytest.mark.parametrize(
    "rule_id, settings_",
    [
        ("load", {"load.avg_1_min": 1.6, "load.avg_5_min": 1.1}),
        ("computation", {"cpu.idle_perc": 5.0, "load.avg_1_min": 1.6}),
        ("disk", {"disk.space_used_perc": 95.0, "disk.inode_used_perc": 85.0}),
        ("io", {"io.read_time_sec": 0.6, "io.write_time_sec": 0.5, "io.write_req_sec": 150.0}),
    ],
)
def test_each_default_rule_fires(rule_id, settings_):
    cube = _quiet_cube()
    for m, v in settings_.items():
        cube[2, METRIC_INDEX[m]] = v
    rule = next(r for r in DEFAULT_RULES if r.id == rule_id)
    assert evaluate_slo(rule, cube)
    state = evaluate_sla(DEFAULT_RULES, cube)
    assert state.sla and state.slo_states[[r.id for r in DEFAULT_RULES].index(rule_id)]


def test_conjunction_must_hold_on_one_node():
    cube = _quiet_cube()
    cube[0, METRIC_INDEX["disk.space_used_perc"]] = 95.0
    cube[1, METRIC_INDEX["disk.inode_used_perc"]] = 85.0
    disk = DEFAULT_RULES[2]
    assert not evaluate_slo(disk, cube)


def test_thresholds_are_strict():
    cube = _quiet_cube()
    cube[0, METRIC_INDEX["load.avg_1_min"]] = 1.5
    cube[0, METRIC_INDEX["load.avg_5_min"]] = 1.0
    assert not evaluate_slo(DEFAULT_RULES[0], cube)


def test_mapping_frames_and_missing_metric():
    cube = _quiet_cube()
    frame = _frame(cube)
    assert evaluate_sla(DEFAULT_RULES, frame) == evaluate_sla(DEFAULT_RULES, cube)
    del frame["homer.load.avg_5_min"]
    with pytest.raises(MissingMetric) as err:
        evaluate_sla(DEFAULT_RULES, frame, NODE_NAMES)
    assert "homer.load.avg_5_min" in str(err.value)
    with pytest.raises(MissingMetric):
        evaluate_sla(DEFAULT_RULES, np.zeros((6, 5)))


def test_sla_state_invariant():
    with pytest.raises(ValueError):
        SlaState((False, True), False)


@pytest.mark.parametrize(
    "bad",
    [
        {"id": "x", "exprs": [{"metric": "cpu.idle_perc", "op": "<", "threshold": 1}]},
        {"id": "x", "exprs": [{"metric": "cpu.nope", "op": "<", "threshold": 1}] * 2},
        {"id": "x", "exprs": [{"metric": "cpu.idle_perc", "op": "~", "threshold": 1}] * 2},
        {"id": "x", "exprs": [{"metric": "cpu.idle_perc", "op": "outside", "threshold": [5, 1]}] * 2},
        {"id": "x", "exprs": [{"metric": "cpu.idle_perc", "op": "<", "threshold": 1, "extra": 2}] * 2},
        {"id": "x"},
    ],
)
def test_rule_validation(bad):
    with pytest.raises(BadConfig):
        SloRule.from_dict(bad)


def test_duplicate_ids_rejected():
    text = rules_to_yaml([DEFAULT_RULES[0], DEFAULT_RULES[0]])
    with pytest.raises(BadConfig):
        rules_from_yaml(text)


def test_yaml_round_trip_evaluates_identically(tmp_path):
    table, _ = synthesize(SynthConfig(seed=4, steps=2000, burst_rate=0.01))
    path = tmp_path / "rules.yaml"
    path.write_text(rules_to_yaml(DEFAULT_RULES))
    reparsed = load_rules(path)
    assert reparsed == DEFAULT_RULES
    a, b = label_dataset(table, DEFAULT_RULES), label_dataset(table, reparsed)
    np.testing.assert_array_equal(a.slo, b.slo)
    np.testing.assert_array_equal(a.sla, b.sla)


def test_label_dataset_matches_loop_oracle():
    table, _ = synthesize(SynthConfig(seed=5, steps=600, burst_rate=0.02))
    labels = label_dataset(table, DEFAULT_RULES)
    assert labels.slo.shape == (600, 4)
    for t in range(0, 600, 7):
        frame = _frame(table.cube[t])
        expected = [loop_oracle(r, frame) for r in DEFAULT_RULES]
        assert labels.slo[t].tolist() == expected
        assert labels.sla[t] == any(expected)
        assert labels.state(t).sla == any(expected)


def test_synthetic_violation_rate_in_band():
    table, _ = synthesize(SynthConfig(seed=0, steps=20000))
    assert 0.10 <= label_dataset(table).violation_rate <= 0.20


_metric = st.sampled_from(METRICS)
_expr = st.builds(
    lambda ms, op, th, lo, width: SliExpr(tuple(ms), op, (lo, lo + width) if op == "outside" else th),
    st.lists(_metric, min_size=1, max_size=2, unique=True),
    st.sampled_from(["<", "<=", ">", ">=", "outside"]),
    st.floats(-50, 150),
    st.floats(-50, 100),
    st.floats(0.5, 50),
)
_rule = st.builds(lambda i, ex: SloRule(f"r{i}", tuple(ex)), st.integers(0, 99), st.lists(_expr, min_size=2, max_size=3))


@settings(max_examples=60, deadline=None)
@given(rule=_rule, seed=st.integers(0, 2**31 - 1))
def test_random_rules_round_trip_and_match_oracle(rule, seed):
    rng = np.random.default_rng(seed)
    cube = rng.uniform(-60, 160, size=(6, N_METRICS))
    (again,) = rules_from_yaml(rules_to_yaml([rule]))
    frame = _frame(cube)
    assert evaluate_slo(rule, cube) == evaluate_slo(again, cube) == loop_oracle(rule, frame)


def test_labels_are_unit_agnostic_of_other_columns():
    # rows differ only in a metric no rule reads
    cube = np.stack([_quiet_cube(), _quiet_cube()])
    cube[1, :, METRIC_INDEX["net.in_bytes_sec"]] = 1e9
    table = TelemetryTable(np.array([0, 30]), cube.reshape(2, -1))
    labels = label_dataset(table)
    assert labels.sla.tolist() == [False, False]
