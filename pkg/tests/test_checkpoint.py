from __future__ import annotations

import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from slaforge import checkpoint
from slaforge import pipeline as pl
from slaforge.agent import QNetwork
from slaforge.checkpoint import CheckpointError
from slaforge.config import RunConfig
from slaforge.forecaster import ForecastModel
from slaforge.telemetry import N_METRICS, QuantileTransform
from slaforge.topology import build_default_graph, scaled_laplacian

_arrays = st.dictionaries(
    st.text(min_size=1, max_size=12),
    hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4), elements=st.floats(allow_nan=True)),
    max_size=5,
)


@settings(max_examples=60, deadline=None)
@given(arrays=_arrays, meta=st.dictionaries(st.text(max_size=8), st.integers() | st.text(max_size=8), max_size=4))
def test_round_trip(arrays, meta):
    got_meta, got = checkpoint.loads(checkpoint.dumps(meta, arrays))
    assert got_meta == meta
    assert set(got) == set(arrays)
    for k, v in arrays.items():
        assert got[k].shape == v.shape
        np.testing.assert_array_equal(got[k], v)


def test_layout_is_canonical():
    a = checkpoint.dumps({"b": 1, "a": 2}, {"y": np.ones(2), "x": np.zeros((1, 1))})
    b = checkpoint.dumps({"a": 2, "b": 1}, {"x": np.zeros((1, 1)), "y": np.ones(2)})
    assert a == b
    assert a.startswith(b"SLAFCKPT\x01\x00")


def test_corrupt_inputs_are_rejected():
    blob = checkpoint.dumps({"k": 1}, {"w": np.arange(6.0).reshape(2, 3)})
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.loads(b"NOTACKPT" + blob[8:])
    with pytest.raises(CheckpointError, match="version"):
        checkpoint.loads(blob[:8] + b"\x09\x00" + blob[10:])
    for cut in (3, 12, len(blob) - 1):
        with pytest.raises(CheckpointError, match="truncated"):
            checkpoint.loads(blob[:cut])
    with pytest.raises(CheckpointError, match="trailing"):
        checkpoint.loads(blob + b"\x00")


def test_atomic_open_leaves_nothing_on_failure(tmp_path):
    target = tmp_path / "out.bin"
    target.write_bytes(b"old")
    with pytest.raises(RuntimeError):
        with checkpoint.atomic_open(target, "wb") as fh:
            fh.write(b"partial")
            raise RuntimeError("boom")
    assert target.read_bytes() == b"old"
    assert os.listdir(tmp_path) == ["out.bin"]
    checkpoint.save(target, {}, {})
    assert checkpoint.load(target) == ({}, {})


def _transform(rng):
    return QuantileTransform(50).fit(rng.normal(size=(400, 6 * N_METRICS)))


@pytest.mark.parametrize("mode", ["stacked", "unrolled"])
def test_forecaster_round_trip_predicts_identically(tmp_path, rng, mode):
    graph = build_default_graph()
    model = ForecastModel.init(scaled_laplacian(graph, 2), hidden=6, mode=mode, seed=4)
    transform = _transform(rng)
    path = tmp_path / "f.ckpt"
    pl.save_forecaster(path, model, graph, transform, RunConfig())
    loaded, graph2, transform2, meta = pl.load_forecaster(path)
    X = rng.uniform(size=(3, 4, 6, N_METRICS))
    np.testing.assert_array_equal(loaded.predict(X), model.predict(X))
    assert graph2.named_edges() == graph.named_edges()
    assert (meta["K"], meta["hidden"], meta["mode"]) == (2, 6, mode)
    raw = rng.normal(size=(20, 6 * N_METRICS))
    np.testing.assert_array_equal(transform2.transform(raw), transform.transform(raw))
    with pytest.raises(CheckpointError):
        pl.load_agent(path)


def test_agent_round_trip_acts_identically(tmp_path, rng):
    from slaforge.agent import AgentConfig

    q = QNetwork(7, (5, 5), seed=2)
    path = tmp_path / "a.ckpt"
    pl.save_agent(path, q, AgentConfig(hidden=(5, 5)), RunConfig())
    loaded, meta = pl.load_agent(path)
    s = rng.normal(size=(30, 7))
    np.testing.assert_array_equal(loaded.q_values(s), q.q_values(s))
    assert loaded.digest() == q.digest()
    assert meta["obs_dim"] == 7
    with pytest.raises(CheckpointError):
        pl.load_forecaster(path)
