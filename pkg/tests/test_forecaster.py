from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import slaforge.numerics as nx
from conftest import random_connected_graph
from oracles import chebyshev_polys_oracle, gradcheck, gru_cell_scalar_loop
from slaforge.errors import Diverged, ShapeMismatch
from slaforge.forecaster import (
    ARCHITECTURES,
    GATES,
    EarlyStopping,
    ForecastModel,
    GConvGRUCell,
    TrainConfig,
    cell_step,
    evaluate,
    persistence_baseline,
    report_from_predictions,
    train,
)
from slaforge.telemetry import N_METRICS, WindowSet
from slaforge.topology import build_default_graph, scaled_laplacian


def _random_cell(rng, d_in, d_h, K, scale=0.5):
    cell = GConvGRUCell.init(d_in, d_h, K, rng)
    for ws in cell.weights.values():
        for w in ws:
            w.data = scale * rng.normal(size=w.shape)
    return cell


def _weights_np(cell):
    return {g: [w.data for w in cell.weights[g]] for g in GATES}


def _windows(rng, N, H=4, F=4, n=6, M=N_METRICS):
    return WindowSet(rng.uniform(size=(N, H, n, M)), rng.uniform(size=(N, F, n, M)), np.arange(N))


def test_zero_weights_halve_the_state(rng):
    basis = scaled_laplacian(build_default_graph(), 3)
    cell = GConvGRUCell.zeros(4, 5, 3)
    X = rng.normal(size=(6, 4))
    h_prev = rng.normal(size=(6, 5))
    h = cell_step(cell, basis, X, h_prev)
    assert np.array_equal(h.data, 0.5 * h_prev)


@pytest.mark.parametrize("K", [1, 2, 3])
def test_cell_matches_scalar_loop(K):
    for seed in range(5):
        rng = np.random.default_rng(seed)
        g = random_connected_graph(rng, 5)
        basis = scaled_laplacian(g, K)
        cell = _random_cell(rng, 3, 4, K)
        X, h_prev = rng.normal(size=(5, 3)), rng.normal(size=(5, 4))
        got = cell_step(cell, basis, X, h_prev).data
        want = gru_cell_scalar_loop(chebyshev_polys_oracle(g.adjacency, K), X, h_prev, _weights_np(cell))
        np.testing.assert_allclose(got, want, atol=1e-9)


def test_gate_activations_exposed(rng):
    basis = scaled_laplacian(build_default_graph(), 3)
    cell = _random_cell(rng, 2, 3, 3)
    gates = {}
    X, h_prev = rng.normal(size=(6, 2)), rng.normal(size=(6, 3))
    h = cell_step(cell, basis, X, h_prev, gates=gates)
    z = gates["z"].reshape(6, 3)
    cand = gates["candidate"].reshape(6, 3)
    np.testing.assert_allclose(h.data, z * h_prev + (1 - z) * cand, atol=1e-15)
    assert np.all((gates["r"] > 0) & (gates["r"] < 1))


def test_none_state_equals_zero_state(rng):
    basis = scaled_laplacian(build_default_graph(), 3)
    cell = _random_cell(rng, 4, 3, 3)
    X = rng.normal(size=(6, 4))
    a = cell_step(cell, basis, X, None).data
    b = cell_step(cell, basis, X, np.zeros((6, 3))).data
    np.testing.assert_allclose(a, b, atol=1e-15)


def test_batched_signals_match_one_at_a_time(rng):
    basis = scaled_laplacian(build_default_graph(), 3)
    cell = _random_cell(rng, 4, 3, 3)
    X = rng.normal(size=(6, 5, 4))
    H = rng.normal(size=(6, 5, 3))
    batched = cell_step(cell, basis, X, H).data
    for s in range(5):
        np.testing.assert_allclose(batched[:, s], cell_step(cell, basis, X[:, s], H[:, s]).data, atol=1e-12)


def test_cell_shape_errors(rng):
    basis = scaled_laplacian(build_default_graph(), 3)
    cell = GConvGRUCell.zeros(4, 3, 3)
    with pytest.raises(ShapeMismatch):
        cell_step(cell, basis, rng.normal(size=(6, 5)))
    with pytest.raises(ShapeMismatch):
        cell_step(cell, basis, rng.normal(size=(6, 4)), rng.normal(size=(6, 4)))
    with pytest.raises(ShapeMismatch):
        cell_step(cell, scaled_laplacian(build_default_graph(), 2), rng.normal(size=(6, 4)))


def test_cell_plus_mse_gradcheck():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        g = random_connected_graph(rng, 4)
        basis = scaled_laplacian(g, 3)
        d_in, d_h = 2, 3
        arrays = [rng.normal(size=(4, d_in)), rng.normal(size=(4, d_h))]
        arrays += [0.5 * rng.normal(size=((d_in if gate.startswith("W_x") else d_h), d_h)) for gate in GATES for _ in range(3)]
        target = rng.normal(size=(4, d_h))

        def build(t):
            cell = GConvGRUCell(d_in, d_h, 3, {gate: list(t[2 + 3 * i : 5 + 3 * i]) for i, gate in enumerate(GATES)})
            return nx.mse_loss(cell_step(cell, basis, t[0], t[1]), target)

        assert gradcheck(build, arrays) < 1e-4


def test_stacked_model_is_a_per_metric_cell_step(rng):
    basis = scaled_laplacian(build_default_graph(), 3)
    model = ForecastModel.init(basis, hidden=8, seed=3)
    X = rng.uniform(size=(2, 4, 6, N_METRICS))
    pred = model.predict(X)
    assert pred.shape == (2, 4, 6, N_METRICS)
    for b in (0, 1):
        for m in (0, 7, 20):
            h = cell_step(model.cell, basis, X[b, :, :, m].T).data
            manual = np.maximum(h, 0) @ model.head_W.data + model.head_b.data
            np.testing.assert_allclose(pred[b, :, :, m], manual.T, atol=1e-12)


def test_unrolled_model_shapes(rng):
    basis = scaled_laplacian(build_default_graph(), 2)
    model = ForecastModel.init(basis, hidden=5, mode="unrolled", seed=1)
    assert model.cell.d_in == N_METRICS
    assert model.head_W.shape == (5, 4 * N_METRICS)
    X = rng.uniform(size=(3, 4, 6, N_METRICS))
    assert model.predict(X).shape == (3, 4, 6, N_METRICS)
    with pytest.raises(ValueError):
        ForecastModel.init(basis, mode="sideways")


def test_architectures():
    assert ARCHITECTURES["table2-large"] == {"hidden": 2048, "K": 3}
    assert ARCHITECTURES["table2-small"]["K"] == 3


def test_state_dict_round_trip(rng):
    basis = scaled_laplacian(build_default_graph(), 3)
    a = ForecastModel.init(basis, hidden=4, seed=1)
    b = ForecastModel.init(basis, hidden=4, seed=2)
    X = rng.uniform(size=(2, 4, 6, N_METRICS))
    assert not np.allclose(a.predict(X), b.predict(X))
    b.load_state_dict(a.state_dict())
    np.testing.assert_array_equal(a.predict(X), b.predict(X))
    with pytest.raises(ShapeMismatch):
        b.load_state_dict({k: v for k, v in list(a.state_dict().items())[1:]})


def test_report_metrics_against_manual(rng):
    pred, target = rng.normal(size=(5, 4, 6, 3)), rng.normal(size=(5, 4, 6, 3))
    rep = report_from_predictions(pred, target)
    err = pred - target
    assert rep.mse == pytest.approx(np.mean(err**2), rel=1e-14)
    assert rep.rmse == pytest.approx(np.sqrt(np.mean(err**2)), rel=1e-14)
    for k in range(4):
        assert rep.step_mae[k] == pytest.approx(np.mean(np.abs(err[:, k])), rel=1e-14)
    assert rep.mae == pytest.approx(np.mean(rep.step_mae), rel=1e-14)


def test_persistence_repeats_last_step(rng):
    w = _windows(rng, 3)
    w.Y[:] = w.X[:, -1:]
    rep = persistence_baseline(w)
    assert rep.mse == 0 and rep.mae == 0


def test_training_reduces_loss_and_is_deterministic(rng):
    basis = scaled_laplacian(build_default_graph(), 3)
    data = np.random.default_rng(0)
    # smooth signal so the next steps are predictable from the last ones
    t = np.arange(300)[:, None, None] + np.arange(6)[None, :, None] + np.arange(N_METRICS)[None, None, :]
    series = 0.5 + 0.4 * np.sin(t / 7.0) + 0.01 * data.normal(size=t.shape)
    idx = np.arange(292)
    w = WindowSet(np.stack([series[i : i + 4] for i in idx]), np.stack([series[i + 4 : i + 8] for i in idx]), idx + 4)
    tr, va = w.subset(slice(0, 220)), w.subset(slice(220, None))
    cfg = TrainConfig(lr=1e-2, batch_size=32, max_epochs=8, seed=0)
    m1, h1 = train(ForecastModel.init(basis, hidden=8, seed=0), tr, va, cfg)
    m2, h2 = train(ForecastModel.init(basis, hidden=8, seed=0), tr, va, cfg)
    assert [r.val_mse for r in h1] == [r.val_mse for r in h2]
    assert h1[-1].train_mse < h1[0].train_mse
    assert h1[-1].val_mse < h1[0].val_mse
    assert evaluate(m1, va).mse == pytest.approx(min(r.val_mse for r in h1), rel=1e-12)


def test_early_stopping_unit():
    es = EarlyStopping(patience=3)
    seq = [5.0, 4.0, 4.5, 4.0, 3.9, 4.0, 3.9, 4.0, 1.0]
    stopped_at = next(i for i, v in enumerate(seq) if es.update(i, v, lambda i=i: {"epoch": np.array(i)}))
    # ties do not count as improvement
    assert stopped_at == 7
    assert es.best_epoch == 4
    assert int(es.best_state["epoch"]) == 4


def _curve_run(curve, patience, rng):
    basis = scaled_laplacian(build_default_graph(), 1)
    w = _windows(rng, 8)
    snapshots = {}
    model = ForecastModel.init(basis, hidden=2, seed=0)
    model, hist = train(
        model,
        w,
        w,
        TrainConfig(lr=1e-3, batch_size=8, max_epochs=len(curve), patience=patience),
        validate=lambda m, epoch: curve[epoch],
        on_epoch=lambda m, rec: snapshots.__setitem__(rec.epoch, m.state_dict()),
    )
    return model, hist, snapshots


@settings(max_examples=25, deadline=None)
@given(curve=st.lists(st.floats(0.01, 10.0), min_size=1, max_size=40), patience=st.integers(1, 12))
def test_early_stopping_contract(curve, patience):
    model, hist, snapshots = _curve_run(curve, patience, np.random.default_rng(0))
    # stop at the first epoch lying `patience` epochs past the running best
    stop = len(curve) - 1
    for e in range(len(curve)):
        if e - int(np.argmin(curve[: e + 1])) >= patience:
            stop = e
            break
    best = int(np.argmin(curve[: stop + 1]))
    assert len(hist) == stop + 1
    restored = model.state_dict()
    for k, v in snapshots[best].items():
        np.testing.assert_array_equal(restored[k], v)


def test_divergence_raises(rng):
    with pytest.raises(Diverged):
        _curve_run([1.0, float("nan")], 3, rng)
