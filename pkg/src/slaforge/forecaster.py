"""GConvGRU forecaster: Chebyshev graph-convolutional GRU cell plus a linear head.

Default ``stacked`` layout: every metric is its own graph signal whose node
features are the H history values, all metrics share the cell weights, and the
head emits the F future steps at once from a single cell step. The
``unrolled`` layout instead steps the cell H times over 21-wide node features
and emits ``F * 21`` values per node.

Internally signals are ``nodes x S x features`` tensors, where ``S`` counts
independent signals (batch * metrics for ``stacked``, batch for ``unrolled``).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .errors import Diverged, EmptyInput, ShapeMismatch
from .numerics import Tensor
from .telemetry import N_METRICS, WindowSet
from .topology import SpectralBasis

log = logging.getLogger(__name__)

GATES = ("W_xz", "W_hz", "W_xr", "W_hr", "W_xh", "W_hh")


def chebyshev_terms(basis: SpectralBasis, X: Tensor) -> list[Tensor]:
    """``T_k(L~) X`` for k < K, each flattened to ``(nodes * S) x d``."""
    n, S, d = X.shape
    if n != basis.n:
        raise ShapeMismatch(f"signal has {n} nodes, graph has {basis.n}")
    L = Tensor(basis.scaled_laplacian)
    flat = X.reshape(n, S * d)
    terms = [flat]
    for k in range(1, basis.K):
        nxt = L @ terms[-1]
        if k > 1:
            nxt = 2.0 * nxt - terms[-2]
        terms.append(nxt)
    return [t.reshape(n * S, d) for t in terms]


def _conv(terms: Sequence[Tensor], W: Sequence[Tensor]) -> Tensor:
    if len(terms) == 1:
        return terms[0] @ W[0]
    # one (nS x K*d) @ (K*d x h) product instead of K separate ones
    return nx.concat(terms, axis=1) @ nx.concat(W, axis=0)


@dataclass
class GConvGRUCell:
    d_in: int
    d_h: int
    K: int
    weights: dict[str, list[Tensor]] = field(repr=False)

    @classmethod
    def init(cls, d_in: int, d_h: int, K: int, rng: np.random.Generator) -> "GConvGRUCell":
        weights = {}
        for gate in GATES:
            rows = d_in if gate.startswith("W_x") else d_h
            weights[gate] = [Tensor(nx.xavier_uniform(rng, rows, d_h), requires_grad=True) for _ in range(K)]
        return cls(d_in, d_h, K, weights)

    @classmethod
    def zeros(cls, d_in: int, d_h: int, K: int) -> "GConvGRUCell":
        weights = {}
        for gate in GATES:
            rows = d_in if gate.startswith("W_x") else d_h
            weights[gate] = [Tensor(np.zeros((rows, d_h)), requires_grad=True) for _ in range(K)]
        return cls(d_in, d_h, K, weights)

    def parameters(self) -> dict[str, Tensor]:
        return {f"cell.{g}.{k}": w for g in GATES for k, w in enumerate(self.weights[g])}


def cell_step(
    cell: GConvGRUCell, basis: SpectralBasis, X, h_prev=None, gates: dict | None = None
) -> Tensor:
    """One GConvGRU update.

    ``X`` is ``nodes x d_in`` or ``nodes x S x d_in``; ``h_prev`` matches with
    ``d_h`` features, and ``None`` stands for an all-zero state (the hidden
    convolutions then vanish and are skipped). If ``gates`` is a dict it
    receives the z, r and candidate activations.
    """
    X = nx.as_tensor(X)
    squeeze = X.ndim == 2
    if squeeze:
        X = X.reshape(X.shape[0], 1, X.shape[1])
    if X.ndim != 3 or X.shape[2] != cell.d_in:
        raise ShapeMismatch(f"X must be nodes x [S x] {cell.d_in}, got {X.shape}")
    if basis.K != cell.K:
        raise ShapeMismatch(f"basis K={basis.K} but cell K={cell.K}")
    n, S, _ = X.shape
    W = cell.weights
    tx = chebyshev_terms(basis, X)

    if h_prev is None:
        z = nx.sigmoid(_conv(tx, W["W_xz"]))
        cand = nx.tanh(_conv(tx, W["W_xh"]))
        h = (1.0 - z) * cand
        r = None
    else:
        h_prev = nx.as_tensor(h_prev)
        if squeeze and h_prev.ndim == 2:
            h_prev = h_prev.reshape(h_prev.shape[0], 1, h_prev.shape[1])
        if h_prev.shape != (n, S, cell.d_h):
            raise ShapeMismatch(f"h_prev must be {(n, S, cell.d_h)}, got {h_prev.shape}")
        th = chebyshev_terms(basis, h_prev)
        h_flat = h_prev.reshape(n * S, cell.d_h)
        z = nx.sigmoid(_conv(tx, W["W_xz"]) + _conv(th, W["W_hz"]))
        r = nx.sigmoid(_conv(tx, W["W_xr"]) + _conv(th, W["W_hr"]))
        reset = (r * h_flat).reshape(n, S, cell.d_h)
        cand = nx.tanh(_conv(tx, W["W_xh"]) + _conv(chebyshev_terms(basis, reset), W["W_hh"]))
        h = z * h_flat + (1.0 - z) * cand
    if gates is not None:
        gates.update(z=z.data, r=None if r is None else r.data, candidate=cand.data)
    h = h.reshape(n, S, cell.d_h)
    return h.reshape(n, cell.d_h) if squeeze else h


# model --------------------------------------------------------------------

ARCHITECTURES = {
    "table2-small": {"hidden": 128, "K": 3},
    "table2-large": {"hidden": 2048, "K": 3},
}


@dataclass
class ForecastModel:
    cell: GConvGRUCell
    head_W: Tensor
    head_b: Tensor
    basis: SpectralBasis
    H: int = 4
    F: int = 4
    mode: str = "stacked"
    n_metrics: int = N_METRICS

    @classmethod
    def init(
        cls,
        basis: SpectralBasis,
        hidden: int = 128,
        H: int = 4,
        F: int = 4,
        mode: str = "stacked",
        seed: int = 0,
        n_metrics: int = N_METRICS,
    ) -> "ForecastModel":
        if mode not in ("stacked", "unrolled"):
            raise ValueError(f"unknown mode {mode!r}")
        rng = np.random.default_rng(seed)
        d_in = H if mode == "stacked" else n_metrics
        out = F if mode == "stacked" else F * n_metrics
        cell = GConvGRUCell.init(d_in, hidden, basis.K, rng)
        head_W = Tensor(nx.xavier_uniform(rng, hidden, out), requires_grad=True)
        head_b = Tensor(np.zeros(out), requires_grad=True)
        return cls(cell, head_W, head_b, basis, H, F, mode, n_metrics)

    @property
    def K(self) -> int:
        return self.cell.K

    @property
    def hidden(self) -> int:
        return self.cell.d_h

    def parameters(self) -> dict[str, Tensor]:
        params = self.cell.parameters()
        params["head.W"] = self.head_W
        params["head.b"] = self.head_b
        return params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise ShapeMismatch(f"state lacks {sorted(missing)}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ShapeMismatch(f"{k}: {state[k].shape} vs {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def _check(self, X: np.ndarray) -> None:
        if X.ndim != 4 or X.shape[1:] != (self.H, self.basis.n, self.n_metrics):
            raise ShapeMismatch(
                f"expected B x {self.H} x {self.basis.n} x {self.n_metrics} windows, got {X.shape}"
            )

    def forward_internal(self, X: np.ndarray) -> Tensor:
        """Predictions in ``nodes x (B*M) x F`` (stacked) or ``nodes x B x (F*M)`` (unrolled) layout."""
        self._check(X)
        B, H, n, M = X.shape
        if self.mode == "stacked":
            signals = np.ascontiguousarray(X.transpose(2, 0, 3, 1)).reshape(n, B * M, H)
            h = cell_step(self.cell, self.basis, Tensor(signals))
            S = B * M
        else:
            h = None
            for t in range(H):
                step = Tensor(np.ascontiguousarray(X[:, t].transpose(1, 0, 2)))
                h = cell_step(self.cell, self.basis, step, h)
            S = B
        h = nx.relu(h).reshape(n * S, self.hidden)
        return (h @ self.head_W + self.head_b).reshape(n, S, self.head_W.shape[1])

    def target_internal(self, Y: np.ndarray) -> np.ndarray:
        B, F, n, M = Y.shape
        if self.mode == "stacked":
            return np.ascontiguousarray(Y.transpose(2, 0, 3, 1)).reshape(n, B * M, F)
        return np.ascontiguousarray(Y.transpose(2, 0, 1, 3)).reshape(n, B, F * M)

    def to_windows_layout(self, out: np.ndarray, B: int) -> np.ndarray:
        n, M, F = self.basis.n, self.n_metrics, self.F
        if self.mode == "stacked":
            return out.reshape(n, B, M, F).transpose(1, 3, 0, 2)
        return out.reshape(n, B, F, M).transpose(1, 2, 0, 3)

    def predict(self, X: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """``B x H x nodes x metrics`` history to ``B x F x nodes x metrics`` forecasts."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 3:
            return self.predict(X[None], batch_size)[0]
        self._check(X)
        parts = []
        with nx.no_grad():
            for a in range(0, len(X), batch_size):
                chunk = X[a : a + batch_size]
                parts.append(self.to_windows_layout(self.forward_internal(chunk).data, len(chunk)))
        if not parts:
            return np.zeros((0, self.F, self.basis.n, self.n_metrics))
        return np.concatenate(parts)

    def loss(self, X: np.ndarray, Y: np.ndarray) -> Tensor:
        return nx.mse_loss(self.forward_internal(X), self.target_internal(Y))


def forward(model: ForecastModel, X_window: np.ndarray) -> np.ndarray:
    return model.predict(X_window)


# evaluation ---------------------------------------------------------------


@dataclass(frozen=True)
class EvalReport:
    mse: float
    mae: float
    rmse: float
    step_mae: tuple[float, ...]

    def row(self) -> dict[str, float]:
        out = {"mse": self.mse, "mae": self.mae, "rmse": self.rmse}
        for i, v in enumerate(self.step_mae, start=1):
            out[f"mae_step{i}"] = v
        return out


def report_from_predictions(pred: np.ndarray, target: np.ndarray) -> EvalReport:
    if pred.shape != target.shape:
        raise ShapeMismatch(f"{pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise EmptyInput("no windows to evaluate")
    err = pred - target
    mse = float(np.mean(err * err))
    step_axes = tuple(a for a in range(err.ndim) if a != 1)
    return EvalReport(
        mse=mse,
        mae=float(np.mean(np.abs(err))),
        rmse=math.sqrt(mse),
        step_mae=tuple(float(v) for v in np.mean(np.abs(err), axis=step_axes)),
    )


def evaluate(model: ForecastModel, windows: WindowSet) -> EvalReport:
    return report_from_predictions(model.predict(windows.X), windows.Y)


def persistence_baseline(windows: WindowSet) -> EvalReport:
    """Repeat the last observed step across the whole horizon."""
    pred = np.repeat(windows.X[:, -1:], windows.F, axis=1)
    return report_from_predictions(pred, windows.Y)


# training -----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-2
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1 or not self.lr > 0:
            raise ValueError("batch_size, max_epochs and lr must be positive")


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float


class EarlyStopping:
    """Track the best validation score and stop after ``patience`` epochs without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.best_state: dict[str, np.ndarray] | None = None
        self.wait = 0

    def update(self, epoch: int, value: float, state: Callable[[], dict[str, np.ndarray]]) -> bool:
        """Record an epoch's score; return True when training should stop."""
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.best_state = state()
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.patience


def validation_mse(model: ForecastModel, windows: WindowSet, batch_size: int = 512) -> float:
    total = 0.0
    with nx.no_grad():
        for a in range(0, len(windows), batch_size):
            X, Y = windows.X[a : a + batch_size], windows.Y[a : a + batch_size]
            total += model.loss(X, Y).item() * len(X)
    return total / len(windows)


def train(
    model: ForecastModel,
    train_windows: WindowSet,
    val_windows: WindowSet,
    cfg: TrainConfig = TrainConfig(),
    validate: Callable[[ForecastModel, int], float] | None = None,
    on_epoch: Callable[[ForecastModel, EpochRecord], None] | None = None,
) -> tuple[ForecastModel, list[EpochRecord]]:
    """Minibatch Adam on MSE with early stopping; the best-validation weights are restored.

    ``validate(model, epoch)`` overrides the validation score, which lets tests
    inject loss curves.
    """
    if len(train_windows) == 0 or (validate is None and len(val_windows) == 0):
        raise EmptyInput("train and validation windows must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    params = list(model.parameters().values())
    opt = nx.Adam(params, lr=cfg.lr)
    stopper = EarlyStopping(cfg.patience)
    history: list[EpochRecord] = []
    N = len(train_windows)
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(N)
        running = 0.0
        for a in range(0, N, cfg.batch_size):
            idx = np.sort(order[a : a + cfg.batch_size])
            opt.zero_grad()
            loss = model.loss(train_windows.X[idx], train_windows.Y[idx])
            nx.backward(loss)
            opt.step()
            running += loss.item() * len(idx)
        val = validate(model, epoch) if validate else validation_mse(model, val_windows)
        if not math.isfinite(val):
            raise Diverged(f"validation MSE became {val} at epoch {epoch}")
        record = EpochRecord(epoch, running / N, float(val))
        history.append(record)
        log.info("epoch %d train_mse=%.6f val_mse=%.6f", epoch, record.train_mse, record.val_mse)
        if on_epoch:
            on_epoch(model, record)
        if stopper.update(epoch, val, model.state_dict):
            break
    if stopper.best_state is not None:
        model.load_state_dict(stopper.best_state)
    return model, history


def gru_baseline(
    train_windows: WindowSet,
    val_windows: WindowSet,
    test_windows: WindowSet,
    basis: SpectralBasis,
    hidden: int,
    cfg: TrainConfig = TrainConfig(),
    mode: str = "stacked",
) -> tuple[ForecastModel, EvalReport]:
    """Same pipeline with K=1 kernels: a per-node GRU with no neighbour mixing."""
    flat = SpectralBasis(basis.scaled_laplacian, basis.lambda_max, 1)
    model = ForecastModel.init(flat, hidden, train_windows.H, train_windows.F, mode, seed=cfg.seed)
    model, _ = train(model, train_windows, val_windows, cfg)
    return model, evaluate(model, test_windows)
