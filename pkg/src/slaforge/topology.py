"""Clearwater service graph and Chebyshev spectral filtering.

The graph is undirected and unweighted. Filters are evaluated on the scaled
normalized Laplacian ``(2 / lambda_max) * L - I`` whose spectrum lies in
``[-1, 1]``, the domain on which Chebyshev polynomials are bounded.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import IsolatedNode, NoConvergence, ShapeMismatch, UnknownNode

NODE_NAMES: tuple[str, ...] = ("bono", "sprout", "homestead", "homer", "ellis", "ralf")

DEFAULT_EDGES: tuple[tuple[str, str], ...] = (
    ("bono", "sprout"),
    ("sprout", "homestead"),
    ("sprout", "homer"),
    ("sprout", "ralf"),
    ("bono", "ralf"),
    ("ellis", "homestead"),
    ("ellis", "homer"),
)


@dataclass(frozen=True)
class ServiceGraph:
    node_names: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]
    adjacency: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def from_edges(cls, node_names: Sequence[str], edges: Iterable[tuple[int, int]]) -> "ServiceGraph":
        n = len(node_names)
        canon: set[tuple[int, int]] = set()
        for i, j in edges:
            if not (0 <= i < n and 0 <= j < n):
                raise ShapeMismatch(f"edge ({i}, {j}) out of range for {n} nodes")
            if i == j:
                raise ShapeMismatch(f"self loop on node {i}")
            canon.add((min(i, j), max(i, j)))
        ordered = tuple(sorted(canon))
        adj = np.zeros((n, n))
        for i, j in ordered:
            adj[i, j] = adj[j, i] = 1.0
        adj.setflags(write=False)
        return cls(tuple(node_names), ordered, adj)

    @classmethod
    def from_named_edges(
        cls, edges: Iterable[tuple[str, str]], node_names: Sequence[str] = NODE_NAMES
    ) -> "ServiceGraph":
        index = {name: i for i, name in enumerate(node_names)}
        pairs = []
        for a, b in edges:
            for name in (a, b):
                if name not in index:
                    raise UnknownNode(f"unknown node {name!r}")
            pairs.append((index[a], index[b]))
        return cls.from_edges(node_names, pairs)

    @property
    def n(self) -> int:
        return len(self.node_names)

    def degree(self, node: int | str) -> int:
        i = self.node_names.index(node) if isinstance(node, str) else node
        return int(self.adjacency[i].sum())

    def neighbors(self, node: int) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.adjacency[node])]

    def is_connected(self) -> bool:
        if self.n == 0:
            return False
        seen = {0}
        queue = deque([0])
        while queue:
            i = queue.popleft()
            for j in self.neighbors(i):
                if j not in seen:
                    seen.add(j)
                    queue.append(j)
        return len(seen) == self.n

    def named_edges(self) -> list[tuple[str, str]]:
        return [(self.node_names[i], self.node_names[j]) for i, j in self.edges]

    def permuted(self, perm: Sequence[int]) -> "ServiceGraph":
        """Relabel so that new node ``k`` is old node ``perm[k]``."""
        inverse = {old: new for new, old in enumerate(perm)}
        names = [self.node_names[p] for p in perm]
        return ServiceGraph.from_edges(names, [(inverse[i], inverse[j]) for i, j in self.edges])


def build_default_graph() -> ServiceGraph:
    return ServiceGraph.from_named_edges(DEFAULT_EDGES)


def read_edge_file(path: str | Path, node_names: Sequence[str] = NODE_NAMES) -> ServiceGraph:
    """Parse ``nodeA nodeB`` lines. Blank lines and ``#`` comments are skipped."""
    edges = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ShapeMismatch(f"{path}:{lineno}: expected 'nodeA nodeB', got {raw!r}")
        edges.append((parts[0], parts[1]))
    return ServiceGraph.from_named_edges(edges, node_names)


@dataclass(frozen=True)
class SpectralBasis:
    scaled_laplacian: np.ndarray
    lambda_max: float
    K: int

    @property
    def n(self) -> int:
        return self.scaled_laplacian.shape[0]

    def polynomials(self) -> list[np.ndarray]:
        """Dense ``T_0 .. T_{K-1}`` of the scaled Laplacian."""
        eye = np.eye(self.n)
        out = [eye]
        if self.K > 1:
            out.append(self.scaled_laplacian.copy())
        for _ in range(2, self.K):
            out.append(2.0 * self.scaled_laplacian @ out[-1] - out[-2])
        return out[: self.K]


def normalized_laplacian(adjacency: np.ndarray) -> np.ndarray:
    deg = adjacency.sum(axis=1)
    if np.any(deg == 0):
        isolated = np.flatnonzero(deg == 0).tolist()
        raise IsolatedNode(f"nodes with degree 0: {isolated}")
    d_inv_sqrt = 1.0 / np.sqrt(deg)
    return np.eye(len(deg)) - d_inv_sqrt[:, None] * adjacency * d_inv_sqrt[None, :]


def power_iteration(
    matrix: np.ndarray, rtol: float = 1e-8, max_iter: int = 10_000, seed: int = 0
) -> float:
    """Largest eigenvalue of a symmetric PSD matrix via the Rayleigh quotient.

    Stops on the eigen-residual ``|A v - lambda v| <= rtol * lambda``; for a
    symmetric matrix the Rayleigh quotient error is then second order in rtol.
    """
    rng = np.random.default_rng(seed)
    v = rng.uniform(0.5, 1.5, size=matrix.shape[0])
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = matrix @ v
        estimate = float(v @ w)
        if np.linalg.norm(w - estimate * v) <= rtol * abs(estimate):
            return estimate
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
    raise NoConvergence(f"power iteration did not reach rtol={rtol} in {max_iter} iterations")


def scaled_laplacian(g: ServiceGraph | np.ndarray, K: int = 3) -> SpectralBasis:
    if K < 1:
        raise ShapeMismatch("K must be >= 1")
    adjacency = g.adjacency if isinstance(g, ServiceGraph) else np.asarray(g, dtype=float)
    lap = normalized_laplacian(adjacency)
    lam = power_iteration(lap)
    if lam <= 0.0:
        raise NoConvergence("non-positive largest eigenvalue")
    tilde = (2.0 / lam) * lap - np.eye(lap.shape[0])
    tilde = 0.5 * (tilde + tilde.T)
    tilde.setflags(write=False)
    return SpectralBasis(tilde, lam, K)


def chebyshev_apply(basis: SpectralBasis, X: np.ndarray, W: Sequence[np.ndarray]) -> np.ndarray:
    """Sum of ``T_k(L~) @ X @ W[k]`` using the three-term recurrence on ``X``."""
    X = np.asarray(X, dtype=float)
    if len(W) < 1:
        raise ShapeMismatch("need at least one Chebyshev weight matrix")
    if len(W) != basis.K:
        raise ShapeMismatch(f"got {len(W)} weight matrices for K={basis.K}")
    if X.ndim != 2 or X.shape[0] != basis.n:
        raise ShapeMismatch(f"X must be {basis.n} x d, got {X.shape}")
    for k, w in enumerate(W):
        if w.ndim != 2 or w.shape[0] != X.shape[1] or w.shape[1] != W[0].shape[1]:
            raise ShapeMismatch(f"W[{k}] has shape {w.shape}")
    L = basis.scaled_laplacian
    prev, cur = None, X
    out = X @ W[0]
    for k in range(1, len(W)):
        nxt = L @ cur if prev is None else 2.0 * (L @ cur) - prev
        prev, cur = cur, nxt
        out = out + cur @ W[k]
    return out
