"""Area adjacency graphs, row-standardised spatial weights and spatial lags."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse


class GraphError(ValueError):
    """Raised for malformed adjacency input."""


@dataclass(frozen=True)
class AdjacencyGraph:
    """Undirected neighbourhood structure over ``n_areas`` areas.

    ``neighbors[i]`` is a sorted tuple of the areas adjacent to ``i``.
    The relation is symmetric and has no self-loops.
    """

    n_areas: int
    neighbors: tuple[tuple[int, ...], ...]
    interactions: dict[tuple[int, int], float] | None = field(default=None, compare=False)

    def __post_init__(self):
        if len(self.neighbors) != self.n_areas:
            raise GraphError("neighbors must have one entry per area")
        for i, nbrs in enumerate(self.neighbors):
            for j in nbrs:
                if not 0 <= j < self.n_areas:
                    raise GraphError(f"neighbor index {j} of area {i} out of range")
                if j == i:
                    raise GraphError(f"self-loop at area {i}")
                if i not in self.neighbors[j]:
                    raise GraphError(f"asymmetric adjacency between {i} and {j}")

    @property
    def degrees(self) -> np.ndarray:
        return np.array([len(n) for n in self.neighbors], dtype=np.int64)

    @property
    def n_edges(self) -> int:
        return int(self.degrees.sum()) // 2

    def edges(self) -> list[tuple[int, int]]:
        """Each undirected edge once, as ``(i, j)`` with ``i < j``."""
        return [(i, j) for i, nbrs in enumerate(self.neighbors) for j in nbrs if i < j]

    def csr(self) -> tuple[np.ndarray, np.ndarray]:
        """Neighbour lists as CSR ``(indptr, indices)`` int64 arrays."""
        indptr = np.zeros(self.n_areas + 1, dtype=np.int64)
        indptr[1:] = np.cumsum(self.degrees)
        indices = np.fromiter(
            (j for nbrs in self.neighbors for j in nbrs), dtype=np.int64, count=int(indptr[-1])
        )
        return indptr, indices

    def adjacency_matrix(self) -> np.ndarray:
        a = np.zeros((self.n_areas, self.n_areas))
        for i, j in self.edges():
            a[i, j] = a[j, i] = 1.0
        return a


@dataclass(frozen=True)
class SpatialWeights:
    """Row-standardised weights ``w_ij`` stored as a CSR matrix.

    Rows of isolated areas are empty; every other row sums to one.
    """

    matrix: sparse.csr_matrix
    graph: AdjacencyGraph | None = field(default=None, compare=False)

    @property
    def n_areas(self) -> int:
        return self.matrix.shape[0]

    def row(self, i: int) -> list[tuple[int, float]]:
        start, stop = self.matrix.indptr[i], self.matrix.indptr[i + 1]
        return list(zip(self.matrix.indices[start:stop].tolist(), self.matrix.data[start:stop].tolist()))

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


def build_graph(edges, n_areas: int) -> AdjacencyGraph:
    """Build a symmetric adjacency graph from unordered index pairs.

    Duplicate edges (in either orientation) are merged.

    Raises
    ------
    GraphError
        If ``n_areas < 2``, an index is out of range or a pair is a self-loop.
    """
    if n_areas < 2:
        raise GraphError(f"need at least 2 areas, got {n_areas}")
    nbrs: list[set[int]] = [set() for _ in range(n_areas)]
    for pair in edges:
        i, j = (int(v) for v in pair)
        if not (0 <= i < n_areas and 0 <= j < n_areas):
            raise GraphError(f"edge ({i}, {j}) has an index outside [0, {n_areas})")
        if i == j:
            raise GraphError(f"self-loop at area {i}")
        nbrs[i].add(j)
        nbrs[j].add(i)
    return AdjacencyGraph(n_areas, tuple(tuple(sorted(s)) for s in nbrs))


def torus_graph(n_rows: int, n_cols: int) -> AdjacencyGraph:
    """Rook-contiguity lattice with wrap-around edges (every degree is 4).

    Area ``r * n_cols + c`` sits at row ``r``, column ``c``.  Both sides must
    be at least 3 so that wrap-around neighbours are distinct.
    """
    if n_rows < 3 or n_cols < 3:
        raise GraphError("torus sides must be >= 3")
    edges = []
    for r in range(n_rows):
        for c in range(n_cols):
            k = r * n_cols + c
            edges.append((k, r * n_cols + (c + 1) % n_cols))
            edges.append((k, ((r + 1) % n_rows) * n_cols + c))
    return build_graph(edges, n_rows * n_cols)


def row_standardize(graph: AdjacencyGraph, interactions: dict | None = None) -> SpatialWeights:
    """Row-standardise interaction strengths into spatial weights.

    ``w_ij = h_ij / sum_j h_ij`` with ``h_ij = 1`` (binary contiguity) unless
    ``interactions`` maps edges ``(i, j)`` to positive strengths.  An
    interaction given for ``(i, j)`` is used for both directions unless
    ``(j, i)`` is given separately.
    """
    if interactions is None:
        interactions = graph.interactions
    h: dict[tuple[int, int], float] = {}
    if interactions is not None:
        for (i, j), value in interactions.items():
            if j not in graph.neighbors[i]:
                raise GraphError(f"interaction given for non-edge ({i}, {j})")
            if not value > 0:
                raise GraphError(f"interaction h[{i},{j}] = {value} must be positive")
            h[(i, j)] = float(value)
        for (i, j), value in list(h.items()):
            h.setdefault((j, i), value)
    rows, cols, vals = [], [], []
    for i, nbrs in enumerate(graph.neighbors):
        if not nbrs:
            continue
        raw = np.array([h.get((i, j), 1.0) for j in nbrs])
        rows.extend([i] * len(nbrs))
        cols.extend(nbrs)
        vals.extend(raw / raw.sum())
    n = graph.n_areas
    matrix = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    matrix.sort_indices()
    return SpatialWeights(matrix, graph)


def spatial_lag(weights: SpatialWeights, y_prev) -> np.ndarray:
    """Weighted neighbour average ``sum_j w_ij y_j`` (zero for isolated areas).

    ``y_prev`` may also be an ``(n_areas, k)`` array, lagged column-wise.
    """
    y_prev = np.asarray(y_prev, dtype=float)
    if y_prev.shape[0] != weights.n_areas:
        raise GraphError(f"expected {weights.n_areas} areas, got {y_prev.shape[0]}")
    return np.asarray(weights.matrix @ y_prev)


def connected_components(graph: AdjacencyGraph) -> np.ndarray:
    """Label each area with its connected component (labels 0, 1, ... by first area)."""
    a = sparse.csr_matrix(graph.adjacency_matrix())
    _, raw = sparse.csgraph.connected_components(a, directed=False)
    # relabel in order of first appearance so labels are stable
    order: dict[int, int] = {}
    return np.array([order.setdefault(int(c), len(order)) for c in raw], dtype=np.int64)


def bfs_components(graph: AdjacencyGraph) -> np.ndarray:
    """Plain breadth-first component labelling, same label convention."""
    labels = -np.ones(graph.n_areas, dtype=np.int64)
    current = 0
    for start in range(graph.n_areas):
        if labels[start] >= 0:
            continue
        labels[start] = current
        queue = deque([start])
        while queue:
            i = queue.popleft()
            for j in graph.neighbors[i]:
                if labels[j] < 0:
                    labels[j] = current
                    queue.append(j)
        current += 1
    return labels


def read_adjacency(path, area_index: dict[str, int]) -> AdjacencyGraph:
    """Parse an adjacency file of ``i j [h_ij]`` lines.

    Tokens are area identifiers as they appear in the counts file; ``#``
    lines and blank lines are skipped.
    """
    edges, interactions = [], {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        parts = text.split()
        if len(parts) not in (2, 3):
            raise GraphError(f"{path}:{lineno}: expected 'i j [h]', got {text!r}")
        try:
            i, j = (area_index[p] for p in parts[:2])
        except KeyError as exc:
            raise GraphError(f"{path}:{lineno}: unknown area {exc.args[0]!r}") from None
        edges.append((i, j))
        if len(parts) == 3:
            try:
                value = float(parts[2])
            except ValueError:
                raise GraphError(f"{path}:{lineno}: non-numeric weight {parts[2]!r}") from None
            if not value > 0:
                raise GraphError(f"{path}:{lineno}: weight must be positive")
            interactions[(i, j)] = value
    n = len(area_index)
    try:
        graph = build_graph(edges, n)
    except GraphError as exc:
        raise GraphError(f"{path}: {exc}") from None
    if interactions:
        graph = AdjacencyGraph(graph.n_areas, graph.neighbors, interactions)
    return graph


def write_adjacency(path, graph: AdjacencyGraph, area_ids) -> None:
    lines = ["# i j [h_ij]"]
    for i, j in graph.edges():
        if graph.interactions and (i, j) in graph.interactions:
            lines.append(f"{area_ids[i]} {area_ids[j]} {graph.interactions[(i, j)]!r}")
        else:
            lines.append(f"{area_ids[i]} {area_ids[j]}")
    Path(path).write_text("\n".join(lines) + "\n")
