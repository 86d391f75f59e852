"""Sparse undirected graphs, self-inclusive neighborhoods, and dataset files.

Storage is CSR-style: a flat sorted neighbor array plus row offsets, with both
directions of every edge stored.  A node's neighborhood n(i) always includes
the node itself, but self-inclusion is applied at query time rather than
stored, so edge statistics never double-count.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "Graph",
    "load_edge_list",
    "save_edge_list",
    "load_features",
    "load_labels",
    "load_split",
    "make_grid_graph",
    "make_random_graph",
    "check_node_set",
    "UNKNOWN_LABEL",
]

UNKNOWN_LABEL = -1


@dataclass(frozen=True)
class Graph:
    """Immutable undirected graph with optional per-node features and labels.

    ``indices[indptr[i]:indptr[i+1]]`` lists i's stored neighbors, sorted,
    duplicate-free, and never containing i itself.  Labels use
    ``UNKNOWN_LABEL`` (-1) for nodes whose class is not observed.
    """

    num_nodes: int
    indptr: np.ndarray
    indices: np.ndarray
    features: np.ndarray | None = None
    labels: np.ndarray | None = None

    @cached_property
    def _neighborhoods(self) -> tuple[np.ndarray, ...]:
        out = []
        for i in range(self.num_nodes):
            row = self.indices[self.indptr[i] : self.indptr[i + 1]]
            pos = int(np.searchsorted(row, i))
            out.append(np.insert(row, pos, i))
        return tuple(out)

    @property
    def max_degree(self) -> int:
        """Largest |n(i)| over all nodes, counting the node itself."""
        if self.num_nodes == 0:
            return 0
        return int(np.max(np.diff(self.indptr))) + 1

    @property
    def num_edges(self) -> int:
        return int(len(self.indices) // 2)

    def neighborhood(self, i: int) -> np.ndarray:
        """Sorted n(i): the stored neighbors of i plus i itself."""
        if not 0 <= i < self.num_nodes:
            raise ValueError(f"node id {i} out of range for {self.num_nodes} nodes")
        return self._neighborhoods[i]

    def neighbor_position(self, i: int, j: int) -> int:
        """Index of j within n(i); raises if j is not a neighbor of i."""
        nbrs = self.neighborhood(i)
        pos = int(np.searchsorted(nbrs, j))
        if pos == len(nbrs) or nbrs[pos] != j:
            raise ValueError(f"node {j} is not in the neighborhood of node {i}")
        return pos

    def edges(self) -> np.ndarray:
        """All undirected edges as an (E, 2) array with u < v, sorted."""
        us, vs = [], []
        for i in range(self.num_nodes):
            row = self.indices[self.indptr[i] : self.indptr[i + 1]]
            for j in row[row > i]:
                us.append(i)
                vs.append(int(j))
        return np.array([us, vs], dtype=np.int64).T.reshape(-1, 2)

    def fingerprint(self) -> dict:
        """Stable content identity: node count, edge count, and edge hash."""
        payload = f"N={self.num_nodes}\n" + "\n".join(
            f"{u}\t{v}" for u, v in self.edges()
        )
        digest = hashlib.sha256(payload.encode("utf-8")).hexdigest()
        return {
            "num_nodes": self.num_nodes,
            "num_edges": self.num_edges,
            "sha256": digest,
        }


def _build(num_nodes: int, pairs) -> tuple[np.ndarray, np.ndarray]:
    seen = set()
    for u, v in pairs:
        if u > v:
            u, v = v, u
        seen.add((u, v))
    counts = np.zeros(num_nodes + 1, dtype=np.int64)
    for u, v in seen:
        counts[u + 1] += 1
        counts[v + 1] += 1
    indptr = np.cumsum(counts)
    indices = np.empty(int(indptr[-1]), dtype=np.int64)
    cursor = indptr[:-1].copy()
    for u, v in sorted(seen):
        indices[cursor[u]] = v
        cursor[u] += 1
        indices[cursor[v]] = u
        cursor[v] += 1
    for i in range(num_nodes):
        indices[indptr[i] : indptr[i + 1]].sort()
    return indptr, indices


def from_edge_pairs(num_nodes: int, pairs, features=None, labels=None) -> Graph:
    """Build a Graph from (u, v) pairs; duplicates and orientations collapse."""
    if num_nodes < 0:
        raise ValueError("num_nodes must be non-negative")
    checked = []
    for u, v in pairs:
        u, v = int(u), int(v)
        if not (0 <= u < num_nodes and 0 <= v < num_nodes):
            raise ValueError(f"edge ({u},{v}) has an id out of range")
        if u == v:
            raise ValueError(f"self-loop ({u},{u}) not allowed; self-inclusion is implicit")
        checked.append((u, v))
    indptr, indices = _build(num_nodes, checked)
    return Graph(num_nodes, indptr, indices, features, labels)


def load_edge_list(path, num_nodes: int) -> Graph:
    """Read "u<TAB>v" lines (``#`` comments ignored) into an undirected Graph."""
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            if len(parts) != 2:
                raise ValueError(f"parse error at line {lineno}: {raw.rstrip()!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise ValueError(f"parse error at line {lineno}: {raw.rstrip()!r}") from None
            if not (0 <= u < num_nodes and 0 <= v < num_nodes):
                raise ValueError(f"id out of range at line {lineno}")
            if u == v:
                raise ValueError(f"self-loop at line {lineno}")
            pairs.append((u, v))
    return from_edge_pairs(num_nodes, pairs)


def save_edge_list(graph: Graph, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, v in graph.edges():
            fh.write(f"{u}\t{v}\n")


def load_features(path, num_nodes: int) -> np.ndarray:
    """Delimited numeric table, row i = node i (comma or whitespace)."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",") if "," in line else line.split()
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise ValueError(f"parse error at line {lineno}: {raw.rstrip()!r}") from None
    if len(rows) != num_nodes:
        raise ValueError(f"feature table has {len(rows)} rows, expected {num_nodes}")
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise ValueError("feature rows have inconsistent widths")
    return np.array(rows, dtype=float)


def load_labels(path, num_nodes: int) -> np.ndarray:
    """"node_id,label_id" lines; nodes not mentioned stay UNKNOWN_LABEL."""
    labels = np.full(num_nodes, UNKNOWN_LABEL, dtype=np.int64)
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ValueError(f"parse error at line {lineno}: {raw.rstrip()!r}")
            try:
                i, y = int(parts[0]), int(parts[1])
            except ValueError:
                raise ValueError(f"parse error at line {lineno}: {raw.rstrip()!r}") from None
            if not 0 <= i < num_nodes:
                raise ValueError(f"id out of range at line {lineno}")
            if y < 0:
                raise ValueError(f"negative label at line {lineno}")
            labels[i] = y
    return labels


def load_split(path, num_nodes: int) -> dict[str, np.ndarray]:
    """JSON document with disjoint integer arrays "train", "val", "test"."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    out = {}
    seen: set[int] = set()
    for key in ("train", "val", "test"):
        ids = [int(x) for x in doc.get(key, [])]
        for i in ids:
            if not 0 <= i < num_nodes:
                raise ValueError(f"split '{key}' contains out-of-range id {i}")
            if i in seen:
                raise ValueError(f"split arrays are not disjoint: id {i} repeats")
            seen.add(i)
        out[key] = np.array(ids, dtype=np.int64)
    return out


def make_grid_graph(height: int, width: int) -> Graph:
    """4-connected lattice, nodes in row-major order."""
    if height < 1 or width < 1:
        raise ValueError("grid dimensions must be at least 1")
    pairs = []
    for r in range(height):
        for c in range(width):
            i = r * width + c
            if c + 1 < width:
                pairs.append((i, i + 1))
            if r + 1 < height:
                pairs.append((i, i + width))
    return from_edge_pairs(height * width, pairs)


def make_random_graph(
    num_nodes: int,
    num_edges: int,
    rng: np.random.Generator,
    max_neighbors: int | None = None,
) -> Graph:
    """Uniform random simple graph, optionally capping stored degree."""
    if num_nodes < 1:
        raise ValueError("need at least one node")
    degree = np.zeros(num_nodes, dtype=np.int64)
    chosen: set[tuple[int, int]] = set()
    attempts = 0
    limit = 200 * max(1, num_edges)
    while len(chosen) < num_edges and attempts < limit:
        attempts += 1
        u = int(rng.integers(num_nodes))
        v = int(rng.integers(num_nodes))
        if u == v:
            continue
        if u > v:
            u, v = v, u
        if (u, v) in chosen:
            continue
        if max_neighbors is not None and (
            degree[u] >= max_neighbors or degree[v] >= max_neighbors
        ):
            continue
        chosen.add((u, v))
        degree[u] += 1
        degree[v] += 1
    return from_edge_pairs(num_nodes, sorted(chosen))


def check_node_set(ids, num_nodes: int) -> list[int]:
    """Validate an ordered node subset: in-range and free of repeats."""
    out = []
    seen = set()
    for i in ids:
        i = int(i)
        if not 0 <= i < num_nodes:
            raise ValueError(f"node id {i} out of range for {num_nodes} nodes")
        if i in seen:
            raise ValueError(f"node id {i} repeats in node set")
        seen.add(i)
        out.append(i)
    return out
