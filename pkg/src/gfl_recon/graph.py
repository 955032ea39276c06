"""Attributed graphs, text I/O, SBM generation, client partitioning and splits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.linalg import hadamard


class GraphFormatError(ValueError):
    """A nodes/edges file does not follow the expected layout."""

    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        where = f"{self.path}:{lineno}" if lineno else self.path
        super().__init__(f"{where}: {message}")


def _canonical_edges(edges, num_nodes):
    """Return sorted, deduplicated (u < v) int64 edges; reject self-loops and bad ids."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if (e < 0).any() or (e >= num_nodes).any():
        raise ValueError("edge endpoint outside 0..N-1")
    if (e[:, 0] == e[:, 1]).any():
        raise ValueError("self-loops are not allowed")
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected attributed graph with node labels.

    ``edges`` is an (E, 2) array with ``u < v`` in lexicographic order.
    """

    num_nodes: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        n = int(self.num_nodes)
        x = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or x.shape[0] != n:
            raise ValueError(f"features must be {n}xL, got {x.shape}")
        if not np.isfinite(x).all():
            raise ValueError("features must be finite")
        if y.shape != (n,):
            raise ValueError(f"labels must have length {n}")
        if n and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in 0..{self.num_classes - 1}")
        e = _canonical_edges(self.edges, n)
        object.__setattr__(self, "num_nodes", n)
        object.__setattr__(self, "num_classes", int(self.num_classes))
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "edges", e)
        for arr in (x, y, e):
            arr.flags.writeable = False

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.num_nodes == other.num_nodes
            and self.num_classes == other.num_classes
            and np.array_equal(self.edges, other.edges)
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None

    def with_features(self, features) -> "Graph":
        return Graph(self.num_nodes, self.edges, features, self.labels, self.num_classes)

    @cached_property
    def directed_edges(self):
        """(src, dst) arrays holding each undirected edge in both directions."""
        src = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        dst = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        return src, dst

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.num_nodes)

    @cached_property
    def edge_set(self) -> frozenset:
        return frozenset(map(tuple, self.edges.tolist()))

    def has_edge(self, u, v) -> bool:
        if u > v:
            u, v = v, u
        return (int(u), int(v)) in self.edge_set

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes))
        a[self.edges[:, 0], self.edges[:, 1]] = 1.0
        a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    def induced_subgraph(self, nodes) -> "Graph":
        """Subgraph on ``nodes`` (sorted global ids); local id i is ``nodes[i]``."""
        nodes = np.asarray(nodes, dtype=np.int64)
        local = np.full(self.num_nodes, -1, dtype=np.int64)
        local[nodes] = np.arange(len(nodes))
        keep = (local[self.edges[:, 0]] >= 0) & (local[self.edges[:, 1]] >= 0)
        return Graph(
            len(nodes),
            local[self.edges[keep]],
            self.features[nodes],
            self.labels[nodes],
            self.num_classes,
        )


def normalized_adjacency(g: Graph) -> np.ndarray:
    """Dense D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I."""
    a = g.adjacency() + np.eye(g.num_nodes)
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return d[:, None] * a * d[None, :]


def sample_non_edges(g: Graph, count: int, rng, nodes=None, distinct: bool = True) -> np.ndarray:
    """Uniformly sample ``count`` unconnected pairs (u < v) among ``nodes``.

    With ``distinct`` the pairs are unique; otherwise pairs may repeat.
    """
    nodes = np.arange(g.num_nodes) if nodes is None else np.asarray(nodes, dtype=np.int64)
    n = len(nodes)
    if count <= 0:
        return np.zeros((0, 2), dtype=np.int64)
    if n < 2:
        raise ValueError("need at least two nodes to sample non-edges")
    inside = np.zeros(g.num_nodes, dtype=bool)
    inside[nodes] = True
    internal = int((inside[g.edges[:, 0]] & inside[g.edges[:, 1]]).sum())
    available = n * (n - 1) // 2 - internal
    if available <= 0 or (distinct and count > available):
        raise ValueError(f"cannot sample {count} non-edges; only {available} exist")
    edge_set = g.edge_set
    chosen, seen = [], set()
    while len(chosen) < count:
        need = count - len(chosen)
        cand = nodes[rng.integers(0, n, size=(2 * need + 8, 2))]
        for u, v in cand.tolist():
            if u == v:
                continue
            if u > v:
                u, v = v, u
            if (u, v) in edge_set or (distinct and (u, v) in seen):
                continue
            seen.add((u, v))
            chosen.append((u, v))
            if len(chosen) == count:
                break
    return np.array(chosen, dtype=np.int64)


# --- text I/O -------------------------------------------------------------

def load_graph(nodes_path, edges_path) -> Graph:
    nodes_path, edges_path = Path(nodes_path), Path(edges_path)
    with open(nodes_path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#nodes"):
        raise GraphFormatError(nodes_path, 1, "missing '#nodes N=<N> L=<L> C=<C>' header")
    header = {}
    for tok in lines[0].split()[1:]:
        key, _, val = tok.partition("=")
        try:
            header[key] = int(val)
        except ValueError:
            raise GraphFormatError(nodes_path, 1, f"bad header field {tok!r}") from None
    if set(header) != {"N", "L", "C"}:
        raise GraphFormatError(nodes_path, 1, "header must define N, L and C")
    n, dim, c = header["N"], header["L"], header["C"]

    feats = np.empty((n, dim))
    labels = np.empty(n, dtype=np.int64)
    seen = np.zeros(n, dtype=bool)
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise GraphFormatError(nodes_path, lineno, "expected <id>\\t<label>\\t<features>")
        try:
            nid, lab = int(parts[0]), int(parts[1])
            row = [float(x) for x in parts[2].split(",")] if dim else []
        except ValueError as exc:
            raise GraphFormatError(nodes_path, lineno, str(exc)) from None
        if not 0 <= nid < n or seen[nid]:
            raise GraphFormatError(nodes_path, lineno, f"node id {nid} is duplicated or outside 0..{n - 1}")
        if not 0 <= lab < c:
            raise GraphFormatError(nodes_path, lineno, f"label {lab} outside 0..{c - 1}")
        if len(row) != dim:
            raise GraphFormatError(nodes_path, lineno, f"expected {dim} features, got {len(row)}")
        if not all(math.isfinite(v) for v in row):
            raise GraphFormatError(nodes_path, lineno, "non-finite feature value")
        seen[nid] = True
        labels[nid] = lab
        feats[nid] = row
    if not seen.all():
        missing = int(np.flatnonzero(~seen)[0])
        raise GraphFormatError(nodes_path, 0, f"node ids are not contiguous (missing {missing})")

    edges = []
    with open(edges_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise GraphFormatError(edges_path, lineno, "expected <u>\\t<v>")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise GraphFormatError(edges_path, lineno, str(exc)) from None
            if not (0 <= u < n and 0 <= v < n):
                raise GraphFormatError(edges_path, lineno, f"unknown node id in edge ({u}, {v})")
            if u == v:
                raise GraphFormatError(edges_path, lineno, f"self-loop on node {u}")
            edges.append((u, v))
    return Graph(n, np.array(edges, dtype=np.int64).reshape(-1, 2), feats, labels, c)


def write_graph(g: Graph, nodes_path, edges_path) -> None:
    # repr() of a Python float is the shortest string that round-trips.
    out = [f"#nodes N={g.num_nodes} L={g.feature_dim} C={g.num_classes}"]
    for i in range(g.num_nodes):
        row = ",".join(repr(float(v)) for v in g.features[i])
        out.append(f"{i}\t{int(g.labels[i])}\t{row}")
    Path(nodes_path).write_text("\n".join(out) + "\n", encoding="utf-8")
    out = [f"#edges M={g.num_edges}"]
    out.extend(f"{u}\t{v}" for u, v in g.edges.tolist())
    Path(edges_path).write_text("\n".join(out) + "\n", encoding="utf-8")


# --- synthetic data -------------------------------------------------------

def _block_codes(num_blocks, dim):
    # Rows of a Sylvester-Hadamard matrix (skipping the all-ones row) give
    # mutually orthogonal +-1 codes whenever dim is a power of two >= blocks + 1.
    size = 1 << max(1, math.ceil(math.log2(max(dim, num_blocks + 1))))
    return hadamard(size)[1 : num_blocks + 1, :dim].astype(np.float64)


def generate_sbm(num_blocks, nodes_per_block, p_in, p_out, feature_dim, feature_shift, seed) -> Graph:
    """Planted-partition graph with Gaussian features.

    Node features are ``N(0, I) + feature_shift * code[block]`` where each block
    code is a +-1 vector, so every coordinate of the block mean has magnitude
    ``feature_shift``.
    """
    if not (0.0 <= p_out <= p_in <= 1.0):
        raise ValueError("need 0 <= p_out <= p_in <= 1")
    if min(num_blocks, nodes_per_block, feature_dim) < 1:
        raise ValueError("counts must be >= 1")
    rng = np.random.default_rng(seed)
    n = num_blocks * nodes_per_block
    labels = np.repeat(np.arange(num_blocks), nodes_per_block)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(iu.shape[0]) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    feats = rng.standard_normal((n, feature_dim))
    feats += feature_shift * _block_codes(num_blocks, feature_dim)[labels]
    return Graph(n, edges, feats, labels, num_blocks)


# --- partitioning and splits ----------------------------------------------

@dataclass(frozen=True, eq=False)
class Partition:
    """Horizontal split of a graph into client subgraphs.

    ``client_nodes[i]`` is the sorted array of global ids owned by client i and
    doubles as the local->global map of ``client_subgraphs[i]``.
    """

    client_nodes: tuple
    client_subgraphs: tuple
    lost_edges: np.ndarray
    malicious_index: int

    @property
    def num_clients(self) -> int:
        return len(self.client_nodes)

    @property
    def client_sizes(self) -> list[int]:
        return [len(nodes) for nodes in self.client_nodes]

    @property
    def malicious_nodes(self) -> np.ndarray:
        return self.client_nodes[self.malicious_index]

    @property
    def malicious_subgraph(self) -> Graph:
        return self.client_subgraphs[self.malicious_index]


def partition_from_sets(g: Graph, node_sets, malicious_index=0) -> Partition:
    sets = tuple(np.unique(np.asarray(s, dtype=np.int64)) for s in node_sets)
    covered = np.zeros(g.num_nodes, dtype=bool)
    for s in sets:
        covered[s] = True
    if not covered.all():
        raise ValueError("client node sets must cover every node")
    if not 0 <= malicious_index < len(sets):
        raise ValueError("malicious_index out of range")
    subgraphs = tuple(g.induced_subgraph(s) for s in sets)
    kept = np.zeros(g.num_edges, dtype=bool)
    for s in sets:
        inside = np.zeros(g.num_nodes, dtype=bool)
        inside[s] = True
        kept |= inside[g.edges[:, 0]] & inside[g.edges[:, 1]]
    return Partition(sets, subgraphs, g.edges[~kept], malicious_index)


def partition_graph(g: Graph, k: int, overlap: float = 0.0, malicious_index: int = 0, seed: int = 0) -> Partition:
    """Round-robin node split into k clients, plus optional overlap.

    With ``overlap`` rho > 0 every client also receives ``round(rho * |own|)``
    nodes sampled uniformly from the other clients (halves round up).
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > g.num_nodes:
        raise ValueError(f"k={k} exceeds the number of nodes ({g.num_nodes})")
    if not 0.0 <= overlap < 1.0:
        raise ValueError("overlap must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(g.num_nodes)
    own = [np.sort(order[i::k]) for i in range(k)]
    sets = []
    for s in own:
        extra = int(math.floor(overlap * len(s) + 0.5))  # half-up
        if extra:
            others = np.setdiff1d(np.arange(g.num_nodes), s)
            s = np.concatenate([s, rng.choice(others, size=min(extra, len(others)), replace=False)])
        sets.append(s)
    return partition_from_sets(g, sets, malicious_index)


@dataclass(frozen=True)
class DataSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    num_nodes: int = field(default=0)

    def mask(self, which: str) -> np.ndarray:
        m = np.zeros(self.num_nodes, dtype=bool)
        m[getattr(self, which)] = True
        return m


def _allocate(counts, frac):
    """Largest-remainder split of round(frac * sum(counts)) over the classes."""
    exact = np.asarray(counts, dtype=np.float64) * frac
    base = np.floor(exact).astype(np.int64)
    short = int(round(frac * sum(counts))) - int(base.sum())
    if short > 0:
        base[np.argsort(-(exact - base), kind="stable")[:short]] += 1
    return base


def make_split(g: Graph, train_frac: float, val_frac: float, seed: int) -> DataSplit:
    """Stratified train/val/test node split."""
    if train_frac <= 0 or val_frac <= 0 or train_frac + val_frac >= 1:
        raise ValueError("need positive fractions with train_frac + val_frac < 1")
    counts = np.bincount(g.labels, minlength=g.num_classes)
    small = [c for c in range(g.num_classes) if 0 < counts[c] < 3]
    if small:
        raise ValueError(f"class {small[0]} has fewer than 3 nodes; cannot stratify")
    rng = np.random.default_rng(seed)
    n_train = _allocate(counts, train_frac)
    n_val = _allocate(counts, val_frac)
    train, val, test = [], [], []
    for c in range(g.num_classes):
        if counts[c] == 0:
            continue
        idx = rng.permutation(np.flatnonzero(g.labels == c))
        a = min(max(int(n_train[c]), 1), counts[c] - 2)
        b = min(max(int(n_val[c]), 1), counts[c] - a - 1)
        train.append(idx[:a])
        val.append(idx[a : a + b])
        test.append(idx[a + b :])
    return DataSplit(
        np.sort(np.concatenate(train)),
        np.sort(np.concatenate(val)),
        np.sort(np.concatenate(test)),
        g.num_nodes,
    )
