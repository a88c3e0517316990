"""Graph and dataset containers, JSON ingestion, generators, batching, splits.

Undirected graphs are stored with both edge directions so local aggregation
iterates plain in-edges. Datasets without edge features use d_e = 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Rng

TASKS = ("node-class", "graph-class", "multilabel")


class DatasetError(ValueError):
    pass


@dataclass
class Graph:
    n: int
    edges: np.ndarray                 # (m, 2) intp, directed storage
    x: np.ndarray                     # (n, d_in) float64
    edge_feats: np.ndarray | None = None   # (m, d_e) float64
    y: np.ndarray | None = None       # (n,) node labels | (1,) graph label | (n|1, L) multilabel
    masks: dict[str, np.ndarray] | None = None  # boolean (n,) vectors

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.intp).reshape(-1, 2)
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        if self.x.shape[0] != self.n:
            raise DatasetError(f"x has {self.x.shape[0]} rows for n={self.n}")
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= self.n):
            raise DatasetError(f"edge endpoint out of range for n={self.n}")
        if self.edge_feats is not None:
            self.edge_feats = np.ascontiguousarray(self.edge_feats, dtype=np.float64)
            if self.edge_feats.shape[0] != self.m:
                raise DatasetError("edge_feats row count != edge count")
        if self.y is not None:
            self.y = np.asarray(self.y)
            if self.y.ndim == 1 and self.y.shape[0] not in self._label_lengths():
                raise DatasetError(f"label vector length {self.y.shape[0]} for n={self.n}")
        if self.masks is not None:
            for key, mask in self.masks.items():
                if mask.shape != (self.n,):
                    raise DatasetError(f"mask {key!r} has shape {mask.shape}")

    def _label_lengths(self) -> tuple[int, ...]:
        return (self.n, 1)

    @property
    def m(self) -> int:
        return self.edges.shape[0]

    @property
    def d_in(self) -> int:
        return self.x.shape[1]

    @property
    def d_e(self) -> int:
        return 0 if self.edge_feats is None else self.edge_feats.shape[1]

    def degrees(self) -> np.ndarray:
        """In-degree per node under directed storage."""
        deg = np.zeros(self.n, dtype=np.intp)
        if self.m:
            np.add.at(deg, self.edges[:, 1], 1)
        return deg

    def permuted(self, perm: np.ndarray) -> "Graph":
        """Relabel node v -> perm[v], keeping edge list order."""
        perm = np.asarray(perm, dtype=np.intp)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(self.n)
        x = np.empty_like(self.x)
        x[perm] = self.x
        y = self.y
        if y is not None and y.shape[0] == self.n:
            y = np.empty_like(self.y)
            y[perm] = self.y
        masks = None
        if self.masks is not None:
            masks = {}
            for key, mask in self.masks.items():
                moved = np.zeros_like(mask)
                moved[perm] = mask
                masks[key] = moved
        edges = perm[self.edges] if self.m else self.edges
        return Graph(self.n, edges, x, self.edge_feats, y, masks)


@dataclass
class BatchedGraph(Graph):
    """Block-diagonal merge of several graphs with per-node graph ids."""

    graph_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    node_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    edge_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))

    def _label_lengths(self) -> tuple[int, ...]:
        return (self.n, 1, self.num_graphs)

    @property
    def num_graphs(self) -> int:
        return len(self.node_counts)


@dataclass
class Dataset:
    graphs: list[Graph]
    task: str
    num_classes: int
    name: str = ""

    def __post_init__(self):
        if self.task not in TASKS:
            raise DatasetError(f"unknown task {self.task!r}")
        if self.num_classes < (1 if self.task == "multilabel" else 2):
            raise DatasetError(f"num_classes={self.num_classes} too small for {self.task}")

    def __len__(self) -> int:
        return len(self.graphs)

    @property
    def d_in(self) -> int:
        return self.graphs[0].d_in

    @property
    def d_e(self) -> int:
        return self.graphs[0].d_e

    def graph_labels(self) -> np.ndarray:
        return np.array([int(g.y[0]) for g in self.graphs], dtype=np.intp)


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        pools = [set(self.train.tolist()), set(self.val.tolist()), set(self.test.tolist())]
        if (pools[0] & pools[1]) or (pools[0] & pools[2]) or (pools[1] & pools[2]):
            raise DatasetError("split parts overlap")


# ---------------------------------------------------------------------------
# JSON file format (see README for the schema)


def load_dataset(path: str) -> Dataset:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: parse error at line {exc.lineno}: {exc.msg}") from exc
    for key in ("task", "num_classes", "graphs"):
        if key not in raw:
            raise DatasetError(f"{path}: missing field {key!r}")
    graphs = []
    for gi, g in enumerate(raw["graphs"]):
        try:
            masks = None
            if "masks" in g and g["masks"] is not None:
                n = g["n"]
                masks = {}
                for part, idx in g["masks"].items():
                    v = np.zeros(n, dtype=bool)
                    v[np.asarray(idx, dtype=np.intp)] = True
                    masks[part] = v
            y = g.get("y")
            if y is not None:
                y = np.asarray(y)
                if y.ndim == 0:
                    y = y.reshape(1)
            graphs.append(Graph(
                n=g["n"],
                edges=np.asarray(g["edges"], dtype=np.intp).reshape(-1, 2),
                x=np.asarray(g["x"], dtype=np.float64).reshape(g["n"], -1),
                edge_feats=None if g.get("edge_feats") is None
                else np.asarray(g["edge_feats"], dtype=np.float64),
                y=y,
                masks=masks,
            ))
        except (DatasetError, KeyError, ValueError) as exc:
            raise DatasetError(f"{path}: graph {gi}: {exc}") from exc
    return Dataset(graphs, raw["task"], int(raw["num_classes"]),
                   name=raw.get("name", ""))


def save_dataset(ds: Dataset, path: str) -> None:
    out = {"task": ds.task, "num_classes": ds.num_classes, "graphs": []}
    if ds.name:
        out["name"] = ds.name
    for g in ds.graphs:
        rec = {"n": g.n, "edges": g.edges.tolist(), "x": g.x.tolist()}
        if g.edge_feats is not None:
            rec["edge_feats"] = g.edge_feats.tolist()
        if g.y is not None:
            if g.y.ndim == 1 and g.y.shape[0] == 1:
                rec["y"] = int(g.y[0])
            else:
                rec["y"] = g.y.tolist()
        if g.masks is not None:
            rec["masks"] = {k: np.flatnonzero(v).tolist() for k, v in g.masks.items()}
        out["graphs"].append(rec)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(out, fh)


# ---------------------------------------------------------------------------
# feature helpers


def degree_onehot(graph: Graph, max_degree: int) -> Graph:
    """Replace node features by a one-hot of min(degree, max_degree)."""
    deg = np.minimum(graph.degrees(), max_degree)
    x = np.zeros((graph.n, max_degree + 1))
    x[np.arange(graph.n), deg] = 1.0
    return Graph(graph.n, graph.edges, x, graph.edge_feats, graph.y, graph.masks)


# ---------------------------------------------------------------------------
# batching


def make_batch(graphs: list[Graph]) -> BatchedGraph:
    d_in = graphs[0].d_in
    d_e = graphs[0].d_e
    for g in graphs:
        if g.d_in != d_in or g.d_e != d_e:
            raise DatasetError(f"feature dims differ: ({g.d_in},{g.d_e}) vs ({d_in},{d_e})")
    counts = np.array([g.n for g in graphs], dtype=np.intp)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    edges = [g.edges + offsets[i] for i, g in enumerate(graphs) if g.m]
    eall = np.concatenate(edges) if edges else np.zeros((0, 2), dtype=np.intp)
    feats = None
    if d_e:
        feats = np.concatenate([g.edge_feats for g in graphs])
    ys = [g.y for g in graphs]
    y = np.concatenate(ys) if all(v is not None for v in ys) else None
    gids = np.repeat(np.arange(len(graphs), dtype=np.intp), counts)
    return BatchedGraph(
        n=int(counts.sum()), edges=eall,
        x=np.concatenate([g.x for g in graphs]),
        edge_feats=feats, y=y,
        graph_ids=gids, node_counts=counts,
        edge_counts=np.array([g.m for g in graphs], dtype=np.intp),
    )


def unbatch(batch: BatchedGraph) -> list[Graph]:
    offsets = np.concatenate([[0], np.cumsum(batch.node_counts)])
    eoff = np.concatenate([[0], np.cumsum(batch.edge_counts)])
    out = []
    yoff = 0
    for i in range(batch.num_graphs):
        lo, hi = offsets[i], offsets[i + 1]
        es = batch.edges[eoff[i]:eoff[i + 1]] - lo
        ef = None
        if batch.edge_feats is not None:
            ef = batch.edge_feats[eoff[i]:eoff[i + 1]]
        y = None
        if batch.y is not None:
            if batch.y.shape[0] == batch.n and batch.n != batch.num_graphs:
                y = batch.y[lo:hi]
            else:
                y = batch.y[yoff:yoff + 1]
                yoff += 1
        out.append(Graph(int(hi - lo), es, batch.x[lo:hi], ef, y))
    return out


# ---------------------------------------------------------------------------
# splits


def random_split(n: int, ratios: tuple[float, float, float], seed: int) -> Split:
    """Disjoint train/val/test; val/test get floor(r*n), remainder to train."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"ratios {ratios} do not sum to 1")
    if n < 3:
        raise DatasetError(f"cannot split {n} items three ways")
    perm = Rng(seed, path=(0,)).permutation(n)
    n_val = int(ratios[1] * n)
    n_test = int(ratios[2] * n)
    n_train = n - n_val - n_test
    return Split(train=np.sort(perm[:n_train]),
                 val=np.sort(perm[n_train:n_train + n_val]),
                 test=np.sort(perm[n_train + n_val:]))


def kfold_splits(n: int, folds: int, seed: int) -> list[Split]:
    """Each item in exactly one test fold; val is the cyclically next fold."""
    if n < folds:
        raise DatasetError(f"n={n} < folds={folds}")
    perm = Rng(seed, path=(1,)).permutation(n)
    parts = np.array_split(perm, folds)
    splits = []
    for f in range(folds):
        test = parts[f]
        val = parts[(f + 1) % folds]
        train = np.concatenate([parts[i] for i in range(folds)
                                if i != f and i != (f + 1) % folds])
        splits.append(Split(train=np.sort(train), val=np.sort(val), test=np.sort(test)))
    return splits


# ---------------------------------------------------------------------------
# synthetic generators


def gen_trees_match(depth: int, samples: int, seed: int) -> Dataset:
    """Complete binary trees whose label sits at the leaf matching the root.

    Each tree of depth r has 2^r leaves carrying a distinct key and a
    uniform class; the root carries one target key and the graph label is
    the class of the leaf whose key equals it. Features are one-hot
    key | one-hot class | is-root flag.
    """
    if depth < 1 or samples < 1:
        raise DatasetError("depth and samples must be >= 1")
    rng = Rng(seed, path=(2,))
    n_leaves = 2 ** depth
    n_nodes = 2 ** (depth + 1) - 1
    first_leaf = n_leaves - 1
    d_in = 2 * n_leaves + 1
    parents = np.arange(1, n_nodes)
    e_up = np.stack([parents, (parents - 1) // 2], axis=1)
    e_down = e_up[:, ::-1]
    edges = np.concatenate([e_up, e_down])
    graphs = []
    for _ in range(samples):
        keys = rng.permutation(n_leaves)
        classes = rng.integers(0, n_leaves, n_leaves)
        target = int(rng.integers(0, n_leaves))
        x = np.zeros((n_nodes, d_in))
        leaf_rows = np.arange(first_leaf, n_nodes)
        x[leaf_rows, keys] = 1.0
        x[leaf_rows, n_leaves + classes] = 1.0
        x[0, target] = 1.0
        x[0, 2 * n_leaves] = 1.0
        label = int(classes[np.flatnonzero(keys == target)[0]])
        graphs.append(Graph(n_nodes, edges.copy(), x, y=np.array([label])))
    return Dataset(graphs, "graph-class", n_leaves, name=f"trees-match-d{depth}")


def _sample_distinct_pairs(rng: Rng, count: int, draw) -> set[tuple[int, int]]:
    """Rejection-sample `count` distinct unordered pairs; `draw` yields candidates."""
    pairs: set[tuple[int, int]] = set()
    while len(pairs) < count:
        for u, v in draw(count - len(pairs)):
            if u == v:
                continue
            pairs.add((min(u, v), max(u, v)))
            if len(pairs) == count:
                break
    return pairs


def _both_directions(pairs) -> np.ndarray:
    if not pairs:
        return np.zeros((0, 2), dtype=np.intp)
    e = np.array(sorted(pairs), dtype=np.intp)
    return np.concatenate([e, e[:, ::-1]])


def gen_random_graph(n: int, avg_degree: float, d_in: int, seed: int) -> Graph:
    """Erdos-Renyi style undirected graph with standard-normal features."""
    if n < 1 or avg_degree < 0:
        raise DatasetError("n must be >= 1 and avg_degree >= 0")
    rng = Rng(seed, path=(3,))
    x = rng.normal(n, d_in).data
    if n == 1 or avg_degree == 0:
        return Graph(n, np.zeros((0, 2), dtype=np.intp), x)
    p = min(avg_degree / (n - 1), 1.0)
    m = int(rng.generator.binomial(n * (n - 1) // 2, p))

    def draw(need):
        return rng.integers(0, n, (need + 8) * 2).reshape(-1, 2)

    return Graph(n, _both_directions(_sample_distinct_pairs(rng, m, draw)), x)


def gen_community_graph(n: int, communities: int, p_in: float, cross_degree: float,
                        d_in: int, seed: int) -> Graph:
    """Planted-partition graph; labels are community ids (node-class task).

    Dense blocks with a sprinkling of cross-community edges; features are a
    noisy community one-hot padded with gaussian columns.
    """
    if d_in < communities:
        raise DatasetError("d_in must cover the community one-hot")
    rng = Rng(seed, path=(4,))
    sizes = np.full(communities, n // communities, dtype=np.intp)
    sizes[: n % communities] += 1
    labels = np.repeat(np.arange(communities, dtype=np.intp), sizes)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    pairs: set[tuple[int, int]] = set()
    for c in range(communities):
        lo, hi = int(offsets[c]), int(offsets[c + 1])
        size = hi - lo
        m_in = int(rng.generator.binomial(size * (size - 1) // 2, min(p_in, 1.0)))

        def draw(need, lo=lo, hi=hi):
            return rng.integers(lo, hi, (need + 8) * 2).reshape(-1, 2)

        pairs |= _sample_distinct_pairs(rng, m_in, draw)
    m_out = int(round(cross_degree * n / 2))
    cross: set[tuple[int, int]] = set()
    while len(cross) < m_out:
        u = int(rng.integers(0, n))
        v = int(rng.integers(0, n))
        key = (min(u, v), max(u, v))
        if labels[u] != labels[v] and key not in pairs:
            cross.add(key)
    x = 0.5 * rng.normal(n, d_in).data
    x[np.arange(n), labels] += 1.0
    return Graph(n, _both_directions(pairs | cross), x, y=labels)
